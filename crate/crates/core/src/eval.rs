//! Diagnostics: autocorrelation maps, periodicity peaks, agreement between
//! learned wave numbers and image periodicity, and locality probes.

use std::f64::consts::TAU;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::FloatImage;
use crate::error::{config_err, Error, Result};
use crate::noise::WaveNumbers;
use crate::sampler::{plan_noise, RenderPlan};
use crate::tensor::Tensor;
use crate::trainer::Model;

/// A displacement in pixels: `dy` down the rows, `dx` along them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lag {
    pub dy: isize,
    pub dx: isize,
}

impl Lag {
    pub fn norm(&self) -> f64 {
        ((self.dy * self.dy + self.dx * self.dx) as f64).sqrt()
    }
}

/// Normalized circular autocorrelation for lags in `[-max_lag, max_lag]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutocorrMap {
    max_lag: usize,
    values: Vec<f64>,
}

impl AutocorrMap {
    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    fn side(&self) -> usize {
        2 * self.max_lag + 1
    }

    pub fn get(&self, dy: isize, dx: isize) -> f64 {
        let r = self.max_lag as isize;
        assert!(dy.abs() <= r && dx.abs() <= r, "lag outside the map");
        self.values[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    /// Row-major values, `(2 max_lag + 1)^2`, origin at the centre.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(data);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Mean-subtracted circular autocorrelation of each channel via the power
/// spectrum, normalized to 1 at zero lag, averaged over channels with
/// non-zero variance and symmetrized under lag negation.
pub fn autocorrelation(image: &FloatImage, max_lag: usize) -> Result<AutocorrMap> {
    let (h, w) = (image.height(), image.width());
    if h <= 2 * max_lag || w <= 2 * max_lag {
        return Err(config_err(format!(
            "image {h}x{w} must exceed twice the maximum lag {max_lag}"
        )));
    }
    let side = 2 * max_lag + 1;
    let r = max_lag as isize;
    let mut acc = vec![0.0; side * side];
    let mut used = 0usize;
    for ch in 0..3 {
        let mean = (0..h * w).map(|i| image.data()[i * 3 + ch]).sum::<f64>() / (h * w) as f64;
        let mut buf: Vec<Complex<f64>> = (0..h * w)
            .map(|i| Complex::new(image.data()[i * 3 + ch] - mean, 0.0))
            .collect();
        let variance = buf.iter().map(|c| c.re * c.re).sum::<f64>() / (h * w) as f64;
        if variance <= 1e-20 {
            continue;
        }
        fft2(&mut buf, h, w, false);
        for c in &mut buf {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        fft2(&mut buf, h, w, true);
        let zero = buf[0].re;
        if !(zero > 0.0) {
            continue;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let y = dy.rem_euclid(h as isize) as usize;
                let x = dx.rem_euclid(w as isize) as usize;
                acc[((dy + r) as usize) * side + (dx + r) as usize] += buf[y * w + x].re / zero;
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::ZeroVariance);
    }
    let mut values = vec![0.0; side * side];
    for i in 0..side * side {
        let mirrored = side * side - 1 - i;
        values[i] = (0.5 * (acc[i] + acc[mirrored]) / used as f64).clamp(-1.0, 1.0);
    }
    values[max_lag * side + max_lag] = 1.0;
    Ok(AutocorrMap { max_lag, values })
}

/// Values closer than this count as equal when comparing neighbours.
const PLATEAU_TOL: f64 = 1e-9;

/// Periodicity peaks: local maxima over the 8-neighbourhood (ties allowed)
/// strictly above `threshold`, away from the map border. Adjacent maxima form
/// one plateau (a ridge, for stripes) represented by its member nearest the
/// origin; the plateau through the origin is dropped. Each `+l / -l` pair is
/// reported once, as the member with `dy > 0` or `dy = 0, dx > 0`, sorted by
/// lag length.
pub fn detect_periodicity_peaks(map: &AutocorrMap, threshold: f64) -> Vec<Lag> {
    let r = map.max_lag() as isize;
    let side = map.side();
    let idx = |dy: isize, dx: isize| ((dy + r) as usize) * side + (dx + r) as usize;
    let mut is_max = vec![false; side * side];
    for dy in (-r + 1)..r {
        for dx in (-r + 1)..r {
            let v = map.get(dy, dx);
            if v <= threshold && (dy, dx) != (0, 0) {
                continue;
            }
            is_max[idx(dy, dx)] = (-1..=1).all(|ey: isize| {
                (-1..=1).all(|ex: isize| map.get(dy + ey, dx + ex) <= v + PLATEAU_TOL)
            });
        }
    }
    let mut seen = vec![false; side * side];
    let mut peaks: Vec<Lag> = Vec::new();
    for dy in (-r + 1)..r {
        for dx in (-r + 1)..r {
            if !is_max[idx(dy, dx)] || seen[idx(dy, dx)] {
                continue;
            }
            let mut stack = vec![(dy, dx)];
            seen[idx(dy, dx)] = true;
            let mut best = Lag { dy, dx };
            let mut has_origin = false;
            while let Some((y, x)) = stack.pop() {
                has_origin |= (y, x) == (0, 0);
                let cand = Lag { dy: y, dx: x };
                if (cand.norm(), cand.dy, cand.dx) < (best.norm(), best.dy, best.dx) {
                    best = cand;
                }
                for ey in -1..=1 {
                    for ex in -1..=1 {
                        let (ny, nx) = (y + ey, x + ex);
                        if ny.abs() < r && nx.abs() < r && is_max[idx(ny, nx)] && !seen[idx(ny, nx)] {
                            seen[idx(ny, nx)] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if has_origin {
                continue;
            }
            if best.dy < 0 || (best.dy == 0 && best.dx < 0) {
                best = Lag { dy: -best.dy, dx: -best.dx };
            }
            if !peaks.contains(&best) {
                peaks.push(best);
            }
        }
    }
    peaks.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then((a.dy, a.dx).cmp(&(b.dy, b.dx))));
    peaks
}

/// Image-space period vector `(dy, dx)` in pixels of a wave vector given in
/// radians per noise unit: `2 pi k / |k|^2` scaled by the upsampling factor.
pub fn period_vector(k: [f64; 2], upsample: usize) -> [f64; 2] {
    let n2 = k[0] * k[0] + k[1] * k[1];
    let s = TAU / n2 * upsample as f64;
    [k[0] * s, k[1] * s]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorMatch {
    /// Wave vector, radians per noise unit along (rows, columns).
    pub wave: [f64; 2],
    /// Learned period `(dy, dx)` in pixels.
    pub period: [f64; 2],
    /// Nearest detected peak (or its negation).
    pub matched: Lag,
    /// `|period - matched|` per axis, in pixels.
    pub axis_error_px: [f64; 2],
    pub abs_error_px: f64,
    /// `abs_error_px / |matched|`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `"periodic"` or `"aperiodic"`.
    pub status: String,
    pub upsample: usize,
    pub max_lag: usize,
    pub threshold: f64,
    pub peaks: Vec<Lag>,
    pub vectors: Vec<VectorMatch>,
    /// Largest `rel_error` over the vectors (absent when aperiodic).
    pub max_rel_error: Option<f64>,
}

impl ConsistencyReport {
    pub fn is_periodic(&self) -> bool {
        self.status == "periodic"
    }
}

/// Default peak threshold for consistency reports.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.3;

/// Compare learned wave vectors `waves` against the autocorrelation peaks of
/// `image`, rendered by a generator with the given upsampling factor.
pub fn compare_periodicity(
    waves: &WaveNumbers,
    upsample: usize,
    image: &FloatImage,
    threshold: f64,
) -> Result<ConsistencyReport> {
    let max_lag = image.height().min(image.width()) / 4;
    let map = autocorrelation(image, max_lag)?;
    let peaks = detect_periodicity_peaks(&map, threshold);
    let mut report = ConsistencyReport {
        status: "aperiodic".into(),
        upsample,
        max_lag,
        threshold,
        peaks: peaks.clone(),
        vectors: Vec::new(),
        max_rel_error: None,
    };
    if peaks.is_empty() || waves.is_empty() {
        return Ok(report);
    }
    for k in &waves.0 {
        let p = period_vector(*k, upsample);
        let mut best: Option<(f64, Lag, [f64; 2])> = None;
        for q in &peaks {
            for s in [1isize, -1] {
                let (qy, qx) = ((s * q.dy) as f64, (s * q.dx) as f64);
                let e = [(p[0] - qy).abs(), (p[1] - qx).abs()];
                let d = (e[0] * e[0] + e[1] * e[1]).sqrt();
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, Lag { dy: s * q.dy, dx: s * q.dx }, e));
                }
            }
        }
        let (d, q, e) = best.expect("peaks are non-empty");
        report.vectors.push(VectorMatch {
            wave: *k,
            period: p,
            matched: q,
            axis_error_px: e,
            abs_error_px: d,
            rel_error: d / q.norm(),
        });
    }
    report.status = "periodic".into();
    report.max_rel_error = report.vectors.iter().map(|v| v.rel_error).reduce(f64::max);
    Ok(report)
}

/// Wave numbers the model assigns to `z_g`, checked against `image`.
/// Models without periodic dimensions are reported as aperiodic.
pub fn wavenumber_consistency(model: &Model, z_g: &[f64], image: &FloatImage) -> Result<ConsistencyReport> {
    let upsample = model.net.upsample_factor();
    let waves = match &model.mlp {
        Some(mlp) if model.noise.d_p > 0 => mlp.forward(z_g)?.0,
        _ => WaveNumbers(Vec::new()),
    };
    if waves.is_empty() {
        return Ok(ConsistencyReport {
            status: "aperiodic".into(),
            upsample,
            max_lag: 0,
            threshold: DEFAULT_PEAK_THRESHOLD,
            peaks: Vec::new(),
            vectors: Vec::new(),
            max_rel_error: None,
        });
    }
    compare_periodicity(&waves, upsample, image, DEFAULT_PEAK_THRESHOLD)
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
}

/// Pixels whose values differ at all between two (1, 3, H, W) renders.
pub fn changed_box(a: &Tensor, b: &Tensor) -> Option<BoundingBox> {
    let [_, c, h, w] = a.shape();
    let mut bb: Option<BoundingBox> = None;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if a.at(0, ch, y, x) != b.at(0, ch, y, x) {
                    let e = bb.get_or_insert(BoundingBox { y0: y, x0: x, y1: y, x1: x });
                    e.y0 = e.y0.min(y);
                    e.x0 = e.x0.min(x);
                    e.y1 = e.y1.max(y);
                    e.x1 = e.x1.max(x);
                }
            }
        }
    }
    bb
}

/// Render an `l x m` noise field drawn from `seed`, add `delta` to every local
/// channel of the column at `(lambda, mu)`, render again and return the
/// bounding box of changed pixels.
pub fn locality_probe(
    model: &Model,
    l: usize,
    m: usize,
    position: (usize, usize),
    delta: f64,
    seed: u64,
) -> Result<Option<BoundingBox>> {
    if model.noise.d_l == 0 {
        return Err(config_err("locality probe needs local dimensions"));
    }
    if position.0 >= l || position.1 >= m {
        return Err(config_err("probe position outside the noise field"));
    }
    let z = plan_noise(model, &RenderPlan::sample(model, l, m, seed))?.to_tensor();
    let mut zp = z.clone();
    for ch in 0..model.noise.d_l {
        let v = zp.at(0, ch, position.0, position.1);
        zp.set(0, ch, position.0, position.1, v + delta);
    }
    let a = model.generator.forward(&z)?;
    let b = model.generator.forward(&zp)?;
    Ok(changed_box(&a, &b))
}

/// Render noise rows `[0, l)` and `[1, l + 1)` of one field and compare the
/// second image with the first shifted by `2^depth` pixels, away from the
/// borders (one receptive field). Returns the largest absolute difference.
pub fn shift_equivariance(model: &Model, l: usize, m: usize, seed: u64) -> Result<f64> {
    let f = model.net.upsample_factor();
    let margin = model.net.receptive_field();
    if f * l <= 2 * margin + f {
        return Err(config_err("field too small for an interior comparison"));
    }
    let big = plan_noise(model, &RenderPlan::sample(model, l + 1, m, seed))?;
    let t = big.to_tensor();
    let c = t.channels();
    let rows = |start: usize| {
        let mut out = Tensor::zeros([1, c, l, m]);
        for ch in 0..c {
            for y in 0..l {
                for x in 0..m {
                    out.set(0, ch, y, x, t.at(0, ch, y + start, x));
                }
            }
        }
        out
    };
    let a = model.generator.forward(&rows(0))?;
    let b = model.generator.forward(&rows(1))?;
    let (h, w) = (f * l, f * m);
    let mut worst = 0.0f64;
    for ch in 0..3 {
        for y in margin..h - f - margin {
            for x in margin.min(w / 2)..w - margin.min(w / 2) {
                worst = worst.max((b.at(0, ch, y, x) - a.at(0, ch, y + f, x)).abs());
            }
        }
    }
    Ok(worst)
}

fn draw_line(img: &mut image::RgbImage, from: (f64, f64), to: (f64, f64), color: [u8; 3]) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let y = from.0 + t * (to.0 - from.0);
        let x = from.1 + t * (to.1 - from.1);
        if y >= 0.0 && x >= 0.0 && (y as u32) < img.height() && (x as u32) < img.width() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

/// Heat map of the autocorrelation (`scale` pixels per lag) with the period
/// vectors drawn as red arrows from the origin and detected peaks in green.
pub fn autocorr_heatmap(map: &AutocorrMap, periods: &[[f64; 2]], peaks: &[Lag], scale: u32) -> image::RgbImage {
    let side = map.side() as u32;
    let mut img = image::RgbImage::new(side * scale, side * scale);
    let r = map.max_lag() as isize;
    for (py, px, pixel) in img.enumerate_pixels_mut() {
        let dy = (py / scale) as isize - r;
        let dx = (px / scale) as isize - r;
        let v = ((map.get(dy, dx) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        *pixel = image::Rgb([v, v, v]);
    }
    let centre = |dy: f64, dx: f64| {
        (
            (dy + r as f64 + 0.5) * scale as f64,
            (dx + r as f64 + 0.5) * scale as f64,
        )
    };
    for q in peaks {
        for s in [1.0, -1.0] {
            let (y, x) = centre(s * q.dy as f64, s * q.dx as f64);
            for (ey, ex) in [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                draw_line(&mut img, (y + ey, x + ex), (y + ey, x + ex), [0, 200, 0]);
            }
        }
    }
    let origin = centre(0.0, 0.0);
    for p in periods {
        let tip = centre(p[0], p[1]);
        draw_line(&mut img, origin, tip, [230, 0, 0]);
        let (vy, vx) = (tip.0 - origin.0, tip.1 - origin.1);
        let len = (vy * vy + vx * vx).sqrt().max(1e-9);
        let head = (3.0 * scale as f64).min(len / 2.0);
        let (uy, ux) = (vy / len, vx / len);
        for (sy, sx) in [(ux, -uy), (-ux, uy)] {
            let wing = (
                tip.0 - head * uy + 0.6 * head * sy,
                tip.1 - head * ux + 0.6 * head * sx,
            );
            draw_line(&mut img, tip, wing, [230, 0, 0]);
        }
    }
    img
}

pub fn save_heatmap(map: &AutocorrMap, report: &ConsistencyReport, scale: u32, path: &Path) -> Result<()> {
    let periods: Vec<[f64; 2]> = report.vectors.iter().map(|v| v.period).collect();
    autocorr_heatmap(map, &periods, &report.peaks, scale)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}
