//! Rendering textures from a trained model.
//!
//! Output of any size is produced chunk by chunk: each chunk of noise is
//! extended by the generator's noise radius on every side (clipped at the
//! field boundary), rendered, and cropped back to the chunk's own pixels.
//! Pixels of a noise cell depend only on noise within that radius and every
//! layer accumulates in a window-independent order, so chunked output is
//! bitwise identical to a single pass while memory depends only on the
//! chunk size.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize, FloatImage};
use crate::error::{config_err, Error, Result};
use crate::noise::{
    sample_phases, GlobalMode, NoiseSpec, NoiseTensor, Provenance, WaveNumberMlp, WaveNumbers, WaveSource,
};
use crate::tensor::Tensor;
use crate::trainer::{derive_seed, Model};

const LOCAL_TAG: u64 = 101;
const PHASE_TAG: u64 = 102;
const GLOBAL_TAG: u64 = 103;
const TILE_TAG: u64 = 104;

/// Where the wave numbers of the periodic channels come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeriodicSource {
    /// `Z^p = phi(Z^g)` evaluated at every position.
    #[default]
    Coupled,
    /// `Z^p = phi(Zhat^g)` for a separately supplied global field.
    FromGlobal { global: GlobalMode },
    /// Fixed wave vectors everywhere.
    Explicit { waves: WaveNumbers },
}

/// Everything that determines a rendered image, besides the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderPlan {
    /// Noise extent; the image is `2^depth` times larger.
    pub l_out: usize,
    pub m_out: usize,
    /// Required exactly when `d_g > 0`.
    pub global: Option<GlobalMode>,
    #[serde(default)]
    pub periodic: PeriodicSource,
    /// Seeds the local field and, unless given, the phases.
    pub seed: u64,
    pub phases: Option<Vec<f64>>,
    /// Largest noise extent rendered per pass (square chunks); `None` renders
    /// in one pass.
    pub chunk: Option<usize>,
    /// Wrap the noise around both axes so the output tiles seamlessly.
    #[serde(default)]
    pub tileable: bool,
}

impl RenderPlan {
    /// Broadcast rendering with the global vector drawn from `seed`.
    pub fn sample(model: &Model, l_out: usize, m_out: usize, seed: u64) -> Self {
        let global = (model.noise.d_g > 0).then(|| GlobalMode::Broadcast {
            z: model
                .noise
                .sample_global_vector(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, GLOBAL_TAG))),
        });
        Self {
            l_out,
            m_out,
            global,
            periodic: PeriodicSource::Coupled,
            seed,
            phases: None,
            chunk: None,
            tileable: false,
        }
    }

    pub fn with_chunk(mut self, chunk: Option<usize>) -> Self {
        self.chunk = chunk;
        self
    }

    /// Output size in pixels `(height, width)`.
    pub fn pixel_size(&self, model: &Model) -> (usize, usize) {
        let f = model.net.upsample_factor();
        (f * self.l_out, f * self.m_out)
    }

    /// Smallest accepted chunk: the noise-space extent of one receptive field.
    pub fn min_chunk(model: &Model) -> usize {
        model.net.receptive_field().div_ceil(model.net.upsample_factor())
    }

    pub fn phases_for(&self, d_p: usize) -> Vec<f64> {
        match &self.phases {
            Some(p) => p.clone(),
            None => sample_phases(d_p, &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PHASE_TAG))),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let spec = self.spec(model);
        if self.l_out == 0 || self.m_out == 0 {
            return Err(config_err("render extent must be at least 1x1"));
        }
        match (&self.global, spec.d_g) {
            (None, 0) => {}
            (Some(_), 0) => return Err(config_err("plan has a global field but the model has d_g = 0")),
            (None, _) => return Err(config_err("plan lacks a global field (model has d_g > 0)")),
            (Some(g), _) => g.validate(&spec)?,
        }
        if let Some(p) = &self.phases {
            if p.len() != spec.d_p {
                return Err(config_err(format!("{} phases given, model has d_p = {}", p.len(), spec.d_p)));
            }
        }
        if spec.d_p > 0 {
            match &self.periodic {
                PeriodicSource::Coupled => {}
                PeriodicSource::FromGlobal { global } => global.validate(&spec)?,
                PeriodicSource::Explicit { waves } => {
                    if waves.len() != spec.d_p {
                        return Err(config_err(format!(
                            "{} wave vectors given, model has d_p = {}",
                            waves.len(),
                            spec.d_p
                        )));
                    }
                }
            }
            if model.mlp.is_none() && !matches!(self.periodic, PeriodicSource::Explicit { .. }) {
                return Err(config_err("model lacks a wave-number MLP"));
            }
        }
        if let Some(c) = self.chunk {
            let min = Self::min_chunk(model);
            if c < min {
                return Err(config_err(format!(
                    "chunk extent {c} is smaller than one receptive field ({min} noise units)"
                )));
            }
        }
        if self.tileable {
            if self.global.as_ref().is_some_and(|g| !g.is_constant()) {
                return Err(config_err("tileable rendering needs a broadcast global vector"));
            }
            if spec.d_p > 0 && !matches!(self.periodic, PeriodicSource::Explicit { .. }) {
                let constant = match &self.periodic {
                    PeriodicSource::FromGlobal { global } => global.is_constant(),
                    _ => true,
                };
                if !constant {
                    return Err(config_err("tileable rendering needs constant wave numbers"));
                }
            }
        }
        Ok(())
    }

    fn spec(&self, model: &Model) -> NoiseSpec {
        model.noise.with_extent(self.l_out, self.m_out)
    }
}

/// Wave numbers of a plan, either shared by every position or computed per
/// position from a global field.
enum Waves<'a> {
    None,
    Uniform(WaveNumbers),
    PerPosition(&'a GlobalMode, &'a WaveNumberMlp),
}

/// A validated plan with its derived quantities.
struct Prepared<'a> {
    spec: NoiseSpec,
    global: Option<&'a GlobalMode>,
    waves: Waves<'a>,
    phases: Vec<f64>,
    local_seed: u64,
    tileable: bool,
}

impl<'a> Prepared<'a> {
    fn new(model: &'a Model, plan: &'a RenderPlan) -> Result<Self> {
        plan.validate(model)?;
        let spec = plan.spec(model);
        let (l, m) = (spec.l, spec.m);
        let waves = if spec.d_p == 0 {
            Waves::None
        } else {
            let from = match &plan.periodic {
                PeriodicSource::Explicit { .. } => None,
                PeriodicSource::Coupled => plan.global.as_ref(),
                PeriodicSource::FromGlobal { global } => Some(global),
            };
            match (&plan.periodic, from) {
                (PeriodicSource::Explicit { waves }, _) => Waves::Uniform(waves.clone()),
                (_, None) => Waves::Uniform(model.mlp.as_ref().expect("validated").forward(&[])?.0),
                (_, Some(g)) => {
                    let mlp = model.mlp.as_ref().expect("validated");
                    if g.is_constant() {
                        let mut z = vec![0.0; spec.d_g];
                        g.value_at(l, m, 0, 0, &mut z);
                        Waves::Uniform(mlp.forward(&z)?.0)
                    } else {
                        Waves::PerPosition(g, mlp)
                    }
                }
            }
        };
        let waves = match waves {
            Waves::Uniform(k) if plan.tileable => Waves::Uniform(snap_wavenumbers(&k, l, m)),
            w => w,
        };
        Ok(Self {
            phases: plan.phases_for(spec.d_p),
            spec,
            global: plan.global.as_ref(),
            waves,
            local_seed: derive_seed(plan.seed, LOCAL_TAG),
            tileable: plan.tileable,
        })
    }

    /// Local noise for row `a` (the full width), drawn from a per-row stream.
    fn local_row(&self, a: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.local_seed);
        rng.set_stream(a as u64);
        (0..self.spec.m * self.spec.d_l)
            .map(|_| self.spec.sample_prior(&mut rng))
            .collect()
    }

    /// Write the noise column at absolute position `(a, b)`.
    fn column(&self, local_row: &[f64], a: usize, b: usize, out: &mut [f64], zg: &mut [f64]) {
        let s = &self.spec;
        out[..s.d_l].copy_from_slice(&local_row[b * s.d_l..(b + 1) * s.d_l]);
        if let Some(g) = self.global {
            g.value_at(s.l, s.m, a, b, &mut out[s.d_l..s.d_l + s.d_g]);
        }
        let p = &mut out[s.d_l + s.d_g..];
        let (lam, mu) = (a as f64, b as f64);
        let mut fill = |k: &WaveNumbers| {
            for (i, v) in p.iter_mut().enumerate() {
                *v = (k.0[i][0] * lam + k.0[i][1] * mu + self.phases[i]).sin();
            }
        };
        match &self.waves {
            Waves::None => {}
            Waves::Uniform(k) => fill(k),
            Waves::PerPosition(g, mlp) => {
                g.value_at(s.l, s.m, a, b, zg);
                let k = mlp.forward(zg).expect("validated global width").0;
                fill(&k);
            }
        }
    }

    /// Map a possibly out-of-range coordinate into the field (wrapping).
    fn wrap(v: isize, n: usize) -> usize {
        v.rem_euclid(n as isize) as usize
    }

    /// Noise window `[a0, a0 + h) x [b0, b0 + w)` as a (1, C, h, w) tensor.
    /// Coordinates outside the field wrap around (tileable plans only).
    fn window(&self, rows: &RowCache, a0: isize, b0: isize, h: usize, w: usize) -> Tensor {
        let s = &self.spec;
        let c = s.channels();
        let mut t = Tensor::zeros([1, c, h, w]);
        let mut col = vec![0.0; c];
        let mut zg = vec![0.0; s.d_g];
        let data = t.data_mut();
        for y in 0..h {
            let a = Self::wrap(a0 + y as isize, s.l);
            let row = rows.get(a);
            for x in 0..w {
                let b = Self::wrap(b0 + x as isize, s.m);
                self.column(row, a, b, &mut col, &mut zg);
                for (ch, v) in col.iter().enumerate() {
                    data[(ch * h + y) * w + x] = *v;
                }
            }
        }
        t
    }
}

/// Local-noise rows of the current band.
struct RowCache {
    first: usize,
    rows: Vec<Vec<f64>>,
}

impl RowCache {
    fn get(&self, a: usize) -> &[f64] {
        &self.rows[a - self.first]
    }
}

/// Receives rendered tiles in row-major band order.
pub trait TileSink {
    fn begin(&mut self, _height: usize, _width: usize) -> Result<()> {
        Ok(())
    }

    /// A (1, 3, h, w) tile whose top-left pixel is `(y0, x0)`.
    fn tile(&mut self, y0: usize, x0: usize, tile: &Tensor) -> Result<()>;

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Collects tiles into one image.
#[derive(Default)]
pub struct ImageSink {
    pub image: Option<FloatImage>,
}

impl TileSink for ImageSink {
    fn begin(&mut self, height: usize, width: usize) -> Result<()> {
        self.image = Some(FloatImage::new(height, width));
        Ok(())
    }

    fn tile(&mut self, y0: usize, x0: usize, tile: &Tensor) -> Result<()> {
        let img = self.image.as_mut().expect("begin was called");
        let [_, _, h, w] = tile.shape();
        let s = tile.sample(0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    img.set(y0 + y, x0 + x, ch, s[(ch * h + y) * w + x]);
                }
            }
        }
        Ok(())
    }
}

/// Streams 8-bit RGB PNG rows as bands complete; holds one band at a time.
pub struct PngSink<W: Write + 'static> {
    writer: Option<png::StreamWriter<'static, W>>,
    out: Option<W>,
    width: usize,
    band: Vec<u8>,
    band_rows: usize,
}

impl<W: Write + 'static> PngSink<W> {
    pub fn new(out: W) -> Self {
        Self {
            writer: None,
            out: Some(out),
            width: 0,
            band: Vec::new(),
            band_rows: 0,
        }
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

impl<W: Write + 'static> TileSink for PngSink<W> {
    fn begin(&mut self, height: usize, width: usize) -> Result<()> {
        let out = self.out.take().expect("begin called once");
        let mut enc = png::Encoder::new(out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        self.writer = Some(enc.write_header().map_err(png_err)?.into_stream_writer().map_err(png_err)?);
        self.width = width;
        Ok(())
    }

    fn tile(&mut self, _y0: usize, x0: usize, tile: &Tensor) -> Result<()> {
        let [_, _, h, w] = tile.shape();
        if x0 == 0 {
            self.band_rows = h;
            self.band.clear();
            self.band.resize(h * self.width * 3, 0);
        }
        let s = tile.sample(0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    self.band[(y * self.width + x0 + x) * 3 + ch] = denormalize(s[(ch * h + y) * w + x]);
                }
            }
        }
        if x0 + w == self.width {
            let stream = self.writer.as_mut().expect("begin was called");
            stream.write_all(&self.band[..self.band_rows * self.width * 3])?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = self.writer.take() {
            w.finish().map_err(png_err)?;
        }
        Ok(())
    }
}

/// Render `plan`, handing tiles to `sink`.
pub fn render_to(model: &Model, plan: &RenderPlan, sink: &mut dyn TileSink) -> Result<()> {
    let prep = Prepared::new(model, plan)?;
    let (l, m) = (plan.l_out, plan.m_out);
    let f = model.net.upsample_factor();
    let r = model.net.noise_radius();
    let chunk = plan.chunk.unwrap_or(l.max(m));
    sink.begin(f * l, f * m)?;
    // window bounds in noise units for an interior span [s, e) of length n
    let bounds = |s: usize, e: usize, n: usize| -> (isize, isize) {
        if prep.tileable {
            (s as isize - r as isize, (e + r) as isize)
        } else {
            (s.saturating_sub(r) as isize, (e + r).min(n) as isize)
        }
    };
    for a0 in (0..l).step_by(chunk) {
        let a1 = (a0 + chunk).min(l);
        let (wa0, wa1) = bounds(a0, a1, l);
        let mut rows = RowCache {
            first: 0,
            rows: Vec::new(),
        };
        let wanted: Vec<usize> = (wa0..wa1).map(|a| Prepared::wrap(a, l)).collect();
        let lo = *wanted.iter().min().expect("non-empty band");
        let hi = *wanted.iter().max().expect("non-empty band");
        rows.first = lo;
        rows.rows = (lo..=hi).map(|a| prep.local_row(a)).collect();
        for b0 in (0..m).step_by(chunk) {
            let b1 = (b0 + chunk).min(m);
            let (wb0, wb1) = bounds(b0, b1, m);
            let h = (wa1 - wa0) as usize;
            let w = (wb1 - wb0) as usize;
            let z = prep.window(&rows, wa0, wb0, h, w);
            let img = model.generator.forward(&z)?;
            let y_off = (a0 as isize - wa0) as usize * f;
            let x_off = (b0 as isize - wb0) as usize * f;
            let tile = if h == a1 - a0 && w == b1 - b0 {
                img
            } else {
                img.crop(y_off, x_off, (a1 - a0) * f, (b1 - b0) * f)
            };
            sink.tile(a0 * f, b0 * f, &tile)?;
        }
    }
    sink.finish()
}

pub fn render(model: &Model, plan: &RenderPlan) -> Result<FloatImage> {
    let mut sink = ImageSink::default();
    render_to(model, plan, &mut sink)?;
    Ok(sink.image.expect("render always begins the sink"))
}

/// Render straight to a PNG file without holding the image in memory.
pub fn render_png(model: &Model, plan: &RenderPlan, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut sink = PngSink::new(BufWriter::new(file));
    render_to(model, plan, &mut sink)
}

/// The assembled `L_out x M_out` noise tensor a plan renders.
pub fn plan_noise(model: &Model, plan: &RenderPlan) -> Result<NoiseTensor> {
    let prep = Prepared::new(model, plan)?;
    let s = &prep.spec;
    let rows = RowCache {
        first: 0,
        rows: (0..s.l).map(|a| prep.local_row(a)).collect(),
    };
    let t = prep.window(&rows, 0, 0, s.l, s.m);
    let waves = match &prep.waves {
        Waves::None => None,
        Waves::Uniform(k) => Some(WaveSource::Uniform(k.clone())),
        Waves::PerPosition(g, mlp) => {
            let mut v = Vec::with_capacity(s.l * s.m);
            let mut z = vec![0.0; s.d_g];
            for a in 0..s.l {
                for b in 0..s.m {
                    g.value_at(s.l, s.m, a, b, &mut z);
                    v.push(mlp.forward(&z)?.0);
                }
            }
            Some(WaveSource::PerPosition(v))
        }
    };
    Ok(NoiseTensor {
        values: crate::noise::tensor_to_grid(&t, 0),
        spec: s.clone(),
        provenance: Provenance {
            global: plan.global.clone(),
            waves,
            phases: prep.phases.clone(),
        },
    })
}

/// Snap each wave vector to the nearest multiple of `2 pi / L` along lambda
/// and `2 pi / M` along mu, so the plane waves wrap exactly.
pub fn snap_wavenumbers(k: &WaveNumbers, l: usize, m: usize) -> WaveNumbers {
    let snap = |v: f64, n: usize| {
        let q = TAU / n as f64;
        (v / q).round() * q
    };
    WaveNumbers(k.0.iter().map(|w| [snap(w[0], l), snap(w[1], m)]).collect())
}

fn require_global(model: &Model, what: &str) -> Result<()> {
    if model.noise.d_g == 0 {
        return Err(config_err(format!("{what} needs global dimensions (d_g = 0)")));
    }
    Ok(())
}

/// Quilt layout: `tiles_y x tiles_x` tiles of `delta x delta` noise units,
/// each with its own global vector drawn from `seed`.
pub fn quilt_mode(model: &Model, tiles_y: usize, tiles_x: usize, delta: usize, seed: u64) -> Result<GlobalMode> {
    require_global(model, "a quilt")?;
    if delta == 0 || tiles_y == 0 || tiles_x == 0 {
        return Err(config_err("quilt needs delta >= 1 and at least one tile"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TILE_TAG));
    Ok(GlobalMode::Quilt {
        delta,
        tiles: (0..tiles_y * tiles_x)
            .map(|_| model.noise.sample_global_vector(&mut rng))
            .collect(),
    })
}

pub fn quilt_plan(model: &Model, tiles_y: usize, tiles_x: usize, delta: usize, seed: u64) -> Result<RenderPlan> {
    let mut plan = RenderPlan::sample(model, delta * tiles_y, delta * tiles_x, seed);
    plan.global = Some(quilt_mode(model, tiles_y, tiles_x, delta, seed)?);
    Ok(plan)
}

/// Patchwork of textures; output is `2^depth * delta * (tiles_y, tiles_x)` pixels.
pub fn render_quilt(model: &Model, tiles_y: usize, tiles_x: usize, delta: usize, seed: u64) -> Result<FloatImage> {
    render(model, &quilt_plan(model, tiles_y, tiles_x, delta, seed)?)
}

/// Four corner vectors drawn from `seed`.
pub fn sample_corners(model: &Model, seed: u64) -> [Vec<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TILE_TAG));
    std::array::from_fn(|_| model.noise.sample_global_vector(&mut rng))
}

pub fn morph_plan(model: &Model, corners: [Vec<f64>; 4], l_out: usize, m_out: usize, seed: u64) -> Result<RenderPlan> {
    require_global(model, "a morph")?;
    let mut plan = RenderPlan::sample(model, l_out, m_out, seed);
    plan.global = Some(GlobalMode::Bilinear { corners });
    Ok(plan)
}

/// Smooth transition between the textures of four corner vectors.
pub fn render_morph(model: &Model, corners: [Vec<f64>; 4], l_out: usize, m_out: usize, seed: u64) -> Result<FloatImage> {
    render(model, &morph_plan(model, corners, l_out, m_out, seed)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisentangleMode {
    /// Quilted `Z^g`, periodic channels from the single `zhat^g`.
    VaryGFixP,
    /// Broadcast `zhat^g`, periodic channels from the quilted field.
    FixGVaryP,
    /// Quilted field drives both.
    VaryBoth,
}

/// Plans for the three substitutions share the local field, phases and tile
/// vectors; only the intended parts differ.
pub fn disentangle_plan(
    model: &Model,
    mode: DisentangleMode,
    tiles_y: usize,
    tiles_x: usize,
    delta: usize,
    z_hat: Option<Vec<f64>>,
    seed: u64,
) -> Result<RenderPlan> {
    if model.noise.d_g == 0 || model.noise.d_p == 0 {
        return Err(config_err("disentangling needs d_g >= 1 and d_p >= 1"));
    }
    let quilt = quilt_mode(model, tiles_y, tiles_x, delta, seed)?;
    let mut plan = RenderPlan::sample(model, delta * tiles_y, delta * tiles_x, seed);
    let z_hat = match z_hat {
        Some(z) if z.len() != model.noise.d_g => {
            return Err(config_err(format!("zhat has length {}, expected d_g = {}", z.len(), model.noise.d_g)))
        }
        Some(z) => z,
        None => match &plan.global {
            Some(GlobalMode::Broadcast { z }) => z.clone(),
            _ => unreachable!("sample plans broadcast"),
        },
    };
    let fixed = GlobalMode::Broadcast { z: z_hat };
    match mode {
        DisentangleMode::VaryGFixP => {
            plan.global = Some(quilt);
            plan.periodic = PeriodicSource::FromGlobal { global: fixed };
        }
        DisentangleMode::FixGVaryP => {
            plan.global = Some(fixed);
            plan.periodic = PeriodicSource::FromGlobal { global: quilt };
        }
        DisentangleMode::VaryBoth => {
            plan.global = Some(quilt);
            plan.periodic = PeriodicSource::Coupled;
        }
    }
    Ok(plan)
}

pub fn render_disentangled(
    model: &Model,
    mode: DisentangleMode,
    tiles_y: usize,
    tiles_x: usize,
    delta: usize,
    z_hat: Option<Vec<f64>>,
    seed: u64,
) -> Result<FloatImage> {
    render(model, &disentangle_plan(model, mode, tiles_y, tiles_x, delta, z_hat, seed)?)
}

pub fn tileable_plan(model: &Model, l_out: usize, m_out: usize, seed: u64) -> RenderPlan {
    RenderPlan {
        tileable: true,
        ..RenderPlan::sample(model, l_out, m_out, seed)
    }
}

/// Output whose opposite edges continue each other.
pub fn render_tileable(model: &Model, l_out: usize, m_out: usize, seed: u64) -> Result<FloatImage> {
    render(model, &tileable_plan(model, l_out, m_out, seed))
}

/// Draw `count` independent seeds from a master seed.
pub fn seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.random()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::NetSpec;

    fn model(d_g: usize, d_p: usize, depth: usize) -> Model {
        let noise = NoiseSpec::new(3, d_g, d_p, 4, 4);
        let net = NetSpec {
            depth,
            base_channels: 4,
            ..NetSpec::default()
        };
        Model::new(&noise, &net, 6, 17).unwrap()
    }

    fn bits(img: &FloatImage) -> Vec<u64> {
        img.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn output_size_follows_the_plan() {
        let m = model(2, 2, 2);
        let img = render(&m, &RenderPlan::sample(&m, 5, 7, 1)).unwrap();
        assert_eq!((img.height(), img.width()), (20, 28));
        assert!(img.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn chunked_render_is_bitwise_identical() {
        for (d_g, d_p, depth) in [(0, 2, 2), (2, 2, 3), (2, 0, 1)] {
            let m = model(d_g, d_p, depth);
            let base = RenderPlan::sample(&m, 13, 11, 4);
            let full = render(&m, &base).unwrap();
            let min = RenderPlan::min_chunk(&m);
            for c in [min, min + 1, 7] {
                let part = render(&m, &base.clone().with_chunk(Some(c))).unwrap();
                assert_eq!(bits(&full), bits(&part), "chunk {c}, depth {depth}");
            }
        }
    }

    #[test]
    fn chunked_quilt_and_morph_match_single_pass() {
        let m = model(3, 2, 2);
        let q = quilt_plan(&m, 2, 3, 5, 9).unwrap();
        let a = render(&m, &q).unwrap();
        let b = render(&m, &q.clone().with_chunk(Some(4))).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let mp = morph_plan(&m, sample_corners(&m, 2), 9, 10, 2).unwrap();
        assert_eq!(
            bits(&render(&m, &mp).unwrap()),
            bits(&render(&m, &mp.with_chunk(Some(5))).unwrap())
        );
    }

    #[test]
    fn too_small_chunk_is_rejected() {
        let m = model(0, 2, 3);
        let plan = RenderPlan::sample(&m, 8, 8, 0).with_chunk(Some(RenderPlan::min_chunk(&m) - 1));
        assert!(matches!(render(&m, &plan), Err(Error::Config(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = model(2, 2, 2);
        let p = RenderPlan::sample(&m, 6, 6, 3);
        assert_eq!(bits(&render(&m, &p).unwrap()), bits(&render(&m, &p).unwrap()));
        let other = RenderPlan::sample(&m, 6, 6, 4);
        assert_ne!(bits(&render(&m, &p).unwrap()), bits(&render(&m, &other).unwrap()));
    }

    #[test]
    fn single_tile_quilt_equals_broadcast() {
        let m = model(3, 2, 2);
        let q = quilt_plan(&m, 1, 1, 6, 5).unwrap();
        let z = match &q.global {
            Some(GlobalMode::Quilt { tiles, .. }) => tiles[0].clone(),
            _ => unreachable!(),
        };
        let mut b = RenderPlan::sample(&m, 6, 6, 5);
        b.global = Some(GlobalMode::Broadcast { z });
        assert_eq!(bits(&render(&m, &q).unwrap()), bits(&render(&m, &b).unwrap()));
    }

    #[test]
    fn identical_corners_equal_broadcast() {
        let m = model(3, 2, 2);
        let z = sample_corners(&m, 1)[0].clone();
        let morph = render_morph(&m, std::array::from_fn(|_| z.clone()), 7, 5, 8).unwrap();
        let mut b = RenderPlan::sample(&m, 7, 5, 8);
        b.global = Some(GlobalMode::Broadcast { z });
        assert_eq!(bits(&morph), bits(&render(&m, &b).unwrap()));
    }

    #[test]
    fn morph_and_disentangle_need_global_dims() {
        let m = model(0, 2, 2);
        assert!(render_morph(&m, std::array::from_fn(|_| vec![]), 4, 4, 0).is_err());
        assert!(render_disentangled(&m, DisentangleMode::VaryBoth, 1, 1, 4, None, 0).is_err());
        let m = model(2, 0, 2);
        assert!(render_disentangled(&m, DisentangleMode::VaryBoth, 1, 1, 4, None, 0).is_err());
    }

    #[test]
    fn disentangled_noise_differs_only_where_intended() {
        let m = model(3, 2, 2);
        let noise = |mode| {
            let plan = disentangle_plan(&m, mode, 2, 2, 3, None, 6).unwrap();
            plan_noise(&m, &plan).unwrap()
        };
        let vg = noise(DisentangleMode::VaryGFixP);
        let vp = noise(DisentangleMode::FixGVaryP);
        let vb = noise(DisentangleMode::VaryBoth);
        assert_eq!(vg.local(), vp.local());
        assert_eq!(vg.local(), vb.local());
        // vary_g_fix_p: same global as vary_both, uniform K
        assert_eq!(vg.global(), vb.global());
        assert_ne!(vg.periodic(), vb.periodic());
        match vg.provenance.waves.as_ref().unwrap() {
            WaveSource::Uniform(_) => {}
            WaveSource::PerPosition(v) => assert!(v.iter().all(|k| k == &v[0])),
        }
        // fix_g_vary_p: same periodic part as vary_both, broadcast global
        assert_eq!(vp.periodic(), vb.periodic());
        assert_ne!(vp.global(), vb.global());
        let g = vp.global();
        assert!((0..g.l()).all(|a| (0..g.m()).all(|b| g.column(a, b) == g.column(0, 0))));
    }

    #[test]
    fn vary_both_single_tile_is_a_plain_render() {
        let m = model(3, 2, 2);
        let plan = disentangle_plan(&m, DisentangleMode::VaryBoth, 1, 1, 5, None, 2).unwrap();
        let z = match &plan.global {
            Some(GlobalMode::Quilt { tiles, .. }) => tiles[0].clone(),
            _ => unreachable!(),
        };
        let mut b = RenderPlan::sample(&m, 5, 5, 2);
        b.global = Some(GlobalMode::Broadcast { z });
        assert_eq!(bits(&render(&m, &plan).unwrap()), bits(&render(&m, &b).unwrap()));
    }

    #[test]
    fn quilt_keeps_wave_numbers_constant_per_tile() {
        let m = model(3, 2, 2);
        let z = plan_noise(&m, &quilt_plan(&m, 2, 2, 3, 1).unwrap()).unwrap();
        let Some(WaveSource::PerPosition(ks)) = &z.provenance.waves else {
            panic!("quilt waves vary per tile")
        };
        for a in 0..6 {
            for b in 0..6 {
                let anchor = &ks[(a / 3 * 3) * 6 + b / 3 * 3];
                assert_eq!(&ks[a * 6 + b], anchor);
            }
        }
        assert_ne!(ks[0], ks[5 * 6 + 5]);
    }

    #[test]
    fn snapping_moves_by_at_most_half_a_step() {
        let k = WaveNumbers(vec![[0.37, -2.9], [3.1, 1.234]]);
        for (l, m) in [(5, 7), (16, 3), (1, 100)] {
            let s = snap_wavenumbers(&k, l, m);
            for (a, b) in k.0.iter().zip(&s.0) {
                assert!((a[0] - b[0]).abs() <= std::f64::consts::PI / l as f64 + 1e-12);
                assert!((a[1] - b[1]).abs() <= std::f64::consts::PI / m as f64 + 1e-12);
                assert!(((b[0] * l as f64 / TAU).round() - b[0] * l as f64 / TAU).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tileable_noise_wraps_exactly() {
        let m = model(2, 2, 2);
        let plan = tileable_plan(&m, 6, 5, 3);
        let z = plan_noise(&m, &plan).unwrap();
        let Some(WaveSource::Uniform(k)) = &z.provenance.waves else {
            panic!("uniform waves expected")
        };
        let p = z.periodic();
        for i in 0..2 {
            for a in 0..6 {
                // the column after the last continues as column 0
                let next = (k.0[i][0] * a as f64 + k.0[i][1] * 5.0 + z.provenance.phases[i]).sin();
                assert!((next - p.get(a, 0, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tileable_output_has_no_seams() {
        let m = model(2, 2, 2);
        let img = render_tileable(&m, 6, 5, 3).unwrap();
        let (h, w) = (img.height(), img.width());
        let mut interior = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    if x + 1 < w {
                        interior = interior.max((img.get(y, x + 1, c) - img.get(y, x, c)).abs());
                    }
                    if y + 1 < h {
                        interior = interior.max((img.get(y + 1, x, c) - img.get(y, x, c)).abs());
                    }
                }
            }
        }
        let mut seam = 0.0f64;
        for y in 0..h {
            for c in 0..3 {
                seam = seam.max((img.get(y, 0, c) - img.get(y, w - 1, c)).abs());
            }
        }
        for x in 0..w {
            for c in 0..3 {
                seam = seam.max((img.get(0, x, c) - img.get(h - 1, x, c)).abs());
            }
        }
        assert!(seam <= interior, "seam {seam} vs interior {interior}");
        let chunked = render(&m, &tileable_plan(&m, 6, 5, 3).with_chunk(Some(4))).unwrap();
        assert_eq!(bits(&img), bits(&chunked));
    }

    #[test]
    fn tileable_rejects_varying_global_fields() {
        let m = model(2, 2, 2);
        let mut plan = quilt_plan(&m, 2, 2, 3, 0).unwrap();
        plan.tileable = true;
        assert!(render(&m, &plan).is_err());
    }

    #[test]
    fn png_stream_matches_in_memory_render() {
        let m = model(2, 2, 2);
        let plan = RenderPlan::sample(&m, 9, 6, 1).with_chunk(Some(4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        render_png(&m, &plan, &path).unwrap();
        let loaded = FloatImage::load(&path).unwrap();
        let direct = render(&m, &plan).unwrap().to_rgb8();
        assert_eq!(loaded.to_rgb8(), direct);
    }

    #[test]
    fn plans_round_trip_through_toml() {
        let m = model(2, 2, 2);
        for plan in [
            RenderPlan::sample(&m, 3, 4, 1),
            quilt_plan(&m, 2, 1, 3, 2).unwrap(),
            disentangle_plan(&m, DisentangleMode::FixGVaryP, 1, 2, 3, None, 3).unwrap(),
            tileable_plan(&m, 4, 4, 2),
        ] {
            let text = toml::to_string(&plan).unwrap();
            let back: RenderPlan = toml::from_str(&text).unwrap();
            assert_eq!(back, plan);
        }
    }
}
