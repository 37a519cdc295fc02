//! Structured noise tensors `Z = [Z^l, Z^g, Z^p]`.
//!
//! * local channels: i.i.d. draws from the uniform prior at every position;
//! * global channels: one vector per image (or per quilt tile, or bilinearly
//!   interpolated between four corner vectors);
//! * periodic channels: plane waves `sin(k_i . (lambda, mu) + phi_i)` whose wave
//!   vectors come from a one-hidden-layer MLP of the global vector.
//!
//! Spatial indices are 0-based; the random phase absorbs the offset.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

/// Hidden width of the wave-number MLP.
pub const DEFAULT_HIDDEN: usize = 60;

/// Channel cardinalities, spatial extent and prior of a noise tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub d_l: usize,
    pub d_g: usize,
    pub d_p: usize,
    /// Spatial extent along rows (lambda).
    #[serde(rename = "L")]
    pub l: usize,
    /// Spatial extent along columns (mu).
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default = "default_low")]
    pub prior_low: f64,
    #[serde(default = "default_high")]
    pub prior_high: f64,
}

fn default_low() -> f64 {
    -1.0
}

fn default_high() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn new(d_l: usize, d_g: usize, d_p: usize, l: usize, m: usize) -> Self {
        Self {
            d_l,
            d_g,
            d_p,
            l,
            m,
            prior_low: -1.0,
            prior_high: 1.0,
        }
    }

    /// Total channel count `d_l + d_g + d_p`.
    pub fn channels(&self) -> usize {
        self.d_l + self.d_g + self.d_p
    }

    /// Same cardinalities and prior at another spatial extent.
    pub fn with_extent(&self, l: usize, m: usize) -> Self {
        Self { l, m, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() == 0 {
            return Err(config_err("noise.d_l + noise.d_g + noise.d_p must be >= 1"));
        }
        if self.l == 0 || self.m == 0 {
            return Err(config_err("noise.L and noise.M must be >= 1"));
        }
        if !(self.prior_low < self.prior_high) || !self.prior_low.is_finite() || !self.prior_high.is_finite() {
            return Err(config_err("noise.prior_low must be < noise.prior_high"));
        }
        Ok(())
    }

    pub(crate) fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.prior_low..self.prior_high)
    }

    /// One global vector drawn from the prior.
    pub fn sample_global_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.d_g).map(|_| self.sample_prior(rng)).collect()
    }
}

/// A row-major `L x M x channels` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    l: usize,
    m: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(l: usize, m: usize, channels: usize) -> Self {
        Self {
            l,
            m,
            channels,
            data: vec![0.0; l * m * channels],
        }
    }

    pub fn from_vec(l: usize, m: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != l * m * channels {
            return Err(shape_err(format!(
                "grid {l}x{m}x{channels} needs {} values, got {}",
                l * m * channels,
                data.len()
            )));
        }
        Ok(Self { l, m, channels, data })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, lambda: usize, mu: usize, i: usize) -> f64 {
        self.data[(lambda * self.m + mu) * self.channels + i]
    }

    #[inline]
    pub fn set(&mut self, lambda: usize, mu: usize, i: usize, v: f64) {
        self.data[(lambda * self.m + mu) * self.channels + i] = v;
    }

    /// The channel vector at one position.
    pub fn column(&self, lambda: usize, mu: usize) -> &[f64] {
        let o = (lambda * self.m + mu) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn column_mut(&mut self, lambda: usize, mu: usize) -> &mut [f64] {
        let o = (lambda * self.m + mu) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Sub-grid `[l0, l0+l) x [m0, m0+m)`.
    pub fn window(&self, l0: usize, m0: usize, l: usize, m: usize) -> Grid {
        assert!(l0 + l <= self.l && m0 + m <= self.m, "window out of bounds");
        let mut out = Grid::zeros(l, m, self.channels);
        for a in 0..l {
            let src = ((l0 + a) * self.m + m0) * self.channels;
            let dst = a * m * self.channels;
            out.data[dst..dst + m * self.channels]
                .copy_from_slice(&self.data[src..src + m * self.channels]);
        }
        out
    }

    /// Grid extended by `pad` positions on every side with wrap-around.
    pub fn wrap_pad(&self, pad: usize) -> Grid {
        let (l, m) = (self.l + 2 * pad, self.m + 2 * pad);
        let mut out = Grid::zeros(l, m, self.channels);
        for a in 0..l {
            let sa = (a + self.l * pad - pad) % self.l;
            for b in 0..m {
                let sb = (b + self.m * pad - pad) % self.m;
                out.column_mut(a, b).copy_from_slice(self.column(sa, sb));
            }
        }
        out
    }
}

/// How a global field is laid out over space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GlobalMode {
    /// One vector repeated at every position.
    Broadcast { z: Vec<f64> },
    /// `delta x delta` tiles, each holding its own vector; `tiles` is row-major
    /// over `ceil(L/delta) x ceil(M/delta)` tiles.
    Quilt { delta: usize, tiles: Vec<Vec<f64>> },
    /// Bilinear interpolation between corner vectors, ordered
    /// top-left, top-right, bottom-left, bottom-right.
    Bilinear { corners: [Vec<f64>; 4] },
    /// A full `L x M x d_g` field, row-major.
    Explicit { values: Vec<f64> },
}

impl GlobalMode {
    pub fn sample_broadcast<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Self {
        GlobalMode::Broadcast {
            z: spec.sample_global_vector(rng),
        }
    }

    pub fn sample_quilt<R: Rng + ?Sized>(spec: &NoiseSpec, delta: usize, rng: &mut R) -> Self {
        let d = delta.max(1);
        let count = spec.l.div_ceil(d) * spec.m.div_ceil(d);
        GlobalMode::Quilt {
            delta,
            tiles: (0..count).map(|_| spec.sample_global_vector(rng)).collect(),
        }
    }

    pub fn sample_bilinear<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Self {
        GlobalMode::Bilinear {
            corners: std::array::from_fn(|_| spec.sample_global_vector(rng)),
        }
    }
}

/// The `L x M x d_g` global part together with how it was built.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalField {
    pub values: Grid,
    pub construction: GlobalMode,
}

impl GlobalField {
    /// True when every position holds the same vector.
    pub fn is_uniform(&self) -> bool {
        let first = self.values.column(0, 0);
        (0..self.values.l())
            .all(|a| (0..self.values.m()).all(|b| self.values.column(a, b) == first))
    }
}

/// `L x M x d_l` i.i.d. uniform samples from the prior.
pub fn build_local<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Grid {
    let data = (0..spec.l * spec.m * spec.d_l)
        .map(|_| spec.sample_prior(rng))
        .collect();
    Grid {
        l: spec.l,
        m: spec.m,
        channels: spec.d_l,
        data,
    }
}

fn check_global_vec(spec: &NoiseSpec, v: &[f64]) -> Result<()> {
    if v.len() != spec.d_g {
        return Err(shape_err(format!(
            "global vector has length {}, expected d_g = {}",
            v.len(),
            spec.d_g
        )));
    }
    Ok(())
}

impl GlobalMode {
    /// Check the construction against an `L x M` layout with `spec.d_g` channels.
    pub fn validate(&self, spec: &NoiseSpec) -> Result<()> {
        if spec.d_g == 0 {
            return Err(config_err("global field requested but d_g = 0"));
        }
        let (l, m) = (spec.l, spec.m);
        match self {
            GlobalMode::Broadcast { z } => check_global_vec(spec, z),
            GlobalMode::Quilt { delta, tiles } => {
                let delta = *delta;
                if delta == 0 {
                    return Err(config_err("quilt tile size must be >= 1"));
                }
                if delta > l.min(m) {
                    return Err(config_err(format!(
                        "quilt tile size {delta} exceeds the spatial extent {l}x{m}"
                    )));
                }
                let count = l.div_ceil(delta) * m.div_ceil(delta);
                if tiles.len() != count {
                    return Err(shape_err(format!(
                        "quilt needs {count} tile vectors, got {}",
                        tiles.len()
                    )));
                }
                tiles.iter().try_for_each(|t| check_global_vec(spec, t))
            }
            GlobalMode::Bilinear { corners } => corners.iter().try_for_each(|c| check_global_vec(spec, c)),
            GlobalMode::Explicit { values } => {
                if values.len() != l * m * spec.d_g {
                    return Err(shape_err(format!(
                        "explicit global field has {} values, expected {l} x {m} x {}",
                        values.len(),
                        spec.d_g
                    )));
                }
                Ok(())
            }
        }
    }

    /// Write the vector at `(a, b)` of an `l x m` field into `out`.
    /// Assumes [`GlobalMode::validate`] passed.
    pub fn value_at(&self, l: usize, m: usize, a: usize, b: usize, out: &mut [f64]) {
        match self {
            GlobalMode::Broadcast { z } => out.copy_from_slice(z),
            GlobalMode::Quilt { delta, tiles } => {
                let tx = m.div_ceil(*delta);
                out.copy_from_slice(&tiles[(a / delta) * tx + b / delta]);
            }
            GlobalMode::Bilinear { corners } => {
                let [tl, tr, bl, br] = corners;
                let t = if l > 1 { a as f64 / (l - 1) as f64 } else { 0.0 };
                let s = if m > 1 { b as f64 / (m - 1) as f64 } else { 0.0 };
                for (i, o) in out.iter_mut().enumerate() {
                    let top = tl[i] + s * (tr[i] - tl[i]);
                    let bottom = bl[i] + s * (br[i] - bl[i]);
                    *o = top + t * (bottom - top);
                }
            }
            GlobalMode::Explicit { values } => {
                let d = out.len();
                let off = (a * m + b) * d;
                out.copy_from_slice(&values[off..off + d]);
            }
        }
    }

    /// True when the construction yields the same vector everywhere.
    pub fn is_constant(&self) -> bool {
        match self {
            GlobalMode::Broadcast { .. } => true,
            GlobalMode::Quilt { tiles, .. } => tiles.windows(2).all(|w| w[0] == w[1]),
            GlobalMode::Bilinear { corners } => corners.iter().all(|c| c == &corners[0]),
            GlobalMode::Explicit { .. } => false,
        }
    }
}

pub fn build_global(spec: &NoiseSpec, mode: &GlobalMode) -> Result<GlobalField> {
    mode.validate(spec)?;
    let (l, m) = (spec.l, spec.m);
    let mut values = Grid::zeros(l, m, spec.d_g);
    for a in 0..l {
        for b in 0..m {
            mode.value_at(l, m, a, b, values.column_mut(a, b));
        }
    }
    Ok(GlobalField {
        values,
        construction: mode.clone(),
    })
}

/// The wave vectors `k_i = (K[0,i], K[1,i])` of the periodic channels, in
/// radians per noise unit along (lambda, mu).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveNumbers(pub Vec<[f64; 2]>);

impl WaveNumbers {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Row `r` of the 2 x d_p matrix.
    pub fn row(&self, r: usize) -> Vec<f64> {
        self.0.iter().map(|k| k[r]).collect()
    }
}

#[derive(Clone, Debug)]
struct HiddenLayer {
    w: Param,
    b: Param,
    w1: Param,
    w2: Param,
}

/// `K = xi(z^g)`: one ReLU hidden layer followed by two linear heads, one per
/// row of `K`. With `d_g = 0` only the biases `b1`, `b2` exist.
#[derive(Clone, Debug)]
pub struct WaveNumberMlp {
    d_g: usize,
    d_h: usize,
    d_p: usize,
    hidden: Option<HiddenLayer>,
    pub b1: Param,
    pub b2: Param,
    /// Initialization means of `b1` and `b2`.
    pub c: Vec<f64>,
}

/// Forward intermediates needed to backpropagate one MLP evaluation.
#[derive(Clone, Debug)]
pub struct MlpCache {
    z: Vec<f64>,
    pre: Vec<f64>,
}

/// Initialization means `c_i = pi * i / d_p`, `i = 1..=d_p`.
pub fn wavenumber_means(d_p: usize) -> Vec<f64> {
    (1..=d_p).map(|i| PI * i as f64 / d_p as f64).collect()
}

pub fn init_wavenumber_mlp(spec: &NoiseSpec, d_h: usize, seed: u64) -> Result<WaveNumberMlp> {
    if spec.d_p == 0 {
        return Err(config_err("wave-number MLP needs d_p >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_g, d_p) = (spec.d_g, spec.d_p);
    let hidden = (d_g > 0).then(|| {
        if d_h == 0 {
            return Err(config_err("MLP hidden width must be >= 1"));
        }
        Ok(HiddenLayer {
            w: Param::normal("mlp.w", vec![d_h, d_g], 0.0, 0.02, &mut rng),
            b: Param::normal("mlp.b", vec![d_h], 0.0, 0.02, &mut rng),
            w1: Param::normal("mlp.w1", vec![d_p, d_h], 0.0, 0.02, &mut rng),
            w2: Param::normal("mlp.w2", vec![d_p, d_h], 0.0, 0.02, &mut rng),
        })
    });
    let hidden = hidden.transpose()?;
    let c = wavenumber_means(d_p);
    let mut bias = |name: &str| {
        let value = c
            .iter()
            .map(|&ci| {
                Normal::new(ci, 0.02 * ci)
                    .expect("positive spread")
                    .sample(&mut rng)
            })
            .collect();
        Param::new(name, vec![d_p], value)
    };
    let b1 = bias("mlp.b1");
    let b2 = bias("mlp.b2");
    Ok(WaveNumberMlp {
        d_g,
        d_h: if d_g > 0 { d_h } else { 0 },
        d_p,
        hidden,
        b1,
        b2,
        c,
    })
}

impl WaveNumberMlp {
    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    /// Build an MLP from explicit parameters (row-major matrices). Pass empty
    /// hidden parameters when `d_g = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d_g: usize,
        d_h: usize,
        d_p: usize,
        w: Vec<f64>,
        b: Vec<f64>,
        w1: Vec<f64>,
        w2: Vec<f64>,
        b1: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let sizes_ok = b1.len() == d_p
            && b2.len() == d_p
            && if d_g > 0 {
                w.len() == d_h * d_g && b.len() == d_h && w1.len() == d_p * d_h && w2.len() == d_p * d_h
            } else {
                w.is_empty() && b.is_empty() && w1.is_empty() && w2.is_empty()
            };
        if !sizes_ok {
            return Err(shape_err("MLP parameter sizes do not match (d_g, d_h, d_p)"));
        }
        let hidden = (d_g > 0).then(|| HiddenLayer {
            w: Param::new("mlp.w", vec![d_h, d_g], w),
            b: Param::new("mlp.b", vec![d_h], b),
            w1: Param::new("mlp.w1", vec![d_p, d_h], w1),
            w2: Param::new("mlp.w2", vec![d_p, d_h], w2),
        });
        Ok(Self {
            d_g,
            d_h: if d_g > 0 { d_h } else { 0 },
            d_p,
            hidden,
            b1: Param::new("mlp.b1", vec![d_p], b1),
            b2: Param::new("mlp.b2", vec![d_p], b2),
            c: wavenumber_means(d_p),
        })
    }

    pub fn forward(&self, z_g: &[f64]) -> Result<(WaveNumbers, MlpCache)> {
        if self.d_g > 0 && z_g.len() != self.d_g {
            return Err(shape_err(format!(
                "MLP input has length {}, expected d_g = {}",
                z_g.len(),
                self.d_g
            )));
        }
        let mut k: Vec<[f64; 2]> = (0..self.d_p)
            .map(|i| [self.b1.value[i], self.b2.value[i]])
            .collect();
        let mut pre = Vec::new();
        if let Some(h) = &self.hidden {
            pre = (0..self.d_h)
                .map(|j| {
                    let row = &h.w.value[j * self.d_g..(j + 1) * self.d_g];
                    h.b.value[j] + row.iter().zip(z_g).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            for (i, ki) in k.iter_mut().enumerate() {
                let r1 = &h.w1.value[i * self.d_h..(i + 1) * self.d_h];
                let r2 = &h.w2.value[i * self.d_h..(i + 1) * self.d_h];
                for j in 0..self.d_h {
                    let a = pre[j].max(0.0);
                    ki[0] += r1[j] * a;
                    ki[1] += r2[j] * a;
                }
            }
        }
        let z = if self.d_g > 0 { z_g.to_vec() } else { Vec::new() };
        Ok((WaveNumbers(k), MlpCache { z, pre }))
    }

    /// Accumulates parameter gradients given `dL/dk_i`.
    pub fn backward(&mut self, cache: &MlpCache, dk: &[[f64; 2]]) {
        for (i, g) in dk.iter().enumerate() {
            self.b1.grad[i] += g[0];
            self.b2.grad[i] += g[1];
        }
        let (d_g, d_h) = (self.d_g, self.d_h);
        if let Some(h) = &mut self.hidden {
            let mut dpre = vec![0.0; d_h];
            for (i, g) in dk.iter().enumerate() {
                for j in 0..d_h {
                    let a = cache.pre[j].max(0.0);
                    h.w1.grad[i * d_h + j] += g[0] * a;
                    h.w2.grad[i * d_h + j] += g[1] * a;
                    dpre[j] += g[0] * h.w1.value[i * d_h + j] + g[1] * h.w2.value[i * d_h + j];
                }
            }
            for j in 0..d_h {
                if cache.pre[j] <= 0.0 {
                    continue;
                }
                h.b.grad[j] += dpre[j];
                for q in 0..d_g {
                    h.w.grad[j * d_g + q] += dpre[j] * cache.z[q];
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let Some(h) = &self.hidden {
            v.extend([&h.w, &h.b, &h.w1, &h.w2]);
        }
        v.extend([&self.b1, &self.b2]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(h) = &mut self.hidden {
            v.extend([&mut h.w, &mut h.b, &mut h.w1, &mut h.w2]);
        }
        v.extend([&mut self.b1, &mut self.b2]);
        v
    }
}

/// `K = xi(z^g)`.
pub fn mlp_wavenumbers(mlp: &WaveNumberMlp, z_g: &[f64]) -> Result<WaveNumbers> {
    Ok(mlp.forward(z_g)?.0)
}

/// Where the wave vectors of a periodic field come from.
#[derive(Clone, Debug, PartialEq)]
pub enum WaveSource {
    Uniform(WaveNumbers),
    /// One wave-number set per position, row-major over `L x M`.
    PerPosition(Vec<WaveNumbers>),
}

impl WaveSource {
    fn at(&self, idx: usize) -> &WaveNumbers {
        match self {
            WaveSource::Uniform(k) => k,
            WaveSource::PerPosition(v) => &v[idx],
        }
    }

    /// Evaluate the MLP at every position of a global field.
    pub fn from_global(mlp: &WaveNumberMlp, global: &Grid) -> Result<Self> {
        let mut out = Vec::with_capacity(global.l() * global.m());
        for a in 0..global.l() {
            for b in 0..global.m() {
                out.push(mlp_wavenumbers(mlp, global.column(a, b))?);
            }
        }
        Ok(WaveSource::PerPosition(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicField {
    pub values: Grid,
    pub waves: WaveSource,
    pub phases: Vec<f64>,
}

/// `values[lambda, mu, i] = sin(k_i[0] * lambda + k_i[1] * mu + phi_i)`.
///
/// Wave numbers outside `[-pi, pi]` are accepted: on the integer lattice they
/// alias to an in-band frequency.
pub fn build_periodic_field(waves: &WaveSource, phases: &[f64], l: usize, m: usize) -> Result<PeriodicField> {
    build_periodic_field_at(waves, phases, l, m, 0, 0)
}

/// Like [`build_periodic_field`] for the window whose first position sits at
/// absolute coordinates `(l0, m0)` of a larger field.
pub fn build_periodic_field_at(
    waves: &WaveSource,
    phases: &[f64],
    l: usize,
    m: usize,
    l0: usize,
    m0: usize,
) -> Result<PeriodicField> {
    let d_p = phases.len();
    match waves {
        WaveSource::Uniform(k) if k.len() != d_p => {
            return Err(shape_err(format!(
                "{} wave vectors for {d_p} phases",
                k.len()
            )))
        }
        WaveSource::PerPosition(v) => {
            if v.len() != l * m {
                return Err(shape_err(format!(
                    "per-position wave numbers cover {} positions, field has {}",
                    v.len(),
                    l * m
                )));
            }
            if v.iter().any(|k| k.len() != d_p) {
                return Err(shape_err("per-position wave numbers disagree with phase count"));
            }
        }
        _ => {}
    }
    let mut values = Grid::zeros(l, m, d_p);
    for a in 0..l {
        let lam = (l0 + a) as f64;
        for b in 0..m {
            let mu = (m0 + b) as f64;
            let k = waves.at(a * m + b);
            let col = values.column_mut(a, b);
            for i in 0..d_p {
                col[i] = (k.0[i][0] * lam + k.0[i][1] * mu + phases[i]).sin();
            }
        }
    }
    Ok(PeriodicField {
        values,
        waves: waves.clone(),
        phases: phases.to_vec(),
    })
}

/// Gradient of a scalar w.r.t. uniform wave vectors, given its gradient
/// w.r.t. the periodic field values.
pub fn periodic_field_backward(k: &WaveNumbers, phases: &[f64], grad: &Grid) -> Vec<[f64; 2]> {
    let d_p = phases.len();
    let mut dk = vec![[0.0; 2]; d_p];
    for a in 0..grad.l() {
        let lam = a as f64;
        for b in 0..grad.m() {
            let mu = b as f64;
            let g = grad.column(a, b);
            for i in 0..d_p {
                let c = (k.0[i][0] * lam + k.0[i][1] * mu + phases[i]).cos() * g[i];
                dk[i][0] += c * lam;
                dk[i][1] += c * mu;
            }
        }
    }
    dk
}

/// `d_p` phases, i.i.d. uniform on `[0, 2 pi)`.
pub fn sample_phases<R: Rng + ?Sized>(d_p: usize, rng: &mut R) -> Vec<f64> {
    (0..d_p).map(|_| rng.random_range(0.0..TAU)).collect()
}

/// Which parts a noise tensor was assembled from.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Provenance {
    pub global: Option<GlobalMode>,
    pub waves: Option<WaveSource>,
    pub phases: Vec<f64>,
}

/// Assembled `L x M x d` generator input, channels ordered `[local | global | periodic]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTensor {
    pub values: Grid,
    pub spec: NoiseSpec,
    pub provenance: Provenance,
}

impl NoiseTensor {
    pub fn local(&self) -> Grid {
        self.slice_channels(0, self.spec.d_l)
    }

    pub fn global(&self) -> Grid {
        self.slice_channels(self.spec.d_l, self.spec.d_g)
    }

    pub fn periodic(&self) -> Grid {
        self.slice_channels(self.spec.d_l + self.spec.d_g, self.spec.d_p)
    }

    fn slice_channels(&self, start: usize, count: usize) -> Grid {
        let (l, m) = (self.values.l(), self.values.m());
        let mut out = Grid::zeros(l, m, count);
        for a in 0..l {
            for b in 0..m {
                out.column_mut(a, b)
                    .copy_from_slice(&self.values.column(a, b)[start..start + count]);
            }
        }
        out
    }

    /// Single-sample network input of shape (1, d, L, M).
    pub fn to_tensor(&self) -> Tensor {
        grid_to_tensor(&self.values)
    }
}

/// (L, M, C) grid -> (1, C, L, M) tensor.
pub fn grid_to_tensor(g: &Grid) -> Tensor {
    let (l, m, c) = (g.l(), g.m(), g.channels());
    let mut t = Tensor::zeros([1, c, l, m]);
    for a in 0..l {
        for b in 0..m {
            for (i, &v) in g.column(a, b).iter().enumerate() {
                t.set(0, i, a, b, v);
            }
        }
    }
    t
}

/// Sample `n` of a (N, C, L, M) tensor back to an (L, M, C) grid.
pub fn tensor_to_grid(t: &Tensor, n: usize) -> Grid {
    let [_, c, l, m] = t.shape();
    let mut g = Grid::zeros(l, m, c);
    for i in 0..c {
        for a in 0..l {
            for b in 0..m {
                g.set(a, b, i, t.at(n, i, a, b));
            }
        }
    }
    g
}

/// Concatenate the three parts along the channel axis.
pub fn assemble_noise(spec: &NoiseSpec, local: &Grid, global: &Grid, periodic: &Grid) -> Result<NoiseTensor> {
    let (l, m) = (local.l(), local.m());
    for (name, part, want) in [
        ("local", local, spec.d_l),
        ("global", global, spec.d_g),
        ("periodic", periodic, spec.d_p),
    ] {
        if part.channels() != want {
            return Err(shape_err(format!(
                "{name} part has {} channels, spec says {want}",
                part.channels()
            )));
        }
        // empty-channel parts carry no spatial information to check
        if want > 0 && (part.l() != l || part.m() != m) {
            return Err(shape_err(format!(
                "{name} part is {}x{}, expected {l}x{m}",
                part.l(),
                part.m()
            )));
        }
    }
    let d = spec.channels();
    let mut values = Grid::zeros(l, m, d);
    for a in 0..l {
        for b in 0..m {
            let col = values.column_mut(a, b);
            col[..spec.d_l].copy_from_slice(local.column(a, b));
            if spec.d_g > 0 {
                col[spec.d_l..spec.d_l + spec.d_g].copy_from_slice(global.column(a, b));
            }
            if spec.d_p > 0 {
                col[spec.d_l + spec.d_g..].copy_from_slice(periodic.column(a, b));
            }
        }
    }
    Ok(NoiseTensor {
        values,
        spec: spec.with_extent(l, m),
        provenance: Provenance::default(),
    })
}

/// Everything random in one noise tensor: the local field, the global
/// construction and the phases. Sampled once, it can be re-assembled against
/// any MLP (which is how gradients reach the MLP during training).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub local: Grid,
    pub global: Option<GlobalMode>,
    pub phases: Vec<f64>,
}

impl NoiseDraw {
    /// Fresh local field, broadcast global vector and phases.
    pub fn sample<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Self {
        let local = build_local(spec, rng);
        let global = (spec.d_g > 0).then(|| GlobalMode::sample_broadcast(spec, rng));
        let phases = sample_phases(spec.d_p, rng);
        Self { local, global, phases }
    }

    /// Assemble `[Z^l, Z^g, phi(Z^g)]`. Wave numbers are evaluated pointwise
    /// when the global field varies over space.
    pub fn assemble(&self, spec: &NoiseSpec, mlp: Option<&WaveNumberMlp>) -> Result<NoiseTensor> {
        let spec = spec.with_extent(self.local.l(), self.local.m());
        let global = match &self.global {
            Some(mode) => Some(build_global(&spec, mode)?),
            None if spec.d_g > 0 => return Err(config_err("noise draw lacks a global construction")),
            None => None,
        };
        let global_grid = global
            .as_ref()
            .map(|g| g.values.clone())
            .unwrap_or_else(|| Grid::zeros(spec.l, spec.m, 0));
        let (periodic, waves) = if spec.d_p > 0 {
            let mlp = mlp.ok_or_else(|| config_err("periodic channels need a wave-number MLP"))?;
            let waves = match &global {
                Some(g) if g.is_uniform() => WaveSource::Uniform(mlp_wavenumbers(mlp, g.values.column(0, 0))?),
                Some(g) => WaveSource::from_global(mlp, &g.values)?,
                None => WaveSource::Uniform(mlp_wavenumbers(mlp, &[])?),
            };
            let p = build_periodic_field(&waves, &self.phases, spec.l, spec.m)?;
            (p.values, Some(waves))
        } else {
            (Grid::zeros(spec.l, spec.m, 0), None)
        };
        let mut z = assemble_noise(&spec, &self.local, &global_grid, &periodic)?;
        z.provenance = Provenance {
            global: self.global.clone(),
            waves,
            phases: self.phases.clone(),
        };
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_local_part() {
        let spec = NoiseSpec::new(0, 0, 2, 4, 5);
        let g = build_local(&spec, &mut rng(0));
        assert_eq!((g.l(), g.m(), g.channels()), (4, 5, 0));
        assert!(g.data().is_empty());
    }

    #[test]
    fn local_samples_have_uniform_moments() {
        let spec = NoiseSpec::new(10, 0, 0, 100, 100);
        let g = build_local(&spec, &mut rng(3));
        assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // independent oracle: uniform on [-1, 1] has mean 0, sd 1/sqrt(3)
        let n = g.data().len() as f64;
        let mean = g.data().iter().sum::<f64>() / n;
        let sd = (1.0f64 / 3.0).sqrt();
        assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean}");
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 3.0).abs() < 0.01, "var {var}");
        assert_eq!(build_local(&spec, &mut rng(3)), g);
    }

    #[test]
    fn broadcast_repeats_the_vector() {
        let spec = NoiseSpec::new(0, 3, 0, 4, 6);
        let v = vec![0.25, -0.5, 0.75];
        let f = build_global(&spec, &GlobalMode::Broadcast { z: v.clone() }).unwrap();
        for a in 0..4 {
            for b in 0..6 {
                assert_eq!(f.values.column(a, b), &v[..]);
            }
        }
        assert!(f.is_uniform());
    }

    #[test]
    fn global_rejects_bad_requests() {
        let none = NoiseSpec::new(1, 0, 0, 4, 4);
        assert!(build_global(&none, &GlobalMode::Broadcast { z: vec![] }).is_err());
        let spec = NoiseSpec::new(0, 2, 0, 4, 6);
        let quilt = GlobalMode::sample_quilt(&spec, 5, &mut rng(0));
        assert!(build_global(&spec, &quilt).is_err());
        assert!(build_global(&spec, &GlobalMode::Broadcast { z: vec![1.0] }).is_err());
    }

    #[test]
    fn bilinear_identical_corners_is_constant() {
        let spec = NoiseSpec::new(0, 2, 0, 5, 7);
        let v = vec![0.3, -0.9];
        let mode = GlobalMode::Bilinear {
            corners: [v.clone(), v.clone(), v.clone(), v.clone()],
        };
        let f = build_global(&spec, &mode).unwrap();
        for x in f.values.data().chunks(2) {
            assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] + 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_center_and_corners() {
        let spec = NoiseSpec::new(0, 1, 0, 3, 3);
        let (a, b, c, d) = (0.1, 0.7, -0.4, 0.9);
        let mode = GlobalMode::Bilinear {
            corners: [vec![a], vec![b], vec![c], vec![d]],
        };
        let f = build_global(&spec, &mode).unwrap();
        // hand-evaluated weights (0.5, 0.5)
        assert!((f.values.get(1, 1, 0) - (a + b + c + d) / 4.0).abs() < 1e-15);
        assert_eq!(f.values.get(0, 0, 0), a);
        assert_eq!(f.values.get(0, 2, 0), b);
        assert_eq!(f.values.get(2, 0, 0), c);
        assert_eq!(f.values.get(2, 2, 0), d);
        // edge midpoint between a and b
        assert!((f.values.get(0, 1, 0) - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_mlp_collapses_to_biases() {
        let c = wavenumber_means(3);
        let mlp = WaveNumberMlp::from_parts(
            2,
            4,
            3,
            vec![0.3; 8],
            vec![0.1; 4],
            vec![0.0; 12],
            vec![0.0; 12],
            c.clone(),
            c.clone(),
        )
        .unwrap();
        let k = mlp_wavenumbers(&mlp, &[0.5, -0.5]).unwrap();
        assert_eq!(k.row(0), c);
        assert_eq!(k.row(1), c);
    }

    #[test]
    fn mlp_without_global_part_returns_biases() {
        let spec = NoiseSpec::new(10, 0, 2, 4, 4);
        let mlp = init_wavenumber_mlp(&spec, DEFAULT_HIDDEN, 9).unwrap();
        assert_eq!(mlp.params().len(), 2);
        let k = mlp_wavenumbers(&mlp, &[]).unwrap();
        assert_eq!(k.row(0), mlp.b1.value);
        assert_eq!(k.row(1), mlp.b2.value);
        // input ignored when d_g = 0
        assert_eq!(mlp_wavenumbers(&mlp, &[1.0, 2.0]).unwrap(), k);
    }

    /// Straight-line evaluation of the two-head MLP.
    fn mlp_oracle(
        w: &[[f64; 2]; 3],
        b: &[f64; 3],
        w1: &[[f64; 3]; 2],
        w2: &[[f64; 3]; 2],
        b1: &[f64; 2],
        b2: &[f64; 2],
        z: &[f64; 2],
    ) -> [[f64; 2]; 2] {
        let mut hid = [0.0; 3];
        for j in 0..3 {
            let v = w[j][0] * z[0] + w[j][1] * z[1] + b[j];
            hid[j] = if v > 0.0 { v } else { 0.0 };
        }
        let mut k = [[0.0; 2]; 2];
        for i in 0..2 {
            k[i][0] = w1[i][0] * hid[0] + w1[i][1] * hid[1] + w1[i][2] * hid[2] + b1[i];
            k[i][1] = w2[i][0] * hid[0] + w2[i][1] * hid[1] + w2[i][2] * hid[2] + b2[i];
        }
        k
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut r = rng(21);
        let mut u = || r.random_range(-1.0..1.0);
        let w = [[u(), u()], [u(), u()], [u(), u()]];
        let b = [u(), u(), u()];
        let w1 = [[u(), u(), u()], [u(), u(), u()]];
        let w2 = [[u(), u(), u()], [u(), u(), u()]];
        let b1 = [u(), u()];
        let b2 = [u(), u()];
        let z = [u(), u()];
        let mlp = WaveNumberMlp::from_parts(
            2,
            3,
            2,
            w.concat(),
            b.to_vec(),
            w1.concat(),
            w2.concat(),
            b1.to_vec(),
            b2.to_vec(),
        )
        .unwrap();
        let k = mlp_wavenumbers(&mlp, &z).unwrap();
        let want = mlp_oracle(&w, &b, &w1, &w2, &b1, &b2, &z);
        for i in 0..2 {
            for r in 0..2 {
                let rel = (k.0[i][r] - want[i][r]).abs() / want[i][r].abs().max(1e-300);
                assert!(rel <= 1e-12);
            }
        }
        assert!(mlp_wavenumbers(&mlp, &[1.0]).is_err());
    }

    #[test]
    fn init_means_are_evenly_spread() {
        assert_eq!(wavenumber_means(1), vec![PI]);
        let c = wavenumber_means(4);
        let want = [PI / 4.0, PI / 2.0, 3.0 * PI / 4.0, PI];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c.iter().all(|&v| v > 0.0 && v <= PI));
    }

    #[test]
    fn init_bias_mean_matches_c() {
        let spec = NoiseSpec::new(0, 0, 4, 1, 1);
        let n = 10_000;
        let mut sum = vec![0.0; 4];
        for seed in 0..n {
            let mlp = init_wavenumber_mlp(&spec, DEFAULT_HIDDEN, seed).unwrap();
            for (s, v) in sum.iter_mut().zip(&mlp.b1.value) {
                *s += v;
            }
        }
        let c = wavenumber_means(4);
        for (s, ci) in sum.iter().zip(&c) {
            let mean = s / n as f64;
            let sigma = 0.02 * ci;
            assert!((mean - ci).abs() <= 4.0 * sigma / (n as f64).sqrt(), "{mean} vs {ci}");
        }
    }

    #[test]
    fn init_hidden_weights_are_small_gaussians() {
        let spec = NoiseSpec::new(0, 40, 4, 1, 1);
        let mlp = init_wavenumber_mlp(&spec, DEFAULT_HIDDEN, 1).unwrap();
        assert_eq!(mlp.params().len(), 6);
        let w = &mlp.params()[0].value;
        assert_eq!(w.len(), 60 * 40);
        let sd = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "{sd}");
        assert!(init_wavenumber_mlp(&NoiseSpec::new(1, 1, 0, 1, 1), 60, 0).is_err());
    }

    #[test]
    fn periodic_field_examples() {
        let zero = build_periodic_field(&WaveSource::Uniform(WaveNumbers(vec![[0.0, 0.0]])), &[0.0], 4, 4).unwrap();
        assert!(zero.values.data().iter().all(|&v| v == 0.0));

        let alt = build_periodic_field(&WaveSource::Uniform(WaveNumbers(vec![[PI, 0.0]])), &[PI / 2.0], 6, 3).unwrap();
        for a in 0..6 {
            for b in 0..3 {
                let want = if a % 2 == 0 { 1.0 } else { -1.0 };
                assert!((alt.values.get(a, b, 0) - want).abs() < 1e-12);
            }
        }

        let k = PI / 8.0;
        let f = build_periodic_field(&WaveSource::Uniform(WaveNumbers(vec![[k, 0.0]])), &[0.0], 32, 5).unwrap();
        for a in 0..32 {
            let oracle = (k * a as f64).sin();
            for b in 0..5 {
                assert!((f.values.get(a, b, 0) - oracle).abs() < 1e-12);
            }
            if a + 16 < 32 {
                assert!((f.values.get(a, 0, 0) - f.values.get(a + 16, 0, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aliasing_by_two_pi() {
        let k = WaveNumbers(vec![[0.7, -1.3], [2.9, 0.4]]);
        let shifted = WaveNumbers(k.0.iter().map(|v| [v[0] + TAU, v[1]]).collect());
        let phases = [0.3, 5.0];
        let a = build_periodic_field(&WaveSource::Uniform(k), &phases, 9, 11).unwrap();
        let b = build_periodic_field(&WaveSource::Uniform(shifted), &phases, 9, 11).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn mlp_gradient_through_periodic_field() {
        let spec = NoiseSpec::new(0, 3, 2, 5, 4);
        let mut mlp = init_wavenumber_mlp(&spec, 4, 17).unwrap();
        // widen the weights so hidden units are active and gradients non-trivial
        for p in mlp.params_mut() {
            if p.name != "mlp.b1" && p.name != "mlp.b2" {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 20.0 + 0.05 * (i as f64).sin());
            }
        }
        let z = [0.4, -0.7, 0.2];
        let phases = [1.1, 4.0];
        let objective = |m: &WaveNumberMlp| -> f64 {
            let k = mlp_wavenumbers(m, &z).unwrap();
            build_periodic_field(&WaveSource::Uniform(k), &phases, 5, 4)
                .unwrap()
                .values
                .data()
                .iter()
                .sum()
        };
        let (k, cache) = mlp.forward(&z).unwrap();
        let ones = Grid::from_vec(5, 4, 2, vec![1.0; 40]).unwrap();
        let dk = periodic_field_backward(&k, &phases, &ones);
        mlp.backward(&cache, &dk);
        let h = 1e-5;
        for pi in 0..mlp.params().len() {
            for i in 0..mlp.params()[pi].len() {
                let analytic = mlp.params()[pi].grad[i];
                let mut up = mlp.clone();
                up.params_mut()[pi].value[i] += h;
                let mut dn = mlp.clone();
                dn.params_mut()[pi].value[i] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let denom = fd.abs().max(analytic.abs());
                if denom < 1e-9 {
                    continue;
                }
                assert!(
                    (fd - analytic).abs() / denom <= 1e-4,
                    "{}[{i}] fd {fd} analytic {analytic}",
                    mlp.params()[pi].name
                );
            }
        }
    }

    #[test]
    fn phases_are_in_range_with_uniform_mean() {
        assert!(sample_phases(0, &mut rng(0)).is_empty());
        let n = 100_000;
        let p = sample_phases(n, &mut rng(5));
        assert!(p.iter().all(|&v| (0.0..TAU).contains(&v)));
        let mean = p.iter().sum::<f64>() / n as f64;
        let sigma = TAU / 12f64.sqrt();
        assert!((mean - PI).abs() <= 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn assemble_orders_channels() {
        let spec = NoiseSpec::new(10, 0, 2, 3, 4);
        let mut r = rng(1);
        let local = build_local(&spec, &mut r);
        let p = build_periodic_field(
            &WaveSource::Uniform(WaveNumbers(vec![[0.5, 0.1], [0.2, 1.0]])),
            &[0.0, 1.0],
            3,
            4,
        )
        .unwrap();
        let z = assemble_noise(&spec, &local, &Grid::zeros(3, 4, 0), &p.values).unwrap();
        assert_eq!(z.values.channels(), 12);
        assert_eq!(z.local(), local);
        assert_eq!(z.periodic(), p.values);

        let dtd = NoiseSpec::new(20, 40, 4, 2, 2);
        let draw = NoiseDraw::sample(&dtd, &mut r);
        let mlp = init_wavenumber_mlp(&dtd, DEFAULT_HIDDEN, 0).unwrap();
        assert_eq!(draw.assemble(&dtd, Some(&mlp)).unwrap().values.channels(), 64);

        let only = NoiseSpec::new(1, 0, 0, 3, 3);
        let l = build_local(&only, &mut r);
        let z = assemble_noise(&only, &l, &Grid::zeros(3, 3, 0), &Grid::zeros(3, 3, 0)).unwrap();
        assert_eq!(z.values, l);

        assert!(assemble_noise(&spec, &l, &Grid::zeros(3, 4, 0), &p.values).is_err());
        let short = build_local(&spec.with_extent(2, 4), &mut r);
        assert!(assemble_noise(&spec, &short, &Grid::zeros(3, 4, 0), &p.values).is_err());
    }

    #[test]
    fn wrap_pad_wraps() {
        let g = Grid::from_vec(2, 3, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = g.wrap_pad(1);
        assert_eq!((p.l(), p.m()), (4, 5));
        assert_eq!(p.get(0, 0, 0), 5.0);
        assert_eq!(p.get(1, 1, 0), 0.0);
        assert_eq!(p.get(3, 4, 0), 0.0);
        assert_eq!(p.window(1, 1, 2, 3), g);
    }

    proptest! {
        #[test]
        fn assembled_noise_respects_ranges_and_is_deterministic(
            d_l in 0usize..4, d_g in 0usize..3, d_p in 0usize..3,
            l in 1usize..6, m in 1usize..6, seed in any::<u64>()
        ) {
            prop_assume!(d_l + d_g + d_p > 0);
            let spec = NoiseSpec::new(d_l, d_g, d_p, l, m);
            let mlp = (d_p > 0).then(|| init_wavenumber_mlp(&spec, 8, seed).unwrap());
            let make = || {
                let draw = NoiseDraw::sample(&spec, &mut rng(seed));
                draw.assemble(&spec, mlp.as_ref()).unwrap()
            };
            let z = make();
            prop_assert!(z.local().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(z.periodic().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let g = z.global();
            for a in 0..l {
                for b in 0..m {
                    prop_assert_eq!(g.column(a, b), g.column(0, 0));
                }
            }
            prop_assert_eq!(make(), z);
        }

        #[test]
        fn quilt_tiles_are_constant(l in 1usize..12, m in 1usize..12, delta in 1usize..5, seed in any::<u64>()) {
            prop_assume!(delta <= l.min(m));
            let spec = NoiseSpec::new(0, 2, 0, l, m);
            let mode = GlobalMode::sample_quilt(&spec, delta, &mut rng(seed));
            let f = build_global(&spec, &mode).unwrap();
            for a in 0..l {
                for b in 0..m {
                    let anchor = f.values.column((a / delta) * delta, (b / delta) * delta);
                    prop_assert_eq!(f.values.column(a, b), anchor);
                }
            }
        }

        #[test]
        fn bilinear_recovers_corners(l in 2usize..9, m in 2usize..9, seed in any::<u64>()) {
            let spec = NoiseSpec::new(0, 3, 0, l, m);
            let mode = GlobalMode::sample_bilinear(&spec, &mut rng(seed));
            let GlobalMode::Bilinear { corners } = &mode else { unreachable!() };
            let f = build_global(&spec, &mode).unwrap();
            prop_assert_eq!(f.values.column(0, 0), &corners[0][..]);
            prop_assert_eq!(f.values.column(0, m - 1), &corners[1][..]);
            prop_assert_eq!(f.values.column(l - 1, 0), &corners[2][..]);
            prop_assert_eq!(f.values.column(l - 1, m - 1), &corners[3][..]);
        }
    }
}
