//! Spatially marginalized adversarial training.
//!
//! The discriminator emits an `L x M` probability field; both losses average
//! the per-position GAN terms over that field (and over the minibatch). The
//! generator uses the non-saturating `-log D(G(Z))` objective. Gradients of
//! the generator loss flow through the periodic channels back into the
//! wave-number MLP.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_patch_batch, ImageSource};
use crate::error::{config_err, Error, Result};
use crate::netspec::{Discriminator, Generator, NetSpec};
use crate::nn::{sigmoid, Param};
use crate::noise::{
    init_wavenumber_mlp, periodic_field_backward, tensor_to_grid, Grid, MlpCache, NoiseDraw, NoiseSpec,
    NoiseTensor, WaveNumberMlp, WaveNumbers, DEFAULT_HIDDEN,
};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub minibatch: usize,
    pub patch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Hidden width of the wave-number MLP.
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            minibatch: 25,
            patch_size: 160,
            steps: 2000,
            seed: 0,
            log_every: 10,
            checkpoint_every: 500,
            mlp_hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err("train.learning_rate must be a finite non-negative number"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if self.minibatch == 0 {
            return Err(config_err("train.minibatch must be >= 1"));
        }
        if self.patch_size == 0 {
            return Err(config_err("train.patch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Mean of `log(clamp(p))`.
fn mean_log(p: &[f64]) -> f64 {
    p.iter().map(|&v| v.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()).sum::<f64>() / p.len() as f64
}

/// `-[mean log(1 - d_fake) + mean log(d_real)]` over the probability fields.
pub fn discriminator_loss(d_fake: &[f64], d_real: &[f64]) -> f64 {
    let fake: Vec<f64> = d_fake.iter().map(|v| 1.0 - v).collect();
    -(mean_log(&fake) + mean_log(d_real))
}

/// Non-saturating generator loss `-mean log(d_fake)`.
pub fn generator_loss(d_fake: &[f64]) -> f64 {
    -mean_log(d_fake)
}

/// Generator, discriminator and wave-number MLP for one noise layout.
#[derive(Clone, Debug)]
pub struct Model {
    /// Noise layout at training extent (`L = M = patch_size / 2^depth`).
    pub noise: NoiseSpec,
    pub net: NetSpec,
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// Present when `d_p > 0`.
    pub mlp: Option<WaveNumberMlp>,
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r.next_u64()
}

/// Purposes of the per-step random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StepStream {
    DiscriminatorNoise = 0,
    GeneratorNoise = 1,
    RealPatches = 2,
}

/// The random stream for one purpose at one training step. Depends only on
/// `(seed, step, purpose)`, which makes resumed runs replay exactly.
pub fn step_rng(seed: u64, step: u64, stream: StepStream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(64 + step.wrapping_mul(4).wrapping_add(stream as u64));
    r
}

impl Model {
    pub fn new(noise: &NoiseSpec, net: &NetSpec, mlp_hidden: usize, seed: u64) -> Result<Self> {
        noise.validate()?;
        net.validate()?;
        let mlp = if noise.d_p > 0 {
            Some(init_wavenumber_mlp(noise, mlp_hidden, derive_seed(seed, 3))?)
        } else {
            None
        };
        Ok(Self {
            noise: noise.clone(),
            net: net.clone(),
            generator: Generator::new(net, noise.channels(), derive_seed(seed, 1))?,
            discriminator: Discriminator::new(net, derive_seed(seed, 2))?,
            mlp,
        })
    }

    /// Generator and MLP parameters, in a fixed order.
    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.generator.params_mut();
        if let Some(m) = &mut self.mlp {
            v.extend(m.params_mut());
        }
        v
    }

    pub fn generator_params(&self) -> Vec<&Param> {
        let mut v = self.generator.params();
        if let Some(m) = &self.mlp {
            v.extend(m.params());
        }
        v
    }
}

/// A sampled minibatch of noise with the MLP intermediates needed for backprop.
pub struct NoiseBatch {
    pub draws: Vec<NoiseDraw>,
    pub tensor: Tensor,
    waves: Vec<WaveNumbers>,
    caches: Vec<MlpCache>,
}

/// Fresh `[Z^l, Z^g, phi(z^g)]` per element: independent local fields,
/// broadcast global vectors and phases.
pub fn sample_noise_draws<R: rand::Rng + ?Sized>(spec: &NoiseSpec, batch: usize, rng: &mut R) -> Vec<NoiseDraw> {
    (0..batch).map(|_| NoiseDraw::sample(spec, rng)).collect()
}

pub fn make_training_batch<R: rand::Rng + ?Sized>(
    spec: &NoiseSpec,
    mlp: Option<&WaveNumberMlp>,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<NoiseTensor>> {
    if batch == 0 {
        return Err(config_err("batch must be >= 1"));
    }
    sample_noise_draws(spec, batch, rng)
        .iter()
        .map(|d| d.assemble(spec, mlp))
        .collect()
}

impl NoiseBatch {
    pub fn assemble(model: &Model, draws: Vec<NoiseDraw>) -> Result<Self> {
        let mut waves = Vec::with_capacity(draws.len());
        let mut caches = Vec::with_capacity(draws.len());
        let mut parts = Vec::with_capacity(draws.len());
        for d in &draws {
            if let Some(mlp) = &model.mlp {
                let z_g: Vec<f64> = match &d.global {
                    Some(crate::noise::GlobalMode::Broadcast { z }) => z.clone(),
                    Some(_) => return Err(config_err("training noise must use broadcast global vectors")),
                    None => Vec::new(),
                };
                let (k, cache) = mlp.forward(&z_g)?;
                waves.push(k);
                caches.push(cache);
            }
            parts.push(d.assemble(&model.noise, model.mlp.as_ref())?.to_tensor());
        }
        Ok(Self {
            draws,
            tensor: Tensor::stack(&parts)?,
            waves,
            caches,
        })
    }
}

/// Discriminator loss on a generated and a real batch; accumulates the
/// discriminator's parameter gradients (after zeroing them).
/// Returns `(loss, mean D(real), mean D(fake))`.
pub fn discriminator_backprop(model: &mut Model, fake: &Tensor, real: &Tensor) -> Result<(f64, f64, f64)> {
    let d = &mut model.discriminator;
    d.params_mut().into_iter().for_each(Param::zero_grad);
    let (fake_logits, fake_tape) = d.logits_train(fake)?;
    let (real_logits, real_tape) = d.logits_train(real)?;
    let p_fake: Vec<f64> = fake_logits.data().iter().map(|&z| sigmoid(z)).collect();
    let p_real: Vec<f64> = real_logits.data().iter().map(|&z| sigmoid(z)).collect();
    let loss = discriminator_loss(&p_fake, &p_real);
    // gradients are taken through the logits; clamping only guards the logs
    let nf = p_fake.len() as f64;
    let nr = p_real.len() as f64;
    let g_fake = Tensor::from_vec(fake_logits.shape(), p_fake.iter().map(|p| p / nf).collect())?;
    let g_real = Tensor::from_vec(real_logits.shape(), p_real.iter().map(|p| -(1.0 - p) / nr).collect())?;
    d.backward(&fake_tape, &g_fake, true, false);
    d.backward(&real_tape, &g_real, true, false);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((loss, mean(&p_real), mean(&p_fake)))
}

/// Generator loss for a noise batch; accumulates gradients of the generator
/// and the wave-number MLP (after zeroing them). The discriminator's
/// parameter gradients are left untouched.
pub fn generator_backprop(model: &mut Model, batch: &NoiseBatch) -> Result<f64> {
    model.generator_params_mut().into_iter().for_each(Param::zero_grad);
    let (fake, g_tape) = model.generator.forward_train(&batch.tensor)?;
    let (logits, d_tape) = model.discriminator.logits_train(&fake)?;
    let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let loss = generator_loss(&p);
    let n = p.len() as f64;
    let g_logits = Tensor::from_vec(logits.shape(), p.iter().map(|p| -(1.0 - p) / n).collect())?;
    let d_img = model
        .discriminator
        .backward(&d_tape, &g_logits, false, true)
        .expect("input gradient requested");
    let dz = model.generator.backward(&g_tape, &d_img);
    if let Some(mlp) = &mut model.mlp {
        let spec = &model.noise;
        let start = spec.d_l + spec.d_g;
        for (i, (k, cache)) in batch.waves.iter().zip(&batch.caches).enumerate() {
            let full = tensor_to_grid(&dz, i);
            let mut grad = Grid::zeros(full.l(), full.m(), spec.d_p);
            for a in 0..full.l() {
                for b in 0..full.m() {
                    grad.column_mut(a, b)
                        .copy_from_slice(&full.column(a, b)[start..start + spec.d_p]);
                }
            }
            let dk = periodic_field_backward(k, &batch.draws[i].phases, &grad);
            mlp.backward(cache, &dk);
        }
    }
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// The complete training state: networks, MLP, optimizer moments, layouts,
/// configuration and step counter. Random streams are derived from
/// `(config.seed, step)`, so this is everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub opt_d: Adam,
    pub opt_g: Adam,
    pub step: u64,
}

impl Checkpoint {
    /// Fresh state; `noise.L`/`noise.M` must equal `patch_size / 2^depth`.
    pub fn new(noise: &NoiseSpec, net: &NetSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let f = net.upsample_factor();
        if noise.l * f != config.patch_size || noise.m * f != config.patch_size {
            return Err(config_err(format!(
                "patch size {} must equal 2^depth * L = {} x {} (and likewise for M = {})",
                config.patch_size, f, noise.l, noise.m
            )));
        }
        let adam = || Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2);
        Ok(Self {
            model: Model::new(noise, net, config.mlp_hidden, config.seed)?,
            config: config.clone(),
            opt_d: adam(),
            opt_g: adam(),
            step: 0,
        })
    }

    /// The two noise batches a given step consumes.
    pub fn step_noise(&self, step: u64) -> (Vec<NoiseDraw>, Vec<NoiseDraw>) {
        let b = self.config.minibatch;
        let s = self.config.seed;
        (
            sample_noise_draws(&self.model.noise, b, &mut step_rng(s, step, StepStream::DiscriminatorNoise)),
            sample_noise_draws(&self.model.noise, b, &mut step_rng(s, step, StepStream::GeneratorNoise)),
        )
    }
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// One ADAM update of D, then one of {G, MLP}, each on fresh noise.
pub fn train_step(state: &mut Checkpoint, real: &Tensor) -> Result<Metrics> {
    let p = state.config.patch_size;
    if real.channels() != 3 || real.height() != p || real.width() != p || real.batch() == 0 {
        return Err(Error::Shape(format!(
            "real batch must be (n, 3, {p}, {p}), got {:?}",
            real.shape()
        )));
    }
    let step = state.step;
    let (d_draws, g_draws) = state.step_noise(step);

    let d_batch = NoiseBatch::assemble(&state.model, d_draws)?;
    let (fake, _) = state.model.generator.forward_train(&d_batch.tensor)?;
    let (d_loss, d_real_mean, d_fake_mean) = discriminator_backprop(&mut state.model, &fake, real)?;
    check_finite(step, "discriminator loss", d_loss)?;
    state.opt_d.step(state.model.discriminator.params_mut());

    let g_batch = NoiseBatch::assemble(&state.model, g_draws)?;
    let g_loss = generator_backprop(&mut state.model, &g_batch)?;
    check_finite(step, "generator loss", g_loss)?;
    state.opt_g.step(state.model.generator_params_mut());

    state.step += 1;
    Ok(Metrics {
        step: state.step,
        d_loss,
        g_loss,
        d_real_mean,
        d_fake_mean,
    })
}

pub enum TrainEvent<'a> {
    Metrics(&'a Metrics),
    Checkpoint(&'a Checkpoint),
}

/// Run `train_step` until `config.steps`, drawing real patches from `source`.
/// Emits metrics every `log_every` steps and checkpoints at the start, every
/// `checkpoint_every` steps and at the end.
pub fn train<F>(state: &mut Checkpoint, source: &ImageSource, mut on_event: F) -> Result<()>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    let cfg = state.config.clone();
    let mut last_saved = None;
    if state.step == 0 {
        on_event(TrainEvent::Checkpoint(state))?;
        last_saved = Some(0);
    }
    while state.step < cfg.steps {
        let mut rng = step_rng(cfg.seed, state.step, StepStream::RealPatches);
        let real = sample_patch_batch(source, cfg.patch_size, cfg.minibatch, &mut rng);
        let m = train_step(state, &real)?;
        if cfg.log_every > 0 && m.step % cfg.log_every == 0 {
            on_event(TrainEvent::Metrics(&m))?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint(state))?;
            last_saved = Some(state.step);
        }
    }
    if last_saved != Some(state.step) {
        on_event(TrainEvent::Checkpoint(state))?;
    }
    Ok(())
}
