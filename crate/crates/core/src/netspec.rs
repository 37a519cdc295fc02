//! Symmetric fully convolutional generator and discriminator.
//!
//! The generator stacks `depth` fractionally strided convolutions, each
//! doubling the spatial size; the discriminator mirrors it with stride-2
//! convolutions and emits a probability field instead of a scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, tanh_backward, BatchNorm2d,
    BatchNormCache, Buffer, Conv2d, ConvTranspose2d, Param,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    pub depth: usize,
    pub kernel: usize,
    /// Channels at the highest spatial resolution.
    pub base_channels: usize,
    pub max_channels: usize,
    pub use_batchnorm_g: bool,
    pub use_batchnorm_d: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            depth: 5,
            kernel: 5,
            base_channels: 64,
            max_channels: 512,
            use_batchnorm_g: true,
            use_batchnorm_d: false,
        }
    }
}

impl NetSpec {
    pub fn with_depth(depth: usize) -> Self {
        Self {
            depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err("netspec.depth must be >= 1"));
        }
        if self.depth > 12 {
            return Err(config_err("netspec.depth must be <= 12"));
        }
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(config_err("netspec.kernel must be odd and >= 3"));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(config_err(
                "netspec.base_channels must be >= 1 and <= netspec.max_channels",
            ));
        }
        Ok(())
    }

    /// Channel counts of the `depth - 1` hidden activations, ordered from the
    /// image side: `base, 2*base, 4*base, ...`, capped at `max_channels`.
    pub fn hidden_channels(&self) -> Vec<usize> {
        (0..self.depth.saturating_sub(1))
            .map(|j| (self.base_channels << j.min(30)).min(self.max_channels))
            .collect()
    }

    /// Generator channel sequence from noise to RGB.
    pub fn generator_channels(&self, noise_channels: usize) -> Vec<usize> {
        let mut v = vec![noise_channels];
        v.extend(self.hidden_channels().into_iter().rev());
        v.push(3);
        v
    }

    /// Discriminator channel sequence from RGB to the probability field.
    pub fn discriminator_channels(&self) -> Vec<usize> {
        let mut v = vec![3];
        v.extend(self.hidden_channels());
        v.push(1);
        v
    }

    pub fn upsample_factor(&self) -> usize {
        upsample_factor(self)
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }

    /// Largest distance, in noise units, between a noise position and the
    /// noise-space projection of any pixel it influences. Pixels of noise
    /// cell `y` depend only on noise rows within this radius.
    pub fn noise_radius(&self) -> usize {
        let f = self.upsample_factor();
        let half = (self.receptive_field() - 1) / 2;
        // pixel p of cell y lies in [f*y, f*y + f - 1]; it depends on noise y'
        // with |f*y' - p| <= half.
        (half + f - 1) / f
    }
}

/// Spatial upsampling of the generator: `2^depth`.
pub fn upsample_factor(spec: &NetSpec) -> usize {
    1usize << spec.depth
}

/// Receptive field in pixels: `r_1 = k`, `r_l = 2 (r_{l-1} - 1) + k`.
pub fn receptive_field(spec: &NetSpec) -> usize {
    (1..spec.depth).fold(spec.kernel, |r, _| 2 * (r - 1) + spec.kernel)
}

#[derive(Clone, Debug)]
struct GenLayer {
    conv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

/// Fully convolutional generator `(n, d, L, M) -> (n, 3, 2^depth L, 2^depth M)`.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: NetSpec,
    noise_channels: usize,
    layers: Vec<GenLayer>,
}

/// Activations retained by a training-mode forward pass.
pub struct GeneratorTape {
    inputs: Vec<Tensor>,
    bn: Vec<Option<BatchNormCache>>,
    outputs: Vec<Tensor>,
}

impl Generator {
    pub fn new(spec: &NetSpec, noise_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if noise_channels == 0 {
            return Err(config_err("generator needs at least one noise channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = spec.generator_channels(noise_channels);
        let layers = (0..spec.depth)
            .map(|l| {
                let last = l + 1 == spec.depth;
                let with_bn = !last && spec.use_batchnorm_g;
                let prefix = format!("g.{l}");
                GenLayer {
                    conv: ConvTranspose2d::new(
                        &prefix,
                        ch[l],
                        ch[l + 1],
                        spec.kernel,
                        !with_bn,
                        &mut rng,
                    ),
                    bn: with_bn.then(|| BatchNorm2d::new(&format!("{prefix}.bn"), ch[l + 1], &mut rng)),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            noise_channels,
            layers,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn noise_channels(&self) -> usize {
        self.noise_channels
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        if z.channels() != self.noise_channels {
            return Err(shape_err(format!(
                "generator expects {} noise channels, got {}",
                self.noise_channels,
                z.channels()
            )));
        }
        if z.height() == 0 || z.width() == 0 {
            return Err(shape_err("empty noise tensor"));
        }
        Ok(())
    }

    /// Inference pass; batch normalization uses running statistics, so every
    /// output pixel depends only on noise inside its receptive field.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check_input(z)?;
        let mut x = z.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.conv.forward(&x)?;
            if l == last {
                x.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            } else {
                if let Some(bn) = &layer.bn {
                    x = bn.forward_eval(&x);
                }
                x = relu(&x);
            }
        }
        Ok(x)
    }

    /// Training pass with batch statistics; updates running averages.
    pub fn forward_train(&mut self, z: &Tensor) -> Result<(Tensor, GeneratorTape)> {
        self.check_input(z)?;
        let mut tape = GeneratorTape {
            inputs: Vec::with_capacity(self.layers.len()),
            bn: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = z.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mut y = layer.conv.forward(&x)?;
            tape.inputs.push(x);
            if l == last {
                y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
                tape.bn.push(None);
            } else {
                match &mut layer.bn {
                    Some(bn) => {
                        let (normed, cache) = bn.forward_train(&y);
                        y = normed;
                        tape.bn.push(Some(cache));
                    }
                    None => tape.bn.push(None),
                }
                y = relu(&y);
            }
            tape.outputs.push(y.clone());
            x = y;
        }
        Ok((x, tape))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the noise.
    pub fn backward(&mut self, tape: &GeneratorTape, dout: &Tensor) -> Tensor {
        let mut g = dout.clone();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            let layer = &mut self.layers[l];
            if l == last {
                g = tanh_backward(&tape.outputs[l], &g);
            } else {
                g = relu_backward(&tape.outputs[l], &g);
                if let (Some(bn), Some(cache)) = (&mut layer.bn, &tape.bn[l]) {
                    g = bn.backward(cache, &g);
                }
            }
            g = layer
                .conv
                .backward(&tape.inputs[l], &g, true, true)
                .expect("input gradient requested");
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for layer in &self.layers {
            v.extend(layer.conv.params());
            if let Some(bn) = &layer.bn {
                v.extend(bn.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for layer in &mut self.layers {
            v.extend(layer.conv.params_mut());
            if let Some(bn) = &mut layer.bn {
                v.extend(bn.params_mut());
            }
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .flat_map(|bn| bn.buffers())
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.bn.as_mut())
            .flat_map(|bn| bn.buffers_mut())
            .collect()
    }

    /// Weight tensor shapes, noise side first.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.conv.weight.shape.clone()).collect()
    }
}

#[derive(Clone, Debug)]
struct DiscLayer {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

/// Fully convolutional discriminator `(n, 3, H, W) -> (n, 1, H/2^depth, W/2^depth)`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: NetSpec,
    layers: Vec<DiscLayer>,
}

pub struct DiscriminatorTape {
    inputs: Vec<Tensor>,
    bn: Vec<Option<BatchNormCache>>,
    pre_act: Vec<Tensor>,
}

impl Discriminator {
    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = spec.discriminator_channels();
        let layers = (0..spec.depth)
            .map(|l| {
                let last = l + 1 == spec.depth;
                let with_bn = !last && l > 0 && spec.use_batchnorm_d;
                let prefix = format!("d.{l}");
                DiscLayer {
                    conv: Conv2d::new(&prefix, ch[l], ch[l + 1], spec.kernel, !with_bn, &mut rng),
                    bn: with_bn.then(|| BatchNorm2d::new(&format!("{prefix}.bn"), ch[l + 1], &mut rng)),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let f = self.spec.upsample_factor();
        if x.channels() != 3 {
            return Err(shape_err(format!(
                "discriminator expects 3 channels, got {}",
                x.channels()
            )));
        }
        if x.height() == 0 || x.width() == 0 || x.height() % f != 0 || x.width() % f != 0 {
            return Err(shape_err(format!(
                "discriminator input {}x{} is not divisible by {f}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(&h)?;
            if l != last {
                if let Some(bn) = &layer.bn {
                    h = bn.forward_eval(&h);
                }
                h = leaky_relu(&h);
            }
        }
        Ok(h)
    }

    /// Per-position probability that the covered image region is real.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.map(sigmoid))
    }

    pub fn logits_train(&mut self, x: &Tensor) -> Result<(Tensor, DiscriminatorTape)> {
        self.check_input(x)?;
        let mut tape = DiscriminatorTape {
            inputs: Vec::new(),
            bn: Vec::new(),
            pre_act: Vec::new(),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mut y = layer.conv.forward(&h)?;
            tape.inputs.push(h);
            if l != last {
                match &mut layer.bn {
                    Some(bn) => {
                        let (normed, cache) = bn.forward_train(&y);
                        y = normed;
                        tape.bn.push(Some(cache));
                    }
                    None => tape.bn.push(None),
                }
                tape.pre_act.push(y.clone());
                y = leaky_relu(&y);
            } else {
                tape.bn.push(None);
                tape.pre_act.push(Tensor::zeros([0, 0, 0, 0]));
            }
            h = y;
        }
        Ok((h, tape))
    }

    /// Backpropagates a gradient on the logits. Parameter gradients are
    /// accumulated only when `param_grads`; the image gradient is returned
    /// only when `input_grad`.
    pub fn backward(
        &mut self,
        tape: &DiscriminatorTape,
        dlogits: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let mut g = dlogits.clone();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            let layer = &mut self.layers[l];
            if l != last {
                g = leaky_relu_backward(&tape.pre_act[l], &g);
                if let (Some(bn), Some(cache)) = (&mut layer.bn, &tape.bn[l]) {
                    g = bn.backward(cache, &g);
                }
            }
            let want_dx = l > 0 || input_grad;
            match layer.conv.backward(&tape.inputs[l], &g, param_grads, want_dx) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for layer in &self.layers {
            v.extend(layer.conv.params());
            if let Some(bn) = &layer.bn {
                v.extend(bn.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for layer in &mut self.layers {
            v.extend(layer.conv.params_mut());
            if let Some(bn) = &mut layer.bn {
                v.extend(bn.params_mut());
            }
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .flat_map(|bn| bn.buffers())
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.bn.as_mut())
            .flat_map(|bn| bn.buffers_mut())
            .collect()
    }

    /// Weight tensor shapes, image side first.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.conv.weight.shape.clone()).collect()
    }
}

/// Parametric generator map of a spec (spec operation name).
pub fn build_generator(spec: &NetSpec, noise_channels: usize, seed: u64) -> Result<Generator> {
    Generator::new(spec, noise_channels, seed)
}

pub fn build_discriminator(spec: &NetSpec, seed: u64) -> Result<Discriminator> {
    Discriminator::new(spec, seed)
}
