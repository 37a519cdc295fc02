//! Layers with hand-written backward passes: stride-2 convolution, its
//! transpose, batch normalization, and the pointwise nonlinearities.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{gather_stride2, gemm, scatter_stride2, Tensor};

/// Upper bound on the scratch column matrix built per strip in the
/// transposed convolution forward pass, in values.
const STRIP_BUDGET: usize = 1 << 20;

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let len = value.len();
        debug_assert_eq!(shape.iter().product::<usize>(), len);
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: Vec<usize>,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let len = shape.iter().product();
        let dist = Normal::new(mean, std).expect("finite normal parameters");
        let value = (0..len).map(|_| dist.sample(rng)).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A named non-learnable tensor (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Convolution with stride 2 and "same" zero padding: (n, cin, h, w) -> (n, cout, h/2, w/2).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(
                format!("{prefix}.weight"),
                vec![out_ch, in_ch, kernel, kernel],
                0.0,
                0.02,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{prefix}.bias"), vec![out_ch])),
            in_ch,
            out_ch,
            kernel,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_ch {
            return Err(shape_err(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        if x.height() % 2 != 0 || x.width() % 2 != 0 || x.height() == 0 || x.width() == 0 {
            return Err(shape_err(format!(
                "stride-2 convolution needs even spatial size, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let kk = self.kernel * self.kernel;
        let rows = self.in_ch * kk;
        let mut cols = vec![0.0; rows * oh * ow];
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        for b in 0..n {
            gather_stride2(
                x.sample(b),
                self.in_ch,
                h,
                w,
                self.kernel,
                self.kernel / 2,
                oh,
                ow,
                &mut cols,
            );
            let dst = out.sample_mut(b);
            gemm(
                self.out_ch,
                rows,
                oh * ow,
                &self.weight.value,
                false,
                &cols,
                false,
                dst,
                false,
            );
            if let Some(bias) = &self.bias {
                for (o, plane) in dst.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias.value[o]);
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients (when `param_grads`) and returns the
    /// input gradient (when `input_grad`).
    pub fn backward(
        &mut self,
        x: &Tensor,
        dout: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let kk = self.kernel * self.kernel;
        let rows = self.in_ch * kk;
        let mut cols = vec![0.0; rows * oh * ow];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let g = dout.sample(b);
            if param_grads {
                gather_stride2(
                    x.sample(b),
                    self.in_ch,
                    h,
                    w,
                    self.kernel,
                    self.kernel / 2,
                    oh,
                    ow,
                    &mut cols,
                );
                gemm(
                    self.out_ch,
                    oh * ow,
                    rows,
                    g,
                    false,
                    &cols,
                    true,
                    &mut self.weight.grad,
                    true,
                );
                if let Some(bias) = &mut self.bias {
                    for (o, plane) in g.chunks(oh * ow).enumerate() {
                        bias.grad[o] += plane.iter().sum::<f64>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    self.out_ch,
                    oh * ow,
                    &self.weight.value,
                    true,
                    g,
                    false,
                    &mut cols,
                    false,
                );
                scatter_stride2(
                    &cols,
                    self.in_ch,
                    0,
                    oh,
                    ow,
                    self.kernel,
                    self.kernel / 2,
                    dx.sample_mut(b),
                    h,
                    w,
                );
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Fractionally strided (stride 1/2) convolution: (n, cin, h, w) -> (n, cout, 2h, 2w).
///
/// Realized as the adjoint of [`Conv2d`] with output padding 1, so the
/// output is exactly twice the input size. Weight layout is (cin, cout, k, k).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(
                format!("{prefix}.weight"),
                vec![in_ch, out_ch, kernel, kernel],
                0.0,
                0.02,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{prefix}.bias"), vec![out_ch])),
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.in_ch {
            return Err(shape_err(format!(
                "transposed conv expects {} input channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        let [n, _, h, w] = x.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let rows_per_col = self.out_ch * self.kernel * self.kernel;
        let strip = (STRIP_BUDGET / (rows_per_col * w.max(1))).clamp(1, h.max(1));
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        let mut input = vec![0.0; self.in_ch * strip * w];
        let mut cols = vec![0.0; rows_per_col * strip * w];
        for b in 0..n {
            let src = x.sample(b);
            let dst = out.sample_mut(b);
            if let Some(bias) = &self.bias {
                for (o, plane) in dst.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias.value[o]);
                }
            }
            let mut row0 = 0;
            while row0 < h {
                let rows = strip.min(h - row0);
                let span = rows * w;
                for c in 0..self.in_ch {
                    let from = c * h * w + row0 * w;
                    input[c * span..(c + 1) * span].copy_from_slice(&src[from..from + span]);
                }
                let cols = &mut cols[..rows_per_col * span];
                gemm(
                    rows_per_col,
                    self.in_ch,
                    span,
                    &self.weight.value,
                    true,
                    &input[..self.in_ch * span],
                    false,
                    cols,
                    false,
                );
                scatter_stride2(
                    cols,
                    self.out_ch,
                    row0,
                    rows,
                    w,
                    self.kernel,
                    self.kernel / 2,
                    dst,
                    oh,
                    ow,
                );
                row0 += rows;
            }
        }
        Ok(out)
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dout: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let [n, _, h, w] = x.shape();
        let rows_per_col = self.out_ch * self.kernel * self.kernel;
        let mut cols = vec![0.0; rows_per_col * h * w];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let g = dout.sample(b);
            gather_stride2(
                g,
                self.out_ch,
                2 * h,
                2 * w,
                self.kernel,
                self.kernel / 2,
                h,
                w,
                &mut cols,
            );
            if param_grads {
                gemm(
                    self.in_ch,
                    h * w,
                    rows_per_col,
                    x.sample(b),
                    false,
                    &cols,
                    true,
                    &mut self.weight.grad,
                    true,
                );
                if let Some(bias) = &mut self.bias {
                    for (o, plane) in g.chunks(4 * h * w).enumerate() {
                        bias.grad[o] += plane.iter().sum::<f64>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    self.in_ch,
                    rows_per_col,
                    h * w,
                    &self.weight.value,
                    false,
                    &cols,
                    false,
                    dx.sample_mut(b),
                    false,
                );
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Per-channel batch normalization over (batch, row, column).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    momentum: f64,
    eps: f64,
}

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            gamma: Param::normal(format!("{prefix}.gamma"), vec![channels], 1.0, 0.02, rng),
            beta: Param::zeros(format!("{prefix}.beta"), vec![channels]),
            running_mean: Buffer {
                name: format!("{prefix}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{prefix}.running_var"),
                value: vec![1.0; channels],
            },
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics and folds them into the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels());
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let o = x.offset(b, ch, 0, 0);
                sum += x.data()[o..o + plane].iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                let o = x.offset(b, ch, 0, 0);
                sq += x.data()[o..o + plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let o = x.offset(b, ch, 0, 0);
                for i in o..o + plane {
                    let xh = (x.data()[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + bt;
                }
            }
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean;
            self.running_var.value[ch] = (1.0 - m) * self.running_var.value[ch] + m * unbiased;
        }
        (out, BatchNormCache { xhat, inv_std })
    }

    /// Normalizes with the running statistics; a per-channel affine map.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels());
        let plane = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let istd = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let scale = self.gamma.value[ch] * istd;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for b in 0..n {
                let o = x.offset(b, ch, 0, 0);
                out.data_mut()[o..o + plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dout: &Tensor) -> Tensor {
        let [n, c, h, w] = dout.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(dout.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for b in 0..n {
                let o = dout.offset(b, ch, 0, 0);
                for i in o..o + plane {
                    sum_dy += dout.data()[i];
                    sum_dy_xh += dout.data()[i] * cache.xhat.data()[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch] / count;
            for b in 0..n {
                let o = dout.offset(b, ch, 0, 0);
                for i in o..o + plane {
                    dx.data_mut()[i] =
                        k * (count * dout.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xh);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, &v)| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
    dx
}

/// Gradient through a leaky ReLU given its input.
pub(crate) fn leaky_relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    dx.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(g, &v)| {
            if v <= 0.0 {
                *g *= LEAKY_SLOPE
            }
        });
    dx
}

/// Gradient through tanh given its output.
pub(crate) fn tanh_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, &v)| *g *= 1.0 - v * v);
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct-definition stride-2 convolution used as an oracle.
    fn conv_direct(x: &Tensor, w: &Param, b: &[f64], k: usize) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let cout = w.shape[0];
        let mut out = Tensor::zeros([n, cout, h / 2, wd / 2]);
        let p = (k / 2) as isize;
        for s in 0..n {
            for o in 0..cout {
                for y in 0..h / 2 {
                    for xx in 0..wd / 2 {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = 2 * y as isize + ky as isize - p;
                                    let sx = 2 * xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        acc += w.value[((o * cin + c) * k + ky) * k + kx]
                                            * x.at(s, c, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.set(s, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", 2, 3, 5, true, &mut rng);
        conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor([2, 2, 6, 8], 2);
        let got = conv.forward(&x).unwrap();
        let want = conv_direct(&x, &conv.weight, &conv.bias.as_ref().unwrap().value, 5);
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(conv.forward(&rand_tensor([1, 2, 5, 8], 3)).is_err());
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::new("c", 3, 2, 5, false, &mut rng);
        // A transposed conv sharing the same weight tensor, (cin=2, cout=3).
        let mut tconv = ConvTranspose2d::new("t", 2, 3, 5, false, &mut rng);
        tconv.weight.value = conv.weight.value.clone();
        let u = rand_tensor([1, 3, 8, 6], 5);
        let v = rand_tensor([1, 2, 4, 3], 6);
        let lhs = dot(&conv.forward(&u).unwrap(), &v);
        let tv = tconv.forward(&v).unwrap();
        assert_eq!(tv.shape(), [1, 3, 8, 6]);
        let rhs = dot(&u, &tv);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn check_grads<F>(params: &mut Vec<f64>, analytic: &[f64], mut f: F)
    where
        F: FnMut(&[f64]) -> f64,
    {
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = f(params);
            params[i] = orig - h;
            let dn = f(params);
            params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv2d::new("c", 2, 2, 5, true, &mut rng);
        let x = rand_tensor([2, 2, 4, 4], 8);
        let r = rand_tensor([2, 2, 2, 2], 9);
        let dx = conv.backward(&x, &r, true, true).unwrap();
        let wgrad = conv.weight.grad.clone();
        let mut w = conv.weight.value.clone();
        let base = conv.clone();
        check_grads(&mut w, &wgrad, |wv| {
            let mut c = base.clone();
            c.weight.value = wv.to_vec();
            dot(&c.forward(&x).unwrap(), &r)
        });
        let mut xv = x.data().to_vec();
        check_grads(&mut xv, dx.data(), |xs| {
            let t = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
            dot(&base.forward(&t).unwrap(), &r)
        });
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tconv = ConvTranspose2d::new("t", 2, 2, 5, true, &mut rng);
        let x = rand_tensor([2, 2, 2, 3], 11);
        let r = rand_tensor([2, 2, 4, 6], 12);
        let dx = tconv.backward(&x, &r, true, true).unwrap();
        let base = tconv.clone();
        let mut w = base.weight.value.clone();
        check_grads(&mut w, &tconv.weight.grad, |wv| {
            let mut c = base.clone();
            c.weight.value = wv.to_vec();
            dot(&c.forward(&x).unwrap(), &r)
        });
        let mut b = base.bias.as_ref().unwrap().value.clone();
        check_grads(&mut b, &tconv.bias.as_ref().unwrap().grad, |bv| {
            let mut c = base.clone();
            c.bias.as_mut().unwrap().value = bv.to_vec();
            dot(&c.forward(&x).unwrap(), &r)
        });
        let mut xv = x.data().to_vec();
        check_grads(&mut xv, dx.data(), |xs| {
            let t = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
            dot(&base.forward(&t).unwrap(), &r)
        });
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut bn = BatchNorm2d::new("bn", 2, &mut rng);
        let x = rand_tensor([3, 2, 2, 2], 14);
        let r = rand_tensor([3, 2, 2, 2], 15);
        let base = bn.clone();
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &r);
        let mut xv = x.data().to_vec();
        check_grads(&mut xv, dx.data(), |xs| {
            let mut b = base.clone();
            let t = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
            dot(&b.forward_train(&t).0, &r)
        });
        let mut g = base.gamma.value.clone();
        check_grads(&mut g, &bn.gamma.grad, |gv| {
            let mut b = base.clone();
            b.gamma.value = gv.to_vec();
            dot(&b.forward_train(&x).0, &r)
        });
    }

    #[test]
    fn batchnorm_running_stats_track_batch_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut bn = BatchNorm2d::new("bn", 1, &mut rng);
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward_train(&x);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3, blended with the initial 1.0
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
