//! Dense row-major 4-D tensors in (batch, channel, row, column) order and the
//! few matrix kernels the convolution layers are built from.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(format!(
                "tensor shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Number of values in one batch element.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w).max(1);
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copy out a spatial window `[y0, y0+h) x [x0, x0+w)` of every sample.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let [n, c, hh, ww] = self.shape;
        assert!(y0 + h <= hh && x0 + w <= ww, "crop out of bounds");
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let src = self.offset(b, ch, y0 + y, x0);
                    let dst = out.offset(b, ch, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with optional transposes.
/// `a` is stored as (m x k) or, transposed, (k x m); likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly the sizes the strides describe.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather the stride-2 patches of a (channels, 2h', 2w')-like plane set into a
/// (channels*k*k, out_h*out_w) matrix. Row `(c, ky, kx)`, column `(y, x)` holds
/// `src[c, 2y+ky-pad, 2x+kx-pad]`, zero outside the source.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather_stride2(
    src: &[f64],
    channels: usize,
    src_h: usize,
    src_w: usize,
    kernel: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [f64],
) {
    let plane = out_h * out_w;
    debug_assert_eq!(cols.len(), channels * kernel * kernel * plane);
    for c in 0..channels {
        let src_c = &src[c * src_h * src_w..(c + 1) * src_h * src_w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..out_h {
                    let sy = (2 * y + ky) as isize - pad as isize;
                    let dst_row = &mut dst[y * out_w..(y + 1) * out_w];
                    if sy < 0 || sy >= src_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src_c[sy as usize * src_w..(sy as usize + 1) * src_w];
                    for (x, d) in dst_row.iter_mut().enumerate() {
                        let sx = (2 * x + kx) as isize - pad as isize;
                        *d = if sx < 0 || sx >= src_w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_stride2`]: accumulate a column matrix whose columns
/// cover source rows `[row0, row0 + rows)` into `dst`.
///
/// Loops run source row outermost so every destination value receives its
/// contributions in the same order however the source rows are split into
/// strips.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter_stride2(
    cols: &[f64],
    channels: usize,
    row0: usize,
    rows: usize,
    in_w: usize,
    kernel: usize,
    pad: usize,
    dst: &mut [f64],
    dst_h: usize,
    dst_w: usize,
) {
    let plane = rows * in_w;
    debug_assert_eq!(cols.len(), channels * kernel * kernel * plane);
    for r in 0..rows {
        let y = row0 + r;
        for c in 0..channels {
            let dst_c = &mut dst[c * dst_h * dst_w..(c + 1) * dst_h * dst_w];
            for ky in 0..kernel {
                let ty = (2 * y + ky) as isize - pad as isize;
                if ty < 0 || ty >= dst_h as isize {
                    continue;
                }
                let dst_row = &mut dst_c[ty as usize * dst_w..(ty as usize + 1) * dst_w];
                for kx in 0..kernel {
                    let row = (c * kernel + ky) * kernel + kx;
                    let src = &cols[row * plane + r * in_w..row * plane + (r + 1) * in_w];
                    for (x, &v) in src.iter().enumerate() {
                        let tx = (2 * x + kx) as isize - pad as isize;
                        if tx >= 0 && tx < dst_w as isize {
                            dst_row[tx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut c = want.clone();
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <gather(u), v> == <u, scatter(v)>
        let (ch, k, pad, oh, ow) = (2, 5, 2, 3, 4);
        let (sh, sw) = (2 * oh, 2 * ow);
        let u: Vec<f64> = (0..ch * sh * sw).map(|i| (i as f64 * 0.3).sin()).collect();
        let v: Vec<f64> = (0..ch * k * k * oh * ow)
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut g = vec![0.0; v.len()];
        gather_stride2(&u, ch, sh, sw, k, pad, oh, ow, &mut g);
        let lhs: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let mut s = vec![0.0; u.len()];
        scatter_stride2(&v, ch, 0, oh, ow, k, pad, &mut s, sh, sw);
        let rhs: f64 = u.iter().zip(&s).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let c = t.crop(1, 1, 2, 2);
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let s = Tensor::stack(&[c.clone(), c]).unwrap();
        assert_eq!(s.shape(), [2, 1, 2, 2]);
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
