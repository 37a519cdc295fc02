//! ADAM with bias-corrected moments.

use crate::nn::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, one entry per parameter in update order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients. Parameters must be
    /// passed in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut p = Param::new("p", vec![3], vec![1.0, -2.0, 0.5]);
        p.grad = vec![0.3, -4.0, 0.0];
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        opt.step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.value[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("p", vec![2], vec![3.0, -1.0]);
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * (x - 0.5)).collect();
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|x| (x - 0.5).abs() < 1e-3));
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut p = Param::new("p", vec![2], vec![0.123, -7.5]);
        p.grad = vec![1.0, -1.0];
        let before = p.value.clone();
        let mut opt = Adam::new(0.0, 0.5, 0.999);
        opt.step(vec![&mut p]);
        assert_eq!(p.value, before);
    }
}
