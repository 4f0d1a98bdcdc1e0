//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter group: step counter plus first/second
/// moment accumulators mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], hyper: AdamParams) -> Self {
        AdamState {
            hyper,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One Adam update across the group. Parameters with an exactly-zero
    /// gradient and zero accumulated moments are left unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam_step: group has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != grads[i].shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam_step: slot {i} shape mismatch ({:?} vs {:?})",
                    p.shape(),
                    grads[i].shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.hyper.beta1.powi(t);
        let bc2 = 1.0 - self.hyper.beta2.powi(t);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.hyper.beta1 * m[j] + (1.0 - self.hyper.beta1) * g[j];
                v[j] = self.hyper.beta2 * v[j] + (1.0 - self.hyper.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.hyper.alpha * mhat / (vhat.sqrt() + self.hyper.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&[vec![3]], AdamParams::default());
        let g = Tensor::zeros(vec![3]);
        state.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_bias_corrected_sign_step() {
        // constant gradient g: update = alpha * g / (|g| + eps') per coordinate
        let hyper = AdamParams::default();
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut state = AdamState::new(&[vec![2]], hyper);
        let g = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        state.step(&mut [&mut p], &[g.clone()]).unwrap();
        for (j, val) in p.data().iter().enumerate() {
            let expected_mag = hyper.alpha * g.data()[j].abs()
                / (g.data()[j].abs() + hyper.eps);
            assert!((val.abs() - expected_mag).abs() < 1e-12);
            assert!(val.abs() <= hyper.alpha * (1.0 + 1e-9));
            assert_eq!(-val.signum(), g.data()[j].signum());
        }
    }

    #[test]
    fn identical_runs_are_deterministic() {
        let hyper = AdamParams::default();
        let g = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let run = || {
            let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
            let mut state = AdamState::new(&[vec![2]], hyper);
            for _ in 0..10 {
                state.step(&mut [&mut p], &[g.clone()]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[vec![3]], AdamParams::default());
        let g = Tensor::zeros(vec![2]);
        assert!(state.step(&mut [&mut p], &[g]).is_err());
    }
}
