//! Per-feature batch normalization state.

use crate::numerics::tape::BatchStats;
use crate::numerics::tensor::Tensor;

/// Whether a forward pass uses batch statistics (train) or the stored
/// running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
/// Running statistics are updated explicitly via [`BatchNormState::update_running`]
/// so forward passes stay pure.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            gamma: Tensor::new(vec![features], vec![1.0; features]).unwrap(),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.9,
            eps: 1e-5,
            mode: Mode::Train,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    /// Fold a train-mode batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}
