//! Synthetic Gaussian-mixture feature generator, used when the public
//! corpus is not on disk (keeps the benchmark self-contained).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub dim: usize,
    pub centers: usize,
    pub center_scale: f64,
    pub sigma: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { dim: 128, centers: 64, center_scale: 1.0, sigma: 0.35 }
    }
}

/// Draws `count` points from a mixture of `centers` isotropic Gaussians
/// whose means are themselves standard normal draws scaled by
/// `center_scale`. Deterministic under the seed.
pub fn generate_mixture(config: &MixtureConfig, count: usize, seed: u64) -> Result<VectorSet> {
    if config.dim == 0 || config.centers == 0 {
        return Err(Error::Config("mixture needs dim >= 1 and centers >= 1".into()));
    }
    if config.sigma < 0.0 || config.center_scale < 0.0 {
        return Err(Error::Config("mixture scales must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![0.0f64; config.centers * config.dim];
    for v in centers.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * config.center_scale;
    }
    let mut data = Vec::with_capacity(count * config.dim);
    for _ in 0..count {
        let c = rng.gen_range(0..config.centers);
        let base = &centers[c * config.dim..(c + 1) * config.dim];
        for &b in base {
            let g: f64 = StandardNormal.sample(&mut rng);
            data.push((b + g * config.sigma) as f32);
        }
    }
    VectorSet::new(config.dim, data)
}
