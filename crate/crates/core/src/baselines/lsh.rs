//! Sign-of-random-projection hashing about the data mean.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::io::VectorSet;
use crate::numerics::Tensor;

pub const LSH_MAGIC: &[u8; 4] = b"SPHL";

/// `bits` unit projection directions plus the training-data mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LshModel {
    pub dim: usize,
    pub bits: usize,
    pub mean: Vec<f64>,
    /// bits × dim, row-major, unit rows
    pub projections: Vec<f64>,
}

/// Gaussian-sampled directions, normalized; bit i of a vector is
/// `⟨r_i, x − mean⟩ ≥ 0`.
pub fn lsh_train(data: &VectorSet, bits: usize, seed: u64) -> Result<LshModel> {
    if bits == 0 {
        return Err(Error::Config("LSH needs at least one bit".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("LSH training on an empty set".into()));
    }
    let d = data.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..data.count() {
        for (j, &v) in data.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= data.count() as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projections = vec![0.0f64; bits * d];
    for b in 0..bits {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in row.iter().enumerate() {
            projections[b * d + j] = v / norm;
        }
    }
    Ok(LshModel { dim: d, bits, mean, projections })
}

impl LshModel {
    pub fn encode(&self, x: &[f32]) -> Vec<u64> {
        let bits: Vec<bool> = (0..self.bits)
            .map(|b| {
                let row = &self.projections[b * self.dim..(b + 1) * self.dim];
                let dot: f64 = row
                    .iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((r, &v), mu)| r * (v as f64 - mu))
                    .sum();
                dot >= 0.0
            })
            .collect();
        super::bits_to_words(&bits)
    }

    pub fn encode_set(&self, set: &VectorSet) -> Vec<Vec<u64>> {
        use rayon::prelude::*;
        (0..set.count())
            .into_par_iter()
            .map(|i| self.encode(set.row(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.push(("shape".into(), vec![self.dim as u32, self.bits as u32]));
        c.tensors.push(("mean".into(), Tensor::new(vec![self.dim], self.mean.clone())?));
        c.tensors.push((
            "projections".into(),
            Tensor::new(vec![self.bits, self.dim], self.projections.clone())?,
        ));
        c.write(path, LSH_MAGIC, 1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, c) = Container::read(path, LSH_MAGIC)?;
        let shape = c.require_meta("shape", path)?;
        let dim = shape[0] as usize;
        let bits = shape[1] as usize;
        let mean = c.require_tensor("mean", path)?.data().to_vec();
        let projections = c.require_tensor("projections", path)?.data().to_vec();
        if mean.len() != dim || projections.len() != bits * dim {
            return Err(Error::format(path, "LSH entry shape mismatch"));
        }
        Ok(LshModel { dim, bits, mean, projections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(seed: u64, count: usize, dim: usize) -> VectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorSet::new(dim, (0..count * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_reflection_flips_all_bits() {
        let data = random_set(1, 50, 8);
        let model = lsh_train(&data, 33, 7).unwrap();
        let x = data.row(3);
        assert_eq!(model.encode(x), model.encode(x));

        // reflected point about the mean: −x + 2μ
        let reflected: Vec<f32> = x
            .iter()
            .zip(&model.mean)
            .map(|(&v, &mu)| (-(v as f64) + 2.0 * mu) as f32)
            .collect();
        let a = model.encode(x);
        let b = model.encode(&reflected);
        let differing: u32 = super::super::hamming(&a, &b);
        assert_eq!(differing, 33);
    }

    #[test]
    fn collision_rate_matches_angle() {
        // Monte-Carlo over 1e5 hyperplanes: per-bit collision ≈ 1 − θ/π
        let theta = 1.1f64;
        let u = [1.0f32, 0.0, 0.0, 0.0];
        let v = [theta.cos() as f32, theta.sin() as f32, 0.0, 0.0];
        // training data with exact zero mean
        let mut data = Vec::new();
        for p in [u, v] {
            data.extend_from_slice(&p);
            data.extend(p.iter().map(|x| -x));
        }
        let set = VectorSet::new(4, data).unwrap();
        let trials = 100_000;
        let model = lsh_train(&set, trials, 11).unwrap();
        let cu = model.encode(&u);
        let cv = model.encode(&v);
        let collisions = trials as u32 - super::super::hamming(&cu, &cv);
        let rate = collisions as f64 / trials as f64;
        let expect = 1.0 - theta / std::f64::consts::PI;
        assert!((rate - expect).abs() < 0.02, "rate {rate} vs {expect}");
    }

    #[test]
    fn save_load_roundtrip() {
        let data = random_set(2, 30, 6);
        let model = lsh_train(&data, 16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lsh.ckpt");
        model.save(&p).unwrap();
        assert_eq!(LshModel::load(&p).unwrap(), model);
    }
}
