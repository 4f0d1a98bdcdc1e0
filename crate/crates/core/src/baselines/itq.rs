//! Iterative quantisation: PCA to the bit budget, then alternating sign
//! assignment and orthogonal-Procrustes rotation updates.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::io::VectorSet;
use crate::numerics::Tensor;

pub const ITQ_MAGIC: &[u8; 4] = b"SPHI";

#[derive(Debug, Clone, PartialEq)]
pub struct ItqModel {
    pub dim: usize,
    /// effective bit count (reduced below the request when the covariance
    /// is rank-deficient)
    pub bits: usize,
    pub mean: Vec<f64>,
    /// bits × dim principal directions, row-major
    pub directions: Vec<f64>,
    /// bits × bits orthogonal rotation, row-major
    pub rotation: Vec<f64>,
    /// quantization error ‖sign(VR) − VR‖² after each iteration's assignment
    pub quant_errors: Vec<f64>,
}

pub fn itq_train(data: &VectorSet, bits: usize, iters: usize, seed: u64) -> Result<ItqModel> {
    if bits == 0 {
        return Err(Error::Config("ITQ needs at least one bit".into()));
    }
    if data.count() < bits {
        return Err(Error::Contract(format!(
            "ITQ needs at least {bits} training points, got {}",
            data.count()
        )));
    }
    let n = data.count();
    let d = data.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in data.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data.row(i)[j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let usable: Vec<usize> = order
        .iter()
        .copied()
        .take(bits)
        .filter(|&i| eig.eigenvalues[i] > 1e-12)
        .collect();
    let eff_bits = usable.len();
    if eff_bits < bits {
        eprintln!(
            "warning: ITQ covariance rank {eff_bits} below requested {bits} bits; reducing"
        );
    }
    if eff_bits == 0 {
        return Err(Error::Contract("ITQ on degenerate (zero-variance) data".into()));
    }
    // directions as rows
    let mut directions = vec![0.0f64; eff_bits * d];
    for (r, &ei) in usable.iter().enumerate() {
        for j in 0..d {
            directions[r * d + j] = eig.eigenvectors[(j, ei)];
        }
    }
    let p = DMatrix::from_row_slice(eff_bits, d, &directions).transpose(); // d × b
    let v = &centered * &p; // n × b

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, quant_errors) = optimize_rotation(&v, iters, &mut rng);

    let mut rotation = vec![0.0f64; eff_bits * eff_bits];
    for i in 0..eff_bits {
        for j in 0..eff_bits {
            rotation[i * eff_bits + j] = r[(i, j)];
        }
    }
    Ok(ItqModel { dim: d, bits: eff_bits, mean, directions, rotation, quant_errors })
}

/// The ITQ alternation on projected data `v` (n × b): assign signs, then
/// solve the orthogonal Procrustes problem for the rotation, for `iters`
/// rounds. Returns the rotation and the quantization error
/// `‖sign(VR) − VR‖²` recorded after each assignment.
fn optimize_rotation(
    v: &DMatrix<f64>,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Vec<f64>) {
    let b_dim = v.ncols();
    // random orthogonal init via QR of a Gaussian matrix
    let g = DMatrix::from_fn(b_dim, b_dim, |_, _| rng.gen_range(-1.0..1.0));
    let mut r = g.qr().q();
    let mut quant_errors = Vec::with_capacity(iters);
    for _ in 0..iters {
        let vr = v * &r;
        let b = vr.map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        quant_errors.push((&b - &vr).norm_squared());
        // Procrustes: max tr(Rᵀ VᵀB) → R = U Wᵀ for VᵀB = U Σ Wᵀ
        let c = v.transpose() * &b;
        let svd = c.svd(true, true);
        let u = svd.u.as_ref().expect("svd with u");
        let wt = svd.v_t.as_ref().expect("svd with v_t");
        r = u * wt;
    }
    (r, quant_errors)
}

impl ItqModel {
    /// Rotated projection of one vector (pre-sign).
    fn project(&self, x: &[f32]) -> Vec<f64> {
        let b = self.bits;
        let mut proj = vec![0.0f64; b];
        for (r, p) in proj.iter_mut().enumerate() {
            let row = &self.directions[r * self.dim..(r + 1) * self.dim];
            *p = row
                .iter()
                .zip(x)
                .zip(&self.mean)
                .map(|((w, &v), mu)| w * (v as f64 - mu))
                .sum();
        }
        let mut rotated = vec![0.0f64; b];
        for (j, out) in rotated.iter_mut().enumerate() {
            // column j of R, rotation stored row-major
            *out = (0..b).map(|i| proj[i] * self.rotation[i * b + j]).sum();
        }
        rotated
    }

    pub fn encode(&self, x: &[f32]) -> Vec<u64> {
        let bits: Vec<bool> = self.project(x).iter().map(|&v| v >= 0.0).collect();
        super::bits_to_words(&bits)
    }

    pub fn encode_set(&self, set: &VectorSet) -> Vec<Vec<u64>> {
        use rayon::prelude::*;
        (0..set.count())
            .into_par_iter()
            .map(|i| self.encode(set.row(i)))
            .collect()
    }

    /// Max deviation of RᵀR from the identity.
    pub fn rotation_orthogonality_error(&self) -> f64 {
        let b = self.bits;
        let mut worst = 0.0f64;
        for i in 0..b {
            for j in 0..b {
                let dot: f64 = (0..b)
                    .map(|r| self.rotation[r * b + i] * self.rotation[r * b + j])
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.push(("shape".into(), vec![self.dim as u32, self.bits as u32]));
        c.tensors.push(("mean".into(), Tensor::new(vec![self.dim], self.mean.clone())?));
        c.tensors.push((
            "directions".into(),
            Tensor::new(vec![self.bits, self.dim], self.directions.clone())?,
        ));
        c.tensors.push((
            "rotation".into(),
            Tensor::new(vec![self.bits, self.bits], self.rotation.clone())?,
        ));
        c.tensors.push((
            "quant_errors".into(),
            Tensor::new(vec![self.quant_errors.len()], self.quant_errors.clone())?,
        ));
        c.write(path, ITQ_MAGIC, 1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, c) = Container::read(path, ITQ_MAGIC)?;
        let shape = c.require_meta("shape", path)?;
        let dim = shape[0] as usize;
        let bits = shape[1] as usize;
        Ok(ItqModel {
            dim,
            bits,
            mean: c.require_tensor("mean", path)?.data().to_vec(),
            directions: c.require_tensor("directions", path)?.data().to_vec(),
            rotation: c.require_tensor("rotation", path)?.data().to_vec(),
            quant_errors: c.require_tensor("quant_errors", path)?.data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_set(seed: u64, count: usize, dim: usize) -> VectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorSet::new(dim, (0..count * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn quantization_error_is_monotone_nonincreasing() {
        let data = random_set(1, 300, 16);
        let model = itq_train(&data, 8, 50, 2).unwrap();
        assert_eq!(model.quant_errors.len(), 50);
        for w in model.quant_errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "error rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rotation_stays_orthogonal() {
        let data = random_set(3, 200, 12);
        for iters in [1, 5, 25] {
            let model = itq_train(&data, 6, iters, 4).unwrap();
            assert!(model.rotation_orthogonality_error() < 1e-6);
        }
    }


    #[test]
    fn corner_data_reaches_zero_error_with_signed_permutation() {
        // projected data already at the ±1 corners: the alternation must
        // drive the quantization error to zero and the rotation to a signed
        // permutation
        let b = 4;
        let v = DMatrix::from_fn(16, b, |i, j| if i >> j & 1 == 1 { 1.0 } else { -1.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, errors) = optimize_rotation(&v, 60, &mut rng);
        let last = *errors.last().unwrap();
        assert!(last < 1e-20, "final quantization error {last}");
        for i in 0..b {
            let mut big = 0;
            for j in 0..b {
                let a = r[(i, j)].abs();
                if (a - 1.0).abs() < 1e-9 {
                    big += 1;
                } else {
                    assert!(a < 1e-9, "row {i} entry {j} = {}", r[(i, j)]);
                }
            }
            assert_eq!(big, 1, "row {i} is not a signed basis vector");
        }
    }

    #[test]
    fn degenerate_covariance_reduces_bits() {
        // rank-2 data embedded in 8 dimensions
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut data = Vec::new();
        for _ in 0..100 {
            let a: f32 = rng.gen_range(-1.0..1.0);
            let b: f32 = rng.gen_range(-1.0..1.0);
            data.extend_from_slice(&[a, b, a + b, a - b, 0.0, 0.0, 0.0, 0.0]);
        }
        let set = VectorSet::new(8, data).unwrap();
        let model = itq_train(&set, 6, 10, 7).unwrap();
        assert_eq!(model.bits, 2);
    }

    #[test]
    fn save_load_roundtrip() {
        let data = random_set(8, 100, 10);
        let model = itq_train(&data, 5, 10, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("itq.ckpt");
        model.save(&p).unwrap();
        assert_eq!(ItqModel::load(&p).unwrap(), model);
    }
}
