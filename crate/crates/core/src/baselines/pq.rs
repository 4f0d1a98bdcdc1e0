//! Product quantisation: per-subspace k-means codebooks with asymmetric
//! distance computation via per-query lookup tables.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::io::VectorSet;
use crate::numerics::Tensor;

pub const PQ_MAGIC: &[u8; 4] = b"SPHP";

#[derive(Debug, Clone, PartialEq)]
pub struct PqModel {
    pub dim: usize,
    pub m_star: usize,
    pub k_star: usize,
    pub sub_dim: usize,
    /// per subspace: k_star × sub_dim centroids, row-major
    pub codebooks: Vec<Vec<f64>>,
    /// per subspace: within-cluster SSE after each assignment
    pub sse_history: Vec<Vec<f64>>,
}

/// Trains one k-means codebook per contiguous subspace (k-means++ seeding,
/// fixed Lloyd iterations, empty clusters re-seeded from the farthest
/// point).
pub fn pq_train(
    data: &VectorSet,
    m_star: usize,
    k_star: usize,
    iters: usize,
    seed: u64,
) -> Result<PqModel> {
    let d = data.dim();
    if m_star == 0 || d % m_star != 0 {
        return Err(Error::Config(format!(
            "input dim {d} is not divisible into {m_star} subspaces"
        )));
    }
    if data.count() < k_star {
        return Err(Error::Contract(format!(
            "PQ needs at least K* = {k_star} training points, got {}",
            data.count()
        )));
    }
    let sub_dim = d / m_star;
    let mut codebooks = Vec::with_capacity(m_star);
    let mut sse_history = Vec::with_capacity(m_star);
    for mi in 0..m_star {
        let sub: Vec<Vec<f64>> = (0..data.count())
            .map(|i| {
                data.row(i)[mi * sub_dim..(mi + 1) * sub_dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(mi as u64));
        let (centroids, sse) = kmeans(&sub, k_star, iters, &mut rng);
        codebooks.push(centroids.concat());
        sse_history.push(sse);
    }
    Ok(PqModel { dim: d, m_star, k_star, sub_dim, codebooks, sse_history })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations with k-means++ seeding. Returns centroids and the SSE
/// measured after every assignment step (monotone non-increasing).
fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = points.len();
    let dim = points[0].len();
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut best_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best_d.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in best_d.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        let c = points[chosen].clone();
        for (i, p) in points.iter().enumerate() {
            best_d[i] = best_d[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![0usize; n];
    let mut sse_history = Vec::with_capacity(iters);
    for _ in 0..iters {
        // assignment (ties to the lowest centroid index)
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let v = sq_dist(p, centroid);
                if v < best_v {
                    best_v = v;
                    best = c;
                }
            }
            assignment[i] = best;
            sse += best_v;
        }
        sse_history.push(sse);
        // update
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (j, v) in p.iter().enumerate() {
                sums[assignment[i]][j] += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c][j] = sums[c][j] / counts[c] as f64;
                }
            } else {
                // re-seed from the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assignment[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assignment[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
    }
    (centroids, sse_history)
}

impl PqModel {
    fn centroid(&self, m: usize, k: usize) -> &[f64] {
        &self.codebooks[m][k * self.sub_dim..(k + 1) * self.sub_dim]
    }

    /// Nearest centroid per subspace (ties to the lowest index).
    pub fn encode(&self, x: &[f32]) -> Vec<u32> {
        (0..self.m_star)
            .map(|mi| {
                let sub: Vec<f64> = x[mi * self.sub_dim..(mi + 1) * self.sub_dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let mut best = 0u32;
                let mut best_v = f64::INFINITY;
                for k in 0..self.k_star {
                    let v = sq_dist(&sub, self.centroid(mi, k));
                    if v < best_v {
                        best_v = v;
                        best = k as u32;
                    }
                }
                best
            })
            .collect()
    }

    pub fn encode_set(&self, set: &VectorSet) -> Vec<Vec<u32>> {
        (0..set.count())
            .into_par_iter()
            .map(|i| self.encode(set.row(i)))
            .collect()
    }

    /// Per-query M*×K* table of squared sub-distances.
    pub fn adc_table(&self, query: &[f32]) -> Vec<f64> {
        let mut table = vec![0.0f64; self.m_star * self.k_star];
        for mi in 0..self.m_star {
            let sub: Vec<f64> = query[mi * self.sub_dim..(mi + 1) * self.sub_dim]
                .iter()
                .map(|&v| v as f64)
                .collect();
            for k in 0..self.k_star {
                table[mi * self.k_star + k] = sq_dist(&sub, self.centroid(mi, k));
            }
        }
        table
    }

    /// `√(Σ_m ‖q^(m) − c_{m,idx}‖²)` through the lookup table.
    pub fn adc_distance(&self, query: &[f32], code: &[u32]) -> f64 {
        let table = self.adc_table(query);
        self.adc_from_table(&table, code)
    }

    pub fn adc_from_table(&self, table: &[f64], code: &[u32]) -> f64 {
        code.iter()
            .enumerate()
            .map(|(mi, &k)| table[mi * self.k_star + k as usize])
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.push((
            "shape".into(),
            vec![self.dim as u32, self.m_star as u32, self.k_star as u32],
        ));
        for (mi, cb) in self.codebooks.iter().enumerate() {
            c.tensors.push((
                format!("codebook{mi}"),
                Tensor::new(vec![self.k_star, self.sub_dim], cb.clone())?,
            ));
            c.tensors.push((
                format!("sse{mi}"),
                Tensor::new(vec![self.sse_history[mi].len()], self.sse_history[mi].clone())?,
            ));
        }
        c.write(path, PQ_MAGIC, 1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, c) = Container::read(path, PQ_MAGIC)?;
        let shape = c.require_meta("shape", path)?;
        let (dim, m_star, k_star) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
        if m_star == 0 || dim % m_star != 0 {
            return Err(Error::format(path, "invalid PQ geometry"));
        }
        let mut codebooks = Vec::with_capacity(m_star);
        let mut sse_history = Vec::with_capacity(m_star);
        for mi in 0..m_star {
            codebooks.push(c.require_tensor(&format!("codebook{mi}"), path)?.data().to_vec());
            sse_history.push(c.require_tensor(&format!("sse{mi}"), path)?.data().to_vec());
        }
        Ok(PqModel { dim, m_star, k_star, sub_dim: dim / m_star, codebooks, sse_history })
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
    fn sse_is_monotone_nonincreasing_per_subspace() {
        let data = random_set(1, 400, 8);
        let model = pq_train(&data, 2, 16, 20, 2).unwrap();
        for hist in &model.sse_history {
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "SSE rose: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn own_centroid_tuple_has_zero_adc_distance() {
        let data = random_set(3, 200, 6);
        let model = pq_train(&data, 3, 8, 15, 4).unwrap();
        // a vector assembled from centroids (2, 5, 0)
        let mut x = Vec::new();
        for (mi, &k) in [2usize, 5, 0].iter().enumerate() {
            x.extend(model.centroid(mi, k).iter().map(|&v| v as f32));
        }
        let code = model.encode(&x);
        assert_eq!(code, vec![2, 5, 0]);
        assert!(model.adc_distance(&x, &code) < 1e-6);
    }

    #[test]
    fn k_distinct_subvectors_reach_zero_sse() {
        // 4 distinct sub-vectors per subspace, repeated
        let mut data = Vec::new();
        for i in 0..64 {
            let a = (i % 4) as f32;
            let b = ((i / 4) % 4) as f32;
            data.extend_from_slice(&[a, a + 1.0, 10.0 * b, 10.0 * b + 2.0]);
        }
        let set = VectorSet::new(4, data).unwrap();
        let model = pq_train(&set, 2, 4, 20, 5).unwrap();
        for hist in &model.sse_history {
            assert!(*hist.last().unwrap() < 1e-18);
        }
    }

    #[test]
    fn rejects_indivisible_dim_and_small_data() {
        let data = random_set(6, 50, 7);
        assert!(pq_train(&data, 2, 8, 5, 7).is_err());
        let tiny = random_set(7, 10, 8);
        assert!(pq_train(&tiny, 2, 16, 5, 8).is_err());
    }

    #[test]
    fn training_is_deterministic_and_roundtrips() {
        let data = random_set(9, 300, 8);
        let a = pq_train(&data, 4, 8, 10, 10).unwrap();
        let b = pq_train(&data, 4, 8, 10, 10).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pq.ckpt");
        a.save(&p).unwrap();
        assert_eq!(PqModel::load(&p).unwrap(), a);
    }

    #[test]
    fn adc_table_matches_direct_distance() {
        let data = random_set(11, 200, 8);
        let model = pq_train(&data, 2, 8, 10, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let code: Vec<u32> = (0..2).map(|_| rng.gen_range(0..8u32)).collect();
            let via_table = model.adc_distance(&q, &code);
            let mut direct = 0.0f64;
            for (mi, &k) in code.iter().enumerate() {
                let sub: Vec<f64> = q[mi * 4..(mi + 1) * 4].iter().map(|&v| v as f64).collect();
                direct += sq_dist(&sub, model.centroid(mi, k as usize));
            }
            assert!((via_table - direct.sqrt()).abs() < 1e-12);
        }
    }
}
