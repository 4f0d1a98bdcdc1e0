//! Pairwise-distance studies on the simplex interior, sphere surface and
//! cube interior, with analytic cross-checks for the sphere distance
//! density and the simplex landmark distances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Simplex,
    Sphere,
    Cube,
}

impl Shape {
    pub fn parse(s: &str) -> Result<Shape> {
        match s {
            "simplex" => Ok(Shape::Simplex),
            "sphere" => Ok(Shape::Sphere),
            "cube" => Ok(Shape::Cube),
            other => Err(Error::Config(format!("unknown shape `{other}`"))),
        }
    }

    /// Largest possible pairwise distance on the shape in dimension n.
    pub fn max_distance(&self, n: usize) -> f64 {
        match self {
            Shape::Simplex => 2.0f64.sqrt(),
            Shape::Sphere => 2.0,
            Shape::Cube => (n as f64).sqrt(),
        }
    }

    pub fn min_dim(&self) -> usize {
        match self {
            Shape::Simplex | Shape::Sphere => 2,
            Shape::Cube => 1,
        }
    }
}

fn sample_one(shape: Shape, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    match shape {
        Shape::Simplex => {
            // Dirichlet(1, …, 1) via unit-rate exponentials
            let mut total = 0.0;
            for v in out.iter_mut() {
                let u: f64 = rng.gen_range(0.0..1.0);
                let e = -(1.0 - u).ln();
                *v = e;
                total += e;
            }
            for v in out.iter_mut() {
                *v /= total;
            }
        }
        Shape::Sphere => loop {
            let mut norm_sq = 0.0;
            for v in out.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v = g;
                norm_sq += g * g;
            }
            if norm_sq > 1e-24 {
                let norm = norm_sq.sqrt();
                for v in out.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        },
        Shape::Cube => {
            for v in out.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
    }
}

fn check_dim(shape: Shape, n: usize) -> Result<()> {
    if n < shape.min_dim() {
        return Err(Error::Config(format!(
            "{shape:?} sampling needs n >= {}, got {n}",
            shape.min_dim()
        )));
    }
    Ok(())
}

pub fn sample_points(shape: Shape, n: usize, count: usize, seed: u64) -> Result<Tensor> {
    check_dim(shape, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; count * n];
    for row in data.chunks_exact_mut(n) {
        sample_one(shape, &mut rng, row);
    }
    Tensor::new(vec![count, n], data)
}

/// Uniform samples in the interior of the (n−1)-simplex.
pub fn sample_simplex(n: usize, count: usize, seed: u64) -> Result<Tensor> {
    sample_points(Shape::Simplex, n, count, seed)
}

/// Uniform samples on the surface of S^{n−1}.
pub fn sample_sphere(n: usize, count: usize, seed: u64) -> Result<Tensor> {
    sample_points(Shape::Sphere, n, count, seed)
}

/// Uniform samples in [0, 1]^n.
pub fn sample_cube(n: usize, count: usize, seed: u64) -> Result<Tensor> {
    sample_points(Shape::Cube, n, count, seed)
}

/// Distances between `pairs` independently drawn point pairs, streamed in
/// parallel chunks whose seeds derive from the master seed (deterministic
/// for any thread count).
pub fn sample_pair_distances(shape: Shape, n: usize, pairs: usize, seed: u64) -> Result<Vec<f64>> {
    check_dim(shape, n)?;
    const CHUNK: usize = 1024;
    let chunk_count = pairs.div_ceil(CHUNK);
    let chunks: Vec<Vec<f64>> = (0..chunk_count)
        .into_par_iter()
        .map(|ci| {
            let take = CHUNK.min(pairs - ci * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let mut a = vec![0.0f64; n];
            let mut b = vec![0.0f64; n];
            let mut out = Vec::with_capacity(take);
            for _ in 0..take {
                sample_one(shape, &mut rng, &mut a);
                sample_one(shape, &mut rng, &mut b);
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                out.push(d);
            }
            out
        })
        .collect();
    Ok(chunks.concat())
}

// ---------------------------------------------------------------------------
// analytic sphere distance density

/// Unnormalized density of the distance between two uniform points on
/// S^{n−1}: `d^{n−2} (1 − d²/4)^{(n−3)/2}` on [0, 2].
pub fn sphere_distance_density_unnormalized(d: f64, n: usize) -> Result<f64> {
    if !(0.0..=2.0).contains(&d) {
        return Err(Error::Contract(format!("distance {d} outside [0, 2]")));
    }
    if n < 2 {
        return Err(Error::Config("sphere density needs n >= 2".into()));
    }
    let base = 1.0 - d * d / 4.0;
    let expo = (n as f64 - 3.0) / 2.0;
    let tail = if base == 0.0 {
        if expo > 0.0 {
            0.0
        } else if expo == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        base.powf(expo)
    };
    Ok(d.powf(n as f64 - 2.0) * tail)
}

/// Normalization constant of the density above. With d = 2 sin(t/2) the
/// integrand reduces to sin^{n−2}(t) on [0, π], which is smooth for every
/// n ≥ 2, so adaptive quadrature applies even where the d-space form is
/// singular.
pub fn sphere_distance_normalizer(n: usize) -> f64 {
    adaptive_simpson(&|t: f64| t.sin().powi(n as i32 - 2), 0.0, std::f64::consts::PI, 1e-8)
}

/// Normalized density value (unnormalized / quadrature constant).
pub fn sphere_distance_pdf(d: f64, n: usize) -> Result<f64> {
    Ok(sphere_distance_density_unnormalized(d, n)? / sphere_distance_normalizer(n))
}

/// CDF of the sphere pairwise distance, tabulated on a fine angular grid.
pub struct SphereDistanceCdf {
    cumulative: Vec<f64>,
}

impl SphereDistanceCdf {
    const GRID: usize = 4096;

    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("sphere CDF needs n >= 2".into()));
        }
        let f = |t: f64| t.sin().powi(n as i32 - 2);
        let h = std::f64::consts::PI / Self::GRID as f64;
        let mut cumulative = Vec::with_capacity(Self::GRID + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for i in 0..Self::GRID {
            let a = i as f64 * h;
            // Simpson on each interval
            acc += h / 6.0 * (f(a) + 4.0 * f(a + h / 2.0) + f(a + h));
            cumulative.push(acc);
        }
        let total = acc;
        for v in cumulative.iter_mut() {
            *v /= total;
        }
        Ok(SphereDistanceCdf { cumulative })
    }

    pub fn eval(&self, d: f64) -> f64 {
        let d = d.clamp(0.0, 2.0);
        let t = 2.0 * (d / 2.0).asin();
        let pos = t / std::f64::consts::PI * Self::GRID as f64;
        let idx = (pos.floor() as usize).min(Self::GRID - 1);
        let frac = pos - idx as f64;
        self.cumulative[idx] + frac * (self.cumulative[idx + 1] - self.cumulative[idx])
    }

    /// Mean of the distance distribution by quadrature over the grid.
    pub fn mean(&self) -> f64 {
        // E[d] = ∫ d dF; trapezoid over the tabulated CDF
        let h = std::f64::consts::PI / Self::GRID as f64;
        let mut mean = 0.0;
        for i in 0..Self::GRID {
            let t0 = i as f64 * h;
            let t1 = t0 + h;
            let d_mid = 2.0 * ((t0 + t1) / 4.0).sin();
            mean += d_mid * (self.cumulative[i + 1] - self.cumulative[i]);
        }
        mean
    }
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f((a + b) / 2.0) + f(b))
}

fn adaptive_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    whole: f64,
    eps: f64,
    depth: usize,
) -> f64 {
    let m = (a + b) / 2.0;
    let left = simpson(f, a, m);
    let right = simpson(f, m, b);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        adaptive_step(f, a, m, left, eps / 2.0, depth - 1)
            + adaptive_step(f, m, b, right, eps / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature to the given relative tolerance.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let coarse = simpson(f, a, b);
    let scale = coarse.abs().max(1e-300);
    adaptive_step(f, a, b, coarse, rel_tol * scale, 48)
}

// ---------------------------------------------------------------------------
// simplex landmarks

/// Exact vertex-to-center and vertex-to-vertex distances of the standard
/// (n−1)-simplex: √((n−1)/n) and √2.
pub fn simplex_landmarks(n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Config("simplex landmarks need n >= 2".into()));
    }
    Ok((((n as f64 - 1.0) / n as f64).sqrt(), 2.0f64.sqrt()))
}

// ---------------------------------------------------------------------------
// histograms

#[derive(Debug, Clone)]
pub struct DistanceHistogram {
    pub n: usize,
    pub pairs: usize,
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

const PAIR_CAP: usize = 1_000_000;

/// Histogram over all unordered pairs (or a seeded uniform subsample of at
/// most 10⁶ pairs) of the rows of `points`.
pub fn pairwise_histogram(
    points: &Tensor,
    bins: usize,
    max_dist: f64,
    seed: u64,
) -> Result<DistanceHistogram> {
    let count = points.rows();
    if count < 2 {
        return Err(Error::Contract("histogram needs at least 2 points".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let n = points.cols();
    let total_pairs = count * (count - 1) / 2;
    let mut distances: Vec<f64> = Vec::new();
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    if total_pairs <= PAIR_CAP {
        distances.reserve(total_pairs);
        for i in 0..count {
            for j in 0..i {
                distances.push(dist(i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        distances.reserve(PAIR_CAP);
        while distances.len() < PAIR_CAP {
            let i = rng.gen_range(0..count);
            let j = rng.gen_range(0..count);
            if i != j {
                distances.push(dist(i, j));
            }
        }
    }
    Ok(histogram_from_distances(&distances, n, bins, max_dist))
}

/// Histogram of precomputed distances on [0, max_dist].
pub fn histogram_from_distances(
    distances: &[f64],
    n: usize,
    bins: usize,
    max_dist: f64,
) -> DistanceHistogram {
    let pairs = distances.len();
    let mut masses = vec![0.0f64; bins];
    for &d in distances {
        let idx = ((d / max_dist) * bins as f64).floor() as usize;
        masses[idx.min(bins - 1)] += 1.0;
    }
    for m in masses.iter_mut() {
        *m /= pairs as f64;
    }
    let edges = (0..=bins)
        .map(|i| i as f64 / bins as f64 * max_dist)
        .collect();
    let mean = distances.iter().sum::<f64>() / pairs as f64;
    let variance =
        distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / pairs as f64;
    DistanceHistogram { n, pairs, edges, masses, mean, variance }
}

/// Kolmogorov–Smirnov statistic of samples against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        worst = worst.max((f - lo).abs()).max((f - hi).abs());
    }
    worst
}
