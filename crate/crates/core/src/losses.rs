//! Training objectives: triplet losses on spheres and simplices, KoLeo
//! nearest-neighbour entropy surrogates for embeddings and quantiser rows,
//! the quantisation pull term, the combined objective and entropy
//! diagnostics.
//!
//! All losses are built on a [`Tape`] so gradients come from the shared
//! backward pass. Sign convention: the KoLeo terms are *maximized*, so
//! [`total_objective`] subtracts them; everything else is minimized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Weights and margins of the combined objective. The KoLeo weights apply
/// to terms that enter the descent objective with a negative sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// λ1, the sphere-space triplet term
    pub lambda_tri_y: f64,
    /// λ2, embedding spread (KoLeo over y)
    pub lambda_koleo_y: f64,
    /// λ3, quantiser-row spread (KoLeo over W rows)
    pub lambda_koleo_w: f64,
    /// λ4, the quantisation pull term
    pub lambda_quant: f64,
    /// margin of the asymmetric (relaxed-code) triplet
    pub margin_z: f64,
    /// margin of the sphere-space triplet
    pub margin_y: f64,
    /// guard inside every logarithm
    pub eps_log: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_tri_y: 0.1,
            lambda_koleo_y: 0.1,
            lambda_koleo_w: 0.1,
            lambda_quant: 0.1,
            margin_z: 0.1,
            margin_y: 0.1,
            eps_log: 1e-10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [
            self.lambda_tri_y,
            self.lambda_koleo_y,
            self.lambda_koleo_w,
            self.lambda_quant,
        ];
        if ls.iter().any(|l| *l < 0.0) || self.margin_z < 0.0 || self.margin_y < 0.0 {
            return Err(Error::Config("loss weights and margins must be >= 0".into()));
        }
        if self.eps_log <= 0.0 {
            return Err(Error::Config("eps_log must be > 0".into()));
        }
        Ok(())
    }
}

/// Hinge triplet loss `[‖e_a − e_p‖ − ‖e_a − e_n‖ + margin]₊` averaged over
/// the batch rows.
pub fn triplet_loss(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margin: f64,
) -> Result<Var> {
    let dp = tape.sub(anchors, positives)?;
    let dn = tape.sub(anchors, negatives)?;
    let dap = tape.row_norms(dp)?;
    let dan = tape.row_norms(dn)?;
    let gap = tape.sub(dap, dan)?;
    let shifted = tape.affine(gap, 1.0, margin);
    let hinged = tape.relu(shifted);
    Ok(tape.mean(hinged))
}

/// Checks that every K-block of every row is exactly one-hot.
fn check_one_hot(t: &Tensor, blocks: usize, ctx: &str) -> Result<()> {
    let cols = t.cols();
    if blocks == 0 || cols % blocks != 0 {
        return Err(Error::Shape(format!("{ctx}: {cols} cols not divisible by {blocks}")));
    }
    let k = cols / blocks;
    for r in 0..t.rows() {
        let row = t.row(r);
        for m in 0..blocks {
            let slice = &row[m * k..(m + 1) * k];
            let ones = slice.iter().filter(|&&v| v == 1.0).count();
            let zeros = slice.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::Contract(format!(
                    "{ctx}: block {m} of row {r} is not one-hot"
                )));
            }
        }
    }
    Ok(())
}

/// Asymmetric triplet loss `[‖z_a − b_p‖ − ‖z_a − b_n‖ + margin]₊` where
/// `b_p`, `b_n` are binarized one-hot codes (per block). Gradients flow
/// through the `b` inputs exactly as the caller wired them (straight-through
/// when they come from the STE op).
pub fn asymmetric_triplet_loss(
    tape: &mut Tape,
    z_anchor: Var,
    b_positive: Var,
    b_negative: Var,
    margin: f64,
    blocks: usize,
) -> Result<Var> {
    check_one_hot(tape.value(b_positive), blocks, "asymmetric triplet b_p")?;
    check_one_hot(tape.value(b_negative), blocks, "asymmetric triplet b_n")?;
    triplet_loss(tape, z_anchor, b_positive, b_negative, margin)
}

/// For every row, the index of its nearest *other* row under Euclidean
/// distance (ties to the lowest index).
pub fn nearest_neighbour_indices(points: &Tensor) -> Vec<usize> {
    let n = points.rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// KoLeo differential-entropy surrogate `Σ_i log(max(ρ_i, ε))` with
/// `ρ_i = min_{j≠i} ‖p_i − p_j‖`. The term is maximized; the combined
/// objective subtracts it.
pub fn koleo_loss(tape: &mut Tape, points: Var, eps_log: f64) -> Result<Var> {
    let n = tape.value(points).rows();
    if n < 2 {
        return Err(Error::Contract(format!("koleo needs >= 2 points, got {n}")));
    }
    let nn = nearest_neighbour_indices(tape.value(points));
    let neighbours = tape.select_rows(points, &nn)?;
    let diff = tape.sub(points, neighbours)?;
    let rho = tape.row_norms(diff)?;
    let guarded = tape.clamp_min(rho, eps_log);
    let logs = tape.log(guarded);
    Ok(tape.sum(logs))
}

/// KoLeo over the rows of each quantiser block matrix, summed across blocks.
pub fn koleo_w_loss(tape: &mut Tape, w_blocks: &[Var], eps_log: f64) -> Result<Var> {
    if w_blocks.is_empty() {
        return Err(Error::Contract("koleo_w over zero blocks".into()));
    }
    let mut acc: Option<Var> = None;
    for &w in w_blocks {
        let term = koleo_loss(tape, w, eps_log)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Per block, the index of the W row nearest to each y block (Euclidean,
/// ties to the lowest row).
pub fn nearest_row_indices(y_block: &Tensor, w_block: &Tensor) -> Vec<usize> {
    let b = y_block.rows();
    let k = w_block.rows();
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let y = y_block.row(r);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for row in 0..k {
            let d: f64 = y
                .iter()
                .zip(w_block.row(row))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = row;
            }
        }
        out.push(best);
    }
    out
}

/// Quantisation pull `Σ_i Σ_m ‖y_i^(m) − w_ι(y_i^(m))‖` attracting each
/// block's rows toward the embedding mass. The embedding enters as plain
/// values: gradients flow only to the quantiser weights.
pub fn quant_pull_loss(tape: &mut Tape, y_values: &Tensor, w_blocks: &[Var]) -> Result<Var> {
    let m = w_blocks.len();
    if m == 0 {
        return Err(Error::Contract("quant pull over zero blocks".into()));
    }
    let k = tape.value(w_blocks[0]).rows();
    if y_values.cols() != m * k {
        return Err(Error::Shape(format!(
            "y of {} cols, expected M·K = {}",
            y_values.cols(),
            m * k
        )));
    }
    let b = y_values.rows();
    let mut acc: Option<Var> = None;
    for (mi, &w) in w_blocks.iter().enumerate() {
        // materialize this block of y as a constant
        let mut block = Vec::with_capacity(b * k);
        for r in 0..b {
            block.extend_from_slice(&y_values.row(r)[mi * k..(mi + 1) * k]);
        }
        let y_block = Tensor::new(vec![b, k], block)?;
        let assignment = nearest_row_indices(&y_block, tape.value(w));
        let y_const = tape.constant(y_block);
        let chosen = tape.select_rows(w, &assignment)?;
        let diff = tape.sub(y_const, chosen)?;
        let norms = tape.row_norms(diff)?;
        let term = tape.sum(norms);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// The five component values of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub tri_z: Var,
    pub tri_y: Var,
    pub koleo_y: Var,
    pub koleo_w: Var,
    pub quant: Var,
}

/// Combined objective
/// `L = L_tri-z + λ1·L_tri-y − λ2·L_KoLeo-y − λ3·L_KoLeo-W + λ4·L_quant`.
pub fn total_objective(
    tape: &mut Tape,
    components: &LossComponents,
    weights: &LossWeights,
) -> Result<Var> {
    let t1 = tape.scale(components.tri_y, weights.lambda_tri_y);
    let t2 = tape.scale(components.koleo_y, -weights.lambda_koleo_y);
    let t3 = tape.scale(components.koleo_w, -weights.lambda_koleo_w);
    let t4 = tape.scale(components.quant, weights.lambda_quant);
    let mut acc = tape.add(components.tri_z, t1)?;
    acc = tape.add(acc, t2)?;
    acc = tape.add(acc, t3)?;
    tape.add(acc, t4)
}

// ---------------------------------------------------------------------------
// entropy diagnostics (plain values, no gradients)

/// Mean block entropy in bits of one relaxed code: `−(1/M) Σ_m Σ_k z log2 z`
/// with `0·log 0 := 0`.
pub fn block_entropy(z: &[f64], blocks: usize) -> f64 {
    let k = z.len() / blocks;
    let mut total = 0.0;
    for m in 0..blocks {
        for &v in &z[m * k..(m + 1) * k] {
            if v > 0.0 {
                total -= v * v.log2();
            }
        }
    }
    total / blocks as f64
}

/// Block entropy of the batch-mean code.
pub fn batch_block_entropy(z_batch: &Tensor, blocks: usize) -> f64 {
    let b = z_batch.rows();
    let c = z_batch.cols();
    let mut mean = vec![0.0; c];
    for r in 0..b {
        for (j, v) in z_batch.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= b as f64;
    }
    block_entropy(&mean, blocks)
}
