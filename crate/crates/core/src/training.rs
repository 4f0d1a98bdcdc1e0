//! Triplet sampling from the neighbour graph, parameter-group gradient
//! routing and the optimization loop.
//!
//! Routing contract: the catalyser (group A) is optimised only with respect
//! to the asymmetric triplet, the sphere triplet and the embedding KoLeo
//! term; the quantiser matrices (group B) only with respect to the
//! asymmetric triplet, the row KoLeo term and the quantisation pull. The two
//! partial objectives are evaluated explicitly so the contract is testable
//! in isolation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{search, CodeDatabase, DistanceMode, QueryRepr};
use crate::error::{Error, Result};
use crate::io::{brute_force_neighbours, NeighbourTable, VectorSet};
use crate::losses::{
    asymmetric_triplet_loss, block_entropy, batch_block_entropy, koleo_loss, koleo_w_loss,
    quant_pull_loss, triplet_loss, LossWeights,
};
use crate::network::{
    bind_params, catalyse, encode_set, quantise_soft, rows_to_tensor, save_checkpoint,
    Checkpoint, ModelParams,
};

use crate::numerics::{BatchStats, Mode, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMining {
    Uniform,
    SemiHard { candidates: usize },
}

/// Anchor/positive/negative row indices into the training set.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws triplets from a neighbour table: positives only from a point's
/// neighbour list, negatives never from it.
pub struct TripletSampler {
    neighbours: Vec<Vec<u32>>,
    anchor_pool: Vec<usize>,
    point_pool: Vec<usize>,
    mining: NegativeMining,
}

impl TripletSampler {
    /// `allowed` restricts anchors, positives and negatives to a subset of
    /// the table's points (e.g. excluding a validation holdout); `None`
    /// admits every point. Points whose (filtered) neighbour list is empty
    /// are skipped with a warning.
    pub fn new(
        table: &NeighbourTable,
        allowed: Option<&[bool]>,
        mining: NegativeMining,
    ) -> Result<Self> {
        let n = table.rows.len();
        if let Some(a) = allowed {
            if a.len() != n {
                return Err(Error::Shape("allowed mask length mismatch".into()));
            }
        }
        let is_allowed = |i: usize| allowed.map(|a| a[i]).unwrap_or(true);
        let mut neighbours = Vec::with_capacity(n);
        let mut anchor_pool = Vec::new();
        let mut skipped = 0usize;
        for (i, row) in table.rows.iter().enumerate() {
            let filtered: Vec<u32> = row
                .iter()
                .copied()
                .filter(|&j| (j as usize) < n && is_allowed(j as usize))
                .collect();
            if is_allowed(i) {
                if filtered.is_empty() {
                    skipped += 1;
                } else {
                    anchor_pool.push(i);
                }
            }
            neighbours.push(filtered);
        }
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} points with empty neighbour lists");
        }
        if anchor_pool.is_empty() {
            return Err(Error::Contract("no usable anchors in the neighbour table".into()));
        }
        let point_pool = (0..n).filter(|&i| is_allowed(i)).collect();
        Ok(TripletSampler { neighbours, anchor_pool, point_pool, mining })
    }

    pub fn mining(&self) -> NegativeMining {
        self.mining
    }

    fn draw_negative(&self, anchor: usize, rng: &mut ChaCha8Rng) -> usize {
        let forbidden = &self.neighbours[anchor];
        loop {
            let cand = self.point_pool[rng.gen_range(0..self.point_pool.len())];
            if cand != anchor && !forbidden.contains(&(cand as u32)) {
                return cand;
            }
        }
    }

    /// Samples `batch` triplets. Semi-hard mode embeds candidates with the
    /// current model (eval mode) and picks, per anchor, the closest
    /// candidate that still violates the margin, falling back to the first
    /// (uniform) candidate when none does.
    pub fn sample_minibatch(
        &self,
        set: &VectorSet,
        params: &ModelParams,
        batch: usize,
        margin_z: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TripletBatch> {
        if batch == 0 {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let mut anchors = Vec::with_capacity(batch);
        let mut positives = Vec::with_capacity(batch);
        for _ in 0..batch {
            let a = self.anchor_pool[rng.gen_range(0..self.anchor_pool.len())];
            let nbrs = &self.neighbours[a];
            let p = nbrs[rng.gen_range(0..nbrs.len())] as usize;
            anchors.push(a);
            positives.push(p);
        }
        let negatives = match self.mining {
            NegativeMining::Uniform => anchors
                .iter()
                .map(|&a| self.draw_negative(a, rng))
                .collect(),
            NegativeMining::SemiHard { candidates } => {
                let cand_count = candidates.max(1);
                let candidates: Vec<Vec<usize>> = anchors
                    .iter()
                    .map(|&a| (0..cand_count).map(|_| self.draw_negative(a, rng)).collect())
                    .collect();
                // embed anchors, positives and all candidates in one pass
                let mut all = anchors.clone();
                all.extend_from_slice(&positives);
                for c in &candidates {
                    all.extend_from_slice(c);
                }
                let x = rows_to_tensor(set, &all)?;
                let y = crate::network::embed_batch(params, &x)?;
                let dist = |a: usize, b: usize| -> f64 {
                    y.row(a)
                        .iter()
                        .zip(y.row(b))
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt()
                };
                (0..batch)
                    .map(|i| {
                        let d_ap = dist(i, batch + i);
                        let base = 2 * batch + i * cand_count;
                        let mut chosen = candidates[i][0];
                        let mut best_d = f64::INFINITY;
                        for (j, &cand) in candidates[i].iter().enumerate() {
                            let d_an = dist(i, base + j);
                            let violates = d_an < d_ap + margin_z;
                            if violates && d_an < best_d {
                                best_d = d_an;
                                chosen = cand;
                            }
                        }
                        chosen
                    })
                    .collect()
            }
        };
        Ok(TripletBatch { anchors, positives, negatives })
    }
}

/// Loss component values of one step (the total uses the documented signs).
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub tri_z: f64,
    pub tri_y: f64,
    pub koleo_y: f64,
    pub koleo_w: f64,
    pub quant: f64,
    pub total: f64,
}

impl StepLosses {
    fn compose(tri_z: f64, tri_y: f64, koleo_y: f64, koleo_w: f64, quant: f64, w: &LossWeights) -> Self {
        StepLosses {
            tri_z,
            tri_y,
            koleo_y,
            koleo_w,
            quant,
            total: tri_z + w.lambda_tri_y * tri_y - w.lambda_koleo_y * koleo_y
                - w.lambda_koleo_w * koleo_w
                + w.lambda_quant * quant,
        }
    }
}

/// Gradients of the two routed partial objectives plus the losses and the
/// batch-norm statistics of the forward pass.
pub struct RoutedGradients {
    pub group_a: Vec<Tensor>,
    pub group_b: Vec<Tensor>,
    pub losses: StepLosses,
    pub bn_stats: Vec<BatchStats>,
}

/// One train-mode forward over the concatenated [anchors; positives;
/// negatives] batch, then two backward passes:
/// objective A = tri_z + λ1·tri_y − λ2·koleo_y (catalyser parameters),
/// objective B = tri_z − λ3·koleo_w + λ4·quant (quantiser matrices).
pub fn routed_gradients(
    params: &ModelParams,
    x_anchor: &Tensor,
    x_positive: &Tensor,
    x_negative: &Tensor,
    weights: &LossWeights,
) -> Result<RoutedGradients> {
    weights.validate()?;
    let b = x_anchor.rows();
    if x_positive.rows() != b || x_negative.rows() != b {
        return Err(Error::Shape("triplet batches of different sizes".into()));
    }
    let m = params.config.m;

    let mut joined = Vec::with_capacity(3 * b * params.config.d_in);
    for t in [x_anchor, x_positive, x_negative] {
        joined.extend_from_slice(t.data());
    }
    let x = Tensor::new(vec![3 * b, params.config.d_in], joined)?;

    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, true);
    let xv = tape.constant(x);
    let (y, bn_stats) = catalyse(&mut tape, &vars, params, xv, Mode::Train)?;
    let z = quantise_soft(&mut tape, &vars, y, m)?;

    let a_range: Vec<usize> = (0..b).collect();
    let p_range: Vec<usize> = (b..2 * b).collect();
    let n_range: Vec<usize> = (2 * b..3 * b).collect();
    let y_a = tape.select_rows(y, &a_range)?;
    let y_p = tape.select_rows(y, &p_range)?;
    let y_n = tape.select_rows(y, &n_range)?;
    let z_a = tape.select_rows(z, &a_range)?;
    let z_p = tape.select_rows(z, &p_range)?;
    let z_n = tape.select_rows(z, &n_range)?;
    let b_p = tape.ste_argmax_blocks(z_p, m)?;
    let b_n = tape.ste_argmax_blocks(z_n, m)?;

    let tri_z = asymmetric_triplet_loss(&mut tape, z_a, b_p, b_n, weights.margin_z, m)?;
    let tri_y = triplet_loss(&mut tape, y_a, y_p, y_n, weights.margin_y)?;
    let koleo_y = koleo_loss(&mut tape, y_a, weights.eps_log)?;
    let koleo_w = koleo_w_loss(&mut tape, &vars.quantiser, weights.eps_log)?;
    let y_a_values = tape.value(y_a).clone();
    let quant = quant_pull_loss(&mut tape, &y_a_values, &vars.quantiser)?;

    let values = [
        ("tri_z", tape.value(tri_z).item()),
        ("tri_y", tape.value(tri_y).item()),
        ("koleo_y", tape.value(koleo_y).item()),
        ("koleo_w", tape.value(koleo_w).item()),
        ("quant", tape.value(quant).item()),
    ];
    if values.iter().any(|(_, v)| !v.is_finite()) {
        let dump: Vec<String> = values.iter().map(|(n, v)| format!("{n}={v}")).collect();
        return Err(Error::NonFinite(format!(
            "loss component is not finite; aborting step ({})",
            dump.join(", ")
        )));
    }

    // objective A: tri_z + λ1·tri_y − λ2·koleo_y
    let t1 = tape.scale(tri_y, weights.lambda_tri_y);
    let t2 = tape.scale(koleo_y, -weights.lambda_koleo_y);
    let mut obj_a = tape.add(tri_z, t1)?;
    obj_a = tape.add(obj_a, t2)?;
    // objective B: tri_z − λ3·koleo_w + λ4·quant
    let t3 = tape.scale(koleo_w, -weights.lambda_koleo_w);
    let t4 = tape.scale(quant, weights.lambda_quant);
    let mut obj_b = tape.add(tri_z, t3)?;
    obj_b = tape.add(obj_b, t4)?;

    let grads_a = tape.backward(obj_a)?;
    let group_a = vars.group_a().iter().map(|&v| grads_a.get(v)).collect();
    let grads_b = tape.backward(obj_b)?;
    let group_b = vars.group_b().iter().map(|&v| grads_b.get(v)).collect();

    let losses = StepLosses::compose(
        values[0].1, values[1].1, values[2].1, values[3].1, values[4].1, weights,
    );
    Ok(RoutedGradients { group_a, group_b, losses, bn_stats })
}

/// One optimization step: routed gradients, per-group Adam, quantiser row
/// re-normalization and the running-statistics update.
pub fn train_step(
    ckpt: &mut Checkpoint,
    x_anchor: &Tensor,
    x_positive: &Tensor,
    x_negative: &Tensor,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let routed = routed_gradients(&ckpt.params, x_anchor, x_positive, x_negative, weights)?;
    ckpt.adam_a
        .step(&mut ckpt.params.group_a_mut(), &routed.group_a)?;
    ckpt.adam_b
        .step(&mut ckpt.params.group_b_mut(), &routed.group_b)?;
    ckpt.params.renormalize_quantiser_rows();
    for (bn, stats) in ckpt.params.batch_norms.iter_mut().zip(&routed.bn_stats) {
        bn.update_running(stats);
    }
    Ok(routed.losses)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub mining: NegativeMining,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            weights: LossWeights::default(),
            mining: NegativeMining::Uniform,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub best_val_recall: Option<f64>,
    pub log_rows: usize,
}

/// Runs the optimization loop, logging one CSV row per step (loss
/// components) and one per epoch (entropy diagnostics plus validation
/// recall), and saves the checkpoint with the best validation recall.
pub fn train(
    ckpt: &mut Checkpoint,
    train_set: &VectorSet,
    neighbours: &NeighbourTable,
    config: &TrainConfig,
    checkpoint_path: &Path,
    log_path: &Path,
) -> Result<TrainReport> {
    if neighbours.rows.len() != train_set.count() {
        return Err(Error::Shape(format!(
            "neighbour table of {} rows for {} training points",
            neighbours.rows.len(),
            train_set.count()
        )));
    }
    let n = train_set.count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // deterministic validation holdout
    let val_count = ((n as f64) * config.val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let val_indices: Vec<usize> = order[..val_count].to_vec();
    let mut allowed = vec![true; n];
    for &i in &val_indices {
        allowed[i] = false;
    }
    let fit_indices: Vec<usize> = (0..n).filter(|&i| allowed[i]).collect();

    let sampler = TripletSampler::new(neighbours, Some(&allowed), config.mining)?;

    // validation ground truth on raw features (true first neighbour)
    let validation = if val_count > 0 && fit_indices.len() >= 10 {
        let val_set = train_set.subset(&val_indices)?;
        let fit_set = train_set.subset(&fit_indices)?;
        let gt = brute_force_neighbours(&val_set, &fit_set, 1)?;
        Some((val_set, fit_set, gt))
    } else {
        None
    };

    let mut log = BufWriter::new(File::create(log_path)?);
    let steps_per_epoch = fit_indices.len().div_ceil(config.batch_size).max(1);
    let mut step = 0usize;
    let mut log_rows = 0usize;
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample_minibatch(
                train_set,
                &ckpt.params,
                config.batch_size,
                config.weights.margin_z,
                &mut rng,
            )?;
            let xa = rows_to_tensor(train_set, &batch.anchors)?;
            let xp = rows_to_tensor(train_set, &batch.positives)?;
            let xn = rows_to_tensor(train_set, &batch.negatives)?;
            let losses = train_step(ckpt, &xa, &xp, &xn, &config.weights)?;
            writeln!(
                log,
                "step,{step},{},{},{},{},{},{}",
                losses.tri_z, losses.tri_y, losses.koleo_y, losses.koleo_w, losses.quant,
                losses.total
            )?;
            log_rows += 1;
            step += 1;
        }

        let diag = epoch_diagnostics(&ckpt.params, train_set, &fit_indices, validation.as_ref())?;
        writeln!(
            log,
            "epoch,{epoch},{},{},{},{}",
            diag.mean_block_entropy,
            diag.batch_entropy,
            diag.min_code_entropy,
            diag.val_recall.map(|r| r.to_string()).unwrap_or_else(|| "nan".into()),
        )?;
        log_rows += 1;

        if let Some(r) = diag.val_recall {
            let better = best.as_ref().map(|(b, _)| r > *b).unwrap_or(true);
            if better {
                best = Some((r, ckpt.clone()));
            }
        }
    }
    log.flush()?;

    let best_val_recall = best.as_ref().map(|(r, _)| *r);
    if let Some((_, best_ckpt)) = best {
        *ckpt = best_ckpt;
    }
    ckpt.params.set_mode(Mode::Eval);
    save_checkpoint(checkpoint_path, ckpt)?;
    Ok(TrainReport {
        steps: step,
        epochs: config.epochs,
        best_val_recall,
        log_rows,
    })
}

struct EpochDiagnostics {
    mean_block_entropy: f64,
    batch_entropy: f64,
    min_code_entropy: f64,
    val_recall: Option<f64>,
}

/// Per-block Shannon entropy (bits) of the empirical code-index histogram.
pub fn code_histogram_entropies(codes: &[crate::codec::Code], m: usize, k: usize) -> Vec<f64> {
    let mut hists = vec![vec![0usize; k]; m];
    for code in codes {
        for (mi, &idx) in code.indices.iter().enumerate() {
            hists[mi][idx as usize] += 1;
        }
    }
    hists
        .iter()
        .map(|h| {
            let total: usize = h.iter().sum();
            if total == 0 {
                return 0.0;
            }
            h.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.log2()
                })
                .sum()
        })
        .collect()
}

fn epoch_diagnostics(
    params: &ModelParams,
    train_set: &VectorSet,
    fit_indices: &[usize],
    validation: Option<&(VectorSet, VectorSet, NeighbourTable)>,
) -> Result<EpochDiagnostics> {
    let sample: Vec<usize> = fit_indices.iter().copied().take(512).collect();
    let x = rows_to_tensor(train_set, &sample)?;
    let z = crate::network::soft_code_batch(params, &x)?;
    let m = params.config.m;
    let mean_block_entropy = (0..z.rows())
        .map(|r| block_entropy(z.row(r), m))
        .sum::<f64>()
        / z.rows() as f64;
    let batch_entropy = batch_block_entropy(&z, m);
    let sample_set = train_set.subset(&sample)?;
    let codes = encode_set(params, &sample_set)?;
    let min_code_entropy = code_histogram_entropies(&codes, m, params.config.k)
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    let val_recall = match validation {
        Some((val_set, fit_set, gt)) => {
            let codes = encode_set(params, fit_set)?;
            let db = CodeDatabase::from_codes(params.config.m, params.config.k, &codes)?;
            let embeddings = crate::network::soft_code_set(params, val_set)?;
            let top_n = 10.min(db.count());
            let mut hits = 0usize;
            for (qi, y) in embeddings.iter().enumerate() {
                let ranked = search(
                    &QueryRepr::Embedding(y.clone()),
                    &db,
                    top_n,
                    DistanceMode::Adc,
                )?;
                if ranked.contains(&gt.rows[qi][0]) {
                    hits += 1;
                }
            }
            Some(hits as f64 / val_set.count() as f64)
        }
        None => None,
    };
    Ok(EpochDiagnostics {
        mean_block_entropy,
        batch_entropy,
        min_code_entropy,
        val_recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::CatalyserConfig;
    use crate::numerics::AdamParams;

    fn toy_setup(seed: u64) -> (VectorSet, NeighbourTable, Checkpoint) {
        // two well-separated clusters in 8-D
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64;
        let dim = 8;
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            let center = if i < n / 2 { -3.0f32 } else { 3.0 };
            for _ in 0..dim {
                data.push(center + rng.gen_range(-0.5..0.5));
            }
        }
        let set = VectorSet::new(dim, data).unwrap();
        let neighbours = crate::io::self_neighbours(&set, 10).unwrap();
        let config = CatalyserConfig { d_in: dim, hidden: 16, hidden_layers: 2, m: 2, k: 4 };
        let params = ModelParams::init(config, seed).unwrap();
        let ckpt = Checkpoint::fresh(params, AdamParams::default());
        (set, neighbours, ckpt)
    }

    #[test]
    fn sampled_positives_come_from_neighbour_lists() {
        let (set, neighbours, ckpt) = toy_setup(1);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sampler
            .sample_minibatch(&set, &ckpt.params, 32, 0.1, &mut rng)
            .unwrap();
        for (i, &a) in batch.anchors.iter().enumerate() {
            let p = batch.positives[i] as u32;
            let n = batch.negatives[i] as u32;
            assert!(neighbours.rows[a].contains(&p));
            assert!(!neighbours.rows[a].contains(&n));
            assert_ne!(batch.negatives[i], a);
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let (set, neighbours, ckpt) = toy_setup(3);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let b = sampler
                .sample_minibatch(&set, &ckpt.params, 16, 0.1, &mut rng)
                .unwrap();
            (b.anchors, b.positives, b.negatives)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn semi_hard_falls_back_to_uniform_when_margin_satisfied() {
        let (set, neighbours, ckpt) = toy_setup(4);
        let semi = TripletSampler::new(
            &neighbours,
            None,
            NegativeMining::SemiHard { candidates: 4 },
        )
        .unwrap();
        // margin 0 and a well-separated embedding means most candidates satisfy
        // the margin; the fallback must still produce valid negatives
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = semi
            .sample_minibatch(&set, &ckpt.params, 16, 0.0, &mut rng)
            .unwrap();
        for (i, &a) in batch.anchors.iter().enumerate() {
            assert!(!neighbours.rows[a].contains(&(batch.negatives[i] as u32)));
        }
    }

    #[test]
    fn quant_only_config_moves_only_quantiser() {
        let (set, _neighbours, ckpt) = toy_setup(5);
        // batch in which positives and negatives share codes: use the same
        // rows for both so the binarized codes coincide exactly
        let idx: Vec<usize> = (0..8).collect();
        let xa = rows_to_tensor(&set, &idx).unwrap();
        let xp = rows_to_tensor(&set, &idx).unwrap();
        let xn = rows_to_tensor(&set, &idx).unwrap();
        let weights = LossWeights {
            lambda_tri_y: 0.0,
            lambda_koleo_y: 0.0,
            lambda_koleo_w: 0.0,
            lambda_quant: 0.5,
            margin_z: 0.0,
            margin_y: 0.0,
            ..LossWeights::default()
        };
        let routed = routed_gradients(&ckpt.params, &xa, &xp, &xn, &weights).unwrap();
        for g in &routed.group_a {
            assert!(g.data().iter().all(|&v| v == 0.0), "catalyser gradient not zero");
        }
        assert!(routed.group_b.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn koleo_y_only_config_leaves_quantiser_untouched() {
        let (set, neighbours, ckpt) = toy_setup(6);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = sampler
            .sample_minibatch(&set, &ckpt.params, 8, 0.0, &mut rng)
            .unwrap();
        let xa = rows_to_tensor(&set, &batch.anchors).unwrap();
        let xp = rows_to_tensor(&set, &batch.positives).unwrap();
        let xn = rows_to_tensor(&set, &batch.negatives).unwrap();
        // disable everything but koleo-y; tri_z is disabled by a saturating
        // margin of zero only when codes coincide, so instead verify the
        // quantiser receives gradient exclusively through tri_z by zeroing
        // its other terms and comparing against a tri_z-free objective.
        let weights = LossWeights {
            lambda_tri_y: 0.0,
            lambda_koleo_y: 0.7,
            lambda_koleo_w: 0.0,
            lambda_quant: 0.0,
            margin_z: 0.0,
            margin_y: 0.0,
            ..LossWeights::default()
        };
        let routed = routed_gradients(&ckpt.params, &xa, &xp, &xn, &weights).unwrap();
        // group B sees only tri_z; koleo-y routes nothing to it, so scaling
        // its weight must leave the quantiser gradients bit-identical
        let weights2 = LossWeights { lambda_koleo_y: 1.9, ..weights };
        let routed2 = routed_gradients(&ckpt.params, &xa, &xp, &xn, &weights2).unwrap();
        for (g1, g2) in routed.group_b.iter().zip(&routed2.group_b) {
            assert_eq!(g1, g2, "koleo-y leaked into quantiser gradients");
        }
    }

    #[test]
    fn one_step_is_bit_deterministic() {
        let (set, neighbours, ckpt0) = toy_setup(7);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let run = || {
            let mut ckpt = ckpt0.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let batch = sampler
                .sample_minibatch(&set, &ckpt.params, 16, 0.1, &mut rng)
                .unwrap();
            let xa = rows_to_tensor(&set, &batch.anchors).unwrap();
            let xp = rows_to_tensor(&set, &batch.positives).unwrap();
            let xn = rows_to_tensor(&set, &batch.negatives).unwrap();
            train_step(&mut ckpt, &xa, &xp, &xn, &LossWeights::default()).unwrap();
            ckpt
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam_a.m, b.adam_a.m);
    }

    #[test]
    fn quantiser_rows_stay_unit_norm_through_steps() {
        let (set, neighbours, mut ckpt) = toy_setup(8);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..5 {
            let batch = sampler
                .sample_minibatch(&set, &ckpt.params, 16, 0.1, &mut rng)
                .unwrap();
            let xa = rows_to_tensor(&set, &batch.anchors).unwrap();
            let xp = rows_to_tensor(&set, &batch.positives).unwrap();
            let xn = rows_to_tensor(&set, &batch.negatives).unwrap();
            train_step(&mut ckpt, &xa, &xp, &xn, &LossWeights::default()).unwrap();
            for w in &ckpt.params.quantiser {
                for r in 0..ckpt.params.config.k {
                    let norm: f64 = w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn objective_trends_down_on_two_cluster_data() {
        let (set, neighbours, mut ckpt) = toy_setup(15);
        let sampler = TripletSampler::new(&neighbours, None, NegativeMining::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut totals = Vec::with_capacity(200);
        for _ in 0..200 {
            let batch = sampler
                .sample_minibatch(&set, &ckpt.params, 16, 0.1, &mut rng)
                .unwrap();
            let xa = rows_to_tensor(&set, &batch.anchors).unwrap();
            let xp = rows_to_tensor(&set, &batch.positives).unwrap();
            let xn = rows_to_tensor(&set, &batch.negatives).unwrap();
            let losses = train_step(&mut ckpt, &xa, &xp, &xn, &LossWeights::default()).unwrap();
            totals.push(losses.total);
        }
        let first: f64 = totals[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = totals[150..].iter().sum::<f64>() / 50.0;
        assert!(last < first, "no improvement: first {first}, last {last}");
    }

    #[test]
    fn zero_epochs_saves_initialization_and_log_rows_count() {
        let (set, neighbours, mut ckpt) = toy_setup(17);
        let init = ckpt.clone();
        let dir = tempfile::tempdir().unwrap();
        let ckpt_path = dir.path().join("model.ckpt");
        let log_path = dir.path().join("log.csv");
        let config = TrainConfig { epochs: 0, batch_size: 8, ..TrainConfig::default() };
        let report = train(&mut ckpt, &set, &neighbours, &config, &ckpt_path, &log_path).unwrap();
        assert_eq!(report.steps, 0);
        let loaded = crate::network::load_checkpoint(&ckpt_path).unwrap();
        let mut expect = init;
        expect.params.set_mode(Mode::Eval);
        assert_eq!(loaded.params, expect.params);

        // a short run: log rows = steps + epochs
        let config = TrainConfig {
            epochs: 2,
            batch_size: 32,
            val_fraction: 0.1,
            ..TrainConfig::default()
        };
        let mut ckpt2 = expect.clone();
        let report = train(&mut ckpt2, &set, &neighbours, &config, &ckpt_path, &log_path).unwrap();
        let content = std::fs::read_to_string(&log_path).unwrap();
        let rows = content.lines().count();
        assert_eq!(rows, report.steps + report.epochs);
        assert_eq!(rows, report.log_rows);
    }

    #[test]
    fn code_utilization_rises_on_product_of_spheres_data() {
        // training data uniform on the product of spheres (d_in = M·K)
        let m = 2;
        let k = 4;
        let dim = m * k;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 256;
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for _ in 0..m {
                let mut block: Vec<f32> = (0..k)
                    .map(|_| {
                        let v: f64 = rng.sample(rand_distr::StandardNormal);
                        v as f32
                    })
                    .collect();
                let norm: f32 = block.iter().map(|v| v * v).sum::<f32>().sqrt();
                for v in block.iter_mut() {
                    *v /= norm;
                }
                data.extend_from_slice(&block);
            }
        }
        let set = VectorSet::new(dim, data).unwrap();
        let neighbours = crate::io::self_neighbours(&set, 10).unwrap();
        let config = CatalyserConfig { d_in: dim, hidden: 16, hidden_layers: 2, m, k };
        let params = ModelParams::init(config, 19).unwrap();
        let mut ckpt = Checkpoint::fresh(params, AdamParams::default());
        let dir = tempfile::tempdir().unwrap();
        let tconfig = TrainConfig {
            epochs: 10,
            batch_size: 32,
            val_fraction: 0.0,
            seed: 20,
            ..TrainConfig::default()
        };
        train(
            &mut ckpt,
            &set,
            &neighbours,
            &tconfig,
            &dir.path().join("m.ckpt"),
            &dir.path().join("l.csv"),
        )
        .unwrap();
        let codes = encode_set(&ckpt.params, &set).unwrap();
        let entropies = code_histogram_entropies(&codes, m, k);
        let floor = 0.9 * (k as f64).log2();
        for (b, e) in entropies.iter().enumerate() {
            assert!(*e >= floor, "block {b} entropy {e} < {floor}");
        }
    }
}
