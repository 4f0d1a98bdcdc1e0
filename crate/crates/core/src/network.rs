//! The catalyser and learned quantiser: feature vector → product-of-spheres
//! embedding y → relaxed code z (train) or hard code b (eval).
//!
//! The catalyser is a fully connected network (`hidden_layers` blocks of
//! FC + batch-norm + ReLU, then a final FC to M·K) whose output is
//! ℓ2-normalized per K-block. The quantiser is M separate K×K layers with
//! unit-norm rows; a block's soft code is the softmax of its logits and the
//! hard code is the argmax, i.e. the row with the smallest angular
//! difference to the block embedding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codec::Code;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::io::VectorSet;
use crate::numerics::{AdamParams, AdamState, BatchNormState, BatchStats, Mode, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPHC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalyserConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub m: usize,
    pub k: usize,
}

impl CatalyserConfig {
    pub fn new(d_in: usize, m: usize, k: usize) -> Self {
        CatalyserConfig { d_in, hidden: 256, hidden_layers: 2, m, k }
    }

    pub fn output_dim(&self) -> usize {
        self.m * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 {
            return Err(Error::Config("zero-width catalyser layer".into()));
        }
        if self.m < 1 || self.k < 2 {
            return Err(Error::Config(format!(
                "code geometry needs M >= 1 and K >= 2, got M={}, K={}",
                self.m, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// [out, in]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

/// All trainable state: catalyser layers with their batch norms (parameter
/// group A) and the M quantiser matrices (group B).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: CatalyserConfig,
    pub layers: Vec<DenseLayer>,
    pub batch_norms: Vec<BatchNormState>,
    pub quantiser: Vec<Tensor>,
}

impl ModelParams {
    /// Deterministic initialization: uniform fan-in scaling for the
    /// catalyser, quantiser rows drawn uniformly on the unit sphere.
    pub fn init(config: CatalyserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut batch_norms = Vec::new();
        let mut fan_in = config.d_in;
        for _ in 0..config.hidden_layers {
            layers.push(dense_init(&mut rng, config.hidden, fan_in)?);
            batch_norms.push(BatchNormState::new(config.hidden));
            fan_in = config.hidden;
        }
        layers.push(dense_init(&mut rng, config.output_dim(), fan_in)?);

        let mut quantiser = Vec::with_capacity(config.m);
        for _ in 0..config.m {
            let mut w = Tensor::zeros(vec![config.k, config.k]);
            for r in 0..config.k {
                let row: Vec<f64> = (0..config.k).map(|_| rng.sample(StandardNormal)).collect();
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (j, v) in row.iter().enumerate() {
                    w.data_mut()[r * config.k + j] = v / norm;
                }
            }
            quantiser.push(w);
        }
        Ok(ModelParams { config, layers, batch_norms, quantiser })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for bn in &mut self.batch_norms {
            bn.mode = mode;
        }
    }

    /// Group A: catalyser weights, biases and batch-norm scale/shift, in a
    /// fixed order shared with [`ModelVars::group_a`].
    pub fn group_a_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for bn in &mut self.batch_norms {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    pub fn group_a_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.shape().to_vec());
            out.push(layer.bias.shape().to_vec());
        }
        for bn in &self.batch_norms {
            out.push(bn.gamma.shape().to_vec());
            out.push(bn.beta.shape().to_vec());
        }
        out
    }

    /// Group B: the quantiser matrices.
    pub fn group_b_mut(&mut self) -> Vec<&mut Tensor> {
        self.quantiser.iter_mut().collect()
    }

    pub fn group_b_shapes(&self) -> Vec<Vec<usize>> {
        self.quantiser.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Projects every quantiser row back to unit norm (applied after each
    /// optimizer step).
    pub fn renormalize_quantiser_rows(&mut self) {
        let k = self.config.k;
        for w in &mut self.quantiser {
            for r in 0..k {
                let norm: f64 = w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for j in 0..k {
                        w.data_mut()[r * k + j] /= norm;
                    }
                }
            }
        }
    }
}

fn dense_init(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Result<DenseLayer> {
    let bound = (6.0 / in_dim as f64).sqrt();
    let weight = Tensor::new(
        vec![out_dim, in_dim],
        (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )?;
    Ok(DenseLayer { weight, bias: Tensor::zeros(vec![out_dim]) })
}

/// Tape bindings of every parameter tensor for one forward pass.
pub struct ModelVars {
    pub layer_weights: Vec<Var>,
    pub layer_biases: Vec<Var>,
    pub bn_gammas: Vec<Var>,
    pub bn_betas: Vec<Var>,
    pub quantiser: Vec<Var>,
}

impl ModelVars {
    /// Same order as [`ModelParams::group_a_mut`].
    pub fn group_a(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (&w, &b) in self.layer_weights.iter().zip(&self.layer_biases) {
            out.push(w);
            out.push(b);
        }
        for (&g, &b) in self.bn_gammas.iter().zip(&self.bn_betas) {
            out.push(g);
            out.push(b);
        }
        out
    }

    pub fn group_b(&self) -> Vec<Var> {
        self.quantiser.clone()
    }
}

/// Registers every parameter on the tape; `tracked = false` produces
/// constants for gradient-free forwards.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, tracked: bool) -> ModelVars {
    let mut reg = |t: &Tensor| {
        if tracked {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let layer_weights = params.layers.iter().map(|l| reg(&l.weight)).collect();
    let layer_biases: Vec<Var> = params.layers.iter().map(|l| reg(&l.bias)).collect();
    let bn_gammas = params.batch_norms.iter().map(|b| reg(&b.gamma)).collect();
    let bn_betas: Vec<Var> = params.batch_norms.iter().map(|b| reg(&b.beta)).collect();
    let quantiser = params.quantiser.iter().map(reg).collect();
    ModelVars { layer_weights, layer_biases, bn_gammas, bn_betas, quantiser }
}

/// Forward pass of the catalyser. Train mode normalizes with batch
/// statistics (returned for the running update); eval mode uses the stored
/// running statistics. Output blocks are unit-norm.
pub fn catalyse(
    tape: &mut Tape,
    vars: &ModelVars,
    params: &ModelParams,
    x: Var,
    mode: Mode,
) -> Result<(Var, Vec<BatchStats>)> {
    let (batch, d_in) = (tape.value(x).rows(), tape.value(x).cols());
    if batch == 0 {
        return Err(Error::Shape("catalyse: empty batch".into()));
    }
    if d_in != params.config.d_in {
        return Err(Error::Shape(format!(
            "catalyse: input dim {d_in} != configured {}",
            params.config.d_in
        )));
    }
    let mut h = x;
    let mut stats = Vec::with_capacity(params.batch_norms.len());
    for i in 0..params.config.hidden_layers {
        h = tape.linear(h, vars.layer_weights[i])?;
        h = tape.add_bias(h, vars.layer_biases[i])?;
        let bn = &params.batch_norms[i];
        let (normed, s) = tape.batch_norm(
            h,
            vars.bn_gammas[i],
            vars.bn_betas[i],
            &bn.running_mean,
            &bn.running_var,
            bn.eps,
            mode == Mode::Train,
        )?;
        stats.push(s);
        h = tape.relu(normed);
    }
    let last = params.config.hidden_layers;
    h = tape.linear(h, vars.layer_weights[last])?;
    h = tape.add_bias(h, vars.layer_biases[last])?;
    let y = tape.l2_normalize_blocks(h, params.config.m)?;
    Ok((y, stats))
}

/// Soft quantisation: per block, softmax of the block's quantiser logits.
pub fn quantise_soft(tape: &mut Tape, vars: &ModelVars, y: Var, m: usize) -> Result<Var> {
    let blocks = tape.split_cols(y, m)?;
    let mut logits = Vec::with_capacity(m);
    for (mi, &block) in blocks.iter().enumerate() {
        logits.push(tape.linear(block, vars.quantiser[mi])?);
    }
    let joined = tape.concat_cols(&logits)?;
    tape.softmax_blocks(joined, m)
}

/// Hard codes from embedding values: per block, the argmax of W_m·y^(m)
/// (equivalently of the softmax), ties to the lowest index.
pub fn quantise_hard(y: &Tensor, quantiser: &[Tensor], k: usize) -> Vec<Code> {
    let b = y.rows();
    let m = quantiser.len();
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = y.row(r);
        let mut indices = Vec::with_capacity(m);
        for (mi, w) in quantiser.iter().enumerate() {
            let block = &row[mi * k..(mi + 1) * k];
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ki in 0..k {
                let logit: f64 = w.row(ki).iter().zip(block).map(|(a, b)| a * b).sum();
                if logit > best_v {
                    best_v = logit;
                    best = ki;
                }
            }
            indices.push(best as u32);
        }
        out.push(Code::new(indices));
    }
    out
}

/// Rows of a vector set as an f64 batch tensor.
pub fn rows_to_tensor(set: &VectorSet, indices: &[usize]) -> Result<Tensor> {
    let d = set.dim();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend(set.row(i).iter().map(|&v| v as f64));
    }
    Tensor::new(vec![indices.len(), d], data)
}

/// Eval-mode embedding of a batch tensor (no gradients).
pub fn embed_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let (y, _) = catalyse(&mut tape, &vars, params, xv, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// Eval-mode embeddings of a whole set, parallel over fixed-size chunks
/// (independent tapes over one immutable parameter snapshot).
pub fn embed_set(params: &ModelParams, set: &VectorSet) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    let indices: Vec<usize> = (0..set.count()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let results: Result<Vec<Vec<Vec<f64>>>> = chunks
        .into_par_iter()
        .map(|chunk| {
            let x = rows_to_tensor(set, chunk)?;
            let y = embed_batch(params, &x)?;
            Ok((0..y.rows()).map(|r| y.row(r).to_vec()).collect())
        })
        .collect();
    Ok(results?.into_iter().flatten().collect())
}

/// Eval-mode relaxed codes (block softmax of the quantiser logits) of a
/// batch tensor.
pub fn soft_code_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let (y, _) = catalyse(&mut tape, &vars, params, xv, Mode::Eval)?;
    let z = quantise_soft(&mut tape, &vars, y, params.config.m)?;
    Ok(tape.value(z).clone())
}

/// Eval-mode relaxed codes of a whole set; the continuous query
/// representation used by asymmetric search.
pub fn soft_code_set(params: &ModelParams, set: &VectorSet) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    let indices: Vec<usize> = (0..set.count()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let results: Result<Vec<Vec<Vec<f64>>>> = chunks
        .into_par_iter()
        .map(|chunk| {
            let x = rows_to_tensor(set, chunk)?;
            let z = soft_code_batch(params, &x)?;
            Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
        })
        .collect();
    Ok(results?.into_iter().flatten().collect())
}

/// Eval-mode hard codes of a whole set.
pub fn encode_set(params: &ModelParams, set: &VectorSet) -> Result<Vec<Code>> {
    const CHUNK: usize = 256;
    let indices: Vec<usize> = (0..set.count()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let results: Result<Vec<Vec<Code>>> = chunks
        .into_par_iter()
        .map(|chunk| {
            let x = rows_to_tensor(set, chunk)?;
            let y = embed_batch(params, &x)?;
            Ok(quantise_hard(&y, &params.quantiser, params.config.k))
        })
        .collect();
    Ok(results?.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// checkpoints

/// Everything needed to resume training or encode reproducibly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam_a: AdamState,
    pub adam_b: AdamState,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams, hyper: AdamParams) -> Self {
        let adam_a = AdamState::new(&params.group_a_shapes(), hyper);
        let adam_b = AdamState::new(&params.group_b_shapes(), hyper);
        Checkpoint { params, adam_a, adam_b }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let cfg = &ckpt.params.config;
    let mut c = Container::default();
    c.meta.push((
        "config".into(),
        vec![
            cfg.d_in as u32,
            cfg.hidden as u32,
            cfg.hidden_layers as u32,
            cfg.m as u32,
            cfg.k as u32,
        ],
    ));
    for (i, layer) in ckpt.params.layers.iter().enumerate() {
        c.tensors.push((format!("layer{i}.weight"), layer.weight.clone()));
        c.tensors.push((format!("layer{i}.bias"), layer.bias.clone()));
    }
    for (i, bn) in ckpt.params.batch_norms.iter().enumerate() {
        c.tensors.push((format!("bn{i}.gamma"), bn.gamma.clone()));
        c.tensors.push((format!("bn{i}.beta"), bn.beta.clone()));
        c.tensors.push((
            format!("bn{i}.running_mean"),
            Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone())?,
        ));
        c.tensors.push((
            format!("bn{i}.running_var"),
            Tensor::new(vec![bn.running_var.len()], bn.running_var.clone())?,
        ));
        c.tensors.push((
            format!("bn{i}.hyper"),
            Tensor::new(vec![2], vec![bn.momentum, bn.eps])?,
        ));
    }
    for (i, w) in ckpt.params.quantiser.iter().enumerate() {
        c.tensors.push((format!("quantiser{i}"), w.clone()));
    }
    for (tag, adam) in [("a", &ckpt.adam_a), ("b", &ckpt.adam_b)] {
        c.tensors.push((
            format!("adam_{tag}.state"),
            Tensor::new(
                vec![5],
                vec![
                    adam.t as f64,
                    adam.hyper.alpha,
                    adam.hyper.beta1,
                    adam.hyper.beta2,
                    adam.hyper.eps,
                ],
            )?,
        ));
        for (i, m) in adam.m.iter().enumerate() {
            c.tensors.push((format!("adam_{tag}.m{i}"), m.clone()));
        }
        for (i, v) in adam.v.iter().enumerate() {
            c.tensors.push((format!("adam_{tag}.v{i}"), v.clone()));
        }
    }
    c.write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (version, c) = Container::read(path, CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let meta = c.require_meta("config", path)?;
    if meta.len() != 5 {
        return Err(Error::format(path, "malformed config entry"));
    }
    let config = CatalyserConfig {
        d_in: meta[0] as usize,
        hidden: meta[1] as usize,
        hidden_layers: meta[2] as usize,
        m: meta[3] as usize,
        k: meta[4] as usize,
    };
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;

    let mut layers = Vec::new();
    let mut fan_in = config.d_in;
    for i in 0..=config.hidden_layers {
        let out_dim = if i == config.hidden_layers { config.output_dim() } else { config.hidden };
        let weight = c.require_tensor(&format!("layer{i}.weight"), path)?.clone();
        let bias = c.require_tensor(&format!("layer{i}.bias"), path)?.clone();
        if weight.shape() != [out_dim, fan_in] || bias.shape() != [out_dim] {
            return Err(Error::format(path, format!("layer{i} shape mismatch vs config")));
        }
        layers.push(DenseLayer { weight, bias });
        fan_in = config.hidden;
    }
    let mut batch_norms = Vec::new();
    for i in 0..config.hidden_layers {
        let gamma = c.require_tensor(&format!("bn{i}.gamma"), path)?.clone();
        let beta = c.require_tensor(&format!("bn{i}.beta"), path)?.clone();
        let rm = c.require_tensor(&format!("bn{i}.running_mean"), path)?;
        let rv = c.require_tensor(&format!("bn{i}.running_var"), path)?;
        let hyper = c.require_tensor(&format!("bn{i}.hyper"), path)?;
        if gamma.numel() != config.hidden || rm.numel() != config.hidden {
            return Err(Error::format(path, format!("bn{i} shape mismatch vs config")));
        }
        batch_norms.push(BatchNormState {
            gamma,
            beta,
            running_mean: rm.data().to_vec(),
            running_var: rv.data().to_vec(),
            momentum: hyper.data()[0],
            eps: hyper.data()[1],
            mode: Mode::Eval,
        });
    }
    let mut quantiser = Vec::new();
    for i in 0..config.m {
        let w = c.require_tensor(&format!("quantiser{i}"), path)?.clone();
        if w.shape() != [config.k, config.k] {
            return Err(Error::format(path, format!("quantiser{i} shape mismatch vs config")));
        }
        quantiser.push(w);
    }
    let params = ModelParams { config, layers, batch_norms, quantiser };

    let load_adam = |tag: &str, shapes: &[Vec<usize>]| -> Result<AdamState> {
        let s = c.require_tensor(&format!("adam_{tag}.state"), path)?;
        let hyper = AdamParams {
            alpha: s.data()[1],
            beta1: s.data()[2],
            beta2: s.data()[3],
            eps: s.data()[4],
        };
        let mut adam = AdamState::new(shapes, hyper);
        adam.t = s.data()[0] as u64;
        for i in 0..shapes.len() {
            let m = c.require_tensor(&format!("adam_{tag}.m{i}"), path)?.clone();
            let v = c.require_tensor(&format!("adam_{tag}.v{i}"), path)?.clone();
            if m.shape() != shapes[i] || v.shape() != shapes[i] {
                return Err(Error::format(path, format!("adam_{tag} slot {i} shape mismatch")));
            }
            adam.m[i] = m;
            adam.v[i] = v;
        }
        Ok(adam)
    };
    let adam_a = load_adam("a", &params.group_a_shapes())?;
    let adam_b = load_adam("b", &params.group_b_shapes())?;
    Ok(Checkpoint { params, adam_a, adam_b })
}

/// Loads a checkpoint and rejects it when its code geometry differs from
/// the expected one.
pub fn load_checkpoint_expect(path: &Path, expect: &CatalyserConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config != *expect {
        return Err(Error::format(
            path,
            format!(
                "checkpoint config {:?} does not match expected {:?}",
                ckpt.params.config, expect
            ),
        ));
    }
    Ok(ckpt)
}
