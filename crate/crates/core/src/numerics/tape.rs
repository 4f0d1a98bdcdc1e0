//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes to a [`Tape`]; inputs are always recorded before
//! outputs, so reverse creation order is a reverse topological order and
//! [`Tape::backward`] visits every node exactly once. A tape is
//! single-threaded; independent tapes can run in parallel over shared
//! immutable parameter snapshots.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Guard used inside normalization denominators.
pub const EPS_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics produced by a train-mode batch-norm op, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf { tracked: bool },
    /// out = x · wᵀ with x: [B,I], w: [O,I]
    Linear { x: Var, w: Var },
    /// broadcast bias [C] over rows of x [B,C]
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// mul·x + add, elementwise; only the slope matters for backward
    Affine { x: Var, mul: f64 },
    Relu { x: Var },
    /// per-row, per-block ℓ2 normalization; `norms` caches the raw block norms
    L2NormalizeBlocks { x: Var, blocks: usize, norms: Vec<f64> },
    SoftmaxBlocks { x: Var, blocks: usize },
    /// `xhat` is the normalized input before scale/shift, `inv_std` per feature
    BatchNorm { x: Var, gamma: Var, beta: Var, train: bool, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    /// per-row Euclidean norm: [B,D] -> [B]
    RowNorms { x: Var },
    Log { x: Var },
    ClampMin { x: Var, min: f64 },
    Sum { x: Var },
    Mean { x: Var },
    SelectRows { x: Var, indices: Vec<usize> },
    /// forward: per-block one-hot argmax; backward: identity (straight-through)
    SteArgmaxBlocks { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero tensor when `v` was not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        match &self.grads[v.0] {
            Some(g) => g.data().iter().all(|&x| x == 0.0),
            None => true,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf: gradients accumulate here.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { tracked: true })
    }

    /// An untracked input: backward stops here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { tracked: false })
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, i) = self.dims2(x)?;
        let (o, iw) = self.dims2(w)?;
        if i != iw {
            return Err(Error::Shape(format!("linear: x cols {i} != w cols {iw}")));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let xrow = &xs[r * i..(r + 1) * i];
            let orow = &mut out[r * o..(r + 1) * o];
            for (c, oc) in orow.iter_mut().enumerate() {
                let wrow = &ws[c * i..(c + 1) * i];
                let mut acc = 0.0;
                for k in 0..i {
                    acc += xrow[k] * wrow[k];
                }
                *oc = acc;
            }
        }
        Ok(self.push(Tensor::new(vec![b, o], out)?, Op::Linear { x, w }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias len {} != cols {c}",
                self.value(bias).numel()
            )));
        }
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut out = Vec::with_capacity(b * c);
        for r in 0..b {
            for j in 0..c {
                out.push(xs[r * c + j] + bs[j]);
            }
        }
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::AddBias { x, bias }))
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{ctx}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    /// Hinge `max(x, 0)`; also the network non-linearity.
    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu { x })
    }

    fn block_width(&self, v: Var, blocks: usize, ctx: &str) -> Result<usize> {
        let (_, c) = self.dims2(v)?;
        if blocks == 0 || c % blocks != 0 || c / blocks == 0 {
            return Err(Error::Shape(format!(
                "{ctx}: {c} columns not divisible into {blocks} non-empty blocks"
            )));
        }
        Ok(c / blocks)
    }

    /// Per-block ℓ2 normalization: each row is split into `blocks` equal
    /// slices and each slice is scaled by `1/max(‖slice‖, EPS_NORM)`.
    pub fn l2_normalize_blocks(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let k = self.block_width(x, blocks, "l2_normalize_blocks")?;
        let (b, c) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut norms = Vec::with_capacity(b * blocks);
        for r in 0..b {
            for m in 0..blocks {
                let off = r * c + m * k;
                let slice = &xs[off..off + k];
                let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.push(norm);
                let denom = norm.max(EPS_NORM);
                for (j, v) in slice.iter().enumerate() {
                    out[off + j] = v / denom;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, c], out)?,
            Op::L2NormalizeBlocks { x, blocks, norms },
        ))
    }

    /// Softmax within each of `blocks` equal column slices of every row,
    /// computed with max-subtraction.
    pub fn softmax_blocks(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let k = self.block_width(x, blocks, "softmax_blocks")?;
        let (b, c) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            for m in 0..blocks {
                let off = r * c + m * k;
                let slice = &xs[off..off + k];
                let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, v) in slice.iter().enumerate() {
                    let e = (v - hi).exp();
                    out[off + j] = e;
                    total += e;
                }
                for j in 0..k {
                    out[off + j] /= total;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::SoftmaxBlocks { x, blocks }))
    }

    /// Batch normalization. In train mode the batch statistics are used and
    /// returned so the caller can update running estimates; in eval mode the
    /// provided running statistics are used. `gamma`/`beta` are per-feature.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<(Var, BatchStats)> {
        let (b, c) = self.dims2(x)?;
        if b == 0 {
            return Err(Error::Shape("batch_norm: empty batch".into()));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape("batch_norm: gamma/beta size mismatch".into()));
        }
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for r in 0..b {
                for j in 0..c {
                    mean[j] += xs[r * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= b as f64;
            }
            let mut var = vec![0.0; c];
            for r in 0..b {
                for j in 0..c {
                    let d = xs[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= b as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data().to_vec();
        let bs = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; b * c];
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            for j in 0..c {
                let h = (xs[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gs[j] * h + bs[j];
            }
        }
        let stats = BatchStats {
            mean,
            var,
        };
        let v = self.push(
            Tensor::new(vec![b, c], out)?,
            Op::BatchNorm { x, gamma, beta, train, xhat, inv_std },
        );
        Ok((v, stats))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let b = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc) = self.dims2(p)?;
            if pb != b {
                return Err(Error::Shape("concat_cols: row count mismatch".into()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; b * total];
        let mut col = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let ps = self.value(p).data();
            for r in 0..b {
                out[r * total + col..r * total + col + w]
                    .copy_from_slice(&ps[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(self.push(
            Tensor::new(vec![b, total], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * len];
        for r in 0..b {
            out[r * len..(r + 1) * len].copy_from_slice(&xs[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![b, len], out)?, Op::SliceCols { x, start, len }))
    }

    /// Splits the columns of `x` into `blocks` equal slices.
    pub fn split_cols(&mut self, x: Var, blocks: usize) -> Result<Vec<Var>> {
        let k = self.block_width(x, blocks, "split_cols")?;
        (0..blocks).map(|m| self.slice_cols(x, m * k, k)).collect()
    }

    /// Per-row Euclidean norm: [B,D] -> [B].
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let row = &xs[r * c..(r + 1) * c];
            out.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        Ok(self.push(Tensor::new(vec![b], out)?, Op::RowNorms { x }))
    }

    /// Natural logarithm, elementwise. Inputs must be positive; pair with
    /// [`Tape::clamp_min`] when zeros are possible.
    pub fn log(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Log { x })
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(min)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::ClampMin { x, min })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean { x })
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::Shape(format!("select_rows: index {bad} >= {b}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out)?,
            Op::SelectRows { x, indices: indices.to_vec() },
        ))
    }

    /// Straight-through block argmax: forward emits the one-hot argmax per
    /// block (ties resolved to the lowest index), backward passes the
    /// incoming gradient through unchanged.
    pub fn ste_argmax_blocks(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let k = self.block_width(x, blocks, "ste_argmax_blocks")?;
        let (b, c) = self.dims2(x)?;
        let xs = self.value(x).data();
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ste_argmax_blocks input".into()));
        }
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            for m in 0..blocks {
                let off = r * c + m * k;
                let slice = &xs[off..off + k];
                let best = argmax(slice);
                out[off + best] = 1.0;
            }
        }
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::SteArgmaxBlocks { x }))
    }

    /// True when some tracked leaf is an ancestor of `v`.
    fn connected_to_tracked(&self, v: Var) -> bool {
        let mut visited = vec![false; v.0 + 1];
        let mut stack = vec![v.0];
        while let Some(id) = stack.pop() {
            if visited[id] {
                continue;
            }
            visited[id] = true;
            match &self.nodes[id].op {
                Op::Leaf { tracked } => {
                    if *tracked {
                        return true;
                    }
                }
                op => each_input(op, |i| stack.push(i.0)),
            }
        }
        false
    }

    /// Reverse pass from a scalar `loss`. Every node is visited at most once
    /// in reverse creation order (a reverse topological order of the DAG).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.connected_to_tracked(loss) {
            return Err(Error::Contract(
                "loss is detached from all tracked parameters".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(self.nodes[id].op, Op::Leaf { tracked: true });
            self.backprop_node(id, &g, &mut grads)?;
            if keep {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w } => {
                let (b, i) = (self.value(*x).rows(), self.value(*x).cols());
                let o = self.value(*w).rows();
                let gs = g.data();
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut dx = vec![0.0; b * i];
                let mut dw = vec![0.0; o * i];
                for r in 0..b {
                    let grow = &gs[r * o..(r + 1) * o];
                    let xrow = &xs[r * i..(r + 1) * i];
                    let dxrow = &mut dx[r * i..(r + 1) * i];
                    for (c, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wrow = &ws[c * i..(c + 1) * i];
                        let dwrow = &mut dw[c * i..(c + 1) * i];
                        for k in 0..i {
                            dxrow[k] += gv * wrow[k];
                            dwrow[k] += gv * xrow[k];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, i], dx)?);
                accumulate(grads, *w, Tensor::new(vec![o, i], dw)?);
            }
            Op::AddBias { x, bias } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let gs = g.data();
                let mut db = vec![0.0; c];
                for r in 0..b {
                    for j in 0..c {
                        db[j] += gs[r * c + j];
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::new(vec![c], db)?);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| -v).collect(),
                )?;
                accumulate(grads, *b, neg);
            }
            Op::Affine { x, mul, .. } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| mul * v).collect(),
                )?;
                accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xs)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )?;
                accumulate(grads, *x, dx);
            }
            Op::L2NormalizeBlocks { x, blocks, norms } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let k = c / blocks;
                let ys = node.value.data();
                let gs = g.data();
                let mut dx = vec![0.0; b * c];
                for r in 0..b {
                    for m in 0..*blocks {
                        let off = r * c + m * k;
                        let norm = norms[r * blocks + m];
                        let denom = norm.max(EPS_NORM);
                        if norm > EPS_NORM {
                            let y = &ys[off..off + k];
                            let gb = &gs[off..off + k];
                            let dot: f64 = y.iter().zip(gb).map(|(a, b)| a * b).sum();
                            for j in 0..k {
                                dx[off + j] = (gb[j] - y[j] * dot) / denom;
                            }
                        } else {
                            for j in 0..k {
                                dx[off + j] = gs[off + j] / denom;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
            }
            Op::SoftmaxBlocks { x, blocks } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let k = c / blocks;
                let zs = node.value.data();
                let gs = g.data();
                let mut dx = vec![0.0; b * c];
                for r in 0..b {
                    for m in 0..*blocks {
                        let off = r * c + m * k;
                        let z = &zs[off..off + k];
                        let gb = &gs[off..off + k];
                        let dot: f64 = z.iter().zip(gb).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dx[off + j] = z[j] * (gb[j] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
            }
            Op::BatchNorm { x, gamma, beta, train, xhat, inv_std } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let gs = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..b {
                    for j in 0..c {
                        dgamma[j] += gs[r * c + j] * xhat[r * c + j];
                        dbeta[j] += gs[r * c + j];
                    }
                }
                let mut dx = vec![0.0; b * c];
                if *train {
                    // sums of dxhat and dxhat·xhat per feature
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for r in 0..b {
                        for j in 0..c {
                            let dh = gs[r * c + j] * gam[j];
                            s1[j] += dh;
                            s2[j] += dh * xhat[r * c + j];
                        }
                    }
                    let n = b as f64;
                    for r in 0..b {
                        for j in 0..c {
                            let dh = gs[r * c + j] * gam[j];
                            dx[r * c + j] =
                                inv_std[j] / n * (n * dh - s1[j] - xhat[r * c + j] * s2[j]);
                        }
                    }
                } else {
                    for r in 0..b {
                        for j in 0..c {
                            dx[r * c + j] = gs[r * c + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
                accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::ConcatCols { parts } => {
                let b = node.value.rows();
                let total = node.value.cols();
                let gs = g.data();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![0.0; b * w];
                    for r in 0..b {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&gs[r * total + col..r * total + col + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![b, w], dp)?);
                    col += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let gs = g.data();
                let mut dx = vec![0.0; b * c];
                for r in 0..b {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gs[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
            }
            Op::RowNorms { x } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let xs = self.value(*x).data();
                let norms = node.value.data();
                let gs = g.data();
                let mut dx = vec![0.0; b * c];
                for r in 0..b {
                    let denom = norms[r].max(EPS_NORM);
                    for j in 0..c {
                        dx[r * c + j] = gs[r] * xs[r * c + j] / denom;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
            }
            Op::Log { x } => {
                let xs = self.value(*x).data();
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(xs).map(|(gv, xv)| gv / xv).collect(),
                )?;
                accumulate(grads, *x, dx);
            }
            Op::ClampMin { x, min } => {
                let xs = self.value(*x).data();
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xs)
                        .map(|(gv, xv)| if *xv > *min { *gv } else { 0.0 })
                        .collect(),
                )?;
                accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                let n = self.value(*x).numel();
                accumulate(grads, *x, Tensor::new(shape, vec![gv; n])?);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let gv = g.item() / n as f64;
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::new(shape, vec![gv; n])?);
            }
            Op::SelectRows { x, indices } => {
                let (b, c) = (self.value(*x).rows(), self.value(*x).cols());
                let gs = g.data();
                let mut dx = vec![0.0; b * c];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += gs[r * c + j];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c], dx)?);
            }
            Op::SteArgmaxBlocks { x } => {
                accumulate(grads, *x, g.clone());
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn each_input(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf { .. } => {}
        Op::Linear { x, w } => {
            f(*x);
            f(*w);
        }
        Op::AddBias { x, bias } => {
            f(*x);
            f(*bias);
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            f(*a);
            f(*b);
        }
        Op::Affine { x, .. }
        | Op::Relu { x }
        | Op::L2NormalizeBlocks { x, .. }
        | Op::SoftmaxBlocks { x, .. }
        | Op::SliceCols { x, .. }
        | Op::RowNorms { x }
        | Op::Log { x }
        | Op::ClampMin { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::SelectRows { x, .. }
        | Op::SteArgmaxBlocks { x, .. } => f(*x),
        Op::BatchNorm { x, gamma, beta, .. } => {
            f(*x);
            f(*gamma);
            f(*beta);
        }
        Op::ConcatCols { parts } => {
            for p in parts {
                f(*p);
            }
        }
    }
}

/// Index of the maximum entry, ties resolved to the lowest index.
pub fn argmax(slice: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in slice.iter().enumerate().skip(1) {
        if *v > slice[best] {
            best = i;
        }
    }
    best
}
