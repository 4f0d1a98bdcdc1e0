//! Benchmark orchestration: recall metrics, bit-rate sweeps across methods,
//! weight-projection export and the CSV/JSON report artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{hamming_scan, itq_train, lsh_train, pq_train};
use crate::codec::{search, CodeDatabase, DistanceMode, QueryRepr};
use crate::error::{Error, Result};
use crate::io::{write_code_db, NeighbourTable, VectorSet};
use crate::network::{encode_set, soft_code_set, CatalyserConfig, Checkpoint, ModelParams};
use crate::numerics::AdamParams;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Lsh,
    Itq,
    Pq,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "lsh" => Ok(Method::Lsh),
            "itq" => Ok(Method::Itq),
            "pq" => Ok(Method::Pq),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Lsh => "lsh",
            Method::Itq => "itq",
            Method::Pq => "pq",
        }
    }
}

/// Fraction of queries whose true first neighbour appears in the top `n`
/// ranked candidates.
pub fn recall_at(ranked: &[Vec<u32>], gt_first: &[u32], n: usize) -> Result<f64> {
    if ranked.len() != gt_first.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} ground-truth entries",
            ranked.len(),
            gt_first.len()
        )));
    }
    if ranked.is_empty() {
        return Err(Error::Contract("recall over zero queries".into()));
    }
    if let Some(short) = ranked.iter().find(|r| r.len() < n) {
        return Err(Error::Contract(format!(
            "ranked list of {} entries shorter than N = {n}",
            short.len()
        )));
    }
    let hits = ranked
        .iter()
        .zip(gt_first)
        .filter(|(row, &gt)| row[..n].contains(&gt))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: Method,
    pub bits: usize,
    pub m: usize,
    pub k: usize,
    /// (N, 1-Recall@N)
    pub recalls: Vec<(usize, f64)>,
    pub encode_time_ms: f64,
    pub scan_time_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallReport {
    pub cells: Vec<BenchCell>,
}

impl RecallReport {
    pub fn recall(&self, method: Method, bits: usize, n: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.bits == bits && c.error.is_none())
            .and_then(|c| c.recalls.iter().find(|(rn, _)| *rn == n).map(|(_, r)| *r))
    }
}

#[derive(Debug, Clone)]
pub struct BenchInputs<'a> {
    pub train: &'a VectorSet,
    pub query: &'a VectorSet,
    pub database: &'a VectorSet,
    /// query → database ground truth (first entry per row is the true NN)
    pub gt: &'a NeighbourTable,
    /// self-neighbour table over the training split (triplet supervision)
    pub train_neighbours: &'a NeighbourTable,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub methods: Vec<Method>,
    pub bits: Vec<usize>,
    /// (bits, M, K) cells for the proposed method; every entry must satisfy
    /// M·ceil(log2 K) = bits
    pub grid: Vec<(usize, usize, usize)>,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub train: TrainConfig,
    pub adam: AdamParams,
    pub itq_iters: usize,
    pub kmeans_iters: usize,
    pub recall_ns: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            methods: vec![Method::Proposed, Method::Lsh, Method::Itq, Method::Pq],
            bits: vec![16, 32, 64, 128],
            grid: vec![(16, 4, 16), (32, 8, 16), (64, 8, 256), (128, 16, 256)],
            hidden: 256,
            hidden_layers: 2,
            train: TrainConfig::default(),
            adam: AdamParams::default(),
            itq_iters: 50,
            kmeans_iters: 25,
            recall_ns: vec![1, 10, 100],
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn grid_for(&self, bits: usize) -> Result<(usize, usize)> {
        let (_, m, k) = self
            .grid
            .iter()
            .find(|(b, _, _)| *b == bits)
            .ok_or_else(|| Error::Config(format!("no (M, K) grid entry for {bits} bits")))?;
        let need = m * crate::codec::bits_per_index(*k);
        if need != bits {
            return Err(Error::Config(format!(
                "grid entry ({m}, {k}) occupies {need} bits, not {bits}"
            )));
        }
        Ok((*m, *k))
    }
}

/// Trains/evaluates every (method, bits) cell, writes one CSV row per
/// (method, bits, N) plus a JSON summary, and returns the report. A failed
/// cell is recorded and the remaining cells still run.
pub fn run_benchmark(
    inputs: &BenchInputs,
    options: &BenchOptions,
    outdir: &Path,
) -> Result<RecallReport> {
    std::fs::create_dir_all(outdir)?;
    let mut cells = Vec::new();
    for &bits in &options.bits {
        for &method in &options.methods {
            let cell = run_cell(inputs, options, outdir, method, bits);
            cells.push(match cell {
                Ok(c) => c,
                Err(e) => BenchCell {
                    method,
                    bits,
                    m: 0,
                    k: 0,
                    recalls: Vec::new(),
                    encode_time_ms: 0.0,
                    scan_time_ms: 0.0,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let report = RecallReport { cells };
    write_report(&report, outdir)?;
    Ok(report)
}

fn write_report(report: &RecallReport, outdir: &Path) -> Result<()> {
    let mut csv = BufWriter::new(File::create(outdir.join("bench.csv"))?);
    writeln!(csv, "method,bits,m,k,n,recall,encode_time_ms,scan_time_ms")?;
    for cell in &report.cells {
        if cell.error.is_some() {
            continue;
        }
        for &(n, r) in &cell.recalls {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                cell.method.name(),
                cell.bits,
                cell.m,
                cell.k,
                n,
                r,
                cell.encode_time_ms,
                cell.scan_time_ms
            )?;
        }
    }
    csv.flush()?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    std::fs::write(outdir.join("bench.json"), json)?;
    Ok(())
}

fn run_cell(
    inputs: &BenchInputs,
    options: &BenchOptions,
    outdir: &Path,
    method: Method,
    bits: usize,
) -> Result<BenchCell> {
    let ns: Vec<usize> = options
        .recall_ns
        .iter()
        .copied()
        .filter(|&n| n <= inputs.database.count())
        .collect();
    let max_n = ns.iter().copied().max().unwrap_or(1);
    // distinct deterministic seed per cell
    let cell_seed = options
        .seed
        .wrapping_add(bits as u64)
        .wrapping_mul(31)
        .wrapping_add(method.name().len() as u64);

    match method {
        Method::Proposed => {
            let (m, k) = options.grid_for(bits)?;
            let config = CatalyserConfig {
                d_in: inputs.train.dim(),
                hidden: options.hidden,
                hidden_layers: options.hidden_layers,
                m,
                k,
            };
            let params = ModelParams::init(config, cell_seed)?;
            let mut ckpt = Checkpoint::fresh(params, options.adam);
            let tconfig = TrainConfig { seed: cell_seed, ..options.train.clone() };
            let stem = format!("proposed_{bits}");
            train(
                &mut ckpt,
                inputs.train,
                inputs.train_neighbours,
                &tconfig,
                &outdir.join(format!("{stem}.ckpt")),
                &outdir.join(format!("{stem}_train.csv")),
            )?;

            let t0 = Instant::now();
            let codes = encode_set(&ckpt.params, inputs.database)?;
            let encode_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            let db = CodeDatabase::from_codes(m, k, &codes)?;
            write_code_db(&outdir.join(format!("{stem}.codes")), &db)?;

            let queries = soft_code_set(&ckpt.params, inputs.query)?;
            let t0 = Instant::now();
            let ranked: Vec<Vec<u32>> = queries
                .iter()
                .map(|y| search(&QueryRepr::Embedding(y.clone()), &db, max_n, DistanceMode::Adc))
                .collect::<Result<_>>()?;
            let scan_time_ms = t0.elapsed().as_secs_f64() * 1e3;

            finish_cell(method, bits, m, k, &ranked, inputs, &ns, encode_time_ms, scan_time_ms)
        }
        Method::Lsh => {
            let model = lsh_train(inputs.train, bits, cell_seed)?;
            model.save(&outdir.join(format!("lsh_{bits}.ckpt")))?;
            let t0 = Instant::now();
            let db_codes = model.encode_set(inputs.database);
            let encode_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            let q_codes = model.encode_set(inputs.query);
            let t0 = Instant::now();
            let ranked: Vec<Vec<u32>> = q_codes
                .iter()
                .map(|q| hamming_scan(q, &db_codes, max_n))
                .collect();
            let scan_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            finish_cell(method, bits, bits, 2, &ranked, inputs, &ns, encode_time_ms, scan_time_ms)
        }
        Method::Itq => {
            let model = itq_train(inputs.train, bits, options.itq_iters, cell_seed)?;
            model.save(&outdir.join(format!("itq_{bits}.ckpt")))?;
            let t0 = Instant::now();
            let db_codes = model.encode_set(inputs.database);
            let encode_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            let q_codes = model.encode_set(inputs.query);
            let t0 = Instant::now();
            let ranked: Vec<Vec<u32>> = q_codes
                .iter()
                .map(|q| hamming_scan(q, &db_codes, max_n))
                .collect();
            let scan_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            finish_cell(method, bits, model.bits, 2, &ranked, inputs, &ns, encode_time_ms, scan_time_ms)
        }
        Method::Pq => {
            if bits % 8 != 0 {
                return Err(Error::Config(format!(
                    "PQ with K* = 256 needs a bit budget divisible by 8, got {bits}"
                )));
            }
            let m_star = bits / 8;
            let model = pq_train(inputs.train, m_star, 256, options.kmeans_iters, cell_seed)?;
            model.save(&outdir.join(format!("pq_{bits}.ckpt")))?;
            let t0 = Instant::now();
            let db_codes = model.encode_set(inputs.database);
            let encode_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            let t0 = Instant::now();
            let ranked: Vec<Vec<u32>> = (0..inputs.query.count())
                .map(|qi| {
                    let table = model.adc_table(inputs.query.row(qi));
                    let dists: Vec<f64> = db_codes
                        .iter()
                        .map(|c| model.adc_from_table(&table, c))
                        .collect();
                    crate::baselines::distance_scan(&dists, max_n)
                })
                .collect();
            let scan_time_ms = t0.elapsed().as_secs_f64() * 1e3;
            finish_cell(method, bits, m_star, 256, &ranked, inputs, &ns, encode_time_ms, scan_time_ms)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_cell(
    method: Method,
    bits: usize,
    m: usize,
    k: usize,
    ranked: &[Vec<u32>],
    inputs: &BenchInputs,
    ns: &[usize],
    encode_time_ms: f64,
    scan_time_ms: f64,
) -> Result<BenchCell> {
    let gt_first: Vec<u32> = inputs.gt.rows.iter().map(|r| r[0]).collect();
    let recalls = ns
        .iter()
        .map(|&n| Ok((n, recall_at(ranked, &gt_first, n)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchCell {
        method,
        bits,
        m,
        k,
        recalls,
        encode_time_ms,
        scan_time_ms,
        error: None,
    })
}

/// Per block, projects up to `per_block` quantiser rows onto two randomly
/// chosen coordinate axes and writes CSV rows (block, axis_i, axis_j, w_x,
/// w_y). When an embedding sample is supplied its matching projections are
/// written next to the weights file with the same layout.
pub fn export_weight_projections(
    params: &ModelParams,
    y_sample: Option<&[Vec<f64>]>,
    per_block: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let k = params.config.k;
    let m = params.config.m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_out = BufWriter::new(File::create(path)?);
    writeln!(w_out, "block,axis_i,axis_j,w_x,w_y")?;
    let mut axes = Vec::with_capacity(m);
    for (mi, w) in params.quantiser.iter().enumerate() {
        let axis_i = rng.gen_range(0..k);
        let axis_j = if k > 1 {
            let mut j = rng.gen_range(0..k - 1);
            if j >= axis_i {
                j += 1;
            }
            j
        } else {
            axis_i
        };
        axes.push((axis_i, axis_j));
        let mut rows: Vec<usize> = (0..k).collect();
        rows.shuffle(&mut rng);
        rows.truncate(per_block.min(k));
        rows.sort_unstable();
        for r in rows {
            writeln!(
                w_out,
                "{mi},{axis_i},{axis_j},{},{}",
                w.row(r)[axis_i],
                w.row(r)[axis_j]
            )?;
        }
    }
    w_out.flush()?;

    if let Some(sample) = y_sample {
        let stem = path.with_extension("");
        let y_path = format!("{}_y.csv", stem.display());
        let mut y_out = BufWriter::new(File::create(y_path)?);
        writeln!(y_out, "block,axis_i,axis_j,y_x,y_y")?;
        for (mi, &(axis_i, axis_j)) in axes.iter().enumerate() {
            for y in sample.iter().take(per_block) {
                let block = &y[mi * k..(mi + 1) * k];
                writeln!(y_out, "{mi},{axis_i},{axis_j},{},{}", block[axis_i], block[axis_j])?;
            }
        }
        y_out.flush()?;
    }
    Ok(())
}
