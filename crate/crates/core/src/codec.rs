//! Structured-code binarization support: bit-packing, symmetric and
//! asymmetric (ADC) distances, and exhaustive code-space search.
//!
//! A code is M indices, one per block, each in [0, K). On disk every index
//! occupies ceil(log2 K) bits, blocks in order, bits filled LSB-first within
//! little-endian bytes and zero-padded to a byte boundary per code.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::OrdF64;

/// M block indices, each in [0, K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Code {
    pub indices: Vec<u32>,
}

impl Code {
    pub fn new(indices: Vec<u32>) -> Self {
        Code { indices }
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }
}

/// Bits needed to store one index in [0, K), i.e. ceil(log2 K).
pub fn bits_per_index(k: usize) -> usize {
    debug_assert!(k >= 2);
    (usize::BITS - (k - 1).leading_zeros()) as usize
}

/// Packed bytes per code: ceil(M·ceil(log2 K) / 8).
pub fn bytes_per_code(m: usize, k: usize) -> usize {
    (m * bits_per_index(k) + 7) / 8
}

pub fn pack(code: &Code, m: usize, k: usize) -> Result<Vec<u8>> {
    if code.m() != m {
        return Err(Error::Contract(format!("code has {} blocks, expected {m}", code.m())));
    }
    let bits = bits_per_index(k);
    let mut out = vec![0u8; bytes_per_code(m, k)];
    let mut pos = 0usize;
    for &idx in &code.indices {
        if idx as usize >= k {
            return Err(Error::Contract(format!("index {idx} >= K = {k}")));
        }
        for b in 0..bits {
            if idx >> b & 1 == 1 {
                out[(pos + b) / 8] |= 1 << ((pos + b) % 8);
            }
        }
        pos += bits;
    }
    Ok(out)
}

pub fn unpack(bytes: &[u8], m: usize, k: usize) -> Result<Code> {
    let need = bytes_per_code(m, k);
    if bytes.len() < need {
        return Err(Error::Contract(format!(
            "payload of {} bytes, need {need} for M={m}, K={k}",
            bytes.len()
        )));
    }
    let bits = bits_per_index(k);
    let mut indices = Vec::with_capacity(m);
    let mut pos = 0usize;
    for _ in 0..m {
        let mut idx = 0u32;
        for b in 0..bits {
            if bytes[(pos + b) / 8] >> ((pos + b) % 8) & 1 == 1 {
                idx |= 1 << b;
            }
        }
        if idx as usize >= k {
            return Err(Error::Contract(format!("decoded index {idx} >= K = {k}")));
        }
        indices.push(idx);
        pos += bits;
    }
    Ok(Code::new(indices))
}

/// An immutable collection of packed codes sharing one (M, K).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDatabase {
    m: usize,
    k: usize,
    count: usize,
    payload: Vec<u8>,
}

impl CodeDatabase {
    pub fn from_codes(m: usize, k: usize, codes: &[Code]) -> Result<Self> {
        let stride = bytes_per_code(m, k);
        let mut payload = Vec::with_capacity(codes.len() * stride);
        for c in codes {
            payload.extend_from_slice(&pack(c, m, k)?);
        }
        Ok(CodeDatabase { m, k, count: codes.len(), payload })
    }

    pub fn from_parts(m: usize, k: usize, count: usize, payload: Vec<u8>) -> Result<Self> {
        if m == 0 || k < 2 {
            return Err(Error::Contract(format!("invalid code geometry M={m}, K={k}")));
        }
        let expect = count * bytes_per_code(m, k);
        if payload.len() != expect {
            return Err(Error::Contract(format!(
                "payload of {} bytes, expected {expect} for {count} codes",
                payload.len()
            )));
        }
        // validate every stored index
        for i in 0..count {
            unpack(&payload[i * bytes_per_code(m, k)..], m, k)?;
        }
        Ok(CodeDatabase { m, k, count, payload })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn bytes_per_code(&self) -> usize {
        bytes_per_code(self.m, self.k)
    }

    pub fn code(&self, i: usize) -> Code {
        let stride = self.bytes_per_code();
        unpack(&self.payload[i * stride..(i + 1) * stride], self.m, self.k)
            .expect("validated on construction")
    }
}

/// Euclidean distance between the one-hot embeddings of two codes:
/// √(2 · #mismatched blocks).
pub fn symmetric_distance(a: &Code, b: &Code) -> Result<f64> {
    if a.m() != b.m() {
        return Err(Error::Shape(format!("code sizes {} vs {}", a.m(), b.m())));
    }
    let mismatches = a
        .indices
        .iter()
        .zip(&b.indices)
        .filter(|(x, y)| x != y)
        .count();
    Ok((2.0 * mismatches as f64).sqrt())
}

/// Per-query lookup table for asymmetric distance comparison: entry
/// `[m][k]` is the squared-distance contribution `2 − 2·y^(m)[k]` of
/// choosing index k in block m.
#[derive(Debug, Clone)]
pub struct AdcTable {
    pub m: usize,
    pub k: usize,
    entries: Vec<f64>,
}

impl AdcTable {
    pub fn entry(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.k + k]
    }

    /// Squared ADC distance to a code via M lookups.
    pub fn sq_distance(&self, code: &Code) -> f64 {
        let mut acc = 0.0;
        for (m, &idx) in code.indices.iter().enumerate() {
            acc += self.entries[m * self.k + idx as usize];
        }
        acc
    }

    pub fn distance(&self, code: &Code) -> f64 {
        self.sq_distance(code).max(0.0).sqrt()
    }
}

/// Builds the ADC table for a query embedding `y` of M unit-norm K-blocks.
pub fn build_adc_table(y_query: &[f64], m: usize, k: usize) -> Result<AdcTable> {
    if y_query.len() != m * k {
        return Err(Error::Shape(format!(
            "embedding of {} values, expected M·K = {}",
            y_query.len(),
            m * k
        )));
    }
    let entries = y_query.iter().map(|&v| 2.0 - 2.0 * v).collect();
    Ok(AdcTable { m, k, entries })
}

/// `‖y_query − onehot(code)‖₂` computed through the lookup table.
pub fn adc_distance(y_query: &[f64], code: &Code, m: usize, k: usize) -> Result<f64> {
    let table = build_adc_table(y_query, m, k)?;
    if code.m() != m {
        return Err(Error::Shape(format!("code has {} blocks, expected {m}", code.m())));
    }
    Ok(table.distance(code))
}

/// What the searcher is given for a query.
#[derive(Debug, Clone)]
pub enum QueryRepr {
    /// A binarized code (symmetric mode only).
    Code(Code),
    /// A catalyser embedding of M·K values (ADC mode only).
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    Symmetric,
    Adc,
}

/// Exhaustive scan over the database, ranked ascending by distance with
/// ties broken by ascending database index.
pub fn search(
    query: &QueryRepr,
    db: &CodeDatabase,
    top_n: usize,
    mode: DistanceMode,
) -> Result<Vec<u32>> {
    if db.count() == 0 {
        return Err(Error::Contract("search over an empty code database".into()));
    }
    if top_n == 0 || top_n > db.count() {
        return Err(Error::Contract(format!(
            "top_n = {top_n} out of range for {} codes",
            db.count()
        )));
    }
    // ranking is done on squared distances (monotone in the reported values)
    let sq_dists: Vec<f64> = match (mode, query) {
        (DistanceMode::Symmetric, QueryRepr::Code(qc)) => {
            if qc.m() != db.m() {
                return Err(Error::Shape(format!(
                    "query code has {} blocks, database {}",
                    qc.m(),
                    db.m()
                )));
            }
            scan(db, |code| {
                2.0 * qc
                    .indices
                    .iter()
                    .zip(&code.indices)
                    .filter(|(a, b)| a != b)
                    .count() as f64
            })
        }
        (DistanceMode::Adc, QueryRepr::Embedding(y)) => {
            let table = build_adc_table(y, db.m(), db.k())?;
            scan(db, |code| table.sq_distance(code))
        }
        (DistanceMode::Adc, QueryRepr::Code(_)) => {
            return Err(Error::Contract(
                "ADC mode requires an embedding query, got a binarized code".into(),
            ));
        }
        (DistanceMode::Symmetric, QueryRepr::Embedding(_)) => {
            return Err(Error::Contract(
                "symmetric mode requires a code query, got an embedding".into(),
            ));
        }
    };
    let mut order: Vec<u32> = (0..db.count() as u32).collect();
    order.sort_unstable_by_key(|&i| (OrdF64(sq_dists[i as usize]), i));
    order.truncate(top_n);
    Ok(order)
}

fn scan(db: &CodeDatabase, dist: impl Fn(&Code) -> f64 + Sync) -> Vec<f64> {
    (0..db.count())
        .into_par_iter()
        .map(|i| dist(&db.code(i)))
        .collect()
}

/// Materializes the concatenated one-hot embedding of a code (test oracle
/// support and reference path).
pub fn onehot_embedding(code: &Code, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; code.m() * k];
    for (m, &idx) in code.indices.iter().enumerate() {
        out[m * k + idx as usize] = 1.0;
    }
    out
}
