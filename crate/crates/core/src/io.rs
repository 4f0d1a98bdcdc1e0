//! Bit-exact readers/writers for the BigANN vector formats (.fvecs/.bvecs/
//! .ivecs), dataset splitting, brute-force ground-truth generation and
//! persistence of packed code databases.
//!
//! All on-disk integers and floats are little-endian, matching the public
//! corpus at http://corpus-texmex.irisa.fr/.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::CodeDatabase;
use crate::error::{Error, Result};

/// Magic framing the packed code database file.
pub const CODE_DB_MAGIC: &[u8; 4] = b"SPH1";

/// A set of equal-dimension real vectors, stored row-major in single
/// precision (the precision of the on-disk formats).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    count: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if data.is_empty() {
                return Ok(VectorSet { dim: 0, count: 0, data });
            }
            return Err(Error::Shape("dim 0 with non-empty data".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "data length {} not a multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector set contains NaN/Inf".into()));
        }
        let count = data.len() / dim;
        Ok(VectorSet { dim, count, data })
    }

    pub fn empty() -> Self {
        VectorSet { dim: 0, count: 0, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// New set holding the selected rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Shape(format!("row {i} out of {}", self.count)));
            }
            data.extend_from_slice(self.row(i));
        }
        VectorSet::new(self.dim, data)
    }
}

/// Ground-truth neighbour lists: one row of `k` database indices per query,
/// sorted by ascending Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourTable {
    pub k: usize,
    pub rows: Vec<Vec<u32>>,
}

impl NeighbourTable {
    pub fn new(k: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Contract("neighbour table with k = 0".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::Contract(format!(
                "neighbour row of length {} in a k={k} table",
                bad.len()
            )));
        }
        Ok(NeighbourTable { k, rows })
    }
}

// ---------------------------------------------------------------------------
// record-oriented readers

struct RecordReader {
    inner: BufReader<File>,
    offset: u64,
    len: u64,
    path: std::path::PathBuf,
}

impl RecordReader {
    fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Ok(RecordReader {
            inner: BufReader::new(file),
            offset: 0,
            len,
            path: path.to_path_buf(),
        })
    }

    fn remaining(&self) -> u64 {
        self.len - self.offset
    }

    /// Reads the 4-byte record header; `record_start` is used for the error
    /// offset so truncation always reports the start of the bad record.
    fn read_i32(&mut self, record_start: u64) -> Result<i32> {
        if self.remaining() < 4 {
            return Err(Error::TruncatedRecord { path: self.path.clone(), offset: record_start });
        }
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        self.offset += 4;
        Ok(i32::from_le_bytes(buf))
    }

    fn read_payload(&mut self, bytes: u64, record_start: u64) -> Result<Vec<u8>> {
        if self.remaining() < bytes {
            return Err(Error::TruncatedRecord { path: self.path.clone(), offset: record_start });
        }
        let mut buf = vec![0u8; bytes as usize];
        self.inner.read_exact(&mut buf)?;
        self.offset += bytes;
        Ok(buf)
    }
}

fn check_dim(dim: i32, expected: Option<usize>, path: &Path) -> Result<usize> {
    if dim <= 0 {
        return Err(Error::format(path, format!("non-positive record dim {dim}")));
    }
    let dim = dim as usize;
    if let Some(e) = expected {
        if dim != e {
            return Err(Error::format(
                path,
                format!("inconsistent record dim {dim} (first record had {e})"),
            ));
        }
    }
    Ok(dim)
}

/// Reads an .fvecs file: per record a little-endian i32 dim followed by
/// `dim` little-endian f32 values. An empty file is the empty set.
pub fn read_fvecs(path: &Path) -> Result<VectorSet> {
    let mut r = RecordReader::open(path)?;
    let mut dim: Option<usize> = None;
    let mut data: Vec<f32> = Vec::new();
    while r.remaining() > 0 {
        let start = r.offset;
        let d = check_dim(r.read_i32(start)?, dim, path)?;
        dim = Some(d);
        let payload = r.read_payload(4 * d as u64, start)?;
        for c in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
    }
    match dim {
        Some(d) => VectorSet::new(d, data),
        None => Ok(VectorSet::empty()),
    }
}

/// Reads a .bvecs file: per record a little-endian i32 dim followed by
/// `dim` unsigned bytes, widened to reals in [0, 255].
pub fn read_bvecs(path: &Path) -> Result<VectorSet> {
    let mut r = RecordReader::open(path)?;
    let mut dim: Option<usize> = None;
    let mut data: Vec<f32> = Vec::new();
    while r.remaining() > 0 {
        let start = r.offset;
        let d = check_dim(r.read_i32(start)?, dim, path)?;
        dim = Some(d);
        let payload = r.read_payload(d as u64, start)?;
        data.extend(payload.iter().map(|&b| b as f32));
    }
    match dim {
        Some(d) => VectorSet::new(d, data),
        None => Ok(VectorSet::empty()),
    }
}

pub fn write_fvecs(path: &Path, set: &VectorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..set.count() {
        w.write_all(&(set.dim() as i32).to_le_bytes())?;
        for v in set.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an .ivecs file into a neighbour table (record = i32 k then k i32
/// indices). All records must share one k.
pub fn read_ivecs(path: &Path) -> Result<NeighbourTable> {
    let mut r = RecordReader::open(path)?;
    let mut k: Option<usize> = None;
    let mut rows: Vec<Vec<u32>> = Vec::new();
    while r.remaining() > 0 {
        let start = r.offset;
        let d = check_dim(r.read_i32(start)?, k, path)?;
        k = Some(d);
        let payload = r.read_payload(4 * d as u64, start)?;
        let row = payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as u32)
            .collect();
        rows.push(row);
    }
    match k {
        Some(k) => NeighbourTable::new(k, rows),
        None => Err(Error::format(path, "empty ivecs file")),
    }
}

pub fn write_ivecs(path: &Path, table: &NeighbourTable) -> Result<()> {
    if let Some(bad) = table.rows.iter().find(|r| r.len() != table.k) {
        return Err(Error::Contract(format!(
            "row of length {} in a k={} table",
            bad.len(),
            table.k
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for row in &table.rows {
        w.write_all(&(table.k as i32).to_le_bytes())?;
        for &idx in row {
            w.write_all(&(idx as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ground truth

/// Exact k-nearest neighbours under Euclidean distance, ties broken by
/// ascending database index. Pure over its inputs; parallel per query.
pub fn brute_force_neighbours(
    queries: &VectorSet,
    database: &VectorSet,
    k: usize,
) -> Result<NeighbourTable> {
    if queries.dim() != database.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != database dim {}",
            queries.dim(),
            database.dim()
        )));
    }
    if k == 0 || k > database.count() {
        return Err(Error::Contract(format!(
            "k = {k} out of range for database of {}",
            database.count()
        )));
    }
    let rows: Vec<Vec<u32>> = (0..queries.count())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            // max-heap of (dist, idx) keeping the k smallest
            let mut heap: std::collections::BinaryHeap<(OrdF64, u32)> =
                std::collections::BinaryHeap::with_capacity(k + 1);
            for di in 0..database.count() {
                let d = sq_dist_f64(q, database.row(di));
                let entry = (OrdF64(d), di as u32);
                if heap.len() < k {
                    heap.push(entry);
                } else if entry < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(entry);
                }
            }
            let mut items: Vec<(OrdF64, u32)> = heap.into_vec();
            items.sort_unstable();
            items.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    NeighbourTable::new(k, rows)
}

/// Squared Euclidean distance accumulated in f64.
pub fn sq_dist_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

/// Total order for f64 distances (inputs are validated finite on load).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Per-query k nearest within one set, excluding each point itself. Used to
/// build the triplet-supervision table over the training split.
pub fn self_neighbours(set: &VectorSet, k: usize) -> Result<NeighbourTable> {
    if k + 1 > set.count() {
        return Err(Error::Contract(format!(
            "k = {k} too large for self-neighbours over {} points",
            set.count()
        )));
    }
    let with_self = brute_force_neighbours(set, set, k + 1)?;
    let rows = with_self
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut out: Vec<u32> = row.iter().copied().filter(|&j| j != i as u32).collect();
            out.truncate(k);
            out
        })
        .collect();
    NeighbourTable::new(k, rows)
}

// ---------------------------------------------------------------------------
// splitting

/// Disjoint train/query/database index partitions, deterministic under seed.
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

pub fn split_dataset(set: &VectorSet, sizes: (usize, usize, usize), seed: u64) -> Result<Split> {
    let total = sizes.0 + sizes.1 + sizes.2;
    if total > set.count() {
        return Err(Error::Contract(format!(
            "split sizes {:?} oversubscribe {} rows",
            sizes,
            set.count()
        )));
    }
    let mut indices: Vec<usize> = (0..set.count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = indices[..sizes.0].to_vec();
    let query = indices[sizes.0..sizes.0 + sizes.1].to_vec();
    let database = indices[sizes.0 + sizes.1..total].to_vec();
    Ok(Split { train, query, database })
}

// ---------------------------------------------------------------------------
// packed code database persistence

pub fn write_code_db(path: &Path, db: &CodeDatabase) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODE_DB_MAGIC)?;
    w.write_all(&(db.m() as u32).to_le_bytes())?;
    w.write_all(&(db.k() as u32).to_le_bytes())?;
    w.write_all(&(db.count() as u32).to_le_bytes())?;
    w.write_all(db.payload())?;
    w.flush()?;
    Ok(())
}

pub fn read_code_db(path: &Path) -> Result<CodeDatabase> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CODE_DB_MAGIC {
        return Err(Error::format(path, "bad magic (expected SPH1)"));
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    let m = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let k = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let count = u32::from_le_bytes(buf) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    CodeDatabase::from_parts(m, k, count, payload)
        .map_err(|e| Error::format(path, format!("invalid code payload: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write_raw(path: &Path, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(bytes).unwrap();
    }

    #[test]
    fn fvecs_single_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.fvecs");
        let mut bytes = 4i32.to_le_bytes().to_vec();
        for v in [1.0f32, -2.0, 0.5, 3.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes.len(), 20);
        write_raw(&p, &bytes);
        let set = read_fvecs(&p).unwrap();
        assert_eq!(set.dim(), 4);
        assert_eq!(set.count(), 1);
        assert_eq!(set.row(0), &[1.0, -2.0, 0.5, 3.25]);
    }

    #[test]
    fn fvecs_empty_file_is_empty_set() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("empty.fvecs");
        write_raw(&p, &[]);
        let set = read_fvecs(&p).unwrap();
        assert_eq!(set.dim(), 0);
        assert_eq!(set.count(), 0);
    }

    #[test]
    fn fvecs_truncated_record_reports_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.fvecs");
        let mut bytes = 4i32.to_le_bytes().to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(0); // 21 bytes
        write_raw(&p, &bytes);
        match read_fvecs(&p) {
            Err(Error::TruncatedRecord { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn fvecs_inconsistent_dim_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("i.fvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        write_raw(&p, &bytes);
        assert!(matches!(read_fvecs(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn bvecs_widening_and_negative_dim() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("b.bvecs");
        let mut bytes = 4i32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0x00, 0x7F, 0xFF, 0x01]);
        write_raw(&p, &bytes);
        let set = read_bvecs(&p).unwrap();
        assert_eq!(set.row(0), &[0.0, 127.0, 255.0, 1.0]);

        let p2 = dir.path().join("neg.bvecs");
        write_raw(&p2, &(-1i32).to_le_bytes());
        assert!(matches!(read_bvecs(&p2), Err(Error::Format { .. })));
    }

    #[test]
    fn bvecs_two_records() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("two.bvecs");
        let mut bytes = Vec::new();
        for rec in [[1u8, 2], [3, 4]] {
            bytes.extend_from_slice(&2i32.to_le_bytes());
            bytes.extend_from_slice(&rec);
        }
        assert_eq!(bytes.len(), 12);
        write_raw(&p, &bytes);
        let set = read_bvecs(&p).unwrap();
        assert_eq!(set.count(), 2);
    }

    #[test]
    fn ivecs_roundtrip_and_size() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gt.ivecs");
        let table = NeighbourTable::new(3, vec![vec![3, 1, 4], vec![1, 5, 9]]).unwrap();
        write_ivecs(&p, &table).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 32); // 2 × (4 + 3·4)
        let back = read_ivecs(&p).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn ivecs_mixed_row_lengths_rejected() {
        assert!(NeighbourTable::new(3, vec![vec![1, 2, 3], vec![1]]).is_err());
        // a hand-built table bypassing the constructor is still refused by the writer
        let dir = tempdir().unwrap();
        let table = NeighbourTable { k: 2, rows: vec![vec![1, 2], vec![7]] };
        assert!(matches!(
            write_ivecs(&dir.path().join("bad.ivecs"), &table),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn brute_force_self_match_and_order() {
        let db = VectorSet::new(1, vec![0.0, 1.0, 3.0]).unwrap();
        let q = VectorSet::new(1, vec![0.9]).unwrap();
        let t = brute_force_neighbours(&q, &db, 2).unwrap();
        assert_eq!(t.rows[0], vec![1, 0]);

        let q2 = VectorSet::new(1, vec![3.0]).unwrap();
        let t2 = brute_force_neighbours(&q2, &db, 1).unwrap();
        assert_eq!(t2.rows[0], vec![2]);
    }

    #[test]
    fn brute_force_matches_naive_quadratic_scan() {
        // independent oracle: full distance sort per query
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        use rand::Rng;
        let dim = 16;
        let n = 100;
        let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let db = VectorSet::new(dim, data).unwrap();
        let qdata: Vec<f32> = (0..20 * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let queries = VectorSet::new(dim, qdata).unwrap();

        let fast = brute_force_neighbours(&queries, &db, 10).unwrap();
        for qi in 0..queries.count() {
            let mut all: Vec<(f64, u32)> = (0..n)
                .map(|di| (sq_dist_f64(queries.row(qi), db.row(di)), di as u32))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<u32> = all[..10].iter().map(|&(_, i)| i).collect();
            assert_eq!(fast.rows[qi], expect, "query {qi}");
        }
    }

    #[test]
    fn brute_force_rows_have_nondecreasing_distances() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        use rand::Rng;
        let db = VectorSet::new(4, (0..200).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap();
        let q = VectorSet::new(4, (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let t = brute_force_neighbours(&q, &db, 12).unwrap();
        for (qi, row) in t.rows.iter().enumerate() {
            let dists: Vec<f64> = row
                .iter()
                .map(|&di| sq_dist_f64(q.row(qi), db.row(di as usize)))
                .collect();
            assert!(dists.windows(2).all(|w| w[0] <= w[1]), "query {qi}");
        }
    }

    #[test]
    fn split_covers_disjointly_and_is_deterministic() {
        let set = VectorSet::new(1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = split_dataset(&set, (2, 1, 1), 5).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.query)
            .chain(&s.database)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let s2 = split_dataset(&set, (2, 1, 1), 5).unwrap();
        assert_eq!(s.train, s2.train);
        assert_eq!(s.query, s2.query);
        assert_eq!(s.database, s2.database);

        assert!(split_dataset(&set, (3, 1, 1), 5).is_err());
    }

    #[test]
    fn split_accepts_paper_sizes() {
        let set = VectorSet::new(1, vec![0.0f32; 1_040_000]).unwrap();
        let s = split_dataset(&set, (30_000, 10_000, 1_000_000), 1).unwrap();
        assert_eq!(s.train.len(), 30_000);
        assert_eq!(s.query.len(), 10_000);
        assert_eq!(s.database.len(), 1_000_000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fvecs_roundtrip(rows in 0usize..5, dim in 1usize..6, seed in 0u64..1000) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            use rand::Rng;
            let data: Vec<f32> = (0..rows * dim).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            let set = if rows == 0 { VectorSet::empty() } else { VectorSet::new(dim, data).unwrap() };
            let dir = tempdir().unwrap();
            let p = dir.path().join("r.fvecs");
            write_fvecs(&p, &set).unwrap();
            let back = read_fvecs(&p).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn ivecs_roundtrip_random(rows in 1usize..6, k in 1usize..5, seed in 0u64..1000) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            use rand::Rng;
            let table = NeighbourTable::new(
                k,
                (0..rows).map(|_| (0..k).map(|_| rng.gen_range(0u32..100)).collect()).collect(),
            ).unwrap();
            let dir = tempdir().unwrap();
            let p = dir.path().join("r.ivecs");
            write_ivecs(&p, &table).unwrap();
            prop_assert_eq!(read_ivecs(&p).unwrap(), table);
        }
    }
}
