//! LSH, ITQ and PQ reference methods for the benchmark comparison.

pub mod itq;
pub mod lsh;
pub mod pq;

pub use itq::{itq_train, ItqModel};
pub use lsh::{lsh_train, LshModel};
pub use pq::{pq_train, PqModel};

use crate::io::OrdF64;

/// Hamming distance between two packed bit codes of equal word length.
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Exhaustive symmetric Hamming ranking, ties broken by ascending index.
pub fn hamming_scan(query: &[u64], database: &[Vec<u64>], top_n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..database.len() as u32).collect();
    order.sort_unstable_by_key(|&i| (hamming(query, &database[i as usize]), i));
    order.truncate(top_n);
    order
}

/// Exhaustive ascending ranking of precomputed distances, ties by index.
pub fn distance_scan(distances: &[f64], top_n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..distances.len() as u32).collect();
    order.sort_unstable_by_key(|&i| (OrdF64(distances[i as usize]), i));
    order.truncate(top_n);
    order
}

pub(crate) fn bits_to_words(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}
