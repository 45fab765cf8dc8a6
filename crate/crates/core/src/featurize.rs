//! Deterministic hashed character n-gram featurizer.
//!
//! Stands in for a frozen text encoder so raw-text records can be used
//! without any model download. Each padded character trigram is hashed with
//! 64-bit FNV-1a into one of `dim` buckets with a hash-derived sign, and the
//! result is L2-normalized.

pub const DEFAULT_DIM: usize = 64;

const NGRAM: usize = 3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Embeds `text` into a `dim`-dimensional unit vector (all zeros for empty text).
pub fn featurize(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim > 0, "featurizer dimension must be positive");
    let mut out = vec![0.0; dim];
    let chars: Vec<char> = std::iter::once('\u{2}')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('\u{3}'))
        .collect();
    if text.is_empty() {
        return out;
    }
    for window in chars.windows(NGRAM.min(chars.len())) {
        let gram: String = window.iter().collect();
        let h = fnv1a(gram.bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}
