use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use super::PromptError;

/// Embedding width.
pub const EMBED_DIM: usize = 32;
/// Token hash buckets.
pub const HASH_BUCKETS: usize = 1024;
/// Seed of the frozen projection.
pub const PROJECTION_SEED: u64 = 0xC0FFEE;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer applied to `x + golden`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frozen hashed bag-of-words encoder.
///
/// Text is lowercased and split on whitespace; each token lands in bucket
/// `fnv1a64(token) % 1024`. The bucket-count vector is multiplied by a
/// `32 × 1024` projection whose entry at flat index `i = row·1024 + bucket`
/// is `2·u − 1` with `u = (splitmix64(0xC0FFEE + i) >> 11) / 2⁵³`, and the
/// result is L2-normalized.
#[derive(Debug)]
pub struct TextEncoder {
    projection: Vec<f64>,
    calls: AtomicU64,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for TextEncoder {
    fn clone(&self) -> Self {
        Self {
            projection: self.projection.clone(),
            calls: AtomicU64::new(0),
        }
    }
}

impl TextEncoder {
    pub fn new() -> Self {
        let projection = (0..EMBED_DIM * HASH_BUCKETS)
            .map(|i| {
                let u = (splitmix64(PROJECTION_SEED.wrapping_add(i as u64)) >> 11) as f64 / (1u64 << 53) as f64;
                2.0 * u - 1.0
            })
            .collect();
        Self {
            projection,
            calls: AtomicU64::new(0),
        }
    }

    /// Number of `encode` calls made on this instance.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>, PromptError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let lower = text.to_lowercase();
        let mut counts = vec![0u32; HASH_BUCKETS];
        let mut any = false;
        for tok in lower.split_whitespace() {
            counts[(fnv1a64(tok.as_bytes()) % HASH_BUCKETS as u64) as usize] += 1;
            any = true;
        }
        if !any {
            return Err(PromptError::EmptyText);
        }
        let mut out = vec![0.0; EMBED_DIM];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.projection[r * HASH_BUCKETS..(r + 1) * HASH_BUCKETS];
            *o = counts
                .iter()
                .zip(row)
                .filter(|(&c, _)| c > 0)
                .map(|(&c, &p)| c as f64 * p)
                .sum();
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(PromptError::EmptyText);
        }
        out.iter_mut().for_each(|x| *x /= norm);
        Ok(out)
    }
}

fn shared() -> &'static TextEncoder {
    static ENCODER: OnceLock<TextEncoder> = OnceLock::new();
    ENCODER.get_or_init(TextEncoder::new)
}

/// Encodes with the process-wide frozen encoder.
pub fn encode_prompt(text: &str) -> Result<Vec<f64>, PromptError> {
    shared().encode(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_of_case_and_whitespace() {
        assert_eq!(encode_prompt("nuclei").unwrap(), encode_prompt("  NUCLEI ").unwrap());
    }

    #[test]
    fn unit_norm() {
        for t in ["nuclei", "segment all nuclei", "a b c d e f g h i j k"] {
            let e = encode_prompt(t).unwrap();
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
            assert_eq!(e.len(), EMBED_DIM);
        }
    }

    #[test]
    fn empty_text_rejected() {
        assert_eq!(encode_prompt("   \t ").unwrap_err(), PromptError::EmptyText);
        assert_eq!(encode_prompt("").unwrap_err(), PromptError::EmptyText);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn counts_calls() {
        let enc = TextEncoder::new();
        enc.encode("nuclei").unwrap();
        let _ = enc.encode("");
        assert_eq!(enc.calls(), 2);
    }
}
