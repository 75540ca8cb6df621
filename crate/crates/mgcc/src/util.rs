//! Seeding, hashing, and matrix initialization helpers.

use crate::Real;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Seeded RNG used everywhere; ChaCha keeps streams portable across platforms.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed from a base seed and a component tag, so independent
/// components never share a stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// SHA-256 hex digest of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Matrix with entries drawn from N(0, std²). Row-major fill order, so the
/// same seed gives the same matrix regardless of later reshaping.
pub fn normal_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64(dist.sample(rng)))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// Matrix with entries uniform in [lo, hi).
pub fn uniform_matrix<F: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Array2<F> {
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64(rng.random_range(lo..hi)))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// Little-endian f32 bytes of a matrix, row-major. Used for weight hashing
/// and checkpoint blobs.
pub fn matrix_le_bytes<F: Real>(m: &Array2<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    out
}

/// Sinusoidal positional encodings, `len` rows of width `dim`.
pub fn sinusoidal_positions<F: Real>(len: usize, dim: usize) -> Array2<F> {
    let mut out = Array2::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out[[pos, i]] = F::from_f64(v);
        }
    }
    out
}
