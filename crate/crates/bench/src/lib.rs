//! Benchmarks live in `benches/`; this crate only provides shared fixtures.

use mcl_core::{Image, Matrix};

/// Deterministic pseudo-random values in `[0, 1)` without an RNG dependency.
pub fn hashed(i: usize, salt: usize) -> f64 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (salt as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn matrix(rows: usize, cols: usize, salt: usize) -> Matrix {
    let data = (0..rows * cols).map(|i| hashed(i, salt) - 0.5).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn images(n: usize, channels: usize, size: usize, salt: usize) -> Vec<Image> {
    (0..n)
        .map(|k| {
            let len = channels * size * size;
            let data = (0..len).map(|i| hashed(k * len + i, salt) as f32).collect();
            Image::from_vec(channels, size, size, data).expect("shape")
        })
        .collect()
}
