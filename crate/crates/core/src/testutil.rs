use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{AffineMap, Dims, Volume3, WarpField};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(dims: Dims, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Volume3 {
    Volume3::from_fn(dims, |_, _, _| rng.random_range(lo..hi))
}

pub fn random_warp(dims: Dims, amp: f64, rng: &mut ChaCha8Rng) -> WarpField {
    WarpField::from_fn(dims, |_, _, _| {
        [
            rng.random_range(-amp..amp),
            rng.random_range(-amp..amp),
            rng.random_range(-amp..amp),
        ]
    })
}

pub fn random_affine(amp: f64, rng: &mut ChaCha8Rng) -> AffineMap {
    let mut m = [[0.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = if r == c { 1.0 } else { 0.0 } + rng.random_range(-amp..amp);
        }
    }
    let t = [
        rng.random_range(-amp..amp),
        rng.random_range(-amp..amp),
        rng.random_range(-amp..amp),
    ];
    AffineMap::new(m, t).unwrap()
}

/// Relative error with an absolute floor so tiny gradients compare sanely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
