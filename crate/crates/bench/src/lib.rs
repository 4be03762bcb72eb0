//! Shared fixtures for the benchmarks.

use mvcrl::latent_model::{sample_latents, LatentSpec};
use ndarray::Array2;

/// `n × d` standard normal matrix, reproducible from `seed`.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let spec = LatentSpec::independent(d).expect("d > 0");
    sample_latents(&spec, n, seed).expect("n > 0").data
}
