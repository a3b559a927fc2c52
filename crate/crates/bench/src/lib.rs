//! Shared fixtures for the benchmarks.

use fibro_core::phantom::{generate, Phantom, PhantomSpec};
use fibro_core::Modality;

/// Phantom with a planted transform on T2.
pub fn phantom(n: usize, spacing: f64, seed: u64) -> Phantom {
    let spec = PhantomSpec { seed, modalities: vec![Modality::T2], ..PhantomSpec::new([n; 3], [spacing; 3]) };
    generate(&spec.with_random_transforms(8.0, 6.0)).expect("valid phantom")
}
