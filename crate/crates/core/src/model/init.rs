use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Float;

/// Normal(0, std) samples redrawn until they fall within two standard
/// deviations.
pub fn trunc_normal<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<Float> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as Float;
            }
        })
        .collect()
}
