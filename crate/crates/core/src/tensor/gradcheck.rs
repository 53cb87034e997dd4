use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Float, Tensor};
use crate::error::{Error, Result};

/// Relative-error tolerance for backward-vs-finite-difference agreement.
#[cfg(not(feature = "f64"))]
pub const GRAD_TOL: f64 = 1e-2;
#[cfg(feature = "f64")]
pub const GRAD_TOL: f64 = 1e-4;

/// Gradient magnitude below which errors are effectively measured in absolute
/// terms. In 32-bit floats a central difference with `h = 1e-3` on an O(1)
/// function carries roughly 1e-4 of rounding noise.
#[cfg(not(feature = "f64"))]
pub const DEFAULT_FLOOR: f64 = 1e-2;
#[cfg(feature = "f64")]
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Central-difference gradient check.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`; the
/// floor keeps coordinates whose true gradient is at rounding-noise level
/// from dominating the report.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many coordinates, drawn uniformly over all inputs.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            floor: DEFAULT_FLOOR,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn sample(mut self, n: usize, seed: u64) -> Self {
        self.max_coords = Some(n);
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Tensor,
    {
        if inputs.iter().any(|t| !t.is_leaf() || !t.requires_grad()) {
            return Err(Error::contract("grad_check inputs must be trainable leaves"));
        }
        inputs.iter().for_each(Tensor::zero_grad);
        let y = f(inputs);
        if y.numel() != 1 {
            return Err(Error::contract("grad_check function must be scalar-valued"));
        }
        y.backward()?;
        let analytic: Vec<Vec<Float>> = inputs
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let offsets: Vec<usize> = inputs
            .iter()
            .scan(0, |acc, t| {
                let start = *acc;
                *acc += t.numel();
                Some(start)
            })
            .collect();
        let total: usize = inputs.iter().map(Tensor::numel).sum();
        let coords: Vec<usize> = match self.max_coords {
            Some(n) if n < total => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut v = sample(&mut rng, total, n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };

        let _guard = no_grad();
        let mut report = GradCheckReport {
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for flat in coords {
            let which = offsets.partition_point(|&o| o <= flat) - 1;
            let idx = flat - offsets[which];
            let t = &inputs[which];
            let orig = t.data()[idx];
            let eval = |v: Float| -> Result<f64> {
                let mut d = t.to_vec();
                d[idx] = v;
                t.set_data(d)?;
                Ok(f(inputs).item() as f64)
            };
            let plus = eval(orig + self.h as Float)?;
            let minus = eval(orig - self.h as Float)?;
            let mut d = t.to_vec();
            d[idx] = orig;
            t.set_data(d)?;

            // The perturbation actually applied after rounding to Float.
            let step = ((orig + self.h as Float) - (orig - self.h as Float)) as f64;
            let numeric = (plus - minus) / step;
            let a = analytic[which][idx] as f64;
            let denom = a.abs().max(numeric.abs()).max(self.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.max_rel_error <= self.tol;
        Ok(report)
    }
}

/// Checks every coordinate of `inputs` with the default floor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    GradCheck::new(h, tol).run(f, inputs)
}
