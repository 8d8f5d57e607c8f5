//! Running-minimum gradient-norm diagnostic for non-convex SGD, plus a toy
//! non-convex objective to exercise it.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Shortest history the diagnostic accepts.
pub const MIN_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDiagnostic {
    /// `min_{t <= T} |grad|^2` for every `T = 1..=len`.
    pub running_min: Vec<f64>,
    /// Least-squares slope of `ln(running_min)` against `ln(T)` over the second half.
    pub slope: f64,
}

pub fn running_min(grad_sq: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grad_sq.len());
    let mut best = f64::INFINITY;
    for &g in grad_sq {
        if g < best {
            best = g;
        }
        out.push(best);
    }
    out
}

pub fn convergence_diagnostic(grad_sq: &[f64]) -> Result<ConvergenceDiagnostic> {
    if grad_sq.len() < MIN_STEPS {
        return Err(Error::InvalidInput(alloc::format!("convergence diagnostic needs at least {MIN_STEPS} steps, got {}", grad_sq.len())));
    }
    if grad_sq.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::NonFinite("squared gradient norm".into()));
    }
    let running_min = running_min(grad_sq);
    let n = running_min.len();
    let start = n / 2;
    let mut xs = Vec::with_capacity(n - start);
    let mut ys = Vec::with_capacity(n - start);
    for (i, &m) in running_min.iter().enumerate().skip(start) {
        // log of zero has no slope to offer; floor it
        xs.push(math::ln((i + 1) as f64));
        ys.push(math::ln(m.max(f64::MIN_POSITIVE)));
    }
    let slope = least_squares_slope(&xs, &ys);
    Ok(ConvergenceDiagnostic { running_min, slope })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    // shifting by the first value keeps constant series exactly flat
    let y0 = ys[0];
    let ys: Vec<f64> = ys.iter().map(|y| y - y0).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Separable double-well objective `sum_i (w_i^2 - 1)^2 / 4 + a sin(3 w_i)`,
/// optimized with noisy gradients.
#[derive(Debug, Clone)]
pub struct ToyNonConvex {
    pub dim: usize,
    pub ripple: f64,
    pub noise_stddev: f64,
}

impl ToyNonConvex {
    pub fn new(dim: usize) -> Self {
        Self { dim, ripple: 0.05, noise_stddev: 0.5 }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|&x| x * (x * x - 1.0) + 3.0 * self.ripple * libm::cos(3.0 * x)).collect()
    }

    /// Plain SGD with the decaying step `c / sqrt(t)`; returns the exact
    /// squared gradient norm at every iterate.
    pub fn run_sgd(&self, steps: usize, c: f64, seed: u64) -> Result<Vec<f64>> {
        if steps == 0 || c <= 0.0 {
            return Err(Error::InvalidInput("toy run needs steps >= 1 and c > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, 2.0).map_err(|e| Error::InvalidInput(alloc::format!("{e}")))?;
        let noise = Normal::new(0.0, self.noise_stddev).map_err(|e| Error::InvalidInput(alloc::format!("{e}")))?;
        let mut w: Vec<f64> = (0..self.dim).map(|_| init.sample(&mut rng)).collect();
        let mut out = Vec::with_capacity(steps);
        for t in 1..=steps {
            let eta = c / math::sqrt(t as f64);
            let g = self.gradient(&w);
            out.push(g.iter().map(|x| x * x).sum());
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= eta * (gi + noise.sample(&mut rng));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_short_history_is_rejected() {
        assert!(convergence_diagnostic(&[1.0; 99]).is_err());
        assert!(convergence_diagnostic(&[1.0; 100]).is_ok());
    }

    #[test]
    fn constant_norms_have_zero_slope() {
        let d = convergence_diagnostic(&[2.5; 400]).unwrap();
        assert_eq!(d.slope, 0.0);
    }

    #[test]
    fn inverse_sqrt_series_has_half_slope() {
        let s: Vec<f64> = (1..=2000).map(|t| 1.0 / libm::sqrt(t as f64)).collect();
        let d = convergence_diagnostic(&s).unwrap();
        assert!((d.slope + 0.5).abs() < 1e-9, "{}", d.slope);
    }

    #[test]
    fn toy_gradient_matches_finite_differences() {
        let p = ToyNonConvex::new(3);
        let f = |w: &[f64]| -> f64 { w.iter().map(|&x| (x * x - 1.0) * (x * x - 1.0) / 4.0 + p.ripple * libm::sin(3.0 * x)).sum() };
        let w = [0.3, -1.7, 0.9];
        let g = p.gradient(&w);
        for i in 0..3 {
            let mut a = w;
            let mut b = w;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7);
        }
    }
}
