//! Parameter initialization, learning-rate schedules, Adam and plain SGD.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{ModelParams, ParamGrads};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Samples `N(0, stddev)` truncated to `±2·stddev` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, stddev: f64) -> f64 {
    if stddev == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, stddev).expect("finite stddev");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * stddev {
            return v;
        }
    }
}

/// Standard deviation of `N(0, 1)` truncated to `[-2, 2]`.
pub fn truncated_normal_unit_stddev() -> f64 {
    let phi2 = math::exp(-2.0) / math::sqrt(2.0 * core::f64::consts::PI);
    let mass = 1.0 - 2.0 * math::normal_sf(2.0);
    math::sqrt(1.0 - 2.0 * 2.0 * phi2 / mass)
}

/// Draws every tensor of `shapes` from the truncated normal, in the given order.
pub fn init_tensors<R: Rng + ?Sized>(shapes: &[(String, Vec<usize>)], stddev: f64, rng: &mut R) -> Result<ModelParams> {
    let mut p = ModelParams::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| truncated_normal(rng, stddev)).collect();
        p.insert(name.clone(), Tensor::new(shape.clone(), data)?);
    }
    Ok(p)
}

/// Step-size schedule `η_t` for step `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr / sqrt(t)`.
    #[default]
    InverseSqrt,
    /// `lr · factor^floor((t-1) / every_n_steps)`.
    StepDecay {
        factor: f64,
        every_n_steps: usize,
    },
}

impl Schedule {
    pub fn rate(&self, lr: f64, t: usize) -> f64 {
        let t = t.max(1);
        match *self {
            Schedule::Constant => lr,
            Schedule::InverseSqrt => lr / math::sqrt(t as f64),
            Schedule::StepDecay { factor, every_n_steps } => lr * math::powf(factor, ((t - 1) / every_n_steps.max(1)) as f64),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: usize,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }
}

fn check_finite(grads: &ParamGrads) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Tensors in `frozen` are left untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    schedule: Schedule,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    check_finite(grads)?;
    state.t += 1;
    let t = state.t;
    let eta = schedule.rate(lr, t);
    let c1 = 1.0 - math::powf(ADAM_BETA1, t as f64);
    let c2 = 1.0 - math::powf(ADAM_BETA2, t as f64);
    for (name, p) in params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let g = match grads.get(name) {
            Some(g) => g.data(),
            None => continue,
        };
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            if m[i] == 0.0 {
                continue;
            }
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= eta * mh / (math::sqrt(vh) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain gradient step `W ← W - η_t ∇`.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, lr: f64, schedule: Schedule, t: usize) -> Result<()> {
    check_finite(grads)?;
    let eta = schedule.rate(lr, t);
    for (name, p) in params.iter_mut() {
        if let Some(g) = grads.get(name) {
            for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= eta * gi;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::vector(vec![v]));
        p
    }

    fn grads_of(p: &ModelParams, g: f64) -> ParamGrads {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let w = vars.get("w").unwrap();
        let s = tape.sum(w);
        let l = tape.scale(s, g);
        vars.gradients(&tape.backward(l).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(0.25);
        let g = grads_of(&p, 0.0);
        let mut st = AdamState::new();
        adam_step(&mut p, &g, &mut st, 0.1, Schedule::Constant, &BTreeSet::new()).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn first_adam_step_matches_hand_arithmetic() {
        let mut p = scalar_params(1.0);
        let g = grads_of(&p, 1.0);
        let mut st = AdamState::new();
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut st, lr, Schedule::Constant, &BTreeSet::new()).unwrap();
        // m̂ = 1, v̂ = 1
        let expected = 1.0 - lr * 1.0 / (1.0 + ADAM_EPS);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn inverse_sqrt_shrinks_second_step() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new();
        let mut prev = 0.0;
        let mut steps = Vec::new();
        for _ in 0..2 {
            let g = grads_of(&p, 1.0);
            adam_step(&mut p, &g, &mut st, 0.1, Schedule::InverseSqrt, &BTreeSet::new()).unwrap();
            let now = p.get("w").unwrap().item();
            steps.push((now - prev).abs());
            prev = now;
        }
        assert!(steps[1] < steps[0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar_params(0.0);
        let g = grads_of(&p, f64::NAN);
        let err = adam_step(&mut p, &g, &mut AdamState::new(), 0.1, Schedule::Constant, &BTreeSet::new()).unwrap_err();
        assert_eq!(err, Error::NonFinite("gradient of w".into()));
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant.rate(0.5, 9), 0.5);
        assert!((Schedule::InverseSqrt.rate(0.5, 4) - 0.25).abs() < 1e-15);
        let s = Schedule::StepDecay { factor: 0.5, every_n_steps: 10 };
        assert_eq!(s.rate(1.0, 10), 1.0);
        assert_eq!(s.rate(1.0, 11), 0.5);
    }

    #[test]
    fn truncated_normal_bounds_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| truncated_normal(&mut rng, 0.1)).collect();
        assert!(xs.iter().all(|x| x.abs() <= 0.2));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = math::sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64);
        let theory = 0.1 * truncated_normal_unit_stddev();
        assert!((theory - 0.0880).abs() < 1e-4);
        assert!((sd / theory - 1.0).abs() < 0.05);
    }
}
