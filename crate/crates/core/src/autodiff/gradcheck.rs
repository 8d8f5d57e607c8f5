use alloc::format;
use alloc::string::String;

use super::{Tape, Var};
use crate::params::{ModelParams, ParamVars};
use crate::{Error, Result};

/// Outcome of comparing analytic gradients to central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

fn evaluate<F>(params: &ModelParams, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Checks every coordinate of `params` against `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(params: &ModelParams, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &ParamVars) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidInput(format!("eps {eps} outside (0, 1e-2]")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.gradients(&grads)
    };

    let mut work = params.clone();
    let names: alloc::vec::Vec<String> = params.names().map(String::from).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_analytic: 0.0, worst_numeric: 0.0, coordinates: 0 };
    for name in &names {
        let len = params.require(name)?.len();
        let grad = analytic.get(name).expect("bound tensor has a gradient entry");
        for i in 0..len {
            let orig = params.require(name)?.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[i] = orig + delta;
                let v = evaluate(&work, &f)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name}[{i}]")));
                }
                Ok(v)
            };
            let (up, down) = (at(eps)?, at(-eps)?);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
