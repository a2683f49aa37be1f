use super::params::ParameterSet;
use super::tape::{Bound, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`gradient_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Max over trainable scalars of `|analytic − central| / max(|analytic|, |central|, 1e-8)`.
///
/// `loss_fn` builds a scalar loss on the given tape from the bound parameters;
/// it must be deterministic (freeze any noise outside the closure).
pub fn gradient_check<F>(loss_fn: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    Ok(gradient_check_report(loss_fn, params, eps)?.max_rel_error)
}

pub fn gradient_check_report<F>(loss_fn: F, params: &ParameterSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(p)?;
        let loss = loss_fn(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let bound = tape.bind(params)?;
        let loss = loss_fn(&mut tape, &bound)?;
        tape.backward(loss)?
    };

    let mut work = params.deep_copy();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for name in &names {
        if !params.get(name).expect("own name").requires_grad() {
            continue;
        }
        let n = params.get(name).expect("own name").len();
        let grad = analytic.get(name).expect("aligned").data().to_vec();
        for i in 0..n {
            let orig = work.get(name).expect("own name").data()[i];
            work.get_mut(name).expect("own name").data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name).expect("own name").data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name).expect("own name").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
