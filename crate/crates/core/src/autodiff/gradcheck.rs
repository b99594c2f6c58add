//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a floor on the denominator so that near-zero
/// derivatives are compared absolutely: `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `backward` against `(L(p + h) - L(p - h)) / 2h` for every
/// trainable parameter, probing at most `max_per_param` evenly spaced entries
/// of each. `loss` must build the same (deterministic) graph on every call.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, max_per_param: usize, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::eval();
    let l = loss(&mut g, store)?;
    let mut grads = Gradients::new();
    g.backward(l, &mut grads)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    let mut eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::eval();
        let l = loss(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = e.max(report.max_rel_err);
                if e >= report.max_rel_err {
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = k;
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
