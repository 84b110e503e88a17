//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check is independent of the backward rules it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding do not produce spurious failures.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backward-mode gradients of `loss_fn` against central differences
/// with step `h`, for every scalar of every parameter in `store`.
pub fn check_params<F>(store: &mut ParamStore, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let analytic = store.collect_grads(&bound, &grads);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = loss_fn(&mut g, &bound)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..store.len() {
        for k in 0..store.params()[pi].value.numel() {
            let orig = store.params()[pi].value.data()[k];
            store.params_mut()[pi].value.data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.params_mut()[pi].value.data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.params_mut()[pi].value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.params()[pi].name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
