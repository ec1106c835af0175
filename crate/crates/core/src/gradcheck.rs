//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it stays independent of the
//! backward rules it verifies.

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for relative error, so gradients that are zero up to
/// rounding compare by absolute error.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Builds the scalar function `f` over `inputs` as parameters, runs backward,
/// and compares every input gradient entry with `(f(x+h) − f(x−h)) / 2h`.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let x = t.values()[e];
            work[ti].values_mut()[e] = x + step;
            let plus = eval(&work)?;
            work[ti].values_mut()[e] = x - step;
            let minus = eval(&work)?;
            work[ti].values_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[ti][e], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Same comparison over every scalar in a [`ParamStore`]; `f` builds the
/// scalar loss from the bound parameters.
pub fn check_store<F>(store: &ParamStore, step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    g.backward(out)?;
    let analytic = bound.grads(&g, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind_frozen(&mut g);
        let out = f(&mut g, &bound)?;
        Ok(g.value(out).item())
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work = store.clone();
    for (pi, id) in store.ids().enumerate() {
        for e in 0..store.get(id).len() {
            let x = store.get(id).values()[e];
            work.get_mut(id).values_mut()[e] = x + step;
            let plus = eval(&work)?;
            work.get_mut(id).values_mut()[e] = x - step;
            let minus = eval(&work)?;
            work.get_mut(id).values_mut()[e] = x;
            let err = relative_error(analytic[pi][e], (plus - minus) / (2.0 * step));
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
