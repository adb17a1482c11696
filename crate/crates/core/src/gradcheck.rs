//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! every backward rule it checks.

use crate::error::Result;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tape::Var;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-3;
pub const DEFAULT_ABS_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check at most this many scalars per parameter tensor (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rel_tol: DEFAULT_REL_TOL,
            abs_tol: DEFAULT_ABS_TOL,
            max_per_param: None,
        }
    }
}

/// `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`
pub fn close(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    (analytic - numeric).abs() <= abs_tol + rel_tol * analytic.abs().max(numeric.abs())
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences for every parameter selected by `select`.
pub fn check<F>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.tape.value(loss).values()[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        max_abs_err: 0.0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let n = store.get(id).numel();
        let stride = match cfg.max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[id.index()][i];
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if !close(a, numeric, cfg.rel_tol, cfg.abs_tol) {
                report.failures.push(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Checks all parameters at default tolerances.
pub fn check_all<F>(store: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check(store, |_| true, GradCheckConfig::default(), f)
}
