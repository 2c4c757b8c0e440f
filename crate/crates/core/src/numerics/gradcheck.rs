//! Finite-difference verification of reverse-mode gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Upper bound on checked elements per parameter tensor; `None` checks all.
    pub max_per_param: Option<usize>,
    /// Elements whose analytic and numeric gradients are both smaller than
    /// this are reported as unresolved instead of entering `max_rel_error`.
    /// Central differences carry roughly `ε·|f|/h` of absolute noise, which
    /// swamps the relative error of near-zero gradients.
    pub min_magnitude: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_per_param: None, min_magnitude: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements below `min_magnitude`, and the largest relative error among them.
    pub unresolved: usize,
    pub unresolved_max_rel_error: f64,
    pub worst: Option<ElementCheck>,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {v}")));
    }
    Ok(v)
}

fn pick(candidates: Vec<usize>, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if candidates.len() > cap && cap > 0 => {
            let n = candidates.len();
            (0..cap).map(|i| candidates[i * n / cap]).collect()
        }
        _ => candidates,
    }
}

/// Compares the tape gradient of the scalar `f` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for the parameters in `ids` (all when empty).
///
/// When a tensor has more elements than `max_per_param`, elements with a
/// nonzero analytic gradient are preferred and subsampled evenly.
pub fn grad_check<F>(store: &ParamStore, ids: &[ParamId], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>,
{
    let mut grads = store.zeros_like();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {v}")));
        }
        tape.backward(out, Some(&mut grads))?;
    }

    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        unresolved: 0,
        unresolved_max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
    };
    for id in ids {
        let analytic = grads.get(id).data().to_vec();
        let nonzero: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] != 0.0).collect();
        let candidates = if nonzero.is_empty() { (0..analytic.len()).collect() } else { nonzero };
        let mut worst_here: f64 = 0.0;
        for i in pick(candidates, opts.max_per_param) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let rel = relative_error(analytic[i], numeric);
            if analytic[i].abs().max(numeric.abs()) < opts.min_magnitude {
                report.unresolved += 1;
                report.unresolved_max_rel_error = report.unresolved_max_rel_error.max(rel);
                continue;
            }
            report.checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(ElementCheck {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_param.push((store.name(id).to_string(), worst_here));
    }
    Ok(report)
}
