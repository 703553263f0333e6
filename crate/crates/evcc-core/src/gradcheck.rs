//! Finite-difference gradient checking.
//!
//! Compares tape gradients against central differences
//! (f(p+h) - f(p-h)) / 2h, parameter scalar by parameter scalar, in double
//! precision. The relative error uses max(|analytic|, |numeric|, 1e-6) as
//! the denominator so near-zero gradients are judged by absolute error.

use std::collections::HashMap;

use crate::error::{EvccError, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, TensorId};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_frozen: bool,
    pub passed: bool,
    /// Set when a perturbed evaluation failed (e.g. non-finite output).
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |acc, g| acc.max(g.max_rel_err))
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Build the loss once on a fresh tape, run backward, and return the loss
/// value plus per-parameter gradients keyed by name (zeros for frozen
/// parameters and parameters the loss does not reach).
pub fn tape_gradients<F>(
    store: &ParamStore<f64>,
    build: F,
) -> Result<(f64, HashMap<String, Vec<f64>>)>
where
    F: FnOnce(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let loss_val = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = HashMap::new();
    for (i, (_, p)) in store.iter().enumerate() {
        grads.insert(p.name.clone(), tape.grad_tensor(bound[i]).into_data());
    }
    Ok((loss_val, grads))
}

/// Check tape gradients of `build` against central differences for every
/// trainable scalar in the store. Frozen parameters are reported as skipped.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let (_, analytic) = tape_gradients(store, &build)?;
    grad_check_against(store, &analytic, h, tol, build)
}

/// As [`grad_check`], but against a caller-supplied analytic gradient map.
/// Lets tests verify that a corrupted gradient is detected and named.
pub fn grad_check_against<F>(
    store: &mut ParamStore<f64>,
    analytic: &HashMap<String, Vec<f64>>,
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(EvccError::Argument(format!(
            "grad_check: h and tol must be positive, got h={h}, tol={tol}"
        )));
    }
    let mut groups = Vec::new();
    let n_params = store.len();
    for pi in 0..n_params {
        let (name, frozen, numel) = {
            let p = store.get(crate::params::ParamId(pi));
            (p.name.clone(), p.frozen, p.value.numel())
        };
        if frozen {
            groups.push(GroupReport {
                name,
                max_rel_err: 0.0,
                checked: 0,
                skipped_frozen: true,
                passed: true,
                error: None,
            });
            continue;
        }
        let ana = analytic.get(&name).ok_or_else(|| {
            EvccError::Argument(format!("grad_check: no analytic grad for {name}"))
        })?;
        let mut max_rel = 0.0f64;
        let mut fail: Option<String> = None;
        for j in 0..numel {
            let orig = store.get(crate::params::ParamId(pi)).value.data()[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                store.get_mut(crate::params::ParamId(pi)).value.data_mut()[j] = v;
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let loss = build(&mut tape, &bound)?;
                Ok(tape.value(loss).item())
            };
            let plus = eval_at(orig + h);
            let minus = eval_at(orig - h);
            store.get_mut(crate::params::ParamId(pi)).value.data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    fail = Some(format!("perturbed eval failed at [{j}]: {e}"));
                    break;
                }
                _ => {
                    fail = Some(format!("non-finite perturbed output at [{j}]"));
                    break;
                }
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = ana[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        let passed = fail.is_none() && max_rel < tol;
        groups.push(GroupReport {
            name,
            max_rel_err: max_rel,
            checked: numel,
            skipped_frozen: false,
            passed,
            error: fail,
        });
    }
    Ok(GradCheckReport { groups, h, tol })
}
