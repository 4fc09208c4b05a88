//! Central finite-difference verification of tape gradients.
//!
//! The relative error of one entry is `|analytic − numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`; the floor keeps near-zero gradients from turning
//! rounding noise into large ratios.

use std::fmt;

use crate::autodiff::{Backend, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor2;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

/// A named gradient table (parameter or input).
#[derive(Clone, Debug)]
pub struct NamedGrad {
    pub name: String,
    pub grad: Tensor2,
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status} {} max_rel_err={:.3e} entries={}",
                e.name, e.max_rel_err, e.checked
            )?;
        }
        write!(
            f,
            "{} tolerance={:.0e} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_err()
        )
    }
}

fn eval_loss<F>(store: &ParamStore, inputs: &[(String, Tensor2)], loss: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = loss(&mut tape, store, &vars)?;
    let v = tape.value(&out);
    if v.shape() != (1, 1) {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", v.data()[0])));
    }
    Ok((tape, vars, out))
}

fn scalar_loss<F>(store: &ParamStore, inputs: &[(String, Tensor2)], loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval_loss(store, inputs, loss)?;
    Ok(tape.value(&out).data()[0])
}

/// Gradients from the tape, parameters first, then inputs.
pub fn analytic_grads<F>(
    store: &ParamStore,
    inputs: &[(String, Tensor2)],
    loss: &F,
) -> Result<Vec<NamedGrad>>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval_loss(store, inputs, loss)?;
    let grads = tape.backward(out, &Tensor2::scalar(1.0))?;
    let mut acc = store.clone();
    acc.zero_grads();
    grads.accumulate_into(&tape, &mut acc);
    let mut result: Vec<NamedGrad> = acc
        .iter()
        .map(|p| NamedGrad {
            name: p.name.clone(),
            grad: p.grad.clone(),
        })
        .collect();
    for ((name, t), v) in inputs.iter().zip(&vars) {
        let grad = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols()));
        result.push(NamedGrad {
            name: format!("input:{name}"),
            grad,
        });
    }
    Ok(result)
}

/// Central differences with step `h`, in the same order as [`analytic_grads`].
pub fn numeric_grads<F>(
    store: &ParamStore,
    inputs: &[(String, Tensor2)],
    loss: &F,
    h: f64,
) -> Result<Vec<NamedGrad>>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut result = Vec::new();
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let mut grad = Tensor2::zeros(store.value(id).rows(), store.value(id).cols());
        for e in 0..n {
            let orig = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + h;
            let plus = scalar_loss(&work, inputs, loss)?;
            work.value_mut(id).data_mut()[e] = orig - h;
            let minus = scalar_loss(&work, inputs, loss)?;
            work.value_mut(id).data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        result.push(NamedGrad {
            name: store.name(id).to_string(),
            grad,
        });
    }
    let mut work_inputs = inputs.to_vec();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let mut grad = Tensor2::zeros(t.rows(), t.cols());
        for e in 0..t.len() {
            let orig = t.data()[e];
            work_inputs[k].1.data_mut()[e] = orig + h;
            let plus = scalar_loss(store, &work_inputs, loss)?;
            work_inputs[k].1.data_mut()[e] = orig - h;
            let minus = scalar_loss(store, &work_inputs, loss)?;
            work_inputs[k].1.data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        result.push(NamedGrad {
            name: format!("input:{name}"),
            grad,
        });
    }
    Ok(result)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Pairs up two gradient lists by position and reports the worst entry of
/// each tensor.
pub fn compare(analytic: &[NamedGrad], numeric: &[NamedGrad], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    let entries = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            assert_eq!(a.name, n.name);
            let max_rel_err = a
                .grad
                .data()
                .iter()
                .zip(n.grad.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max);
            GradCheckEntry {
                name: a.name.clone(),
                max_rel_err,
                checked: a.grad.len(),
            }
        })
        .collect();
    GradCheckReport { tolerance, entries }
}

/// Checks every parameter of `store` and every input against central finite
/// differences at [`DEFAULT_STEP`].
pub fn grad_check<F>(
    store: &ParamStore,
    inputs: &[(String, Tensor2)],
    loss: F,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(store, inputs, &loss)?;
    let numeric = numeric_grads(store, inputs, &loss, DEFAULT_STEP)?;
    Ok(compare(&analytic, &numeric, tolerance))
}
