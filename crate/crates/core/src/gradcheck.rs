//! Central-difference verification of analytic gradients.

use std::fmt;

use crate::error::{PicError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Worst disagreement found for one named parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.tol).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let status = if p.max_rel_error <= self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:<24} rel_err={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// The error for each element is `|a − n| / max(1, |n|)`; a parameter fails
/// when its worst element exceeds `tol`.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(PicError::dim("one analytic gradient per parameter required"));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        if analytic[pi].shape() != values[pi].shape() {
            return Err(PicError::dim(format!("gradient shape mismatch for `{name}`")));
        }
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic[pi].data().first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        for i in 0..values[pi].numel() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + h;
            let plus = f(&values)?;
            values[pi].data_mut()[i] = orig - h;
            let minus = f(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst.max_rel_error || i == 0 {
                worst = ParamCheck {
                    name: name.clone(),
                    max_rel_error: err.max(worst.max_rel_error),
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport { tol, params: checks })
}

/// Runs [`grad_check`] on a scalar function built on a [`Tape`].
///
/// `build` receives a fresh tape and one leaf per parameter and returns the
/// scalar output node.
pub fn grad_check_tape<B>(params: &[(String, Tensor)], build: B, h: f64, tol: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| grads.get_or_zeros(id, t))
        .collect();
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).data()[0])
    };
    grad_check(params, &analytic, eval, h, tol)
}
