//! Central finite-difference oracle for analytic gradients.

use crate::error::{EngineError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − central| / max(|analytic|, |central|, 1e-12)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub value: f64,
}

fn eval<F>(f: &F, graph: &Graph<f64>, point: &[Tensor<f64>], as_params: bool) -> Result<(f64, Vec<usize>)>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let vars: Vec<Var<'_, f64>> = point
        .iter()
        .map(|t| {
            if as_params {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect();
    let root = f(graph, &vars)?;
    if root.value().numel() != 1 {
        return Err(EngineError::NonScalarRoot(root.shape()));
    }
    let v = root.item();
    if !v.is_finite() {
        return Err(EngineError::NonFinite(v));
    }
    Ok((v, vars.iter().map(|v| v.id()).collect()))
}

/// Compares the analytic gradient of the scalar graph built by `f` at `point`
/// against central differences with the given `step`.
///
/// Stop-gradient nodes are frozen at their values from the unperturbed
/// evaluation, so the oracle differentiates the same cut graph the backward
/// pass does.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(EngineError::BadStep(step));
    }
    let graph = Graph::new();
    let vars: Vec<Var<'_, f64>> = point.iter().map(|t| graph.param(t.clone())).collect();
    let root = f(&graph, &vars)?;
    if root.value().numel() != 1 {
        return Err(EngineError::NonScalarRoot(root.shape()));
    }
    let value = root.item();
    if !value.is_finite() {
        return Err(EngineError::NonFinite(value));
    }
    let grads = graph.backward(root)?;
    let frozen = graph.stop_values();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        value,
    };
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(point[pi].shape()));
        for e in 0..point[pi].numel() {
            let base = point[pi].data()[e];
            probe[pi].data_mut()[e] = base + step;
            let (fp, _) = eval(&f, &Graph::with_frozen_stops(frozen.clone()), &probe, false)?;
            probe[pi].data_mut()[e] = base - step;
            let (fm, _) = eval(&f, &Graph::with_frozen_stops(frozen.clone()), &probe, false)?;
            probe[pi].data_mut()[e] = base;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
