//! Central-difference gradient checking.
//!
//! [`grad_check`] takes a closure that builds a scalar loss on a fresh
//! [`Graph`] from a list of parameter leaves. It runs the closure once to
//! get reverse-mode gradients, then re-runs it twice per scalar parameter at
//! `θ ± step` and compares against `(f(θ+h) - f(θ-h)) / 2h`.
//!
//! The relative error of one scalar is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
//!
//! The floor is there for gradients that are exactly zero in theory, such
//! as the key bias of softmax attention (it shifts every score in a row
//! equally). There the numeric side is pure round-off: one ulp of an O(1)
//! loss over `2h = 2e-4` is about 1e-12, which a smaller floor would blow up
//! into a spurious failure. Gradients above the floor are judged purely
//! relatively.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in input order.
    pub max_rel_error: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Worst relative error over all parameters.
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.variable(p.clone())).collect();
    let loss = f(&mut graph, &ids)?;
    let value = graph.value(loss);
    match value.item() {
        Some(v) if v.is_finite() => Ok((graph, ids, loss)),
        Some(v) => Err(Error::NonFinite(format!("loss evaluated to {v}"))),
        None => Err(Error::NonScalarLoss(value.shape().to_vec())),
    }
}

fn loss_at<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (graph, _, loss) = evaluate(f, params)?;
    Ok(graph.value(loss).data()[0])
}

pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(Error::Config(format!(
            "grad_check needs positive step and tolerance, got {step} and {tolerance}"
        )));
    }
    let (graph, ids, loss) = evaluate(&f, params)?;
    let grads = graph.backward(loss)?;

    let mut probe = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every variable has a gradient");
        let mut worst = 0.0f64;
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            probe[p].data_mut()[i] = original + step;
            let plus = loss_at(&f, &probe)?;
            probe[p].data_mut()[i] = original - step;
            let minus = loss_at(&f, &probe)?;
            probe[p].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e <= tolerance);
    Ok(GradCheckReport {
        max_rel_error,
        step,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.worst() <= 1e-7);
    }

    #[test]
    fn constant_function_passes() {
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(2.5))),
            &[Tensor::ones(2, 2)],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, vec![0.0]);
    }

    #[test]
    fn non_finite_loss_rejected() {
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(f64::NAN))),
            &[Tensor::ones(1, 1)],
            1e-4,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn report_flags_wrong_gradient() {
        // relu at a kink: analytic 0, numeric 0.5
        let report = grad_check(
            |g, p| {
                let r = g.relu(p[0]);
                Ok(g.sum(r))
            },
            &[Tensor::scalar(0.0)],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
