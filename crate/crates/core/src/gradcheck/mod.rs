//! Central finite-difference checks of analytic gradients.

use thiserror::Error;

mod suites;

pub use suites::{model_suites, primitive_suites, run_suites, SuiteResult, TOLERANCE};

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step used by the checks.
pub const STEP: f64 = 1e-6;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("forward pass failed: {0}")]
    Forward(BoxError),
    #[error("backward pass failed: {0}")]
    Backward(#[from] crate::graph::GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64, GradCheckError> {
    if let Some(nf) = g.non_finite() {
        return Err(GradCheckError::NonFinite { op: nf.op });
    }
    Ok(g.value(v).data()[0])
}

fn compare(
    analytic: &[f64],
    mut eval: impl FnMut(usize, f64) -> Result<f64, GradCheckError>,
) -> Result<GradCheckReport, GradCheckError> {
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, STEP)?;
        let minus = eval(i, -STEP)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        entries: analytic.len(),
    })
}

/// Checks the gradient of a scalar function of one leaf tensor.
///
/// `f` records the function on a fresh graph given the leaf's handle.
pub fn gradient_check<F, E>(leaf: &Tensor, mut f: F) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph, Var) -> Result<Var, E>,
    E: Into<BoxError>,
{
    let mut run = |t: Tensor, grad: bool| -> Result<(Graph, Var, Var), GradCheckError> {
        let mut g = Graph::new();
        let x = g.leaf(t, grad);
        let y = f(&mut g, x).map_err(|e| GradCheckError::Forward(e.into()))?;
        Ok((g, x, y))
    };
    let (g, x, y) = run(leaf.clone(), true)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; leaf.len()]);
    compare(&analytic, |i, h| {
        let mut t = leaf.clone();
        t.data_mut()[i] += h;
        let (g, _, y) = run(t, false)?;
        scalar_of(&g, y)
    })
}

/// Checks the gradient of a scalar loss with respect to one parameter of a
/// store. The store is restored before returning.
pub fn check_param<F, E>(
    store: &mut ParamStore,
    id: ParamId,
    mut f: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var, E>,
    E: Into<BoxError>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let y = f(&mut g, &bound).map_err(|e| GradCheckError::Forward(e.into()))?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(bound.var(id))
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
    let original = store.get(id).value.clone();
    let report = compare(&analytic, |i, h| {
        let mut t = original.clone();
        t.data_mut()[i] += h;
        store.get_mut(id).value = t;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let y = f(&mut g, &bound).map_err(|e| GradCheckError::Forward(e.into()))?;
        scalar_of(&g, y)
    });
    store.get_mut(id).value = original;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ShapeError;

    #[test]
    fn constant_function_has_exactly_zero_gradient() {
        let leaf = Tensor::vector(vec![0.3, -0.2]);
        let mut g = Graph::new();
        let x = g.param(leaf.clone());
        let c = g.constant(Tensor::scalar(2.0));
        let z = g.scale(x, 0.0);
        let s = g.sum_axis(z, 1).unwrap();
        let y = g.add(s, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        let report = gradient_check(&leaf, |g, x| -> Result<Var, ShapeError> {
            let z = g.scale(x, 0.0);
            g.sum_axis(z, 1)
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn reports_non_finite_primitive() {
        let leaf = Tensor::scalar(-1.0);
        let err =
            gradient_check(&leaf, |g, x| -> Result<Var, ShapeError> { Ok(g.log(x)) }).unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { op: "log" }));
    }
}
