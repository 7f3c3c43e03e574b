//! Monte-Carlo degrees of freedom of regressors on simulated tasks.
//!
//! With a fixed design `X` and responses `y = f(X) + eps`, the degrees of
//! freedom of a fitting procedure are `(1/sigma^2) * sum_i Cov(yhat_i, y_i)`.
//! [`estimate_dof`] resamples `eps` `R` times, refits, and uses the sample
//! covariance over replications.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::graph::Graph;
use crate::ndf::{ForestConfig, LeafOutput, NeuralDecisionForest, Phase};
use crate::params::ParamStore;
use crate::pipeline::{Adam, Optimizer};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DofError {
    #[error("replication {replication}: {reason}")]
    Fit { replication: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Additive test function with a steep logistic step in `x2`.
pub fn marsadd(x: &[f64]) -> f64 {
    0.1 * (4.0 * x[0]).exp()
        + 4.0 / (1.0 + (-20.0 * (x[1] - 0.5)).exp())
        + 3.0 * x[2]
        + 2.0 * x[3]
        + x[4]
}

/// Sum of ten coordinates.
pub fn poweradd(x: &[f64]) -> f64 {
    x[..5].iter().sum::<f64>() + x[5..10].iter().sum::<f64>()
}

/// Variant with `x_j` raised to the power `j` (1-based). Not linear.
pub fn poweradd_curved(x: &[f64]) -> f64 {
    x[..10]
        .iter()
        .enumerate()
        .map(|(j, &v)| v.powi(j as i32 + 1))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFunction {
    MarsAdd,
    PowerAdd,
    PowerAddCurved,
}

impl TaskFunction {
    pub fn dim(self) -> usize {
        match self {
            Self::MarsAdd => 5,
            Self::PowerAdd | Self::PowerAddCurved => 10,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Self::MarsAdd => marsadd(x),
            Self::PowerAdd => poweradd(x),
            Self::PowerAddCurved => poweradd_curved(x),
        }
    }
}

impl FromStr for TaskFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "marsadd" => Ok(Self::MarsAdd),
            "poweradd" => Ok(Self::PowerAdd),
            "poweradd-curved" => Ok(Self::PowerAddCurved),
            _ => Err(format!(
                "unknown function `{s}` (marsadd, poweradd, poweradd-curved)"
            )),
        }
    }
}

impl fmt::Display for TaskFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MarsAdd => "marsadd",
            Self::PowerAdd => "poweradd",
            Self::PowerAddCurved => "poweradd-curved",
        })
    }
}

/// Fixed design plus noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTask {
    pub function: TaskFunction,
    /// `M x dim`, entries uniform in `[0, 1]`.
    pub design: Tensor,
    pub sigma2: f64,
    /// `f` at every design point.
    pub truth: Vec<f64>,
}

impl SimulatedTask {
    pub fn new(
        function: TaskFunction,
        points: usize,
        sigma2: f64,
        seed: u64,
    ) -> Result<Self, DofError> {
        if points == 0 || !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(DofError::Invalid(
                "need at least one point and sigma^2 > 0".into(),
            ));
        }
        let dim = function.dim();
        let mut rng = stream(seed, "dof.design");
        let data: Vec<f64> = (0..points * dim).map(|_| rng.random::<f64>()).collect();
        let design = Tensor::new(vec![points, dim], data).expect("sized");
        let truth = (0..points).map(|i| function.eval(design.row(i))).collect();
        Ok(Self {
            function,
            design,
            sigma2,
            truth,
        })
    }

    pub fn points(&self) -> usize {
        self.truth.len()
    }
}

/// A fitting procedure: fits on `(x, y)` and returns predictions at `x`.
pub trait Regressor {
    fn name(&self) -> String;

    /// Forest shape for the output table, if any: `(depth, r, T)`.
    fn forest_shape(&self) -> Option<(usize, f64, usize)> {
        None
    }

    fn fit_predict(&self, x: &Tensor, y: &[f64]) -> Result<Vec<f64>, String>;
}

/// Predicts the mean of `y` everywhere.
pub struct GlobalMean;

impl Regressor for GlobalMean {
    fn name(&self) -> String {
        "mean".into()
    }

    fn fit_predict(&self, _x: &Tensor, y: &[f64]) -> Result<Vec<f64>, String> {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        Ok(vec![mean; y.len()])
    }
}

/// Predicts 0 everywhere.
pub struct ConstantZero;

impl Regressor for ConstantZero {
    fn name(&self) -> String {
        "zero".into()
    }

    fn fit_predict(&self, _x: &Tensor, y: &[f64]) -> Result<Vec<f64>, String> {
        Ok(vec![0.0; y.len()])
    }
}

/// Ordinary least squares on all columns plus an intercept.
pub struct LeastSquares;

impl Regressor for LeastSquares {
    fn name(&self) -> String {
        "linear".into()
    }

    fn fit_predict(&self, x: &Tensor, y: &[f64]) -> Result<Vec<f64>, String> {
        let (n, p) = (x.rows(), x.cols());
        let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x.get2(i, j - 1) });
        let yv = DVector::from_column_slice(y);
        let gram = design.transpose() * &design;
        let chol = gram
            .cholesky()
            .ok_or_else(|| "design matrix is rank deficient".to_string())?;
        let beta = chol.solve(&(design.transpose() * yv));
        Ok((design * beta).iter().copied().collect())
    }
}

/// Forest regressor: one output per leaf, no leaf softmax, squared error,
/// full-batch Adam for a fixed number of epochs.
#[derive(Debug, Clone)]
pub struct NdfRegressor {
    pub forest: ForestConfig,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl NdfRegressor {
    pub fn new(forest: ForestConfig) -> Self {
        Self {
            forest,
            epochs: 1000,
            learning_rate: 0.1,
        }
    }
}

/// Builds the forest regressor used in DoF sweeps.
pub fn dof_forest_adapter(forest: ForestConfig) -> Result<NdfRegressor, DofError> {
    forest.validate().map_err(DofError::Invalid)?;
    Ok(NdfRegressor::new(forest))
}

impl Regressor for NdfRegressor {
    fn name(&self) -> String {
        "ndf".into()
    }

    fn forest_shape(&self) -> Option<(usize, f64, usize)> {
        Some((
            self.forest.depth,
            self.forest.pruning_rate,
            self.forest.trees,
        ))
    }

    fn fit_predict(&self, x: &Tensor, y: &[f64]) -> Result<Vec<f64>, String> {
        let mut store = ParamStore::new();
        let forest = NeuralDecisionForest::new(
            &mut store,
            self.forest.clone(),
            x.cols(),
            1,
            LeafOutput::Raw,
        )
        .map_err(|e| e.to_string())?;
        // Start every leaf at the response mean.
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        for t in &forest.trees {
            for v in store.get_mut(t.leaves).value.data_mut() {
                *v += mean;
            }
        }
        let target = Tensor::new(vec![y.len(), 1], y.to_vec()).map_err(|e| e.to_string())?;
        let mut adam = Adam::new(self.learning_rate);
        let mut prune_rng = stream(self.forest.seed, "dof.prune");
        for epoch in 0..self.epochs {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let yv = g.constant(target.clone());
            let pred = forest
                .forward(&mut g, &bound, xv, &mut Phase::Train(&mut prune_rng))
                .map_err(|e| e.to_string())?;
            let diff = g.scale(yv, -1.0);
            let diff = g.add(pred, diff).map_err(|e| e.to_string())?;
            let sq = g.mul(diff, diff).map_err(|e| e.to_string())?;
            let loss = g.mean_axis(sq, 0).map_err(|e| e.to_string())?;
            if !g.value(loss).is_finite() {
                return Err(format!("non-finite loss at epoch {epoch}"));
            }
            let grads = g.backward(loss).map_err(|e| e.to_string())?;
            store.accumulate(&grads, &bound);
            adam.step(&mut store);
            store.zero_grad();
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let pred = forest
            .forward(&mut g, &bound, xv, &mut Phase::Eval)
            .map_err(|e| e.to_string())?;
        Ok(g.value(pred).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DofEstimate {
    pub dof: f64,
    /// Approximate standard error from the spread of per-replication terms.
    pub std_error: f64,
    pub replications: usize,
    /// `Cov(yhat_i, y_i) / sigma^2` for every design point.
    pub per_point: Vec<f64>,
}

/// Estimates the degrees of freedom of `model` on `task` with `r`
/// replications. Noise for replication `k` comes from its own derived seed.
pub fn estimate_dof(
    task: &SimulatedTask,
    model: &dyn Regressor,
    r: usize,
    seed: u64,
) -> Result<DofEstimate, DofError> {
    if r < 2 {
        return Err(DofError::Invalid(format!(
            "need at least 2 replications, got {r}"
        )));
    }
    let m = task.points();
    let sd = task.sigma2.sqrt();
    let mut ys = Vec::with_capacity(r);
    let mut fits = Vec::with_capacity(r);
    for k in 0..r {
        let mut rng = stream(derive_seed(seed, "dof.noise"), &k.to_string());
        let y: Vec<f64> = task
            .truth
            .iter()
            .map(|&f| {
                let e: f64 = StandardNormal.sample(&mut rng);
                f + sd * e
            })
            .collect();
        let yhat = model
            .fit_predict(&task.design, &y)
            .map_err(|reason| DofError::Fit {
                replication: k,
                reason,
            })?;
        if yhat.len() != m {
            return Err(DofError::Fit {
                replication: k,
                reason: format!("{} predictions for {m} points", yhat.len()),
            });
        }
        ys.push(y);
        fits.push(yhat);
    }
    let rf = r as f64;
    let mut per_point = vec![0.0; m];
    let mut y_mean = vec![0.0; m];
    let mut f_mean = vec![0.0; m];
    for (y, f) in ys.iter().zip(&fits) {
        for i in 0..m {
            y_mean[i] += y[i] / rf;
            f_mean[i] += f[i] / rf;
        }
    }
    let mut terms = vec![0.0; r];
    for (k, (y, f)) in ys.iter().zip(&fits).enumerate() {
        for i in 0..m {
            let c = (f[i] - f_mean[i]) * (y[i] - y_mean[i]) / task.sigma2;
            per_point[i] += c / (rf - 1.0);
            terms[k] += c;
        }
    }
    let dof = per_point.iter().sum();
    let t_mean = terms.iter().sum::<f64>() / rf;
    let t_var = terms.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / (rf - 1.0);
    Ok(DofEstimate {
        dof,
        std_error: t_var.sqrt() * rf.sqrt() / (rf - 1.0),
        replications: r,
        per_point,
    })
}

/// One row of a DoF table.
#[derive(Debug, Clone, PartialEq)]
pub struct DofRow {
    pub model: String,
    pub shape: Option<(usize, f64, usize)>,
    pub dof: f64,
}

/// `model,depth,r,T,DoF` with empty forest columns for non-forest models.
pub fn format_table(rows: &[DofRow]) -> String {
    let mut out = String::from("model,depth,r,T,DoF\n");
    for row in rows {
        let _ = match row.shape {
            Some((d, r, t)) => writeln!(out, "{},{d},{r},{t},{:.4}", row.model, row.dof),
            None => writeln!(out, "{},,,,{:.4}", row.model, row.dof),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marsadd_examples() {
        assert!((marsadd(&[0.0, 0.5, 0.0, 0.0, 0.0]) - 2.1).abs() < 1e-12);
        let expected = 0.1 + 4.0 / (1.0 + 10f64.exp());
        assert!((marsadd(&[0.0; 5]) - expected).abs() < 1e-15);
        assert!((marsadd(&[0.0; 5]) - 0.1002).abs() < 1e-4);
    }

    #[test]
    fn poweradd_examples() {
        assert_eq!(poweradd(&[0.5; 10]), 5.0);
        assert_eq!(poweradd(&[0.0; 10]), 0.0);
        let mut x = [0.3; 10];
        let base = poweradd(&x);
        x[7] += 0.25;
        assert!((poweradd(&x) - base - 0.25).abs() < 1e-12);
        assert!((poweradd_curved(&[0.5; 10]) - (1.0 - 0.5f64.powi(10))).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_has_zero_dof() {
        let task = SimulatedTask::new(TaskFunction::MarsAdd, 30, 1.0, 1).unwrap();
        let est = estimate_dof(&task, &ConstantZero, 5, 2).unwrap();
        assert_eq!(est.dof, 0.0);
    }

    #[test]
    fn one_replication_rejected() {
        let task = SimulatedTask::new(TaskFunction::MarsAdd, 10, 1.0, 1).unwrap();
        assert!(estimate_dof(&task, &GlobalMean, 1, 0).is_err());
    }

    #[test]
    fn least_squares_interpolates_a_plane() {
        let task = SimulatedTask::new(TaskFunction::PowerAdd, 40, 1.0, 3).unwrap();
        let fit = LeastSquares.fit_predict(&task.design, &task.truth).unwrap();
        for (a, b) in fit.iter().zip(&task.truth) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_failure_names_replication() {
        struct Fails;
        impl Regressor for Fails {
            fn name(&self) -> String {
                "fails".into()
            }
            fn fit_predict(&self, _: &Tensor, _: &[f64]) -> Result<Vec<f64>, String> {
                Err("boom".into())
            }
        }
        let task = SimulatedTask::new(TaskFunction::MarsAdd, 10, 1.0, 1).unwrap();
        assert!(matches!(
            estimate_dof(&task, &Fails, 3, 0),
            Err(DofError::Fit { replication: 0, .. })
        ));
    }

    #[test]
    fn table_format() {
        let rows = [
            DofRow {
                model: "linear".into(),
                shape: None,
                dof: 6.0,
            },
            DofRow {
                model: "ndf".into(),
                shape: Some((5, 0.3, 16)),
                dof: 9.25,
            },
        ];
        assert_eq!(
            format_table(&rows),
            "model,depth,r,T,DoF\nlinear,,,,6.0000\nndf,5,0.3,16,9.2500\n"
        );
    }
}
