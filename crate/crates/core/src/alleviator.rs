//! Column-wise James-Stein shrinkage of latent batches.
//!
//! For a batch `Z` of `m` latents, column `j` is scaled by
//! `1 - (m - 2) / |xi_j|^2`, where `xi_j` is the column. Both graph versions
//! (for training) and plain versions (for simulation) are provided and agree
//! bit for bit.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::rng::stream;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShrinkOptions {
    /// Clamp the factor at zero so small-norm columns never flip sign.
    pub positive_part: bool,
}

/// Alleviator settings used by the training pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlleviatorConfig {
    pub enabled: bool,
    pub normalize: bool,
    pub shrink: ShrinkOptions,
}

impl Default for AlleviatorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            normalize: true,
            shrink: ShrinkOptions::default(),
        }
    }
}

/// What happened during one shrinkage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShrinkReport {
    /// Set when the batch had fewer than three rows and was passed through.
    pub pass_through: bool,
    /// Columns with zero norm, passed through unshrunk.
    pub unshrunk_columns: Vec<usize>,
    /// Factor applied to each column.
    pub factors: Vec<f64>,
}

/// Shrinkage factor of one column with squared norm `norm2` in a batch of
/// `m` rows.
pub fn js_factor(m: usize, norm2: f64, opts: ShrinkOptions) -> f64 {
    if norm2 == 0.0 {
        return 1.0;
    }
    let f = 1.0 - (m as f64 - 2.0) / norm2;
    if opts.positive_part {
        f.max(0.0)
    } else {
        f
    }
}

fn column_norms2(z: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; z.cols()];
    for i in 0..z.rows() {
        for (o, v) in out.iter_mut().zip(z.row(i)) {
            *o += v * v;
        }
    }
    out
}

/// Records shrinkage of `z` (`m x n'`) on the graph. Gradients flow through
/// both the entries and the column norms.
pub fn js_shrink(
    g: &mut Graph,
    z: Var,
    opts: ShrinkOptions,
) -> Result<(Var, ShrinkReport), ShapeError> {
    let value = g.value(z);
    let (m, cols) = (value.rows(), value.cols());
    if m < 3 {
        return Ok((
            z,
            ShrinkReport {
                pass_through: true,
                unshrunk_columns: Vec::new(),
                factors: vec![1.0; cols],
            },
        ));
    }
    let norms = column_norms2(value);
    let zero: Vec<usize> = (0..cols).filter(|&j| norms[j] == 0.0).collect();

    let sq = g.mul(z, z)?;
    let n2 = g.sum_axis(sq, 0)?;
    let mut num = Tensor::full(&[1, cols], m as f64 - 2.0);
    let mut pad = Tensor::zeros(&[1, cols]);
    for &j in &zero {
        num.data_mut()[j] = 0.0;
        pad.data_mut()[j] = 1.0;
    }
    let (num, pad) = (g.constant(num), g.constant(pad));
    let safe = g.add(n2, pad)?;
    let ratio = g.div(num, safe)?;
    let neg = g.scale(ratio, -1.0);
    let mut factor = g.add_scalar(neg, 1.0);
    if opts.positive_part {
        factor = g.relu(factor);
    }
    let out = g.mul(z, factor)?;
    let report = ShrinkReport {
        pass_through: false,
        unshrunk_columns: zero,
        factors: g.value(factor).data().to_vec(),
    };
    Ok((out, report))
}

/// Records per-column standardisation of `z` to mean 0 and (population)
/// variance 1. Zero-variance columns are centred but not scaled. Returns
/// the indices of those columns.
pub fn normalize_batch(g: &mut Graph, z: Var) -> Result<(Var, Vec<usize>), ShapeError> {
    let mean = g.mean_axis(z, 0)?;
    let neg = g.scale(mean, -1.0);
    let centred = g.add(z, neg)?;
    let sq = g.mul(centred, centred)?;
    let var = g.mean_axis(sq, 0)?;
    let cols = g.value(var).cols();
    let flat: Vec<usize> = (0..cols)
        .filter(|&j| g.value(var).data()[j] <= VARIANCE_EPS)
        .collect();
    let mut pad = Tensor::zeros(&[1, cols]);
    for &j in &flat {
        // Replace the variance by exactly 1 so the scale is exactly 1.
        pad.data_mut()[j] = 1.0 - g.value(var).data()[j];
    }
    let pad = g.constant(pad);
    let safe = g.add(var, pad)?;
    let inv_std = g.powf(safe, -0.5);
    let out = g.mul(centred, inv_std)?;
    Ok((out, flat))
}

const VARIANCE_EPS: f64 = 1e-24;

/// Applies the configured alleviator (normalise, then shrink) to a latent
/// batch. Disabled configs return `z` unchanged.
pub fn apply(
    g: &mut Graph,
    z: Var,
    cfg: &AlleviatorConfig,
) -> Result<(Var, Option<ShrinkReport>), ShapeError> {
    if !cfg.enabled {
        return Ok((z, None));
    }
    let mut x = z;
    if cfg.normalize && g.value(z).rows() >= 2 {
        x = normalize_batch(g, x)?.0;
    }
    let (out, report) = js_shrink(g, x, cfg.shrink)?;
    Ok((out, Some(report)))
}

/// A batch of latents, optionally with the noise-free means it was drawn
/// around.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub mu: Option<Tensor>,
}

impl LatentBatch {
    pub fn new(z: Tensor) -> Self {
        Self { z, mu: None }
    }

    pub fn with_truth(z: Tensor, mu: Tensor) -> Result<Self, ShapeError> {
        if z.shape() != mu.shape() {
            return Err(ShapeError::new("latent batch", z.shape(), mu.shape()));
        }
        Ok(Self { z, mu: Some(mu) })
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    /// Shrunk copy of the batch; the truth, if any, is carried along.
    pub fn js_shrink(&self, opts: ShrinkOptions) -> (LatentBatch, ShrinkReport) {
        let m = self.z.rows();
        let cols = self.z.cols();
        if m < 3 {
            let report = ShrinkReport {
                pass_through: true,
                unshrunk_columns: Vec::new(),
                factors: vec![1.0; cols],
            };
            return (self.clone(), report);
        }
        let norms = column_norms2(&self.z);
        let factors: Vec<f64> = norms.iter().map(|&n2| js_factor(m, n2, opts)).collect();
        let mut z = self.z.clone();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v *= factors[i % cols];
        }
        let report = ShrinkReport {
            pass_through: false,
            unshrunk_columns: (0..cols).filter(|&j| norms[j] == 0.0).collect(),
            factors,
        };
        (
            LatentBatch {
                z,
                mu: self.mu.clone(),
            },
            report,
        )
    }

    /// Standardised copy of the batch (see [`normalize_batch`]).
    pub fn normalize(&self) -> LatentBatch {
        let mut g = Graph::new();
        let z = g.constant(self.z.clone());
        let (out, _) = normalize_batch(&mut g, z).expect("matrix input");
        LatentBatch {
            z: g.value(out).clone(),
            mu: self.mu.clone(),
        }
    }

    /// Sum over columns of `sum_i (mu_ij - z_ij)^2`; `None` without truth.
    pub fn squared_error(&self) -> Option<f64> {
        self.mu.as_ref().map(|mu| {
            mu.data()
                .iter()
                .zip(self.z.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        })
    }
}

/// Where the true means of a simulated column are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanPrior {
    /// All means at zero.
    Origin,
    /// Means i.i.d. normal with this standard deviation.
    Normal { sd: f64 },
}

/// Monte-Carlo risks of the plain (MLE) and shrunk estimates of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteinRisk {
    pub mle: f64,
    pub js: f64,
    pub mle_se: f64,
    pub js_se: f64,
    pub trials: usize,
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    (mean, (var / nf).sqrt())
}

/// Estimates `E[sum_i (mu_i - muhat_i)^2]` for `muhat = z` and for the
/// shrunk estimate, with `z_i ~ N(mu_i, sigma^2)` and fresh means from
/// `prior` in every trial.
pub fn stein_risk_trial(
    seed: u64,
    m: usize,
    trials: usize,
    sigma: f64,
    prior: MeanPrior,
) -> Result<SteinRisk, String> {
    if m < 3 || trials == 0 {
        return Err(format!(
            "need m >= 3 and trials > 0, got m={m}, trials={trials}"
        ));
    }
    if sigma < 1.0 {
        return Err(format!("sigma must be at least 1, got {sigma}"));
    }
    let mut rng = stream(seed, "stein");
    let mut mu = vec![0.0; m];
    let mut z = vec![0.0; m];
    let (mut s_mle, mut q_mle, mut s_js, mut q_js) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..trials {
        for (u, x) in mu.iter_mut().zip(z.iter_mut()) {
            *u = match prior {
                MeanPrior::Origin => 0.0,
                MeanPrior::Normal { sd } => sd * rng.sample::<f64, _>(StandardNormal),
            };
            *x = *u + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let norm2: f64 = z.iter().map(|v| v * v).sum();
        let f = js_factor(m, norm2, ShrinkOptions::default());
        let (mut e_mle, mut e_js) = (0.0, 0.0);
        for (u, x) in mu.iter().zip(&z) {
            e_mle += (u - x).powi(2);
            e_js += (u - f * x).powi(2);
        }
        s_mle += e_mle;
        q_mle += e_mle * e_mle;
        s_js += e_js;
        q_js += e_js * e_js;
    }
    let (mle, mle_se) = mean_se(s_mle, q_mle, trials);
    let (js, js_se) = mean_se(s_js, q_js, trials);
    Ok(SteinRisk {
        mle,
        js,
        mle_se,
        js_se,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn half_factor_example() {
        let b = LatentBatch::new(column(&[1.0, -1.0, 1.0, 1.0]));
        let (out, report) = b.js_shrink(ShrinkOptions::default());
        assert_eq!(report.factors, vec![0.5]);
        assert_eq!(out.z.data(), &[0.5, -0.5, 0.5, 0.5]);
    }

    #[test]
    fn norm_equal_to_m_minus_two_zeroes_column() {
        // m = 4, |xi|^2 = 2.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let b = LatentBatch::new(column(&[s, s, s, s]));
        let (out, report) = b.js_shrink(ShrinkOptions::default());
        let n2: f64 = b.z.data().iter().map(|v| v * v).sum();
        assert_eq!(report.factors[0], 1.0 - 2.0 / n2);
        assert!(out.z.data().iter().all(|v| v.abs() < 1e-15));
        let exact = LatentBatch::new(column(&[1.0, 1.0, 0.0, 0.0]));
        let (out, _) = exact.js_shrink(ShrinkOptions::default());
        assert!(out.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_norm_barely_shrinks() {
        let b = LatentBatch::new(column(&[1e8, 1e8, -1e8]));
        let (out, _) = b.js_shrink(ShrinkOptions::default());
        assert!(out.z.max_abs_diff(&b.z) / 1e8 < 1e-15);
    }

    #[test]
    fn small_batches_pass_through() {
        let b = LatentBatch::new(column(&[1.0, 2.0]));
        let (out, report) = b.js_shrink(ShrinkOptions::default());
        assert!(report.pass_through);
        assert_eq!(out, b);
    }

    #[test]
    fn zero_column_passes_through() {
        let z = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let (out, report) = LatentBatch::new(z.clone()).js_shrink(ShrinkOptions::default());
        assert_eq!(report.unshrunk_columns, vec![0]);
        assert_eq!(out.z.get2(0, 0), 0.0);
        let mut g = Graph::new();
        let zv = g.param(z);
        let (gout, greport) = js_shrink(&mut g, zv, ShrinkOptions::default()).unwrap();
        assert_eq!(greport.unshrunk_columns, vec![0]);
        assert_eq!(g.value(gout), &out.z);
    }

    #[test]
    fn positive_part_clamps() {
        let b = LatentBatch::new(column(&[0.1, 0.1, 0.1, 0.1]));
        let (plain, _) = b.js_shrink(ShrinkOptions::default());
        assert!(plain.z.data()[0] < 0.0);
        let (pp, report) = b.js_shrink(ShrinkOptions {
            positive_part: true,
        });
        assert_eq!(report.factors, vec![0.0]);
        assert!(pp.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_examples() {
        let out = LatentBatch::new(column(&[1.0, 3.0])).normalize();
        assert_eq!(out.z.data(), &[-1.0, 1.0]);
        let constant = LatentBatch::new(column(&[2.5, 2.5, 2.5])).normalize();
        assert!(constant.z.data().iter().all(|&v| v == 0.0));
        let again = out.normalize();
        assert!(again.z.max_abs_diff(&out.z) < 1e-12);
    }

    #[test]
    fn stein_risk_rejects_bad_arguments() {
        assert!(stein_risk_trial(1, 2, 10, 1.0, MeanPrior::Origin).is_err());
        assert!(stein_risk_trial(1, 5, 10, 0.5, MeanPrior::Origin).is_err());
    }
}
