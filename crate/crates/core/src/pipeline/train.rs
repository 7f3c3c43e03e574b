//! Joint end-to-end training, evaluation and merger-weight tuning.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::ndf::Phase;
use crate::rng::stream;
use crate::session::{augment_prefixes, target_rank, RankingReport, Session, SessionDataset};
use crate::tensor::Tensor;
use crate::ModelError;

use super::config::{ConfigError, OptimizerKind, TrainConfig};
use super::loss::{cross_entropy, merge_vectors};
use super::model::SessionModel;
use super::optim::{Adam, Optimizer, Sgd};

/// Cut-off used for the reported ranking metrics.
pub const METRIC_K: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("dataset has no training sessions")]
    NoData,
}

/// Training-set statistics of one epoch, collected from the training-mode
/// forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub hit_rate: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SessionModel,
    pub history: Vec<EpochMetrics>,
}

/// `METRIC_K`, or the vocabulary size when it is smaller.
pub fn metric_k(items: usize) -> usize {
    METRIC_K.min(items)
}

/// Trains a fresh model on the training split.
pub fn train(dataset: &SessionDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    dataset: &SessionDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let data = if config.augment {
        augment_prefixes(dataset).train
    } else {
        dataset.train.clone()
    };
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let items = dataset.items();
    let k = metric_k(items);
    let mut model = SessionModel::new(config.clone(), items)?;
    let mut optimizer: Box<dyn Optimizer> = match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(config.learning_rate)),
        OptimizerKind::Sgd => Box::new(Sgd {
            learning_rate: config.learning_rate,
        }),
    };
    let mut shuffle_rng = stream(config.seed, "shuffle");
    let mut prune_rng = stream(config.seed, "prune");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut ranks = Vec::with_capacity(data.len());
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let sessions: Vec<&Session> = idx.iter().map(|&i| &data[i]).collect();
            let targets: Vec<usize> = sessions.iter().map(|s| s.target).collect();
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g);
            let mut phase = Phase::Train(&mut prune_rng);
            let heads = model.forward(&mut g, &bound, &sessions, config.q, &mut phase)?;
            let loss = cross_entropy(&mut g, heads.merged, &targets)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch + 1,
                    loss: value,
                });
            }
            loss_sum += value * sessions.len() as f64;
            let merged = g.value(heads.merged);
            ranks.extend(
                targets
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| target_rank(merged.row(i), t)),
            );
            let grads = g.backward(loss)?;
            model.store.accumulate(&grads, &bound);
            optimizer.step(&mut model.store);
            model.store.zero_grad();
        }
        let report = RankingReport::from_ranks(&ranks, k);
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            hit_rate: report.hit_rate,
            mrr: report.mrr,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { model, history })
}

/// Ranks of every session's target under the merged prediction with
/// weight `q`.
pub fn merged_ranks(
    base: &Tensor,
    ndf: Option<&Tensor>,
    targets: &[usize],
    q: f64,
) -> Result<Vec<usize>, ModelError> {
    let mut ranks = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let rank = match ndf {
            Some(n) => target_rank(&merge_vectors(base.row(i), n.row(i), q)?, t),
            None => target_rank(base.row(i), t),
        };
        ranks.push(rank);
    }
    Ok(ranks)
}

/// Evaluation-mode HR@k / MRR@k on `sessions` with merger weight `q`.
pub fn evaluate(
    model: &SessionModel,
    sessions: &[Session],
    q: f64,
    k: usize,
) -> Result<RankingReport, ModelError> {
    let (base, ndf) = model.predict_heads(sessions, model.config.eval_batch_size)?;
    let targets: Vec<usize> = sessions.iter().map(|s| s.target).collect();
    let ranks = merged_ranks(&base, ndf.as_ref(), &targets, q)?;
    Ok(RankingReport::from_ranks(&ranks, k))
}

/// The default q grid: 0, 0.1, ..., 1.
pub fn default_q_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTuning {
    pub best_q: f64,
    pub best_hit_rate: f64,
    /// `(q, HR@k)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Picks the q with the highest HR@k over the grid; the lowest q wins ties.
pub fn tune_q_from_heads(
    base: &Tensor,
    ndf: Option<&Tensor>,
    targets: &[usize],
    grid: &[f64],
    k: usize,
) -> Result<QTuning, ModelError> {
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    let mut points = grid.to_vec();
    points.sort_by(f64::total_cmp);
    for q in points {
        let ranks = merged_ranks(base, ndf, targets, q)?;
        let hr = RankingReport::from_ranks(&ranks, k).hit_rate;
        curve.push((q, hr));
        if best.is_none_or(|(_, b)| hr > b) {
            best = Some((q, hr));
        }
    }
    let (best_q, best_hit_rate) = best.ok_or_else(|| ModelError::Config("empty q grid".into()))?;
    Ok(QTuning {
        best_q,
        best_hit_rate,
        curve,
    })
}

/// Tunes q on `sessions`. Model selection reuses training accuracy, so
/// callers normally pass the training split.
pub fn tune_q(
    model: &SessionModel,
    sessions: &[Session],
    grid: &[f64],
) -> Result<QTuning, ModelError> {
    let (base, ndf) = model.predict_heads(sessions, model.config.eval_batch_size)?;
    let targets: Vec<usize> = sessions.iter().map(|s| s.target).collect();
    tune_q_from_heads(&base, ndf.as_ref(), &targets, grid, metric_k(model.items()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{generate_synthetic, SyntheticConfig};

    fn tiny() -> (SessionDataset, TrainConfig) {
        let ds = generate_synthetic(
            1,
            &SyntheticConfig {
                items: 12,
                sessions: 10,
                ..SyntheticConfig::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            trees: 2,
            depth: 2,
            embedding_dim: 4,
            latent_dim: 4,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn one_epoch_smoke() {
        let (ds, cfg) = tiny();
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].loss.is_finite());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, mut cfg) = tiny();
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        let out = train(&ds, &cfg).unwrap();
        let fresh = SessionModel::new(cfg, ds.items()).unwrap();
        for (a, b) in out.model.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn tuning_ties_pick_lowest_q() {
        let base = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let t = tune_q_from_heads(&base, Some(&base), &[0, 1], &default_q_grid(), 1).unwrap();
        assert_eq!(t.best_q, 0.0);
        assert_eq!(t.curve.len(), 11);
        let one = tune_q_from_heads(&base, Some(&base), &[0, 1], &[0.7], 1).unwrap();
        assert_eq!(one.best_q, 0.7);
    }

    #[test]
    fn tuning_prefers_the_better_head() {
        let base = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.7, 0.3]]).unwrap();
        let ndf = Tensor::from_rows(&[vec![0.4, 0.6], vec![0.8, 0.2]]).unwrap();
        let t = tune_q_from_heads(&base, Some(&ndf), &[0, 0], &default_q_grid(), 1).unwrap();
        assert_eq!(t.best_hit_rate, 1.0);
        assert!(t.best_q >= 0.5);
    }
}
