//! The complete predictor: encoder, linear head, optional forest head.

use crate::alleviator;
use crate::base::{Encoder, LinearPredictor, ReferenceEncoder};
use crate::graph::{Graph, Var};
use crate::ndf::{LeafOutput, NeuralDecisionForest, Phase};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;
use crate::session::Session;
use crate::tensor::Tensor;
use crate::ModelError;

use super::config::TrainConfig;
use super::loss::merge;

/// Graph nodes of one batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub latent: Var,
    pub base: Var,
    pub ndf: Option<Var>,
    pub merged: Var,
}

#[derive(Debug, Clone)]
pub struct SessionModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub encoder: ReferenceEncoder,
    pub predictor: LinearPredictor,
    pub forest: Option<NeuralDecisionForest>,
}

impl SessionModel {
    /// Freshly initialised model over `items` items.
    pub fn new(config: TrainConfig, items: usize) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, "init");
        let encoder = ReferenceEncoder::new(
            &mut store,
            items,
            config.embedding_dim,
            config.latent_dim,
            &mut rng,
        );
        let predictor =
            LinearPredictor::new(&mut store, encoder.embedding, config.latent_dim, &mut rng);
        let forest = if config.use_forest {
            Some(NeuralDecisionForest::new(
                &mut store,
                config.forest(),
                config.latent_dim,
                items,
                LeafOutput::Softmax,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            predictor,
            forest,
        })
    }

    /// Rebuilds a model around parameters loaded from a checkpoint.
    pub fn from_store(config: TrainConfig, store: ParamStore) -> Result<Self, ModelError> {
        let encoder = ReferenceEncoder::from_store(&store)?;
        let predictor = LinearPredictor::from_store(&store)?;
        let forest = if config.use_forest {
            Some(NeuralDecisionForest::from_store(
                &store,
                config.forest(),
                encoder.latent_dim(),
                LeafOutput::Softmax,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            predictor,
            forest,
        })
    }

    pub fn items(&self) -> usize {
        self.encoder.items()
    }

    /// Encodes a batch and evaluates both heads and their merge with
    /// weight `q`. The alleviator only feeds the forest.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sessions: &[&Session],
        q: f64,
        phase: &mut Phase<'_>,
    ) -> Result<Heads, ModelError> {
        let latent = self.encoder.encode_batch(g, bound, sessions)?;
        let base = self.predictor.predict(g, bound, latent)?;
        let Some(forest) = &self.forest else {
            return Ok(Heads {
                latent,
                base,
                ndf: None,
                merged: base,
            });
        };
        let (z, _) = alleviator::apply(g, latent, &self.config.alleviator_config())?;
        let mut ndf = forest.forward(g, bound, z, phase)?;
        if self.config.detach_forest {
            ndf = g.detach(ndf);
        }
        let merged = merge(g, base, ndf, q)?;
        Ok(Heads {
            latent,
            base,
            ndf: Some(ndf),
            merged,
        })
    }

    /// Evaluation-mode head outputs for `sessions`, in chunks of `chunk`.
    /// The forest output is `None` when the model has no forest.
    pub fn predict_heads(
        &self,
        sessions: &[Session],
        chunk: usize,
    ) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let items = self.items();
        let mut base = Vec::with_capacity(sessions.len() * items);
        let mut ndf = Vec::with_capacity(if self.forest.is_some() {
            base.capacity()
        } else {
            0
        });
        for part in sessions.chunks(chunk.max(1)) {
            let refs: Vec<&Session> = part.iter().collect();
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g);
            let heads = self.forward(&mut g, &bound, &refs, self.config.q, &mut Phase::Eval)?;
            base.extend_from_slice(g.value(heads.base).data());
            if let Some(n) = heads.ndf {
                ndf.extend_from_slice(g.value(n).data());
            }
        }
        let base = Tensor::new(vec![sessions.len(), items], base)?;
        let ndf = match self.forest {
            Some(_) => Some(Tensor::new(vec![sessions.len(), items], ndf)?),
            None => None,
        };
        Ok((base, ndf))
    }
}
