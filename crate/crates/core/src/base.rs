//! Encoder contract, reference encoder and the linear base predictor.
//!
//! The base predictor follows the usual encoder-predictor split: an encoder
//! maps a session to a latent `z`, a linear layer maps `z` to a session
//! embedding `s_h`, item scores are `c = A s_h` with the item embedding
//! matrix `A` shared with the encoder, and the prediction is `softmax(c)`.

use crate::graph::{Graph, Var};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::session::Session;
use crate::tensor::{ShapeError, Tensor};
use crate::ModelError;

pub const EMBEDDING: &str = "embedding.A";
pub const ATTENTION: &str = "encoder.attn";
pub const PROJECTION: &str = "encoder.proj";
pub const LINEAR: &str = "predictor.linear";

/// Anything that turns a batch of sessions into a `batch x latent_dim`
/// matrix whose parameters live in a [`ParamStore`].
pub trait Encoder {
    fn latent_dim(&self) -> usize;

    fn encode_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sessions: &[&Session],
    ) -> Result<Var, ModelError>;
}

/// Attention-weighted mean of the item embeddings concatenated with the last
/// item's embedding, followed by a linear projection.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    pub embedding: ParamId,
    pub attention: ParamId,
    pub projection: ParamId,
    items: usize,
    dim: usize,
    latent: usize,
}

fn missing(name: &str) -> ModelError {
    ModelError::Shape(ShapeError::new("missing parameter", &[], &[name.len()]))
}

fn expect_shape(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId, ModelError> {
    let id = store.id(name).ok_or_else(|| missing(name))?;
    let actual = store.get(id).value.shape();
    if actual != shape {
        return Err(ShapeError::new("parameter", actual, shape).into());
    }
    Ok(id)
}

impl ReferenceEncoder {
    /// Registers `embedding.A`, `encoder.attn` and `encoder.proj`, drawn
    /// uniformly in `[-1/sqrt(dim), 1/sqrt(dim)]`.
    pub fn new(
        store: &mut ParamStore,
        items: usize,
        dim: usize,
        latent: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let embedding = store.add(EMBEDDING, uniform(&[items, dim], bound, rng));
        let attention = store.add(ATTENTION, uniform(&[dim, 1], bound, rng));
        let projection = store.add(PROJECTION, uniform(&[2 * dim, latent], bound, rng));
        Self {
            embedding,
            attention,
            projection,
            items,
            dim,
            latent,
        }
    }

    /// Re-attaches to parameters already present in `store`.
    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        let id = store.id(EMBEDDING).ok_or_else(|| missing(EMBEDDING))?;
        let shape = store.get(id).value.shape();
        let (items, dim) = (shape[0], shape[1]);
        let proj = store.id(PROJECTION).ok_or_else(|| missing(PROJECTION))?;
        let latent = store.get(proj).value.cols();
        Ok(Self {
            embedding: expect_shape(store, EMBEDDING, &[items, dim])?,
            attention: expect_shape(store, ATTENTION, &[dim, 1])?,
            projection: expect_shape(store, PROJECTION, &[2 * dim, latent])?,
            items,
            dim,
            latent,
        })
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, s: &Session) -> Result<(), ModelError> {
        if s.items.is_empty() {
            return Err(ModelError::EmptySession);
        }
        match s.items.iter().find(|&&i| i >= self.items) {
            Some(&item) => Err(ModelError::ItemOutOfRange {
                item,
                items: self.items,
            }),
            None => Ok(()),
        }
    }

    /// Attention-weighted mean of one session's item embeddings, `1 x dim`.
    pub fn attention_mean(
        &self,
        g: &mut Graph,
        bound: &Bound,
        s: &Session,
    ) -> Result<Var, ModelError> {
        self.check(s)?;
        let e = g.gather(bound.var(self.embedding), &s.items)?;
        let scores = g.matmul(e, bound.var(self.attention))?;
        let scores = g.reshape(scores, &[1, s.items.len()])?;
        let alpha = g.softmax(scores);
        Ok(g.matmul(alpha, e)?)
    }

    /// Encodes one session without recording gradients.
    pub fn encode(&self, store: &ParamStore, s: &Session) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let z = self.encode_batch(&mut g, &bound, &[s])?;
        Ok(g.value(z).data().to_vec())
    }
}

impl Encoder for ReferenceEncoder {
    fn latent_dim(&self) -> usize {
        self.latent
    }

    fn encode_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sessions: &[&Session],
    ) -> Result<Var, ModelError> {
        let means = sessions
            .iter()
            .map(|s| self.attention_mean(g, bound, s))
            .collect::<Result<Vec<_>, _>>()?;
        let mean = g.concat(&means, 0)?;
        let lasts: Vec<usize> = sessions.iter().map(|s| s.last()).collect();
        let last = g.gather(bound.var(self.embedding), &lasts)?;
        let h = g.concat(&[mean, last], 1)?;
        Ok(g.matmul(h, bound.var(self.projection))?)
    }
}

/// `softmax(A * Linear(z))` with the item matrix tied to the encoder.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub linear: ParamId,
    pub embedding: ParamId,
}

impl LinearPredictor {
    /// Registers `predictor.linear` (`latent x dim`, no bias).
    pub fn new(store: &mut ParamStore, embedding: ParamId, latent: usize, rng: &mut Rng) -> Self {
        let dim = store.get(embedding).value.cols();
        let bound = 1.0 / (dim as f64).sqrt();
        let linear = store.add(LINEAR, uniform(&[latent, dim], bound, rng));
        Self { linear, embedding }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        let embedding = store.id(EMBEDDING).ok_or_else(|| missing(EMBEDDING))?;
        let linear = store.id(LINEAR).ok_or_else(|| missing(LINEAR))?;
        let dim = store.get(embedding).value.cols();
        if store.get(linear).value.cols() != dim {
            return Err(ShapeError::new(
                "predictor.linear",
                store.get(linear).value.shape(),
                store.get(embedding).value.shape(),
            )
            .into());
        }
        Ok(Self { linear, embedding })
    }

    /// Item scores `c`, `batch x items`.
    pub fn scores(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Var, ModelError> {
        let sh = g.matmul(z, bound.var(self.linear))?;
        let at = g.transpose(bound.var(self.embedding))?;
        Ok(g.matmul(sh, at)?)
    }

    pub fn predict(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Var, ModelError> {
        let c = self.scores(g, bound, z)?;
        Ok(g.softmax(c))
    }

    /// Predicts from one latent vector without recording gradients.
    pub fn predict_linear(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let zv = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let y = self.predict(&mut g, &bound, zv)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn setup(items: usize, dim: usize) -> (ParamStore, ReferenceEncoder, LinearPredictor) {
        let mut store = ParamStore::new();
        let mut rng = stream(1, "test");
        let enc = ReferenceEncoder::new(&mut store, items, dim, dim, &mut rng);
        let pred = LinearPredictor::new(&mut store, enc.embedding, dim, &mut rng);
        (store, enc, pred)
    }

    #[test]
    fn single_item_mean_is_its_embedding() {
        let (store, enc, _) = setup(5, 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let s = Session::new(vec![3], 0).unwrap();
        let m = enc.attention_mean(&mut g, &b, &s).unwrap();
        assert_eq!(g.value(m).data(), store.get(enc.embedding).value.row(3));
    }

    #[test]
    fn uniform_attention_mean() {
        let (mut store, enc, _) = setup(2, 2);
        store.get_mut(enc.embedding).value = Tensor::identity(2);
        store.get_mut(enc.attention).value = Tensor::zeros(&[2, 1]);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let s = Session::new(vec![0, 1], 0).unwrap();
        let m = enc.attention_mean(&mut g, &b, &s).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_and_out_of_range_sessions_rejected() {
        let (store, enc, _) = setup(3, 2);
        let empty = Session {
            items: vec![],
            target: 0,
        };
        assert!(matches!(
            enc.encode(&store, &empty),
            Err(ModelError::EmptySession)
        ));
        let bad = Session::new(vec![5], 0).unwrap();
        assert!(matches!(
            enc.encode(&store, &bad),
            Err(ModelError::ItemOutOfRange { item: 5, items: 3 })
        ));
    }

    #[test]
    fn identity_embedding_prediction() {
        let (mut store, _, pred) = setup(2, 2);
        store.get_mut(pred.embedding).value = Tensor::identity(2);
        store.get_mut(pred.linear).value = Tensor::identity(2);
        let y = pred.predict_linear(&store, &[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((y[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((y[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (store, _, pred) = setup(3, 4);
        assert!(matches!(
            pred.predict_linear(&store, &[1.0, 2.0]),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn reattach_from_store() {
        let (store, enc, _) = setup(6, 3);
        let again = ReferenceEncoder::from_store(&store).unwrap();
        assert_eq!(again.items(), 6);
        assert_eq!(again.latent_dim(), enc.latent_dim());
        assert!(LinearPredictor::from_store(&store).is_ok());
    }
}
