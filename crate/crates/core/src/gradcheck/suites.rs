//! Gradient-check suites over every graph primitive and the composed model.

use rand::Rng as _;

use super::{check_param, gradient_check, GradCheckError, GradCheckReport};
use crate::alleviator::{self, AlleviatorConfig, ShrinkOptions};
use crate::graph::{Graph, Var};
use crate::ndf::{self, LeafOutput, NeuralDecisionForest, Phase, PruningMode};
use crate::pipeline::{cross_entropy, SessionModel, TrainConfig};
use crate::rng::{stream, Rng};
use crate::session::Session;
use crate::tensor::{ShapeError, Tensor};
use crate::ModelError;

/// Maximum relative error accepted by the suites.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

/// Magnitudes in `[0.2, 1.2]` with random signs, away from kinks at 0.
fn signed(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.2, 1.2);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar with fixed random weights so every entry of
/// the output gradient differs.
fn reduce(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, ShapeError> {
    let w = g.constant(weights.reshaped(g.value(out).shape())?);
    let p = g.mul(out, w)?;
    let p = g.reshape(p, &[1, weights.len()])?;
    g.sum_axis(p, 1)
}

type Unary = Box<dyn Fn(&mut Graph, Var) -> Result<Var, ModelError>>;

/// Checks every primitive once with inputs drawn from `seed`.
pub fn primitive_suites(seed: u64) -> Result<Vec<SuiteResult>, GradCheckError> {
    let mut rng = stream(seed, "gradcheck.primitives");
    let (r, c) = (3, 4);
    let other = signed(&mut rng, &[c, 2]);
    let lhs = signed(&mut rng, &[2, r]);
    let row = signed(&mut rng, &[1, c]);
    let den = uniform(&mut rng, &[r, c], 0.5, 1.5);
    let mask = vec![
        true, false, false, true, false, false, false, false, true, false, false, false,
    ];
    let tail = signed(&mut rng, &[2, c]);
    let side = signed(&mut rng, &[r, 2]);

    let cases: Vec<(&str, Tensor, Unary)> = vec![
        ("matmul.lhs", signed(&mut rng, &[r, c]), {
            let o = other.clone();
            Box::new(move |g, x| {
                let b = g.constant(o.clone());
                Ok(g.matmul(x, b)?)
            })
        }),
        ("matmul.rhs", signed(&mut rng, &[r, c]), {
            let l = lhs.clone();
            Box::new(move |g, x| {
                let a = g.constant(l.clone());
                Ok(g.matmul(a, x)?)
            })
        }),
        (
            "transpose",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.transpose(x)?)),
        ),
        ("add.broadcast", signed(&mut rng, &[1, c]), {
            let a = den.clone();
            Box::new(move |g, x| {
                let a = g.constant(a.clone());
                Ok(g.add(a, x)?)
            })
        }),
        ("mul", signed(&mut rng, &[r, c]), {
            let b = row.clone();
            Box::new(move |g, x| {
                let b = g.constant(b.clone());
                Ok(g.mul(x, b)?)
            })
        }),
        (
            "mul.self",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.mul(x, x)?)),
        ),
        ("div.numerator", signed(&mut rng, &[r, c]), {
            let d = den.clone();
            Box::new(move |g, x| {
                let d = g.constant(d.clone());
                Ok(g.div(x, d)?)
            })
        }),
        ("div.denominator", uniform(&mut rng, &[1, c], 0.5, 1.5), {
            let n = den.clone();
            Box::new(move |g, x| {
                let n = g.constant(n.clone());
                Ok(g.div(n, x)?)
            })
        }),
        (
            "scale",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.scale(x, -1.7))),
        ),
        (
            "add_scalar",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.add_scalar(x, 0.3))),
        ),
        (
            "sigmoid",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.sigmoid(x))),
        ),
        (
            "softmax",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.softmax(x))),
        ),
        (
            "log",
            uniform(&mut rng, &[r, c], 0.3, 2.0),
            Box::new(|g, x| Ok(g.log(x))),
        ),
        (
            "recip",
            uniform(&mut rng, &[r, c], 0.3, 2.0),
            Box::new(|g, x| Ok(g.recip(x))),
        ),
        (
            "powf",
            uniform(&mut rng, &[r, c], 0.3, 2.0),
            Box::new(|g, x| Ok(g.powf(x, -0.5))),
        ),
        (
            "relu",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.relu(x))),
        ),
        (
            "clamp_min",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.clamp_min(x, 0.1))),
        ),
        (
            "gather",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.gather(x, &[2, 0, 2, 1])?)),
        ),
        (
            "select_columns",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.select_columns(x, &[3, 1])?)),
        ),
        ("concat.rows", signed(&mut rng, &[r, c]), {
            let t = tail.clone();
            Box::new(move |g, x| {
                let t = g.constant(t.clone());
                Ok(g.concat(&[x, t, x], 0)?)
            })
        }),
        ("concat.cols", signed(&mut rng, &[r, c]), {
            let s = side.clone();
            Box::new(move |g, x| {
                let s = g.constant(s.clone());
                Ok(g.concat(&[s, x], 1)?)
            })
        }),
        (
            "sum_axis.0",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.sum_axis(x, 0)?)),
        ),
        (
            "sum_axis.1",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.sum_axis(x, 1)?)),
        ),
        (
            "mean_axis.0",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.mean_axis(x, 0)?)),
        ),
        (
            "mean_axis.1",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.mean_axis(x, 1)?)),
        ),
        ("masked_fill.softmax", signed(&mut rng, &[r, c]), {
            let m = mask.clone();
            Box::new(move |g, x| {
                let y = g.masked_fill(x, &m)?;
                Ok(g.softmax(y))
            })
        }),
        (
            "reshape",
            signed(&mut rng, &[r, c]),
            Box::new(|g, x| Ok(g.reshape(x, &[2, 6])?)),
        ),
        (
            "tree_route",
            signed(&mut rng, &[2, 7]),
            Box::new(|g, x| {
                let s = g.sigmoid(x);
                Ok(g.tree_route(s, 3)?)
            }),
        ),
        (
            "js_shrink",
            signed(&mut rng, &[5, c]),
            Box::new(|g, x| Ok(alleviator::js_shrink(g, x, ShrinkOptions::default())?.0)),
        ),
        (
            "js_shrink.positive_part",
            signed(&mut rng, &[5, c]),
            Box::new(|g, x| {
                let x = g.scale(x, 2.0);
                Ok(alleviator::js_shrink(
                    g,
                    x,
                    ShrinkOptions {
                        positive_part: true,
                    },
                )?
                .0)
            }),
        ),
        (
            "normalize_batch",
            signed(&mut rng, &[5, c]),
            Box::new(|g, x| Ok(alleviator::normalize_batch(g, x)?.0)),
        ),
        (
            "alleviator",
            signed(&mut rng, &[5, c]),
            Box::new(|g, x| Ok(alleviator::apply(g, x, &AlleviatorConfig::default())?.0)),
        ),
        (
            "route.prune.exclude",
            signed(&mut rng, &[2, 3]),
            Box::new(|g, x| {
                let p = ndf::route(g, x, 2)?;
                let mut prng = stream(1, "gradcheck.mask");
                ndf::prune(
                    g,
                    p,
                    PruningMode::Exclude,
                    0.4,
                    &mut Phase::Train(&mut prng),
                )
            }),
        ),
        (
            "route.prune.literal_zero",
            signed(&mut rng, &[2, 3]),
            Box::new(|g, x| {
                let p = ndf::route(g, x, 2)?;
                let mut prng = stream(1, "gradcheck.mask");
                ndf::prune(
                    g,
                    p,
                    PruningMode::LiteralZero,
                    0.4,
                    &mut Phase::Train(&mut prng),
                )
            }),
        ),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, input, f) in cases {
        let probe = {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = f(&mut g, x).map_err(|e| GradCheckError::Forward(e.into()))?;
            g.value(y).len()
        };
        let weights = signed(&mut rng, &[probe]);
        let report = gradient_check(&input, |g, x| -> Result<Var, ModelError> {
            let y = f(g, x)?;
            Ok(reduce(g, y, &weights)?)
        })?;
        out.push(SuiteResult {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

fn small_sessions(rng: &mut Rng, items: usize, count: usize) -> Vec<Session> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=3);
            let clicks = (0..len).map(|_| rng.random_range(0..items)).collect();
            Session {
                items: clicks,
                target: rng.random_range(0..items),
            }
        })
        .collect()
}

/// Checks the forest alone and the composed model (encoder, alleviator,
/// both heads, merge, cross-entropy) against every trainable parameter.
pub fn model_suites(seed: u64) -> Result<Vec<SuiteResult>, GradCheckError> {
    let mut rng = stream(seed, "gradcheck.model");
    let items = 7;
    let cfg = TrainConfig {
        seed,
        embedding_dim: 3,
        latent_dim: 4,
        batch_size: 5,
        trees: 2,
        depth: 2,
        pruning_rate: 0.3,
        ..TrainConfig::default()
    };
    let mut model = SessionModel::new(cfg, items).map_err(|e| GradCheckError::Forward(e.into()))?;
    let sessions = small_sessions(&mut rng, items, 5);
    let refs: Vec<&Session> = sessions.iter().collect();
    let targets: Vec<usize> = sessions.iter().map(|s| s.target).collect();
    let mask_seed = rng.random::<u64>();

    let mut out = Vec::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if !model.store.get(id).trainable {
            continue;
        }
        let name = format!("model.{}", model.store.get(id).name);
        let view = model.clone();
        let report = check_param(
            &mut model.store,
            id,
            |g, bound| -> Result<Var, ModelError> {
                let mut prng = stream(mask_seed, "mask");
                let heads = view.forward(g, bound, &refs, 0.5, &mut Phase::Train(&mut prng))?;
                cross_entropy(g, heads.merged, &targets)
            },
        )?;
        out.push(SuiteResult { name, report });
    }

    // Scalar regression head with raw leaves.
    let mut store = crate::params::ParamStore::new();
    let fcfg = ndf::ForestConfig {
        trees: 2,
        depth: 3,
        seed,
        ..ndf::ForestConfig::default()
    };
    let forest = NeuralDecisionForest::new(&mut store, fcfg, 5, 1, LeafOutput::Raw)
        .map_err(|e| GradCheckError::Forward(e.into()))?;
    let x = uniform(&mut rng, &[6, 5], 0.0, 1.0);
    let y = signed(&mut rng, &[6, 1]);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let name = format!("regressor.{}", store.get(id).name);
        let report = check_param(&mut store, id, |g, bound| -> Result<Var, ModelError> {
            let mut prng = stream(mask_seed, "mask");
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let p = forest.forward(g, bound, xv, &mut Phase::Train(&mut prng))?;
            let neg = g.scale(yv, -1.0);
            let d = g.add(p, neg)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean_axis(sq, 0)?)
        })?;
        out.push(SuiteResult { name, report });
    }
    Ok(out)
}

/// Primitive and model suites for one seed.
pub fn run_suites(seed: u64) -> Result<Vec<SuiteResult>, GradCheckError> {
    let mut all = primitive_suites(seed)?;
    all.extend(model_suites(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_for_one_seed() {
        for s in run_suites(0).unwrap() {
            assert!(s.passes(), "{} {:?}", s.name, s.report);
        }
    }
}
