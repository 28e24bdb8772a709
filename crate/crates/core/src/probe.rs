//! Query tuples and the measurements taken at them: the normalized change
//! statistic `q` and directional derivatives of a node embedding.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{EmbeddingModel, GnnModel};
use crate::graph::{Graph, UNIT_TOLERANCE};
use crate::seed::rng_from_seed;

/// Default probe step for continuous features.
pub const DEFAULT_DELTA: f64 = 1e-2;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Embeddings with a smaller norm are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// One probe: perturb `x_node` of `graph` by `step` along `direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTuple {
    pub graph: Graph,
    #[serde(rename = "i")]
    pub node: usize,
    #[serde(rename = "w")]
    pub direction: Vec<f64>,
    #[serde(rename = "delta")]
    pub step: f64,
}

impl QueryTuple {
    pub fn new(graph: Graph, node: usize, direction: Vec<f64>, step: f64) -> Result<Self> {
        let t = Self {
            graph,
            node,
            direction,
            step,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        if self.node >= g.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: self.node,
                num_nodes: g.num_nodes(),
            });
        }
        if self.direction.len() != g.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: g.feature_dim(),
                actual: self.direction.len(),
                context: "tuple direction",
            });
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NonUnitDirection { norm });
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be > 0, got {}", self.step)));
        }
        if g.integer_features() {
            let ones = self.direction.iter().filter(|v| **v == 1.0).count();
            let zeros = self.direction.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || zeros + 1 != self.direction.len() || self.step != 1.0 {
                return Err(Error::IntegerFeatures(
                    "tuples on integer graphs need an axis direction e_j and step 1",
                ));
            }
        }
        Ok(())
    }

    /// The same probe on different node features.
    pub fn with_graph(&self, graph: Graph) -> Self {
        Self { graph, ..self.clone() }
    }

    pub fn perturbed(&self, step: f64) -> Result<Graph> {
        self.graph.perturb_node(self.node, &self.direction, step)
    }
}

/// Unit vector uniform on the sphere in `R^dim` (normalized Gaussian).
pub fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws tuples from the experiment distribution: graph uniform over the
/// dataset, node uniform, direction uniform on the sphere (or a uniform axis
/// vector with step 1 for integer features).
#[derive(Debug, Clone)]
pub struct TupleSampler<'a> {
    dataset: &'a [Graph],
    rng: ChaCha8Rng,
    delta: f64,
}

impl<'a> TupleSampler<'a> {
    pub fn new(dataset: &'a [Graph], seed: u64, delta: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("tuple sampler needs a non-empty dataset".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
        }
        Ok(Self {
            dataset,
            rng: rng_from_seed(seed),
            delta,
        })
    }

    pub fn sample(&mut self) -> QueryTuple {
        let graph = &self.dataset[self.rng.random_range(0..self.dataset.len())];
        let node = self.rng.random_range(0..graph.num_nodes());
        let dim = graph.feature_dim();
        let (direction, step) = if graph.integer_features() {
            let mut e = vec![0.0; dim];
            e[self.rng.random_range(0..dim)] = 1.0;
            (e, 1.0)
        } else {
            (random_unit_vector(dim, &mut self.rng), self.delta)
        };
        QueryTuple {
            graph: graph.clone(),
            node,
            direction,
            step,
        }
    }
}

fn checked_norm(h: &DVector<f64>, node: usize) -> Result<f64> {
    let norm = h.norm();
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(Error::DegenerateEmbedding { node, norm });
    }
    Ok(norm)
}

/// `q(t) = ‖h_i(X + δw) − h_i(X)‖ / ‖h_i(X)‖`.
pub fn q_value(model: &dyn EmbeddingModel, t: &QueryTuple) -> Result<f64> {
    if model.input_dim() != t.graph.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: t.graph.feature_dim(),
            context: "candidate input dim vs tuple features",
        });
    }
    let base = model.embed_node(&t.graph, t.node)?;
    let norm = checked_norm(&base, t.node)?;
    let moved = model.embed_node(&t.perturbed(t.step)?, t.node)?;
    Ok((moved - base).norm() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DerivativeMode {
    Analytic,
    CentralFd { step: f64 },
}

impl Default for DerivativeMode {
    fn default() -> Self {
        DerivativeMode::CentralFd { step: FD_STEP }
    }
}

/// `(h_i(X + τw) − h_i(X − τw)) / 2τ` for any queryable model.
pub fn fd_directional_derivative(model: &dyn EmbeddingModel, t: &QueryTuple, step: f64) -> Result<DVector<f64>> {
    if t.graph.integer_features() {
        return Err(Error::IntegerFeatures(
            "directional derivatives are undefined on integer features; use q_value with step 1",
        ));
    }
    let plus = model.embed_node(&t.perturbed(step)?, t.node)?;
    let minus = model.embed_node(&t.perturbed(-step)?, t.node)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Directional derivative `∇_w h_i` of a native model.
pub fn directional_derivative(model: &GnnModel, t: &QueryTuple, mode: DerivativeMode) -> Result<DVector<f64>> {
    if t.graph.integer_features() {
        return Err(Error::IntegerFeatures(
            "directional derivatives are undefined on integer features; use q_value with step 1",
        ));
    }
    match mode {
        DerivativeMode::Analytic => model.directional_derivative(&t.graph, t.node, &t.direction),
        DerivativeMode::CentralFd { step } => fd_directional_derivative(model, t, step),
    }
}

/// `‖∇_w h_i‖ / ‖h_i‖` by the chosen mode.
pub fn normalized_derivative_norm(model: &GnnModel, t: &QueryTuple, mode: DerivativeMode) -> Result<f64> {
    let h = model.embed_node(&t.graph, t.node)?;
    let norm = checked_norm(&h, t.node)?;
    Ok(directional_derivative(model, t, mode)?.norm() / norm)
}
