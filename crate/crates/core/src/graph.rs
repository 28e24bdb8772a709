//! Node-attributed undirected graphs, synthetic datasets and k-hop subgraphs.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Tolerance on `‖w‖ = 1` for perturbation directions.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// An undirected graph with one feature row per node.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted. Self-loops are
/// never stored; layers that need them add them while normalizing.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    integer_features: bool,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        integer_features: bool,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::DimensionMismatch {
                expected: num_nodes,
                actual: features.nrows(),
                context: "feature rows",
            });
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidGraph("feature dimension must be >= 1".into()));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidGraph(format!("non-finite feature value {bad}")));
        }
        if integer_features && features.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::InvalidGraph(
                "integer_features set but a feature is not integer-valued".into(),
            ));
        }
        let mut normalized = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::NodeOutOfRange {
                    index: u.max(v),
                    num_nodes,
                });
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        normalized.sort_unstable();
        normalized.dedup();
        Ok(Self {
            num_nodes,
            edges: normalized,
            features,
            integer_features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Feature matrix, `n × D`, one row per node.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn integer_features(&self) -> bool {
        self.integer_features
    }

    /// Replaces the feature matrix, keeping the structure.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                actual: features.len(),
                context: "replacement feature matrix",
            });
        }
        Graph::new(
            self.num_nodes,
            self.edges.iter().copied(),
            features,
            self.integer_features,
        )
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn dense_adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.num_nodes, self.num_nodes);
        for &(u, v) in &self.edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }

    fn check_node(&self, i: usize) -> Result<()> {
        if i >= self.num_nodes {
            Err(Error::NodeOutOfRange {
                index: i,
                num_nodes: self.num_nodes,
            })
        } else {
            Ok(())
        }
    }

    /// Returns a copy with `x_i` replaced by `x_i + step·w`.
    pub fn perturb_node(&self, i: usize, w: &[f64], step: f64) -> Result<Self> {
        self.check_node(i)?;
        if w.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                actual: w.len(),
                context: "perturbation direction",
            });
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NonUnitDirection { norm });
        }
        let mut out = self.clone();
        for (j, wj) in w.iter().enumerate() {
            out.features[(i, j)] += step * wj;
        }
        if out.integer_features && out.features.row(i).iter().any(|v| v.fract() != 0.0) {
            return Err(Error::InvalidArgument(
                "perturbation leaves integer-feature lattice".into(),
            ));
        }
        Ok(out)
    }

    /// Graph distances from `center` (usize::MAX when unreachable).
    pub fn bfs_distances(&self, center: usize) -> Result<Vec<usize>> {
        self.check_node(center)?;
        let adj = self.neighbors();
        let mut dist = vec![usize::MAX; self.num_nodes];
        let mut queue = VecDeque::from([center]);
        dist[center] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Nodes within `k` hops of `center`, ascending.
    pub fn khop_nodes(&self, center: usize, k: usize) -> Result<Vec<usize>> {
        let dist = self.bfs_distances(center)?;
        Ok((0..self.num_nodes).filter(|&v| dist[v] <= k).collect())
    }

    /// Induced subgraph on the `k`-hop ball around `center`.
    pub fn khop_subgraph(&self, center: usize, k: usize) -> Result<(Graph, IndexMap)> {
        let kept = self.khop_nodes(center, k)?;
        let mut old_to_new = vec![None; self.num_nodes];
        for (new, &old) in kept.iter().enumerate() {
            old_to_new[old] = Some(new);
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .filter_map(|&(u, v)| Some((old_to_new[u]?, old_to_new[v]?)))
            .collect();
        let features = DMatrix::from_fn(kept.len(), self.feature_dim(), |r, c| self.features[(kept[r], c)]);
        let sub = Graph::new(kept.len(), edges, features, self.integer_features)?;
        Ok((
            sub,
            IndexMap {
                old_to_new,
                new_to_old: kept,
            },
        ))
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::DimensionMismatch {
                expected: self.num_nodes,
                actual: perm.len(),
                context: "permutation length",
            });
        }
        let mut features = DMatrix::zeros(self.num_nodes, self.feature_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.set_row(new, &self.features.row(old));
        }
        Graph::new(
            self.num_nodes,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            features,
            self.integer_features,
        )
    }

    /// Deterministic hash of structure and exact feature bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.num_nodes.hash(&mut h);
        self.edges.hash(&mut h);
        self.features.ncols().hash(&mut h);
        for v in self.features.iter() {
            v.to_bits().hash(&mut h);
        }
        self.integer_features.hash(&mut h);
        h.finish()
    }
}

/// Old/new index correspondence produced by [`Graph::khop_subgraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub old_to_new: Vec<Option<usize>>,
    pub new_to_old: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    integer_features: bool,
}

impl Serialize for Graph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphRepr {
            n: self.num_nodes,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            x: self.features.row_iter().map(|r| r.iter().copied().collect()).collect(),
            integer_features: self.integer_features,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GraphRepr::deserialize(d)?;
        let dim = repr.x.first().map_or(0, Vec::len);
        if repr.x.iter().any(|r| r.len() != dim) {
            return Err(serde::de::Error::custom("ragged feature matrix"));
        }
        let features = DMatrix::from_fn(repr.x.len(), dim, |r, c| repr.x[r][c]);
        Graph::new(
            repr.n,
            repr.edges.into_iter().map(|[u, v]| (u, v)),
            features,
            repr.integer_features,
        )
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeModel {
    ErdosRenyi {
        p: f64,
    },
    Path,
    Star,
    /// Row-major grid of width `ceil(sqrt(n))`.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureModel {
    StandardNormal,
    /// Integers drawn uniformly from `0..=max`.
    IntegerUniform {
        max: u32,
    },
}

impl FeatureModel {
    pub fn default_integer() -> Self {
        FeatureModel::IntegerUniform { max: 3 }
    }
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_graphs: usize,
    /// Inclusive `[min, max]` node count.
    pub nodes_per_graph: (usize, usize),
    pub feature_dim: usize,
    pub edge_model: EdgeModel,
    pub feature_model: FeatureModel,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 100 Erdős–Rényi graphs (`p = 0.3`) of 10 nodes with 16 Gaussian
    /// features.
    fn default() -> Self {
        Self {
            num_graphs: 100,
            nodes_per_graph: (10, 10),
            feature_dim: 16,
            edge_model: EdgeModel::ErdosRenyi { p: 0.3 },
            feature_model: FeatureModel::StandardNormal,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.nodes_per_graph;
        if self.num_graphs == 0 {
            return Err(Error::InvalidSpec("num_graphs must be >= 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("bad node range [{lo}, {hi}]")));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidSpec("feature_dim must be >= 1".into()));
        }
        if let EdgeModel::ErdosRenyi { p } = self.edge_model {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!("edge probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// The same recipe with a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn structure(model: EdgeModel, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    match model {
        EdgeModel::ErdosRenyi { p } => {
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            edges
        }
        EdgeModel::Path => (1..n).map(|v| (v - 1, v)).collect(),
        EdgeModel::Star => (1..n).map(|v| (0, v)).collect(),
        EdgeModel::Grid => {
            let width = (n as f64).sqrt().ceil().max(1.0) as usize;
            let mut edges = Vec::new();
            for v in 0..n {
                if v % width + 1 < width && v + 1 < n {
                    edges.push((v, v + 1));
                }
                if v + width < n {
                    edges.push((v, v + width));
                }
            }
            edges
        }
    }
}

/// Draws one graph per index; graph `k` depends only on `(spec.seed, k)`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    spec.validate()?;
    (0..spec.num_graphs)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, "graph", k as u64));
            let (lo, hi) = spec.nodes_per_graph;
            let n = rng.random_range(lo..=hi);
            let edges = structure(spec.edge_model, n, &mut rng);
            let (features, integer) = match spec.feature_model {
                FeatureModel::StandardNormal => (
                    DMatrix::from_fn(n, spec.feature_dim, |_, _| StandardNormal.sample(&mut rng)),
                    false,
                ),
                FeatureModel::IntegerUniform { max } => (
                    DMatrix::from_fn(n, spec.feature_dim, |_, _| rng.random_range(0..=max) as f64),
                    true,
                ),
            };
            Graph::new(n, edges, features, integer)
        })
        .collect()
}

pub fn save_dataset(path: &Path, graphs: &[Graph]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(graphs)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Graph>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
