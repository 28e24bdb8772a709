//! Small trainable GNNs (GCN, GIN, GraphSAGE) behind a query-only
//! [`EmbeddingModel`] interface.
//!
//! Node features are held as `n × D` matrices (one row per node) inside the
//! layer stack. Embeddings leave the model as `d × n` matrices whose column
//! `j` is the embedding of node `j`.

mod io;
mod train;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::rng_from_seed;

pub use io::{load_model, save_model};
pub use train::{
    finetune, prune, relative_error, train, FinetuneOutcome, Head, Optimizer, Supervision, TrainConfig, TrainOutcome,
};

/// Anything that maps a graph to per-node embeddings.
///
/// Implementations must be deterministic: the same graph gives bitwise
/// identical output.
pub trait EmbeddingModel: Send + Sync {
    /// Feature dimension `D` the model accepts.
    fn input_dim(&self) -> usize;
    /// Embedding dimension `d`.
    fn embedding_dim(&self) -> usize;
    /// `d × n` embedding matrix.
    fn embed(&self, graph: &Graph) -> Result<DMatrix<f64>>;

    /// Embedding of a single node. Models may override this when cheaper.
    fn embed_node(&self, graph: &Graph, node: usize) -> Result<DVector<f64>> {
        if node >= graph.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: node,
                num_nodes: graph.num_nodes(),
            });
        }
        Ok(self.embed(graph)?.column(node).into_owned())
    }
}

impl<T: EmbeddingModel + ?Sized> EmbeddingModel for Arc<T> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn embedding_dim(&self) -> usize {
        (**self).embedding_dim()
    }
    fn embed(&self, graph: &Graph) -> Result<DMatrix<f64>> {
        (**self).embed(graph)
    }
    fn embed_node(&self, graph: &Graph, node: usize) -> Result<DVector<f64>> {
        (**self).embed_node(graph, node)
    }
}

impl<T: EmbeddingModel + ?Sized> EmbeddingModel for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn embedding_dim(&self) -> usize {
        (**self).embedding_dim()
    }
    fn embed(&self, graph: &Graph) -> Result<DMatrix<f64>> {
        (**self).embed(graph)
    }
    fn embed_node(&self, graph: &Graph, node: usize) -> Result<DVector<f64>> {
        (**self).embed_node(graph, node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gcn,
    Gin,
    Sage,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Gcn, Architecture::Gin, Architecture::Sage];

    /// Number of convolution layers in the stack.
    pub fn depth(self) -> usize {
        match self {
            Architecture::Gcn => 4,
            Architecture::Gin | Architecture::Sage => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gcn => "gcn",
            Architecture::Gin => "gin",
            Architecture::Sage => "sage",
        }
    }

    /// Dense `n × n` aggregation operator for this architecture.
    ///
    /// GCN: `D̃^{-1/2}(A+I)D̃^{-1/2}`. GIN: `(1+ε₀)I + A` with `ε₀ = 0`.
    /// SAGE: row-normalized `A` (neighbor mean; isolated rows are zero).
    pub fn propagation(self, graph: &Graph) -> DMatrix<f64> {
        let n = graph.num_nodes();
        let a = graph.dense_adjacency();
        match self {
            Architecture::Gcn => {
                let a_tilde = a + DMatrix::identity(n, n);
                let inv_sqrt: Vec<f64> = a_tilde.row_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
                DMatrix::from_fn(n, n, |r, c| inv_sqrt[r] * a_tilde[(r, c)] * inv_sqrt[c])
            }
            Architecture::Gin => a + DMatrix::identity(n, n),
            Architecture::Sage => {
                let mut m = a;
                for mut row in m.row_iter_mut() {
                    let deg = row.sum();
                    if deg > 0.0 {
                        row /= deg;
                    }
                }
                m
            }
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Architecture::Gcn),
            "gin" => Ok(Architecture::Gin),
            "sage" | "graphsage" => Ok(Architecture::Sage),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Nonlinearity applied between convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One convolution: `Z = (P·H)·weight + H·root_weight + bias`.
///
/// `root_weight` is only present for SAGE, where `P` is the neighbor mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub root_weight: Option<DMatrix<f64>>,
    pub bias: Option<RowDVector<f64>>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn pre_activation(&self, prop: &DMatrix<f64>, h: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let agg = prop * h;
        let mut z = &agg * &self.weight;
        if let Some(root) = &self.root_weight {
            z += h * root;
        }
        if let Some(b) = &self.bias {
            for mut row in z.row_iter_mut() {
                row += b;
            }
        }
        (agg, z)
    }

    /// Linear part only (no bias), used for tangent propagation.
    fn linear(&self, prop: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = (prop * h) * &self.weight;
        if let Some(root) = &self.root_weight {
            z += h * root;
        }
        z
    }
}

/// Shape and initialization settings for a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input_dim: usize, embedding_dim: usize) -> Self {
        Self {
            architecture,
            input_dim,
            hidden_dim: 16,
            embedding_dim,
            activation: Activation::Tanh,
            bias: true,
        }
    }
}

/// Dropout probability on SAGE hidden layers during training.
pub const SAGE_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    architecture: Architecture,
    activation: Activation,
    layers: Vec<Layer>,
}

impl GnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden_dim == 0 || spec.embedding_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be >= 1".into()));
        }
        let mut rng = rng_from_seed(seed);
        let depth = spec.architecture.depth();
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { spec.input_dim } else { spec.hidden_dim };
            let fan_out = if l + 1 == depth {
                spec.embedding_dim
            } else {
                spec.hidden_dim
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
            let glorot = |rng: &mut rand_chacha::ChaCha8Rng| DMatrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
            let weight = glorot(&mut rng);
            let root_weight = (spec.architecture == Architecture::Sage).then(|| glorot(&mut rng));
            let bias = spec.bias.then(|| RowDVector::zeros(fan_out));
            layers.push(Layer {
                weight,
                root_weight,
                bias,
            });
        }
        // Burn one draw so models with the same spec but different seeds
        // diverge even in degenerate tiny shapes.
        let _: u64 = rng.random();
        Self::from_layers(spec.architecture, spec.activation, layers)
    }

    pub fn from_layers(architecture: Architecture, activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (fin, fout) = layer.weight.shape();
            if let Some(root) = &layer.root_weight {
                if root.shape() != (fin, fout) {
                    return Err(Error::DimensionMismatch {
                        expected: fin * fout,
                        actual: root.len(),
                        context: "root weight shape",
                    });
                }
            }
            if (architecture == Architecture::Sage) != layer.root_weight.is_some() {
                return Err(Error::InvalidArgument(
                    "root weights are required for SAGE and only for SAGE".into(),
                ));
            }
            if let Some(b) = &layer.bias {
                if b.len() != fout {
                    return Err(Error::DimensionMismatch {
                        expected: fout,
                        actual: b.len(),
                        context: "bias length",
                    });
                }
            }
            if l > 0 && layers[l - 1].output_dim() != fin {
                return Err(Error::DimensionMismatch {
                    expected: layers[l - 1].output_dim(),
                    actual: fin,
                    context: "layer chaining",
                });
            }
        }
        Ok(Self {
            architecture,
            activation,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    pub fn has_bias(&self) -> bool {
        self.layers.iter().all(|l| l.bias.is_some())
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: g.feature_dim(),
                context: "graph feature dim vs model input dim",
            });
        }
        Ok(())
    }

    /// Inference forward pass returning `n × d` (rows are nodes).
    pub fn forward_rows(&self, g: &Graph) -> Result<DMatrix<f64>> {
        self.check_graph(g)?;
        let prop = self.architecture.propagation(g);
        Ok(self.forward_with(&prop, g.features()))
    }

    pub(crate) fn forward_with(&self, prop: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (_, mut z) = layer.pre_activation(prop, &h);
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        h
    }

    /// Analytic Jacobian-vector product `∇_w h_i`: the derivative of node
    /// `node`'s embedding when `x_node` moves along `w`.
    pub fn directional_derivative(&self, g: &Graph, node: usize, w: &[f64]) -> Result<DVector<f64>> {
        self.check_graph(g)?;
        if node >= g.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: node,
                num_nodes: g.num_nodes(),
            });
        }
        if w.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: w.len(),
                context: "direction length",
            });
        }
        let prop = self.architecture.propagation(g);
        let last = self.layers.len() - 1;
        let mut h = g.features().clone();
        let mut dh = DMatrix::zeros(g.num_nodes(), self.input_dim());
        for (j, wj) in w.iter().enumerate() {
            dh[(node, j)] = *wj;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (_, mut z) = layer.pre_activation(&prop, &h);
            let mut dz = layer.linear(&prop, &dh);
            if l < last {
                dz.zip_apply(&z, |d, zv| *d *= self.activation.derivative(zv));
                z.apply(|v| *v = self.activation.apply(*v));
            }
            h = z;
            dh = dz;
        }
        Ok(dh.row(node).transpose())
    }

    /// Applies `h ↦ O·h` exactly by rotating the final layer's parameters.
    pub fn rotate_output(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        let d = self.embedding_dim();
        if rotation.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: rotation.ncols(),
                context: "output rotation",
            });
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("non-empty stack");
        let rt = rotation.transpose();
        last.weight = &last.weight * &rt;
        if let Some(root) = &mut last.root_weight {
            *root = &*root * &rt;
        }
        if let Some(b) = &mut last.bias {
            *b = &*b * &rt;
        }
        Ok(out)
    }

    /// Parameters flattened layer by layer: weight (row-major), root
    /// weight, bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            push_row_major(&mut out, &layer.weight);
            if let Some(root) = &layer.root_weight {
                push_row_major(&mut out, root);
            }
            if let Some(b) = &layer.bias {
                out.extend(b.iter());
            }
        }
        out
    }

    /// `true` for entries of [`parameters`](Self::parameters) that are
    /// weights rather than biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend(std::iter::repeat_n(true, layer.weight.len()));
            if let Some(root) = &layer.root_weight {
                out.extend(std::iter::repeat_n(true, root.len()));
            }
            if let Some(b) = &layer.bias {
                out.extend(std::iter::repeat_n(false, b.len()));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.len() + l.root_weight.as_ref().map_or(0, |r| r.len()) + l.bias.as_ref().map_or(0, |b| b.len())
            })
            .sum()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch {
                expected: self.num_parameters(),
                actual: params.len(),
                context: "parameter vector",
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            fill_row_major(&mut layer.weight, &mut it);
            if let Some(root) = &mut layer.root_weight {
                fill_row_major(root, &mut it);
            }
            if let Some(b) = &mut layer.bias {
                for v in b.iter_mut() {
                    *v = it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

fn fill_row_major(m: &mut DMatrix<f64>, it: &mut impl Iterator<Item = f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = it.next().expect("length checked");
        }
    }
}

impl EmbeddingModel for GnnModel {
    fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn embed(&self, graph: &Graph) -> Result<DMatrix<f64>> {
        Ok(self.forward_rows(graph)?.transpose())
    }

    fn embed_node(&self, graph: &Graph, node: usize) -> Result<DVector<f64>> {
        if node >= graph.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: node,
                num_nodes: graph.num_nodes(),
            });
        }
        Ok(self.forward_rows(graph)?.row(node).transpose())
    }
}

/// Smallest embedding norm over the given nodes; used to flag models whose
/// embeddings collapse toward zero.
pub fn min_embedding_norm(model: &dyn EmbeddingModel, probes: &[(Graph, usize)]) -> Result<f64> {
    let mut min = f64::INFINITY;
    for (g, i) in probes {
        min = min.min(model.embed_node(g, *i)?.norm());
    }
    Ok(min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_dataset, DatasetSpec, EdgeModel, FeatureModel};
    use approx::assert_abs_diff_eq;

    fn dataset(n: usize, dim: usize, seed: u64) -> Vec<Graph> {
        generate_dataset(&DatasetSpec {
            num_graphs: 6,
            nodes_per_graph: (n, n),
            feature_dim: dim,
            edge_model: EdgeModel::ErdosRenyi { p: 0.4 },
            feature_model: FeatureModel::StandardNormal,
            seed,
        })
        .unwrap()
    }

    fn linear_gcn(weight: DMatrix<f64>, bias: Option<RowDVector<f64>>) -> GnnModel {
        GnnModel::from_layers(
            Architecture::Gcn,
            Activation::Relu,
            vec![Layer {
                weight,
                root_weight: None,
                bias,
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let g = Graph::new(1, [], DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), false).unwrap();
        let m = linear_gcn(DMatrix::zeros(2, 3), None);
        assert!(m.embed(&g).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_gcn_on_single_node() {
        let g = Graph::new(1, [], DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), false).unwrap();
        let m = linear_gcn(DMatrix::identity(2, 2), None);
        let h = m.embed(&g).unwrap();
        assert_eq!(h.shape(), (2, 1));
        assert_eq!(h.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
    }

    #[test]
    fn gcn_normalization_matches_dense_oracle() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let g = Graph::new(2, [(0, 1)], x.clone(), false).unwrap();
        let w = DMatrix::from_row_slice(2, 3, &[0.3, -0.7, 1.1, 0.2, 0.9, -0.4]);
        let m = linear_gcn(w.clone(), None);
        // Brute-force D̃^{-1/2}(A+I)D̃^{-1/2}: both degrees are 2.
        let a_plus_i = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let d_inv_sqrt = DMatrix::from_diagonal_element(2, 2, 1.0 / 2f64.sqrt());
        let a_hat = &d_inv_sqrt * a_plus_i * &d_inv_sqrt;
        let expected = (a_hat * x * w).transpose();
        assert_abs_diff_eq!(m.embed(&g).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn layer_stacks_follow_architecture_table() {
        for arch in Architecture::ALL {
            let m = GnnModel::init(&ModelSpec::new(arch, 5, 8), 1).unwrap();
            assert_eq!(m.layers().len(), arch.depth());
            assert_eq!(m.input_dim(), 5);
            assert_eq!(m.embedding_dim(), 8);
            assert_eq!(
                m.layers().iter().all(|l| l.root_weight.is_some()),
                arch == Architecture::Sage
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = GnnModel::init(&ModelSpec::new(Architecture::Gin, 4, 8), 1).unwrap();
        let g = &dataset(3, 5, 1)[0];
        assert!(matches!(m.embed(g), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let g = &dataset(5, 4, 2)[0];
        for arch in Architecture::ALL {
            let m = GnnModel::init(&ModelSpec::new(arch, 4, 8), 3).unwrap();
            let a = m.embed(g).unwrap();
            let b = m.embed(g).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn jvp_matches_fd_for_linear_model() {
        let g = &dataset(4, 3, 5)[0];
        let w = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.1, -0.3, 0.7]);
        let m = linear_gcn(w, Some(RowDVector::from_row_slice(&[0.2, -0.1])));
        let dir = [0.6, 0.0, 0.8];
        let analytic = m.directional_derivative(g, 1, &dir).unwrap();
        let tau = 1e-3;
        let plus = m.embed_node(&g.perturb_node(1, &dir, tau).unwrap(), 1).unwrap();
        let minus = m.embed_node(&g.perturb_node(1, &dir, -tau).unwrap(), 1).unwrap();
        let fd = (plus - minus) / (2.0 * tau);
        assert_abs_diff_eq!(analytic, fd, epsilon = 1e-10);
    }

    #[test]
    fn rotate_output_rotates_embeddings() {
        let g = &dataset(5, 4, 8)[0];
        for arch in Architecture::ALL {
            let m = GnnModel::init(&ModelSpec::new(arch, 4, 3), 4).unwrap();
            // Rotation by 90° in the first two coordinates.
            let o = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
            let rotated = m.rotate_output(&o).unwrap();
            assert_abs_diff_eq!(rotated.embed(g).unwrap(), &o * m.embed(g).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn parameter_round_trip() {
        let mut m = GnnModel::init(&ModelSpec::new(Architecture::Sage, 3, 4), 9).unwrap();
        let p = m.parameters();
        assert_eq!(p.len(), m.num_parameters());
        assert_eq!(m.weight_mask().len(), p.len());
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        m.set_parameters(&doubled).unwrap();
        assert_eq!(m.parameters(), doubled);
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let gs = dataset(6, 4, 12);
        let perm = [3, 0, 5, 1, 4, 2];
        for arch in Architecture::ALL {
            let m = GnnModel::init(&ModelSpec::new(arch, 4, 8), 21).unwrap();
            for g in &gs {
                let h = m.embed(g).unwrap();
                let hp = m.embed(&g.permute_nodes(&perm).unwrap()).unwrap();
                for (old, &new) in perm.iter().enumerate() {
                    assert_abs_diff_eq!(h.column(old), hp.column(new), epsilon = 1e-10);
                }
            }
        }
    }
}
