//! Synthetic supervised tasks used to train victims and independent models.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::probe::random_unit_vector;
use crate::seed::rng_from_seed;

/// Node regression target `y_i = tanh(U s_i / √c_i)` where `s_i` sums the
/// features over node `i` and its `c_i − 1` neighbors and `U` has
/// `N(0, 1/D)` entries, so pre-activations are roughly unit variance on
/// Gaussian features. Smooth and learnable by every supported architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTask {
    weight: Vec<Vec<f64>>,
}

impl NodeTask {
    pub fn random(feature_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || outputs == 0 {
            return Err(Error::InvalidArgument("task needs feature_dim, outputs >= 1".into()));
        }
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("positive sd");
        let weight = (0..outputs)
            .map(|_| (0..feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(Self { weight })
    }

    pub fn outputs(&self) -> usize {
        self.weight.len()
    }

    /// `k × n` targets.
    pub fn targets(&self, g: &Graph) -> Result<DMatrix<f64>> {
        let dim = self.weight[0].len();
        if g.feature_dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: g.feature_dim(),
                context: "task feature dim",
            });
        }
        let x = g.features();
        let mut y = DMatrix::zeros(self.outputs(), g.num_nodes());
        for (i, nbrs) in g.neighbors().iter().enumerate() {
            let mut sum: Vec<f64> = x.row(i).iter().copied().collect();
            for &j in nbrs {
                for (m, v) in sum.iter_mut().zip(x.row(j).iter()) {
                    *m += v;
                }
            }
            for (k, u) in self.weight.iter().enumerate() {
                let z: f64 = u.iter().zip(&sum).map(|(a, b)| a * b).sum();
                y[(k, i)] = (z / ((nbrs.len() + 1) as f64).sqrt()).tanh();
            }
        }
        Ok(y)
    }
}

/// Binary node labels from a random hyperplane through the feature mean:
/// `label_i = ⟨a, x_i − μ⟩ > 0`.
pub fn hyperplane_labels(graphs: &[Graph], seed: u64) -> Result<Vec<Vec<bool>>> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no graphs to label".into()))?;
    let dim = first.feature_dim();
    let mut rng = rng_from_seed(seed);
    let normal = random_unit_vector(dim, &mut rng);
    let total: usize = graphs.iter().map(Graph::num_nodes).sum();
    let mut mean = vec![0.0; dim];
    for g in graphs {
        for row in g.features().row_iter() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v / total as f64;
            }
        }
    }
    Ok(graphs
        .iter()
        .map(|g| {
            g.features()
                .row_iter()
                .map(|row| {
                    row.iter()
                        .zip(&mean)
                        .zip(&normal)
                        .map(|((x, m), a)| (x - m) * a)
                        .sum::<f64>()
                        > 0.0
                })
                .collect()
        })
        .collect())
}
