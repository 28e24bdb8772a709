//! Fixtures shared by the criterion benches.

use statprint::graph::{generate_dataset, EdgeModel, FeatureModel};
use statprint::sampler::{sample_fingerprint, Fingerprint, SamplerConfig};
use statprint::{Architecture, DatasetSpec, GnnModel, Graph, ModelSpec};

/// Ten-node Erdős–Rényi graphs with 16 Gaussian features.
pub fn dataset(num_graphs: usize) -> Vec<Graph> {
    generate_dataset(&DatasetSpec {
        num_graphs,
        nodes_per_graph: (10, 10),
        feature_dim: 16,
        edge_model: EdgeModel::ErdosRenyi { p: 0.3 },
        feature_model: FeatureModel::StandardNormal,
        seed: 5,
    })
    .expect("valid dataset spec")
}

pub fn model(arch: Architecture) -> GnnModel {
    GnnModel::init(&ModelSpec::new(arch, 16, 8), 11).expect("valid model spec")
}

pub fn fingerprint(victim: &GnnModel, graphs: &[Graph], points: usize) -> Fingerprint {
    sample_fingerprint(victim, "victim", graphs, points, &SamplerConfig::default(), 13).expect("fingerprint")
}
