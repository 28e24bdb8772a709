//! Statistical properties of the stationary-point sampler on a trained GCN.

use std::sync::OnceLock;

use statprint::attacks::{train_victim, Schedule, ZooPlan};
use statprint::graph::generate_dataset;
use statprint::probe::q_value;
use statprint::sampler::{find_stationary, sample_fingerprint, SamplerConfig, Strategy};
use statprint::verifier::{detect_exact, Verdict};
use statprint::{Architecture, DatasetSpec, GnnModel, Graph, ModelSpec, TupleSampler};

struct Fixture {
    graphs: Vec<Graph>,
    victim: GnnModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let graphs = generate_dataset(&DatasetSpec {
            num_graphs: 40,
            seed: 21,
            ..DatasetSpec::default()
        })
        .unwrap();
        let plan = ZooPlan {
            seed: 22,
            training: Schedule {
                epochs: 150,
                learning_rate: 0.01,
            },
            ..ZooPlan::default()
        };
        let victim = train_victim(&graphs, &plan).unwrap();
        Fixture { graphs, victim }
    })
}

fn relative_shift(a: &Graph, b: &Graph) -> f64 {
    (a.features() - b.features()).norm() / b.features().norm()
}

#[test]
fn most_searches_meet_the_acceptance_bound() {
    let f = fixture();
    let cfg = SamplerConfig::default();
    let mut sampler = TupleSampler::new(&f.graphs, 31, cfg.delta).unwrap();
    let runs = 40u64;
    let met = (0..runs)
        .filter(|&k| find_stationary(&f.victim, &sampler.sample(), &cfg, k).unwrap().success)
        .count() as u64;
    assert!(met * 10 >= runs * 8, "{met}/{runs} met the bound");
}

#[test]
fn stationary_probes_respond_far_less_than_random_ones() {
    let f = fixture();
    let fp = sample_fingerprint(&f.victim, "victim", &f.graphs, 40, &SamplerConfig::default(), 41).unwrap();
    assert_eq!(fp.len(), 40);
    let mean =
        |ts: &[statprint::QueryTuple]| ts.iter().map(|t| q_value(&f.victim, t).unwrap()).sum::<f64>() / ts.len() as f64;
    let (qt, qr) = (mean(&fp.stationary), mean(&fp.reference));
    assert!(qt < 0.1 * qr, "mean q over T {qt:e} vs R {qr:e}");
    assert!(fp.recheck(&f.victim, 1e-9).unwrap());
}

/// Decade steps from the default λ. Between λ = 0 and 0.01 the penalty is
/// below the search's run-to-run noise and the means are indistinguishable.
#[test]
fn larger_lambda_never_moves_features_further() {
    let f = fixture();
    let runs = 20;
    let mut sampler = TupleSampler::new(&f.graphs, 51, 1e-2).unwrap();
    let seeds: Vec<_> = (0..runs).map(|_| sampler.sample()).collect();
    let mean_shift = |lambda: f64| {
        let cfg = SamplerConfig {
            strategy: Strategy::FeatureSearch,
            lambda,
            ..SamplerConfig::default()
        };
        seeds
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let p = find_stationary(&f.victim, t, &cfg, k as u64).unwrap();
                relative_shift(&p.tuple.graph, &t.graph)
            })
            .sum::<f64>()
            / runs as f64
    };
    let shifts: Vec<f64> = [0.01, 0.1, 1.0].into_iter().map(mean_shift).collect();
    for w in shifts.windows(2) {
        assert!(w[1] <= w[0], "mean shifts {shifts:?}");
    }
}

#[test]
fn exact_detection_rejects_most_independent_models() {
    let f = fixture();
    let fp = sample_fingerprint(&f.victim, "victim", &f.graphs, 20, &SamplerConfig::default(), 61).unwrap();
    let tol = fp.bounds.iter().copied().fold(0.0, f64::max);
    let others: Vec<GnnModel> = (0..10)
        .map(|k| GnnModel::init(&ModelSpec::new(Architecture::ALL[k % 3], 16, 8), 700 + k as u64).unwrap())
        .collect();
    let verdicts = detect_exact(&others, &fp.stationary, tol).unwrap();
    let rejected = verdicts.iter().filter(|v| **v == Verdict::Independent).count();
    assert!(rejected >= 9, "{rejected}/10 flagged independent");
    assert_eq!(
        detect_exact(std::slice::from_ref(&f.victim), &fp.stationary, tol).unwrap(),
        vec![Verdict::Surrogate]
    );
}
