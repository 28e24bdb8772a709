//! Stationary-point search and fingerprint assembly.
//!
//! The objective is `‖∇_w h_i(X)‖/‖h_i(X)‖ + λ‖X − X₀‖_F/‖X₀‖_F`, started
//! from a tuple drawn from the experiment distribution. Two strategies
//! minimize it:
//!
//! * [`Strategy::FeatureSearch`] keeps `w` and moves the features of node
//!   `i`'s k-hop neighborhood with a derivative-free solver.
//! * [`Strategy::NullSpace`] keeps `X = X₀` (so the penalty is zero) and
//!   replaces `w` by its projection onto the null space of the
//!   finite-difference Jacobian `∂h_i/∂x_i`. This needs `D > d`; integer
//!   graphs and full-rank Jacobians fall back to the feature search.
//!
//! Derivatives are estimated by central differences, so the victim only
//! needs to be queryable.

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::EmbeddingModel;
use crate::graph::Graph;
use crate::optim::{nelder_mead, one_plus_one_es, Budget, Solver};
use crate::probe::{QueryTuple, TupleSampler, DEFAULT_DELTA, DEGENERATE_NORM, FD_STEP};
use crate::seed::derive_seed;

/// Extra attempts per fingerprint slot after a failed search.
pub const MAX_RESAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FeatureSearch,
    NullSpace,
}

/// Singular values below this fraction of the largest count as zero.
pub const NULL_SPACE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    /// Objective evaluations per search.
    pub budget: usize,
    pub solver: Solver,
    /// A search succeeds when the first objective term falls below this
    /// fraction of its value at the seed tuple.
    pub acceptance: f64,
    /// Free rows are those within `khop` hops of the probed node; `None`
    /// frees every row.
    pub khop: Option<usize>,
    pub fd_step: f64,
    /// Probe step for the reference tuples and the verifier.
    pub delta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::NullSpace,
            lambda: 0.01,
            budget: 2000,
            solver: Solver::NelderMead,
            acceptance: 0.02,
            khop: Some(2),
            fd_step: FD_STEP,
            delta: DEFAULT_DELTA,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidSpec("sampler budget must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.acceptance > 0.0) {
            return Err(Error::InvalidSpec("acceptance fraction must be > 0".into()));
        }
        if !(self.fd_step > 0.0) || !(self.delta > 0.0) {
            return Err(Error::InvalidSpec("fd_step and delta must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of one search.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub tuple: QueryTuple,
    /// First objective term at the returned features.
    pub residual: f64,
    /// First objective term at the seed tuple.
    pub seed_residual: f64,
    /// `acceptance × seed_residual`.
    pub bound: f64,
    /// Objective evaluations, or Jacobian columns for the null-space step.
    pub evaluations: usize,
    pub success: bool,
}

/// First objective term: `‖∇_w h_i‖/‖h_i‖` by central differences, or
/// `‖h_i(X + e_j) − h_i(X)‖/‖h_i‖` on integer graphs.
pub fn stationarity_residual(model: &dyn EmbeddingModel, t: &QueryTuple, fd_step: f64) -> Result<f64> {
    let h = model.embed_node(&t.graph, t.node)?;
    let norm = h.norm();
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(Error::DegenerateEmbedding { node: t.node, norm });
    }
    let change = if t.graph.integer_features() {
        (model.embed_node(&t.perturbed(1.0)?, t.node)? - h).norm()
    } else {
        let plus = model.embed_node(&t.perturbed(fd_step)?, t.node)?;
        let minus = model.embed_node(&t.perturbed(-fd_step)?, t.node)?;
        (plus - minus).norm() / (2.0 * fd_step)
    };
    Ok(change / norm)
}

/// Minimizes the stationarity objective starting from `seed_tuple`. The
/// returned tuple keeps the graph structure, node, direction and step of
/// the seed; only feature rows change. `seed` drives the ES mutations.
pub fn find_stationary_point(
    victim: &dyn EmbeddingModel,
    seed_tuple: &QueryTuple,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<StationaryPoint> {
    cfg.validate()?;
    seed_tuple.validate()?;
    let g0 = &seed_tuple.graph;
    let integer = g0.integer_features();
    let seed_residual = stationarity_residual(victim, seed_tuple, cfg.fd_step)?;
    let bound = cfg.acceptance * seed_residual;
    if seed_residual == 0.0 {
        return Ok(StationaryPoint {
            tuple: seed_tuple.clone(),
            residual: 0.0,
            seed_residual,
            bound,
            evaluations: 1,
            success: true,
        });
    }

    let rows = match cfg.khop {
        Some(k) => g0.khop_nodes(seed_tuple.node, k)?,
        None => (0..g0.num_nodes()).collect(),
    };
    let dim = g0.feature_dim();
    let x0 = g0.features();
    let x0_norm = x0.norm();
    let x0_norm = if x0_norm > 0.0 { x0_norm } else { 1.0 };
    let start: Vec<f64> = rows.iter().flat_map(|&r| (0..dim).map(move |c| x0[(r, c)])).collect();

    let assemble = |v: &[f64]| -> DMatrix<f64> {
        let mut x = x0.clone();
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..dim {
                let value = v[k * dim + c];
                x[(r, c)] = if integer { value.round() } else { value };
            }
        }
        x
    };
    let objective = |v: &[f64]| -> f64 {
        let x = assemble(v);
        let shift = (&x - x0).norm() / x0_norm;
        let Ok(graph) = g0.with_features(x) else {
            return f64::INFINITY;
        };
        match stationarity_residual(victim, &seed_tuple.with_graph(graph), cfg.fd_step) {
            Ok(r) => r + cfg.lambda * shift,
            Err(_) => f64::INFINITY,
        }
    };

    let rms = (start.iter().map(|v| v * v).sum::<f64>() / start.len() as f64).sqrt();
    let budget = Budget {
        max_evaluations: cfg.budget,
        target: bound,
        initial_step: if integer { 1.0 } else { (0.1 * rms).max(1e-3) },
    };
    let found = match (cfg.solver, integer) {
        (Solver::NelderMead, false) => nelder_mead(objective, &start, budget),
        _ => one_plus_one_es(objective, &start, budget, integer, seed),
    };
    let tuple = seed_tuple.with_graph(g0.with_features(assemble(&found.x))?);
    let residual = stationarity_residual(victim, &tuple, cfg.fd_step)?;
    Ok(StationaryPoint {
        tuple,
        residual,
        seed_residual,
        bound,
        evaluations: found.evaluations + 1,
        success: residual < bound,
    })
}

/// Finite-difference Jacobian `∂h_i/∂x_i` (`d × D`) of a queryable model.
pub fn fd_node_jacobian(model: &dyn EmbeddingModel, t: &QueryTuple, fd_step: f64) -> Result<DMatrix<f64>> {
    let dim = t.graph.feature_dim();
    let mut cols = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let plus = model.embed_node(&t.graph.perturb_node(t.node, &e, fd_step)?, t.node)?;
        let minus = model.embed_node(&t.graph.perturb_node(t.node, &e, -fd_step)?, t.node)?;
        cols.push((plus - minus) / (2.0 * fd_step));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Replaces the seed direction by its normalized projection onto the
/// numerical null space of `∂h_i/∂x_i`. Returns `None` when that null space
/// is empty or the seed direction is (numerically) inside the row space.
pub fn find_stationary_direction(
    victim: &dyn EmbeddingModel,
    seed_tuple: &QueryTuple,
    cfg: &SamplerConfig,
) -> Result<Option<StationaryPoint>> {
    cfg.validate()?;
    seed_tuple.validate()?;
    if seed_tuple.graph.integer_features() {
        return Ok(None);
    }
    let seed_residual = stationarity_residual(victim, seed_tuple, cfg.fd_step)?;
    let bound = cfg.acceptance * seed_residual;
    let dim = seed_tuple.graph.feature_dim();
    if seed_residual == 0.0 {
        return Ok(Some(StationaryPoint {
            tuple: seed_tuple.clone(),
            residual: 0.0,
            seed_residual,
            bound,
            evaluations: 0,
            success: true,
        }));
    }
    let jac = fd_node_jacobian(victim, seed_tuple, cfg.fd_step)?;
    let svd = jac.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.max();
    let mut w = nalgebra::DVector::from_column_slice(&seed_tuple.direction);
    let mut rank = 0;
    for (k, sigma) in svd.singular_values.iter().enumerate() {
        if *sigma > NULL_SPACE_RTOL * top {
            let v = v_t.row(k).transpose();
            w -= &v * v.dot(&w);
            rank += 1;
        }
    }
    let norm = w.norm();
    if rank >= dim || norm < 1e-6 {
        return Ok(None);
    }
    let direction: Vec<f64> = w.iter().map(|v| v / norm).collect();
    let tuple = QueryTuple {
        direction,
        ..seed_tuple.clone()
    };
    let residual = stationarity_residual(victim, &tuple, cfg.fd_step)?;
    Ok(Some(StationaryPoint {
        tuple,
        residual,
        seed_residual,
        bound,
        evaluations: dim,
        success: residual < bound,
    }))
}

/// Runs the configured strategy, falling back to the feature search when
/// the null-space step does not apply.
pub fn find_stationary(
    victim: &dyn EmbeddingModel,
    seed_tuple: &QueryTuple,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<StationaryPoint> {
    if cfg.strategy == Strategy::NullSpace {
        if let Some(p) = find_stationary_direction(victim, seed_tuple, cfg)? {
            return Ok(p);
        }
    }
    find_stationary_point(victim, seed_tuple, cfg, seed)
}

/// Stationary tuples `T`, reference tuples `R`, and everything needed to
/// re-verify them later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub victim_id: String,
    pub stationary: Vec<QueryTuple>,
    pub reference: Vec<QueryTuple>,
    pub lambda: f64,
    pub seed: u64,
    pub residuals: Vec<f64>,
    /// Per-tuple acceptance bound on the residual.
    pub bounds: Vec<f64>,
    pub requested: usize,
    pub dropped: usize,
    pub config: SamplerConfig,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.stationary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stationary.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.stationary[0].graph.feature_dim()
    }

    pub fn integer_features(&self) -> bool {
        self.stationary[0].graph.integer_features()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.stationary.len();
        if l == 0 || self.reference.len() != l || self.residuals.len() != l || self.bounds.len() != l {
            return Err(Error::Format(format!(
                "fingerprint needs |T| = |R| = residuals = bounds >= 1, got {}/{}/{}/{}",
                l,
                self.reference.len(),
                self.residuals.len(),
                self.bounds.len()
            )));
        }
        let dim = self.feature_dim();
        for t in self.stationary.iter().chain(&self.reference) {
            t.validate()?;
            if t.graph.feature_dim() != dim {
                return Err(Error::Format("fingerprint tuples disagree on feature dimension".into()));
            }
        }
        Ok(())
    }

    /// Recomputes every stationary residual against `victim` and checks it
    /// against the recorded bound, with relative slack `rel_tol`.
    pub fn recheck(&self, victim: &dyn EmbeddingModel, rel_tol: f64) -> Result<bool> {
        for (t, bound) in self.stationary.iter().zip(&self.bounds) {
            let r = stationarity_residual(victim, t, self.config.fd_step)?;
            if r > bound * (1.0 + rel_tol) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fp: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        fp.validate()?;
        Ok(fp)
    }
}

/// Builds a fingerprint of `victim` with `count` stationary tuples. Failed
/// searches are retried from fresh seed tuples up to [`MAX_RESAMPLES`]
/// times, then dropped.
pub fn sample_fingerprint(
    victim: &dyn EmbeddingModel,
    victim_id: &str,
    dataset: &[Graph],
    count: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Fingerprint> {
    if count == 0 {
        return Err(Error::InvalidArgument("fingerprint size must be >= 1".into()));
    }
    cfg.validate()?;
    TupleSampler::new(dataset, 0, cfg.delta)?;
    let slots: Vec<Option<StationaryPoint>> = (0..count)
        .into_par_iter()
        .map(|slot| -> Result<Option<StationaryPoint>> {
            for attempt in 0..=MAX_RESAMPLES {
                let index = (slot * (MAX_RESAMPLES + 1) + attempt) as u64;
                let mut draw = TupleSampler::new(dataset, derive_seed(seed, "seed-tuple", index), cfg.delta)?;
                let t = draw.sample();
                let point = match find_stationary(victim, &t, cfg, derive_seed(seed, "search", index)) {
                    Ok(p) => p,
                    // A degenerate seed embedding is just a bad draw.
                    Err(Error::DegenerateEmbedding { .. }) => continue,
                    Err(e) => return Err(e),
                };
                if point.success {
                    return Ok(Some(point));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let dropped = slots.iter().filter(|s| s.is_none()).count();
    let accepted: Vec<StationaryPoint> = slots.into_iter().flatten().collect();
    if dropped > 0 {
        warn!("{victim_id}: dropped {dropped} of {count} stationary points after {MAX_RESAMPLES} resamples");
    }
    if 2 * accepted.len() < count {
        return Err(Error::FingerprintConstruction {
            accepted: accepted.len(),
            requested: count,
        });
    }
    let mut refs = TupleSampler::new(dataset, derive_seed(seed, "reference", 0), cfg.delta)?;
    let reference = (0..accepted.len()).map(|_| refs.sample()).collect();
    Ok(Fingerprint {
        victim_id: victim_id.to_string(),
        residuals: accepted.iter().map(|p| p.residual).collect(),
        bounds: accepted.iter().map(|p| p.bound).collect(),
        stationary: accepted.into_iter().map(|p| p.tuple).collect(),
        reference,
        lambda: cfg.lambda,
        seed,
        requested: count,
        dropped,
        config: *cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distinctness {
    pub mean: f64,
    pub pairs: usize,
    /// Counts over `bins` equal-width bins of `[-1, 1]`.
    pub histogram: Vec<usize>,
}

/// Pairwise cosine similarity of the flattened feature matrices of the
/// stationary tuples, over pairs with the same shape.
pub fn distinctness_stats(fp: &Fingerprint, bins: usize) -> Result<Distinctness> {
    cosine_stats(fp.stationary.iter().map(|t| t.graph.features()), bins)
}

pub fn cosine_stats<'a>(xs: impl Iterator<Item = &'a DMatrix<f64>>, bins: usize) -> Result<Distinctness> {
    let xs: Vec<&DMatrix<f64>> = xs.collect();
    let bins = bins.max(1);
    let mut histogram = vec![0; bins];
    let (mut sum, mut pairs) = (0.0, 0);
    for a in 0..xs.len() {
        for b in a + 1..xs.len() {
            if xs[a].shape() != xs[b].shape() {
                continue;
            }
            let denom = xs[a].norm() * xs[b].norm();
            let cos = if denom > 0.0 { xs[a].dot(xs[b]) / denom } else { 0.0 };
            let cos = cos.clamp(-1.0, 1.0);
            let bin = (((cos + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            histogram[bin] += 1;
            sum += cos;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("need at least two same-shape tuples".into()));
    }
    Ok(Distinctness {
        mean: sum / pairs as f64,
        pairs,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{Architecture, GnnModel, ModelSpec};
    use crate::graph::{generate_dataset, DatasetSpec, EdgeModel, FeatureModel};
    use crate::probe::{directional_derivative, DerivativeMode};
    use nalgebra::DVector;

    /// `h(x) = ‖x₀‖²` on node 0, ignoring structure.
    struct SquaredNorm(usize);

    impl EmbeddingModel for SquaredNorm {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn embedding_dim(&self) -> usize {
            1
        }
        fn embed(&self, g: &Graph) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_fn(1, g.num_nodes(), |_, c| {
                g.features().row(c).norm_squared()
            }))
        }
    }

    /// Output independent of features.
    struct Constant;

    impl EmbeddingModel for Constant {
        fn input_dim(&self) -> usize {
            3
        }
        fn embedding_dim(&self) -> usize {
            2
        }
        fn embed(&self, g: &Graph) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(2, g.num_nodes(), 1.5))
        }
        fn embed_node(&self, _: &Graph, _: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_element(2, 1.5))
        }
    }

    fn gaussian(num_graphs: usize, n: usize, dim: usize, seed: u64) -> Vec<Graph> {
        generate_dataset(&DatasetSpec {
            num_graphs,
            nodes_per_graph: (n, n),
            feature_dim: dim,
            edge_model: EdgeModel::ErdosRenyi { p: 0.4 },
            feature_model: FeatureModel::StandardNormal,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn constant_victim_is_already_stationary() {
        let g = gaussian(1, 4, 3, 1).remove(0);
        let t = QueryTuple::new(g, 2, vec![0.0, 0.0, 1.0], 0.01).unwrap();
        let p = find_stationary_point(&Constant, &t, &SamplerConfig::default(), 0).unwrap();
        assert_eq!(p.residual, 0.0);
        assert!(p.success);
        assert_eq!(p.evaluations, 1);
        assert_eq!(p.tuple, t);
    }

    #[test]
    fn quadratic_model_drives_probed_coordinate_to_zero() {
        for solver in [Solver::NelderMead, Solver::OnePlusOneEs] {
            let x = DMatrix::from_row_slice(1, 3, &[1.3, -0.7, 2.0]);
            let g = Graph::new(1, [], x, false).unwrap();
            let t = QueryTuple::new(g, 0, vec![1.0, 0.0, 0.0], 0.01).unwrap();
            let cfg = SamplerConfig {
                solver,
                ..SamplerConfig::default()
            };
            let p = find_stationary_point(&SquaredNorm(3), &t, &cfg, 5).unwrap();
            assert!(p.success, "{solver:?}: {p:?}");
            let x = p.tuple.graph.features();
            // Residual is 2|x₁|/‖x‖², so success pins x₁ near 0.
            assert!(x[(0, 0)].abs() < 0.02 * 1.3 * 1.01, "{solver:?}: {x}");
            assert_eq!((p.tuple.node, &p.tuple.direction), (t.node, &t.direction));
        }
    }

    #[test]
    fn only_khop_rows_move() {
        let path = Graph::new(
            5,
            [(0, 1), (1, 2), (2, 3), (3, 4)],
            DMatrix::from_fn(5, 2, |r, c| 0.3 + r as f64 * 0.5 - c as f64),
            false,
        )
        .unwrap();
        let victim = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 2, 3), 2).unwrap();
        let t = QueryTuple::new(path.clone(), 0, vec![0.6, 0.8], 0.01).unwrap();
        let cfg = SamplerConfig {
            khop: Some(1),
            budget: 200,
            ..SamplerConfig::default()
        };
        let p = find_stationary_point(&victim, &t, &cfg, 0).unwrap();
        let (before, after) = (path.features(), p.tuple.graph.features());
        for r in 2..5 {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_eq!(p.tuple.graph.edges(), path.edges());
        assert!(p.evaluations <= 201);
    }

    #[test]
    fn integer_search_stays_integer() {
        let gs = generate_dataset(&DatasetSpec {
            num_graphs: 3,
            nodes_per_graph: (4, 4),
            feature_dim: 3,
            edge_model: EdgeModel::Path,
            feature_model: FeatureModel::default_integer(),
            seed: 3,
        })
        .unwrap();
        let victim = GnnModel::init(&ModelSpec::new(Architecture::Gin, 3, 2), 1).unwrap();
        let t = QueryTuple::new(gs[0].clone(), 1, vec![0.0, 1.0, 0.0], 1.0).unwrap();
        let cfg = SamplerConfig {
            budget: 100,
            ..SamplerConfig::default()
        };
        let p = find_stationary_point(&victim, &t, &cfg, 4).unwrap();
        assert!(p.tuple.graph.features().iter().all(|v| v.fract() == 0.0));
        assert!(p.residual <= p.seed_residual);
    }

    #[test]
    fn fingerprint_of_one_and_json_round_trip() {
        let gs = gaussian(4, 1, 3, 9);
        let fp = sample_fingerprint(&SquaredNorm(3), "sq", &gs, 1, &SamplerConfig::default(), 1).unwrap();
        assert_eq!((fp.stationary.len(), fp.reference.len()), (1, 1));
        fp.validate().unwrap();
        assert!(fp.recheck(&SquaredNorm(3), 1e-9).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.json");
        fp.save(&path).unwrap();
        assert_eq!(Fingerprint::load(&path).unwrap(), fp);
    }

    #[test]
    fn unreachable_acceptance_is_a_construction_error() {
        let gs = gaussian(3, 4, 3, 2);
        let victim = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 3, 3), 2).unwrap();
        let cfg = SamplerConfig {
            budget: 1,
            ..SamplerConfig::default()
        };
        let err = sample_fingerprint(&victim, "v", &gs, 4, &cfg, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::FingerprintConstruction {
                accepted: 0,
                requested: 4
            }
        ));
        assert!(sample_fingerprint(&victim, "v", &gs, 0, &cfg, 0).is_err());
    }

    #[test]
    fn null_space_direction_is_stationary_for_the_victim() {
        let gs = gaussian(5, 6, 6, 4);
        let victim = GnnModel::init(&ModelSpec::new(Architecture::Sage, 6, 3), 8).unwrap();
        let mut draw = TupleSampler::new(&gs, 2, 0.01).unwrap();
        for _ in 0..10 {
            let t = draw.sample();
            let p = find_stationary_direction(&victim, &t, &SamplerConfig::default())
                .unwrap()
                .unwrap();
            assert!(p.success);
            assert_eq!(p.tuple.graph, t.graph);
            let norm: f64 = p.tuple.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            // Independent check with the analytic tangent.
            let exact = directional_derivative(&victim, &p.tuple, DerivativeMode::Analytic).unwrap();
            let h = victim.embed_node(&t.graph, t.node).unwrap();
            assert!(exact.norm() / h.norm() < 1e-6, "{}", exact.norm());
        }
    }

    #[test]
    fn full_rank_jacobian_falls_back_to_feature_search() {
        // D = 1 < d = 2: no null space.
        let x = DMatrix::from_row_slice(1, 1, &[0.7]);
        let g = Graph::new(1, [], x, false).unwrap();
        let t = QueryTuple::new(g, 0, vec![1.0], 0.01).unwrap();
        let victim = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 1, 2), 3).unwrap();
        let cfg = SamplerConfig::default();
        assert!(find_stationary_direction(&victim, &t, &cfg).unwrap().is_none());
        let p = find_stationary(&victim, &t, &cfg, 1).unwrap();
        assert_eq!(p.tuple.direction, vec![1.0]);
        let sq = find_stationary(
            &SquaredNorm(3),
            &QueryTuple::new(
                Graph::new(1, [], DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.5]), false).unwrap(),
                0,
                vec![1.0, 0.0, 0.0],
                0.01,
            )
            .unwrap(),
            &cfg,
            1,
        )
        .unwrap();
        // h = ‖x‖² has D−1 null directions: the step rotates w instead of moving x.
        assert!(sq.success);
    }

    #[test]
    fn cosine_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let same = cosine_stats([&a, &a].into_iter(), 4).unwrap();
        assert!((same.mean - 1.0).abs() < 1e-15);
        assert_eq!(same.histogram, vec![0, 0, 0, 1]);
        let orth = cosine_stats([&a, &b].into_iter(), 4).unwrap();
        assert_eq!(orth.mean, 0.0);
        let c = DMatrix::zeros(3, 2);
        assert!(cosine_stats([&a, &c].into_iter(), 4).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SamplerConfig {
            budget: 0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            lambda: -1.0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
