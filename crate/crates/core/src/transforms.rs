//! Embedding transformations `φ` an adversary may apply on top of a
//! surrogate, as a wrapper over any [`EmbeddingModel`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::EmbeddingModel;
use crate::graph::Graph;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

/// One step of a transform. Random steps draw their matrices or offsets
/// from the transform seed at wrap time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Permute,
    /// Random orthogonal matrix.
    Rotate,
    Scale {
        c: f64,
    },
    /// Zero-padding to `factor · d` coordinates.
    ProjectUp {
        factor: usize,
    },
    /// `h ↦ G h` with `G` of shape `rows × d`, entries `N(0, 1/d)`.
    GaussianMatrix {
        rows: usize,
    },
    /// Diagonal scaling with entries uniform in `[lo, hi]`.
    PerEntryScale {
        lo: f64,
        hi: f64,
    },
    /// Offset with entries uniform in `[lo, hi]`.
    Translate {
        lo: f64,
        hi: f64,
    },
    Atan,
    Exp,
    /// Natural log; the inverse of `exp`, defined on positive embeddings.
    Log,
    Sigmoid,
    Sinh,
    Tanh,
    Pow {
        k: u32,
    },
    Normalize {
        norm: Norm,
    },
}

impl TransformKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTransform(msg));
        match *self {
            TransformKind::Scale { c } if c == 0.0 || !c.is_finite() => bad(format!("scale {c}")),
            TransformKind::ProjectUp { factor } if factor < 1 => bad("project_up factor must be >= 1".into()),
            TransformKind::GaussianMatrix { rows: 0 } => bad("gaussian_matrix rows must be >= 1".into()),
            TransformKind::PerEntryScale { lo, hi } if !(lo <= hi) || (lo <= 0.0 && hi >= 0.0) => {
                bad(format!("per_entry_scale range [{lo}, {hi}] must exclude 0"))
            }
            TransformKind::Translate { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                bad(format!("translate range [{lo}, {hi}]"))
            }
            TransformKind::Pow { k } if k % 2 == 0 => bad(format!("pow exponent {k} must be odd and positive")),
            _ => Ok(()),
        }
    }

    /// Whether every `q` value is provably unchanged by this step.
    pub fn is_exact(&self) -> bool {
        matches!(
            self,
            TransformKind::Permute
                | TransformKind::Rotate
                | TransformKind::Scale { .. }
                | TransformKind::ProjectUp { .. }
        )
    }

    /// Whether `φ(0) = 0`; translations break it.
    pub fn fixes_origin(&self) -> bool {
        !matches!(
            self,
            TransformKind::Translate { .. } | TransformKind::Exp | TransformKind::Sigmoid | TransformKind::Log
        )
    }
}

/// An ordered composition; the first step is applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<TransformKind>,
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(steps: Vec<TransformKind>, seed: u64) -> Self {
        Self { steps, seed }
    }

    pub fn identity() -> Self {
        Self::new(Vec::new(), 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.iter().try_for_each(TransformKind::validate)
    }

    pub fn is_exact(&self) -> bool {
        self.steps.iter().all(TransformKind::is_exact)
    }

    /// Short label such as `rotate+scale5`.
    pub fn label(&self) -> String {
        if self.steps.is_empty() {
            return "identity".into();
        }
        let names: Vec<String> = self
            .steps
            .iter()
            .map(|k| match *k {
                TransformKind::Permute => "permute".into(),
                TransformKind::Rotate => "rotate".into(),
                TransformKind::Scale { c } => format!("scale{c}"),
                TransformKind::ProjectUp { factor } => format!("proj{factor}d"),
                TransformKind::GaussianMatrix { rows } => format!("gauss{rows}"),
                TransformKind::PerEntryScale { lo, hi } => format!("entryscale{lo}-{hi}"),
                TransformKind::Translate { lo, hi } => format!("translate{lo}-{hi}"),
                TransformKind::Atan => "atan".into(),
                TransformKind::Exp => "exp".into(),
                TransformKind::Log => "log".into(),
                TransformKind::Sigmoid => "sigmoid".into(),
                TransformKind::Sinh => "sinh".into(),
                TransformKind::Tanh => "tanh".into(),
                TransformKind::Pow { k } => format!("pow{k}"),
                TransformKind::Normalize { norm: Norm::L1 } => "l1norm".into(),
                TransformKind::Normalize { norm: Norm::L2 } => "l2norm".into(),
            })
            .collect();
        names.join("+")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Linear(DMatrix<f64>),
    Permute(Vec<usize>),
    Scale(f64),
    Pad(usize),
    Diagonal(DVector<f64>),
    Offset(DVector<f64>),
    Elementwise(fn(f64) -> f64),
    Pow(i32),
    Normalize(Norm),
}

/// A transform with its random elements drawn, ready to apply to vectors
/// of a fixed input dimension.
#[derive(Debug, Clone)]
pub struct Transform {
    input_dim: usize,
    output_dim: usize,
    ops: Vec<Op>,
}

/// Haar-random orthogonal matrix: QR of a Gaussian matrix with the signs of
/// `R`'s diagonal folded into `Q`.
pub fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Transform {
    pub fn new(spec: &TransformSpec, input_dim: usize) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidTransform("input dim must be >= 1".into()));
        }
        let mut dim = input_dim;
        let mut ops = Vec::with_capacity(spec.steps.len());
        for (k, step) in spec.steps.iter().enumerate() {
            let seed = derive_seed(spec.seed, "transform", k as u64);
            let mut rng = rng_from_seed(seed);
            let op = match *step {
                TransformKind::Permute => {
                    let mut perm: Vec<usize> = (0..dim).collect();
                    perm.shuffle(&mut rng);
                    Op::Permute(perm)
                }
                TransformKind::Rotate => Op::Linear(random_rotation(dim, seed)),
                TransformKind::Scale { c } => Op::Scale(c),
                TransformKind::ProjectUp { factor } => Op::Pad(factor * dim),
                TransformKind::GaussianMatrix { rows } => {
                    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive sd");
                    Op::Linear(DMatrix::from_fn(rows, dim, |_, _| normal.sample(&mut rng)))
                }
                TransformKind::PerEntryScale { lo, hi } => {
                    let u = Uniform::new_inclusive(lo, hi).expect("validated range");
                    Op::Diagonal(DVector::from_fn(dim, |_, _| u.sample(&mut rng)))
                }
                TransformKind::Translate { lo, hi } => {
                    let u = Uniform::new_inclusive(lo, hi).expect("validated range");
                    Op::Offset(DVector::from_fn(dim, |_, _| u.sample(&mut rng)))
                }
                TransformKind::Atan => Op::Elementwise(f64::atan),
                TransformKind::Exp => Op::Elementwise(f64::exp),
                TransformKind::Log => Op::Elementwise(f64::ln),
                TransformKind::Sigmoid => Op::Elementwise(sigmoid),
                TransformKind::Sinh => Op::Elementwise(f64::sinh),
                TransformKind::Tanh => Op::Elementwise(f64::tanh),
                TransformKind::Pow { k } => Op::Pow(k as i32),
                TransformKind::Normalize { norm } => Op::Normalize(norm),
            };
            dim = match &op {
                Op::Linear(m) => m.nrows(),
                Op::Pad(n) => *n,
                _ => dim,
            };
            ops.push(op);
        }
        Ok(Self {
            input_dim,
            output_dim: dim,
            ops,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Applies `φ` to every column of `h` (`d × n`).
    pub fn apply(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: h.nrows(),
                context: "transform input dim",
            });
        }
        let mut h = h.clone();
        for op in &self.ops {
            h = match op {
                Op::Linear(m) => m * &h,
                Op::Permute(p) => DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(p[r], c)]),
                Op::Scale(c) => h * *c,
                Op::Pad(n) => h.resize_vertically(*n, 0.0),
                Op::Diagonal(s) => {
                    let mut h = h;
                    for (mut row, v) in h.row_iter_mut().zip(s.iter()) {
                        row *= *v;
                    }
                    h
                }
                Op::Offset(b) => {
                    let mut h = h;
                    for mut col in h.column_iter_mut() {
                        col += b;
                    }
                    h
                }
                Op::Elementwise(f) => h.map(*f),
                Op::Pow(k) => h.map(|v| v.powi(*k)),
                Op::Normalize(norm) => {
                    let mut h = h;
                    for mut col in h.column_iter_mut() {
                        let n = match norm {
                            Norm::L1 => col.iter().map(|v| v.abs()).sum::<f64>(),
                            Norm::L2 => col.norm(),
                        };
                        if n > 0.0 {
                            col /= n;
                        }
                    }
                    h
                }
            };
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform(
                "transform produced a non-finite embedding".into(),
            ));
        }
        Ok(h)
    }

    pub fn apply_vector(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.apply(&m)?.column(0).into_owned())
    }
}

/// `φ ∘ base`.
#[derive(Clone)]
pub struct TransformedModel {
    base: Arc<dyn EmbeddingModel>,
    transform: Transform,
    spec: TransformSpec,
}

impl TransformedModel {
    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }
}

impl std::fmt::Debug for TransformedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformedModel").field("spec", &self.spec).finish()
    }
}

pub fn wrap(model: Arc<dyn EmbeddingModel>, spec: &TransformSpec) -> Result<TransformedModel> {
    let transform = Transform::new(spec, model.embedding_dim())?;
    Ok(TransformedModel {
        base: model,
        transform,
        spec: spec.clone(),
    })
}

impl EmbeddingModel for TransformedModel {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn embedding_dim(&self) -> usize {
        self.transform.output_dim()
    }

    fn embed(&self, graph: &Graph) -> Result<DMatrix<f64>> {
        if self.spec.steps.is_empty() {
            return self.base.embed(graph);
        }
        self.transform.apply(&self.base.embed(graph)?)
    }
}

/// Empirical bi-Lipschitz constants `(ĉ, Ĉ)`: min and max of
/// `‖φ(a) − φ(b)‖/‖a − b‖` over all sample pairs. Coincident pairs are
/// skipped.
pub fn check_bilipschitz(spec: &TransformSpec, samples: &[DVector<f64>]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two sample embeddings".into()));
    }
    let t = Transform::new(spec, samples[0].len())?;
    let images: Vec<DVector<f64>> = samples.iter().map(|v| t.apply_vector(v)).collect::<Result<_>>()?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            let den = (&samples[a] - &samples[b]).norm();
            if den == 0.0 {
                continue;
            }
            let ratio = (&images[a] - &images[b]).norm() / den;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    if lo.is_infinite() {
        return Err(Error::InvalidArgument("all sample pairs coincide".into()));
    }
    Ok((lo, hi))
}

/// The Table-style suite: four exact transforms and the nonlinear ones.
pub fn standard_suite(seed: u64) -> Vec<TransformSpec> {
    use TransformKind::*;
    let s = |steps: Vec<TransformKind>, k: u64| TransformSpec::new(steps, derive_seed(seed, "suite", k));
    vec![
        s(vec![Permute], 0),
        s(vec![Rotate], 1),
        s(vec![Rotate, Scale { c: 5.0 }], 2),
        s(vec![ProjectUp { factor: 5 }, Rotate, Scale { c: 5.0 }], 3),
        s(vec![GaussianMatrix { rows: 16 }], 4),
        s(vec![PerEntryScale { lo: 0.5, hi: 2.0 }], 5),
        s(vec![Translate { lo: -1.0, hi: 1.0 }], 6),
        s(vec![Atan], 7),
        s(vec![Exp], 8),
        s(vec![Sigmoid], 9),
        s(vec![Sinh], 10),
        s(vec![Tanh], 11),
        s(vec![Pow { k: 3 }], 12),
        s(vec![Normalize { norm: Norm::L2 }], 13),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{Architecture, GnnModel, ModelSpec};
    use crate::graph::{generate_dataset, DatasetSpec, EdgeModel, FeatureModel};
    use crate::probe::{q_value, TupleSampler};
    use proptest::prelude::*;
    use TransformKind::*;

    fn base() -> (Arc<dyn EmbeddingModel>, Vec<Graph>) {
        let gs = generate_dataset(&DatasetSpec {
            num_graphs: 4,
            nodes_per_graph: (5, 7),
            feature_dim: 4,
            edge_model: EdgeModel::ErdosRenyi { p: 0.4 },
            feature_model: FeatureModel::StandardNormal,
            seed: 2,
        })
        .unwrap();
        let m = GnnModel::init(&ModelSpec::new(Architecture::Sage, 4, 3), 1).unwrap();
        (Arc::new(m), gs)
    }

    #[test]
    fn identity_is_bitwise_equal() {
        let (m, gs) = base();
        let w = wrap(m.clone(), &TransformSpec::identity()).unwrap();
        for g in &gs {
            assert_eq!(w.embed(g).unwrap(), m.embed(g).unwrap());
        }
    }

    #[test]
    fn rotation_preserves_norms_and_is_orthogonal() {
        let (m, gs) = base();
        let w = wrap(m.clone(), &TransformSpec::new(vec![Rotate], 9)).unwrap();
        for g in &gs {
            let (a, b) = (m.embed(g).unwrap(), w.embed(g).unwrap());
            for (ca, cb) in a.column_iter().zip(b.column_iter()) {
                assert!((ca.norm() - cb.norm()).abs() < 1e-10);
            }
        }
        for dim in [1, 3, 8, 40] {
            let q = random_rotation(dim, dim as u64);
            let err = (q.transpose() * &q - DMatrix::identity(dim, dim)).abs().max();
            assert!(err < 1e-10, "{dim}: {err}");
        }
    }

    #[test]
    fn exp_then_log_recovers_embeddings() {
        let (m, gs) = base();
        let w = wrap(m.clone(), &TransformSpec::new(vec![Exp, Log], 0)).unwrap();
        for g in &gs {
            let diff = (w.embed(g).unwrap() - m.embed(g).unwrap()).abs().max();
            assert!(diff < 1e-9);
        }
    }

    #[test]
    fn output_dims_follow_steps() {
        let (m, _) = base();
        let spec = TransformSpec::new(vec![ProjectUp { factor: 5 }, Rotate, GaussianMatrix { rows: 7 }], 1);
        assert_eq!(wrap(m, &spec).unwrap().embedding_dim(), 7);
    }

    #[test]
    fn invalid_specs_rejected() {
        for k in [
            Scale { c: 0.0 },
            Pow { k: 2 },
            ProjectUp { factor: 0 },
            GaussianMatrix { rows: 0 },
            PerEntryScale { lo: -1.0, hi: 1.0 },
        ] {
            assert!(k.validate().is_err(), "{k:?}");
        }
        let json = r#"{"steps":[{"kind":"scale","c":5.0},{"kind":"project_up","factor":2}],"seed":3}"#;
        let spec: TransformSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.steps, vec![Scale { c: 5.0 }, ProjectUp { factor: 2 }]);
        assert_eq!(spec.label(), "scale5+proj2d");
    }

    #[test]
    fn bilipschitz_examples() {
        let samples: Vec<DVector<f64>> = (0..6)
            .map(|k| DVector::from_vec(vec![k as f64 * 0.3 - 1.0, (k * k) as f64 * 0.1]))
            .collect();
        let (c, big_c) = check_bilipschitz(&TransformSpec::new(vec![Scale { c: 5.0 }], 0), &samples).unwrap();
        assert!((c - 5.0).abs() < 1e-12 && (big_c - 5.0).abs() < 1e-12);
        let (c, big_c) = check_bilipschitz(&TransformSpec::new(vec![Rotate], 4), &samples).unwrap();
        assert!((c - 1.0).abs() < 1e-10 && (big_c - 1.0).abs() < 1e-10);
        // Scalars spanning [-2, 2]: secant slopes range over at least a factor e².
        let line: Vec<DVector<f64>> = (0..=40)
            .map(|k| DVector::from_vec(vec![-2.0 + 0.1 * k as f64]))
            .collect();
        let (c, big_c) = check_bilipschitz(&TransformSpec::new(vec![Exp], 0), &line).unwrap();
        assert!(big_c / c >= 2f64.exp(), "{}", big_c / c);
        let same = vec![DVector::from_vec(vec![1.0]); 3];
        assert!(check_bilipschitz(&TransformSpec::identity(), &same).is_err());
    }

    #[test]
    fn translate_does_not_fix_origin() {
        assert!(!Translate { lo: 0.0, hi: 1.0 }.fixes_origin());
        assert!(Rotate.fixes_origin());
    }

    proptest! {
        #[test]
        fn exact_transforms_preserve_q(seed in any::<u64>(), c in 0.1f64..10.0, which in 0usize..4, factor in 1usize..6) {
            let (m, gs) = base();
            let steps = match which {
                0 => vec![Permute],
                1 => vec![Rotate],
                2 => vec![Rotate, Scale { c: -c }],
                _ => vec![ProjectUp { factor }, Rotate, Scale { c }],
            };
            let w = wrap(m.clone(), &TransformSpec::new(steps, seed)).unwrap();
            let mut draw = TupleSampler::new(&gs, seed, 0.01).unwrap();
            for _ in 0..5 {
                let t = draw.sample();
                let (a, b) = (q_value(&*m, &t).unwrap(), q_value(&w, &t).unwrap());
                prop_assert!((a - b).abs() < 1e-10, "{} {}", a, b);
            }
        }
    }
}
