//! The adversarial model zoo: extraction surrogates and their transformed,
//! pruned and fine-tuned variants, plus independently trained models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    finetune, load_model, prune, save_model, train, Activation, Architecture, EmbeddingModel, GnnModel, ModelSpec,
    Supervision, TrainConfig,
};
use crate::graph::{generate_dataset, DatasetSpec, Graph};
use crate::seed::derive_seed;
use crate::task::{hyperplane_labels, NodeTask};
use crate::transforms::{random_rotation, wrap, TransformSpec};

#[derive(Debug, Clone)]
pub struct Extraction {
    pub model: GnnModel,
    /// Mean held-out relative error to the (aligned) victim embeddings.
    pub epsilon: f64,
    pub losses: Vec<f64>,
}

/// Held-out ε below which an extraction counts as successful.
pub const SUCCESSFUL_EPSILON: f64 = 0.15;

/// `d' × d` map with orthonormal columns (`d' ≥ d`) or rows (`d' < d`),
/// used as the fixed `φ` an extraction with a different dimension regresses
/// onto.
pub fn alignment(victim_dim: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    let n = victim_dim.max(dim);
    random_rotation(n, seed).view((0, 0), (dim, victim_dim)).into_owned()
}

/// Trains `spec` to regress the victim's embeddings on `query_graphs`
/// (MSE). When `spec.embedding_dim ≠ d` the targets are the victim
/// embeddings mapped through [`alignment`]. `epsilon` is measured on
/// `holdout`.
pub fn extract(
    victim: &dyn EmbeddingModel,
    query_graphs: &[Graph],
    holdout: &[Graph],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<Extraction> {
    if holdout.is_empty() {
        return Err(Error::InvalidArgument("extraction needs held-out graphs".into()));
    }
    let d = victim.embedding_dim();
    let map = (spec.embedding_dim != d).then(|| alignment(d, spec.embedding_dim, derive_seed(cfg.seed, "align", 0)));
    let target = |g: &Graph| -> Result<DMatrix<f64>> {
        let h = victim.embed(g)?;
        Ok(match &map {
            Some(p) => p * h,
            None => h,
        })
    };
    let targets: Vec<DMatrix<f64>> = query_graphs.iter().map(target).collect::<Result<_>>()?;
    let outcome = train(spec, query_graphs, Supervision::Embeddings(&targets), cfg)?;
    let mut total = 0.0;
    for g in holdout {
        let t = target(g)?;
        total += (outcome.model.embed(g)? - &t).norm() / t.norm().max(f64::MIN_POSITIVE);
    }
    Ok(Extraction {
        model: outcome.model,
        epsilon: total / holdout.len() as f64,
        losses: outcome.losses,
    })
}

/// Trains a model on the node-regression task through a discarded head.
pub fn train_on_task(spec: &ModelSpec, graphs: &[Graph], task: &NodeTask, cfg: &TrainConfig) -> Result<GnnModel> {
    let targets: Vec<DMatrix<f64>> = graphs.iter().map(|g| task.targets(g)).collect::<Result<_>>()?;
    Ok(train(spec, graphs, Supervision::NodeRegression(&targets), cfg)?.model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Surrogate,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Extraction {
        arch: Architecture,
        dim: usize,
        seed: u64,
        epsilon: f64,
    },
    Transform {
        base: String,
        spec: TransformSpec,
    },
    Pruned {
        base: String,
        fraction: f64,
    },
    Finetuned {
        base: String,
        epochs: usize,
        /// Downstream accuracy of the temporary head before and after.
        accuracy_before: f64,
        accuracy_after: f64,
    },
    Independent {
        arch: Architecture,
        dim: usize,
        seed: u64,
        split: usize,
    },
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Extraction { .. } => "extraction",
            Provenance::Transform { .. } => "transform",
            Provenance::Pruned { .. } => "pruned",
            Provenance::Finetuned { .. } => "finetuned",
            Provenance::Independent { .. } => "independent",
        }
    }

    /// Experimental condition this entry belongs to, e.g. `pruned-0.3`.
    pub fn condition(&self) -> String {
        match self {
            Provenance::Extraction { .. } => "extraction".into(),
            Provenance::Independent { .. } => "independent".into(),
            Provenance::Transform { spec, .. } => format!("transform-{}", spec.label()),
            Provenance::Pruned { fraction, .. } => format!("pruned-{fraction}"),
            Provenance::Finetuned { epochs, .. } => format!("finetuned-{epochs}"),
        }
    }
}

#[derive(Clone)]
pub struct ZooEntry {
    pub id: String,
    pub role: Role,
    pub provenance: Provenance,
    pub model: Arc<dyn EmbeddingModel>,
    /// Architecture of the underlying GNN.
    pub arch: Architecture,
    /// Present for native models; transformed entries are rebuilt from
    /// their base and spec.
    pub native: Option<GnnModel>,
}

impl std::fmt::Debug for ZooEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ZooEntry")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl ZooEntry {
    fn native(id: String, role: Role, provenance: Provenance, model: GnnModel) -> Self {
        Self {
            id,
            role,
            provenance,
            arch: model.architecture(),
            model: Arc::new(model.clone()),
            native: Some(model),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.model.embedding_dim()
    }
}

#[derive(Debug, Clone)]
pub struct ModelZoo {
    pub victim: GnnModel,
    pub surrogates: Vec<ZooEntry>,
    pub independents: Vec<ZooEntry>,
}

impl ModelZoo {
    pub fn entries(&self) -> impl Iterator<Item = &ZooEntry> {
        self.surrogates.iter().chain(&self.independents)
    }

    pub fn get(&self, id: &str) -> Option<&ZooEntry> {
        self.entries().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub arch: Architecture,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndependentPlan {
    pub arch: Architecture,
    pub dim: usize,
    pub split: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Schedule {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig::new(self.epochs, self.learning_rate, seed)
    }
}

/// What to build. Every seed is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooPlan {
    pub seed: u64,
    pub victim: ModelPlan,
    pub surrogates: Vec<ModelPlan>,
    pub independents: Vec<IndependentPlan>,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Outputs of the node-regression task victims and independents learn.
    pub task_outputs: usize,
    pub training: Schedule,
    pub extraction: Schedule,
    /// Extraction queries and held-out graphs, drawn fresh from the
    /// dataset recipe.
    pub query_graphs: usize,
    pub holdout_graphs: usize,
    /// Split `s` trains on every graph except those with index `≡ s`
    /// modulo `folds`.
    pub folds: usize,
    pub transforms: Vec<TransformSpec>,
    pub prune_fractions: Vec<f64>,
    pub finetune_epochs: Vec<usize>,
    pub finetune_graphs: usize,
    pub finetune_learning_rate: f64,
}

impl Default for ZooPlan {
    fn default() -> Self {
        use Architecture::*;
        Self {
            seed: 0,
            victim: ModelPlan { arch: Gcn, dim: 8 },
            surrogates: [Gcn, Gin, Sage, Gcn, Sage]
                .into_iter()
                .map(|arch| ModelPlan { arch, dim: 8 })
                .collect(),
            independents: (0..10)
                .map(|k| IndependentPlan {
                    arch: Architecture::ALL[k % 3],
                    dim: 8,
                    split: k % 2,
                })
                .collect(),
            hidden_dim: 16,
            activation: Activation::Tanh,
            task_outputs: 1,
            training: Schedule {
                epochs: 400,
                learning_rate: 0.01,
            },
            extraction: Schedule {
                epochs: 3000,
                learning_rate: 0.01,
            },
            query_graphs: 200,
            holdout_graphs: 50,
            folds: 5,
            transforms: Vec::new(),
            prune_fractions: Vec::new(),
            finetune_epochs: Vec::new(),
            finetune_graphs: 20,
            finetune_learning_rate: 0.001,
        }
    }
}

impl ZooPlan {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.task_outputs == 0 || self.folds < 2 {
            return Err(Error::InvalidArgument(
                "hidden_dim, task_outputs >= 1 and folds >= 2 required".into(),
            ));
        }
        if self.query_graphs == 0 || self.holdout_graphs == 0 {
            return Err(Error::InvalidArgument(
                "query_graphs and holdout_graphs must be >= 1".into(),
            ));
        }
        if let Some(f) = self.prune_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidArgument(format!("prune fraction {f} outside [0,1]")));
        }
        if let Some(p) = self.independents.iter().find(|p| p.split >= self.folds) {
            return Err(Error::InvalidArgument(format!(
                "split {} >= folds {}",
                p.split, self.folds
            )));
        }
        for s in &self.transforms {
            s.validate()?;
        }
        Ok(())
    }

    pub fn spec(&self, arch: Architecture, input_dim: usize, dim: usize) -> ModelSpec {
        ModelSpec {
            hidden_dim: self.hidden_dim,
            activation: self.activation,
            ..ModelSpec::new(arch, input_dim, dim)
        }
    }

    pub fn task(&self, feature_dim: usize) -> Result<NodeTask> {
        NodeTask::random(feature_dim, self.task_outputs, derive_seed(self.seed, "task", 0))
    }

    pub fn victim_seed(&self) -> u64 {
        derive_seed(self.seed, "victim", 0)
    }

    pub fn independent_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, "independent", k as u64)
    }

    pub fn surrogate_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, "surrogate", k as u64)
    }

    pub fn split(&self, dataset: &[Graph], split: usize) -> Vec<Graph> {
        dataset
            .iter()
            .enumerate()
            .filter(|(k, _)| k % self.folds != split)
            .map(|(_, g)| g.clone())
            .collect()
    }
}

/// Trains the victim on the full dataset.
pub fn train_victim(dataset: &[Graph], plan: &ZooPlan) -> Result<GnnModel> {
    plan.validate()?;
    let dim = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?
        .feature_dim();
    let spec = plan.spec(plan.victim.arch, dim, plan.victim.dim);
    train_on_task(
        &spec,
        dataset,
        &plan.task(dim)?,
        &plan.training.config(plan.victim_seed()),
    )
}

/// Builds surrogates by extraction from `victim` plus their variants, and
/// independents trained on splits of `dataset`. Models train in parallel.
pub fn build_zoo(victim: &GnnModel, dataset: &[Graph], recipe: &DatasetSpec, plan: &ZooPlan) -> Result<ModelZoo> {
    plan.validate()?;
    let dim = recipe.feature_dim;
    let queries = generate_dataset(&DatasetSpec {
        num_graphs: plan.query_graphs,
        ..recipe.reseeded(derive_seed(plan.seed, "queries", 0))
    })?;
    let holdout = generate_dataset(&DatasetSpec {
        num_graphs: plan.holdout_graphs,
        ..recipe.reseeded(derive_seed(plan.seed, "holdout", 0))
    })?;
    let task = plan.task(dim)?;

    let extracted: Vec<ZooEntry> = plan
        .surrogates
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let seed = plan.surrogate_seed(k);
            let e = extract(
                victim,
                &queries,
                &holdout,
                &plan.spec(p.arch, dim, p.dim),
                &plan.extraction.config(seed),
            )?;
            let provenance = Provenance::Extraction {
                arch: p.arch,
                dim: p.dim,
                seed,
                epsilon: e.epsilon,
            };
            Ok(ZooEntry::native(
                format!("surrogate-{k}-{}", p.arch),
                Role::Surrogate,
                provenance,
                e.model,
            ))
        })
        .collect::<Result<_>>()?;

    let independents: Vec<ZooEntry> = plan
        .independents
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let seed = plan.independent_seed(k);
            if p.arch == plan.victim.arch && p.dim == plan.victim.dim && seed == plan.victim_seed() {
                return Err(Error::InvalidArgument(format!(
                    "independent {k} would be the victim itself"
                )));
            }
            let graphs = plan.split(dataset, p.split);
            let model = train_on_task(
                &plan.spec(p.arch, dim, p.dim),
                &graphs,
                &task,
                &plan.training.config(seed),
            )?;
            let provenance = Provenance::Independent {
                arch: p.arch,
                dim: p.dim,
                seed,
                split: p.split,
            };
            Ok(ZooEntry::native(
                format!("independent-{k}-{}", p.arch),
                Role::Independent,
                provenance,
                model,
            ))
        })
        .collect::<Result<_>>()?;

    let labeled = generate_dataset(&DatasetSpec {
        num_graphs: plan.finetune_graphs.max(1),
        ..recipe.reseeded(derive_seed(plan.seed, "finetune-data", 0))
    })?;
    let labels = hyperplane_labels(&labeled, derive_seed(plan.seed, "finetune-labels", 0))?;

    let mut surrogates = extracted.clone();
    for base in &extracted {
        let native = base.native.as_ref().expect("extractions are native");
        for spec in &plan.transforms {
            surrogates.push(ZooEntry {
                id: format!("{}~{}", base.id, spec.label()),
                role: Role::Surrogate,
                provenance: Provenance::Transform {
                    base: base.id.clone(),
                    spec: spec.clone(),
                },
                model: Arc::new(wrap(base.model.clone(), spec)?),
                arch: base.arch,
                native: None,
            });
        }
        for &fraction in &plan.prune_fractions {
            let provenance = Provenance::Pruned {
                base: base.id.clone(),
                fraction,
            };
            let id = format!("{}~pruned{fraction}", base.id);
            surrogates.push(ZooEntry::native(
                id,
                Role::Surrogate,
                provenance,
                prune(native, fraction)?,
            ));
        }
    }
    let tuned: Vec<ZooEntry> = extracted
        .par_iter()
        .flat_map_iter(|base| plan.finetune_epochs.iter().map(move |&epochs| (base, epochs)))
        .map(|(base, epochs)| {
            let native = base.native.as_ref().expect("extractions are native");
            let seed = derive_seed(plan.seed, &format!("finetune-{}", base.id), epochs as u64);
            let cfg = TrainConfig::new(epochs, plan.finetune_learning_rate, seed);
            let tuned = finetune(native, &labeled, &labels, &cfg)?;
            let provenance = Provenance::Finetuned {
                base: base.id.clone(),
                epochs,
                accuracy_before: tuned.accuracy[0],
                accuracy_after: *tuned.accuracy.last().expect("initial accuracy is recorded"),
            };
            Ok(ZooEntry::native(
                format!("{}~finetuned{epochs}", base.id),
                Role::Surrogate,
                provenance,
                tuned.model,
            ))
        })
        .collect::<Result<_>>()?;
    surrogates.extend(tuned);

    Ok(ModelZoo {
        victim: victim.clone(),
        surrogates,
        independents,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub provenance: Provenance,
    /// Relative to the manifest's directory; absent for transformed entries.
    pub model_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub victim_file: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Writes every native model to `dir/models/` and the manifest to
/// `dir/zoo.json`.
pub fn save_zoo(dir: &Path, zoo: &ModelZoo) -> Result<ZooManifest> {
    std::fs::create_dir_all(dir.join("models"))?;
    let victim_file = PathBuf::from("models/victim.json");
    save_model(&dir.join(&victim_file), &zoo.victim)?;
    let mut entries = Vec::new();
    for e in zoo.entries() {
        let model_file = match &e.native {
            Some(m) => {
                let file = PathBuf::from(format!("models/{}.json", e.id.replace('~', "_")));
                save_model(&dir.join(&file), m)?;
                Some(file)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: e.id.clone(),
            role: e.role,
            provenance: e.provenance.clone(),
            model_file,
        });
    }
    let manifest = ZooManifest { victim_file, entries };
    std::fs::write(dir.join("zoo.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_zoo(dir: &Path) -> Result<ModelZoo> {
    let manifest: ZooManifest = serde_json::from_slice(&std::fs::read(dir.join("zoo.json"))?)?;
    let victim = load_model(&dir.join(&manifest.victim_file))?;
    let mut loaded: Vec<ZooEntry> = Vec::with_capacity(manifest.entries.len());
    for m in &manifest.entries {
        let entry = match (&m.model_file, &m.provenance) {
            (Some(file), _) => {
                ZooEntry::native(m.id.clone(), m.role, m.provenance.clone(), load_model(&dir.join(file))?)
            }
            (None, Provenance::Transform { base, spec }) => {
                let b = loaded
                    .iter()
                    .find(|e| &e.id == base)
                    .ok_or_else(|| Error::Format(format!("transform base {base} missing from manifest")))?;
                ZooEntry {
                    id: m.id.clone(),
                    role: m.role,
                    provenance: m.provenance.clone(),
                    model: Arc::new(wrap(b.model.clone(), spec)?),
                    arch: b.arch,
                    native: None,
                }
            }
            (None, _) => return Err(Error::Format(format!("entry {} has no model file", m.id))),
        };
        loaded.push(entry);
    }
    let (surrogates, independents) = loaded.into_iter().partition(|e| e.role == Role::Surrogate);
    Ok(ModelZoo {
        victim,
        surrogates,
        independents,
    })
}
