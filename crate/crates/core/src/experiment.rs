//! End-to-end experiment: data, victim and zoo, fingerprint, scores, AUC per
//! condition, and the result files.
//!
//! Seeds: the master seed feeds `derive_seed(master, tag, index)` with tags
//! `dataset`, `zoo`, `fingerprint` (index 0 for the main fingerprint, `ℓ`
//! for the points sweep). Any `seed` fields inside the dataset or zoo
//! sections are overwritten with these.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{build_zoo, save_zoo, train_victim, ModelZoo, Provenance, Role, ZooPlan};
use crate::error::{Error, Result};
use crate::gnn::EmbeddingModel;
use crate::graph::{generate_dataset, save_dataset, DatasetSpec, Graph};
use crate::sampler::{distinctness_stats, sample_fingerprint, Fingerprint, SamplerConfig};
use crate::seed::derive_seed;
use crate::verifier::{auc, classify, score, ScoreForm, Threshold, Verdict, VerificationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintSettings {
    /// `ℓ`, the number of stationary (and reference) tuples.
    pub points: usize,
    /// Extra fingerprint sizes to evaluate; each gets a `points-ℓ` condition.
    pub sweep: Vec<usize>,
    pub sampler: SamplerConfig,
}

impl Default for FingerprintSettings {
    fn default() -> Self {
        Self {
            points: 40,
            sweep: Vec::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub score_form: ScoreForm,
    pub dataset: DatasetSpec,
    pub zoo: ZooPlan,
    pub fingerprint: FingerprintSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            score_form: ScoreForm::Percentile,
            dataset: DatasetSpec::default(),
            zoo: ZooPlan::default(),
            fingerprint: FingerprintSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.zoo.validate()?;
        self.fingerprint.sampler.validate()?;
        if self.fingerprint.points == 0 || self.fingerprint.sweep.contains(&0) {
            return Err(Error::InvalidArgument("fingerprint sizes must be >= 1".into()));
        }
        if self.zoo.independents.len() < 2 {
            return Err(Error::InvalidArgument(
                "threshold calibration needs >= 2 independents".into(),
            ));
        }
        Ok(())
    }

    /// The dataset recipe with its seed derived from the master seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.reseeded(derive_seed(self.seed, "dataset", 0))
    }

    pub fn zoo_plan(&self) -> ZooPlan {
        ZooPlan {
            seed: derive_seed(self.seed, "zoo", 0),
            ..self.zoo.clone()
        }
    }

    pub fn fingerprint_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed, "fingerprint", index)
    }
}

/// One `results.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub candidate_id: String,
    pub provenance: String,
    pub arch: String,
    pub dim: usize,
    pub score_form: ScoreForm,
    pub score: f64,
    pub verdict: Verdict,
}

pub const RESULTS_HEADER: [&str; 8] = [
    "condition",
    "candidate_id",
    "provenance",
    "arch",
    "dim",
    "score_form",
    "score",
    "verdict",
];

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Format(format!("unexpected results header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// AUC per `(condition, form)`: surrogate rows against independent rows of
/// the same condition. Conditions without both kinds are skipped.
pub fn auc_table(rows: &[ResultRow]) -> Result<BTreeMap<String, BTreeMap<ScoreForm, f64>>> {
    let mut groups: BTreeMap<(String, ScoreForm), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.condition.clone(), r.score_form)).or_default();
        match r.provenance.as_str() {
            "independent" => g.1.push(r.score),
            "victim" => {}
            _ => g.0.push(r.score),
        }
    }
    let mut out: BTreeMap<String, BTreeMap<ScoreForm, f64>> = BTreeMap::new();
    for ((cond, form), (s, i)) in groups {
        if !s.is_empty() && !i.is_empty() {
            out.entry(cond).or_default().insert(form, auc(&s, &i)?);
        }
    }
    Ok(out)
}

/// Fraction of `(surrogate, independent)` pairs whose order flips when the
/// surrogate's score changes from `before` to `after`.
pub fn flip_fraction(before: &[f64], after: &[f64], independents: &[f64]) -> Result<f64> {
    if before.len() != after.len() || before.is_empty() || independents.is_empty() {
        return Err(Error::InvalidArgument(
            "flip fraction needs matched non-empty lists".into(),
        ));
    }
    let mut flips = 0usize;
    for (b, a) in before.iter().zip(after) {
        for i in independents {
            flips += usize::from((b < i) != (a < i));
        }
    }
    Ok(flips as f64 / (before.len() * independents.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSummary {
    pub points: usize,
    pub requested: usize,
    pub dropped: usize,
    pub victim_mean_q_t: f64,
    pub victim_mean_q_r: f64,
    pub mean_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub score_form: ScoreForm,
    pub threshold: Threshold,
    pub victim_score: f64,
    pub independent_mean: f64,
    pub auc: BTreeMap<String, BTreeMap<ScoreForm, f64>>,
    /// Per transform label, fraction of flipped surrogate/independent orders.
    pub flip_fraction: BTreeMap<String, f64>,
    /// Held-out relative error of each extraction surrogate.
    pub epsilon: BTreeMap<String, f64>,
    pub fingerprint: FingerprintSummary,
    pub low_confidence: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dataset: Vec<Graph>,
    pub zoo: ModelZoo,
    pub fingerprint: Fingerprint,
    pub reports: Vec<(String, VerificationReport)>,
    pub rows: Vec<ResultRow>,
    pub report: ExperimentReport,
}

fn summarize(fp: &Fingerprint, victim: &dyn EmbeddingModel) -> Result<FingerprintSummary> {
    let r = score(victim, "victim", fp, ScoreForm::Ratio)?;
    let mean = |q: &[Option<f64>]| {
        let v: Vec<f64> = q.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(FingerprintSummary {
        points: fp.len(),
        requested: fp.requested,
        dropped: fp.dropped,
        victim_mean_q_t: mean(&r.q_t),
        victim_mean_q_r: mean(&r.q_r),
        mean_cosine: distinctness_stats(fp, 10).ok().map(|d| d.mean),
    })
}

/// Runs the whole pipeline. Writes the artifacts when `output_dir` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let recipe = cfg.dataset_spec();
    let dataset = generate_dataset(&recipe)?;
    let plan = cfg.zoo_plan();
    info!("training victim");
    let victim = train_victim(&dataset, &plan)?;
    info!("building zoo");
    let zoo = build_zoo(&victim, &dataset, &recipe, &plan)?;
    info!("sampling fingerprint");
    let fp = sample_fingerprint(
        &victim,
        "victim",
        &dataset,
        cfg.fingerprint.points,
        &cfg.fingerprint.sampler,
        cfg.fingerprint_seed(0),
    )?;
    let form = cfg.score_form;

    let candidates: Vec<(&str, &dyn EmbeddingModel)> = std::iter::once(("victim", &victim as &dyn EmbeddingModel))
        .chain(zoo.entries().map(|e| (e.id.as_str(), &*e.model)))
        .collect();
    let reports: Vec<(String, VerificationReport)> = candidates
        .par_iter()
        .map(|(id, m)| score(*m, id, &fp, form).map(|r| (id.to_string(), r)))
        .collect::<Result<_>>()?;
    let by_id: BTreeMap<&str, &VerificationReport> = reports.iter().map(|(k, r)| (k.as_str(), r)).collect();

    let thresholds: BTreeMap<ScoreForm, Threshold> = [ScoreForm::Ratio, ScoreForm::Percentile]
        .into_iter()
        .map(|f| {
            let s: Vec<f64> = zoo
                .independents
                .iter()
                .map(|e| by_id[e.id.as_str()].score_in(f))
                .collect();
            Threshold::from_scores(&s, f).map(|t| (f, t))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut push = |condition: &str, id: &str, provenance: &str, arch: String, dim: usize, rep: &VerificationReport| {
        for f in [ScoreForm::Ratio, ScoreForm::Percentile] {
            let s = rep.score_in(f);
            rows.push(ResultRow {
                condition: condition.to_string(),
                candidate_id: id.to_string(),
                provenance: provenance.to_string(),
                arch: arch.clone(),
                dim,
                score_form: f,
                score: s,
                verdict: classify(s, thresholds[&f].value),
            });
        }
    };
    push(
        "victim",
        "victim",
        "victim",
        victim.architecture().to_string(),
        victim.embedding_dim(),
        by_id["victim"],
    );
    let mut conditions: Vec<String> = Vec::new();
    for e in &zoo.surrogates {
        let c = e.provenance.condition();
        if !conditions.contains(&c) {
            conditions.push(c.clone());
        }
        push(
            &c,
            &e.id,
            e.provenance.tag(),
            e.arch.to_string(),
            e.embedding_dim(),
            by_id[e.id.as_str()],
        );
    }
    if conditions.is_empty() {
        conditions.push("extraction".into());
    }
    for c in &conditions {
        for e in &zoo.independents {
            push(
                c,
                &e.id,
                "independent",
                e.arch.to_string(),
                e.embedding_dim(),
                by_id[e.id.as_str()],
            );
        }
    }

    // Fingerprint-size sweep over the extraction surrogates.
    let extraction: Vec<_> = zoo
        .entries()
        .filter(|e| {
            matches!(
                e.provenance,
                Provenance::Extraction { .. } | Provenance::Independent { .. }
            )
        })
        .collect();
    for &points in &cfg.fingerprint.sweep {
        let fp_l = sample_fingerprint(
            &victim,
            "victim",
            &dataset,
            points,
            &cfg.fingerprint.sampler,
            cfg.fingerprint_seed(points as u64),
        )?;
        let reps: Vec<VerificationReport> = extraction
            .par_iter()
            .map(|e| score(&*e.model, &e.id, &fp_l, form))
            .collect::<Result<_>>()?;
        let cond = format!("points-{points}");
        for (e, r) in extraction.iter().zip(&reps) {
            push(
                &cond,
                &e.id,
                e.provenance.tag(),
                e.arch.to_string(),
                e.embedding_dim(),
                r,
            );
        }
    }

    let auc = auc_table(&rows)?;
    let ind_scores: Vec<f64> = zoo
        .independents
        .iter()
        .map(|e| by_id[e.id.as_str()].score_in(form))
        .collect();
    let mut flips = BTreeMap::new();
    for spec in &plan.transforms {
        let (mut before, mut after) = (Vec::new(), Vec::new());
        for e in &zoo.surrogates {
            if let Provenance::Transform { base, spec: s } = &e.provenance {
                if s == spec {
                    before.push(by_id[base.as_str()].score_in(form));
                    after.push(by_id[e.id.as_str()].score_in(form));
                }
            }
        }
        if !before.is_empty() {
            flips.insert(spec.label(), flip_fraction(&before, &after, &ind_scores)?);
        }
    }
    let epsilon = zoo
        .surrogates
        .iter()
        .filter_map(|e| match e.provenance {
            Provenance::Extraction { epsilon, .. } => Some((e.id.clone(), epsilon)),
            _ => None,
        })
        .collect();
    let report = ExperimentReport {
        seed: cfg.seed,
        score_form: form,
        threshold: thresholds[&form].clone(),
        victim_score: by_id["victim"].score_in(form),
        independent_mean: ind_scores.iter().sum::<f64>() / ind_scores.len() as f64,
        auc,
        flip_fraction: flips,
        epsilon,
        fingerprint: summarize(&fp, &victim)?,
        low_confidence: reports
            .iter()
            .filter(|(_, r)| r.low_confidence)
            .map(|(k, _)| k.clone())
            .collect(),
        seconds: start.elapsed().as_secs_f64(),
    };

    let outcome = ExperimentOutcome {
        dataset,
        zoo,
        fingerprint: fp,
        reports,
        rows,
        report,
    };
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

/// `results.csv`, `report.json`, `fingerprint.json`, `dataset.json`,
/// `config.toml`, the zoo under `zoo/`, and one score table per condition
/// under `tables/`.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir.join("tables"))?;
    write_results(&dir.join("results.csv"), &out.rows)?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&out.report)?)?;
    out.fingerprint.save(&dir.join("fingerprint.json"))?;
    save_dataset(&dir.join("dataset.json"), &out.dataset)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    save_zoo(&dir.join("zoo"), &out.zoo)?;
    let mut by_condition: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in &out.rows {
        by_condition.entry(&r.condition).or_default().push(r);
    }
    for (cond, rows) in by_condition {
        let mut w = csv::Writer::from_path(dir.join("tables").join(format!("{cond}.csv")))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Role of a results row, from its provenance column.
pub fn row_role(row: &ResultRow) -> Option<Role> {
    match row.provenance.as_str() {
        "victim" => None,
        "independent" => Some(Role::Independent),
        _ => Some(Role::Surrogate),
    }
}
