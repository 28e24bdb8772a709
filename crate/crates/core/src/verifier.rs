//! Scoring candidates against a fingerprint, threshold calibration, exact
//! detection for native models, and detection AUC.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{EmbeddingModel, GnnModel};
use crate::probe::{normalized_derivative_norm, q_value, DerivativeMode, QueryTuple};
use crate::sampler::Fingerprint;

/// A report is low-confidence when more than this fraction of tuples was
/// excluded as degenerate.
pub const LOW_CONFIDENCE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    Ratio,
    #[default]
    Percentile,
}

impl fmt::Display for ScoreForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreForm::Ratio => "ratio",
            ScoreForm::Percentile => "percentile",
        })
    }
}

impl FromStr for ScoreForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ratio" => Ok(ScoreForm::Ratio),
            "percentile" => Ok(ScoreForm::Percentile),
            other => Err(Error::InvalidArgument(format!("unknown score form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Surrogate,
    Independent,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Surrogate => "surrogate",
            Verdict::Independent => "independent",
        })
    }
}

impl FromStr for Verdict {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(Verdict::Surrogate),
            "independent" => Ok(Verdict::Independent),
            other => Err(Error::InvalidArgument(format!("unknown verdict {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub candidate_id: String,
    /// `q` over the stationary tuples; `None` marks a degenerate tuple.
    pub q_t: Vec<Option<f64>>,
    pub q_r: Vec<Option<f64>>,
    pub beta_ratio: f64,
    pub beta_percentile: f64,
    pub form: ScoreForm,
    pub threshold: Option<f64>,
    pub verdict: Option<Verdict>,
    /// Indices into `T` and `R` whose tuples were excluded.
    pub degenerate_t: Vec<usize>,
    pub degenerate_r: Vec<usize>,
    pub low_confidence: bool,
}

impl VerificationReport {
    pub fn score(&self) -> f64 {
        match self.form {
            ScoreForm::Ratio => self.beta_ratio,
            ScoreForm::Percentile => self.beta_percentile,
        }
    }

    pub fn score_in(&self, form: ScoreForm) -> f64 {
        match form {
            ScoreForm::Ratio => self.beta_ratio,
            ScoreForm::Percentile => self.beta_percentile,
        }
    }

    /// Sets θ and the verdict `score ≤ θ ⇒ Surrogate`.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self.verdict = Some(classify(self.score(), threshold));
        self
    }
}

pub fn classify(score: f64, threshold: f64) -> Verdict {
    if score <= threshold {
        Verdict::Surrogate
    } else {
        Verdict::Independent
    }
}

/// Weak rank of `x` in `u`: `100·|{v ∈ u : v ≤ x}|/|u|`.
pub fn percentile_rank(x: f64, sorted: &[f64]) -> f64 {
    let below = sorted.partition_point(|v| *v <= x);
    100.0 * below as f64 / sorted.len() as f64
}

/// Mean weak percentile of the `q_t` values among `q_r`.
pub fn percentile_score(q_t: &[f64], q_r: &[f64]) -> Result<f64> {
    if q_t.is_empty() || q_r.is_empty() {
        return Err(Error::InvalidArgument(
            "percentile score needs non-empty T and R".into(),
        ));
    }
    let mut sorted = q_r.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(q_t.iter().map(|x| percentile_rank(*x, &sorted)).sum::<f64>() / q_t.len() as f64)
}

/// `Σq_T / Σq_R`. A candidate that does not react on any reference tuple
/// carries no signal: `0/0` is taken as 1 and `x/0` as `f64::MAX`.
pub fn ratio_score(q_t: &[f64], q_r: &[f64]) -> Result<f64> {
    if q_t.is_empty() || q_r.is_empty() {
        return Err(Error::InvalidArgument("ratio score needs non-empty T and R".into()));
    }
    let (t, r): (f64, f64) = (q_t.iter().sum(), q_r.iter().sum());
    Ok(if r > 0.0 {
        t / r
    } else if t > 0.0 {
        f64::MAX
    } else {
        1.0
    })
}

fn q_all(candidate: &dyn EmbeddingModel, tuples: &[QueryTuple]) -> Result<Vec<Option<f64>>> {
    tuples
        .par_iter()
        .map(|t| match q_value(candidate, t) {
            Ok(q) => Ok(Some(q)),
            Err(Error::DegenerateEmbedding { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Scores `candidate` on `fp`. Both score forms are always computed; `form`
/// picks the one the verdict uses once a threshold is attached.
pub fn score(
    candidate: &dyn EmbeddingModel,
    candidate_id: &str,
    fp: &Fingerprint,
    form: ScoreForm,
) -> Result<VerificationReport> {
    if candidate.input_dim() != fp.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: fp.feature_dim(),
            actual: candidate.input_dim(),
            context: "candidate input dim vs fingerprint graphs",
        });
    }
    let q_t = q_all(candidate, &fp.stationary)?;
    let q_r = q_all(candidate, &fp.reference)?;
    let kept = |q: &[Option<f64>]| q.iter().flatten().copied().collect::<Vec<f64>>();
    let holes = |q: &[Option<f64>]| (0..q.len()).filter(|&k| q[k].is_none()).collect::<Vec<usize>>();
    let (t, r) = (kept(&q_t), kept(&q_r));
    if t.is_empty() || r.is_empty() {
        return Err(Error::AllDegenerate(candidate_id.to_string()));
    }
    let (degenerate_t, degenerate_r) = (holes(&q_t), holes(&q_r));
    let excluded = (degenerate_t.len() + degenerate_r.len()) as f64;
    let total = (q_t.len() + q_r.len()) as f64;
    Ok(VerificationReport {
        candidate_id: candidate_id.to_string(),
        beta_ratio: ratio_score(&t, &r)?,
        beta_percentile: percentile_score(&t, &r)?,
        q_t,
        q_r,
        form,
        threshold: None,
        verdict: None,
        degenerate_t,
        degenerate_r,
        low_confidence: excluded > LOW_CONFIDENCE_FRACTION * total,
    })
}

/// Scores every candidate in parallel.
pub fn score_all(
    candidates: &[(&str, &dyn EmbeddingModel)],
    fp: &Fingerprint,
    form: ScoreForm,
) -> Result<Vec<VerificationReport>> {
    candidates.par_iter().map(|(id, m)| score(*m, id, fp, form)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    /// Half the smallest independent calibration score.
    IndependentBound,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub method: ThresholdMethod,
    pub form: ScoreForm,
    pub calibration_scores: Vec<f64>,
}

impl Threshold {
    pub fn fixed(value: f64, form: ScoreForm) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::InvalidArgument(format!("threshold must be > 0, got {value}")));
        }
        Ok(Self {
            value,
            method: ThresholdMethod::Fixed,
            form,
            calibration_scores: Vec::new(),
        })
    }

    /// `θ = min(scores)/2` from at least two independent models.
    pub fn from_scores(scores: &[f64], form: ScoreForm) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "threshold calibration needs >= 2 independent models, got {}",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "calibration score {bad} is not positive"
            )));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            value: min / 2.0,
            method: ThresholdMethod::IndependentBound,
            form,
            calibration_scores: scores.to_vec(),
        })
    }
}

pub fn calibrate_threshold(
    fp: &Fingerprint,
    independents: &[&dyn EmbeddingModel],
    form: ScoreForm,
) -> Result<Threshold> {
    if independents.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "threshold calibration needs >= 2 independent models, got {}",
            independents.len()
        )));
    }
    let scores: Vec<f64> = independents
        .par_iter()
        .enumerate()
        .map(|(k, m)| score(*m, &format!("calibration-{k}"), fp, form).map(|r| r.score()))
        .collect::<Result<_>>()?;
    Threshold::from_scores(&scores, form)
}

/// Exact detection: `Surrogate` iff `‖∇_w h_i‖/‖h_i‖ < tol` on every
/// stationary tuple, using analytic derivatives of the candidate.
pub fn detect_exact(candidates: &[GnnModel], stationary: &[QueryTuple], tol: f64) -> Result<Vec<Verdict>> {
    if stationary.iter().any(|t| t.graph.integer_features()) {
        return Err(Error::IntegerFeatures("exact detection needs derivatives"));
    }
    candidates
        .par_iter()
        .map(|m| {
            for t in stationary {
                if normalized_derivative_norm(m, t, DerivativeMode::Analytic)? >= tol {
                    return Ok(Verdict::Independent);
                }
            }
            Ok(Verdict::Surrogate)
        })
        .collect()
}

/// Probability that a random surrogate scores below a random independent,
/// ties counted ½.
pub fn auc(surrogate_scores: &[f64], independent_scores: &[f64]) -> Result<f64> {
    if surrogate_scores.is_empty() || independent_scores.is_empty() {
        return Err(Error::InvalidArgument("auc needs non-empty score lists".into()));
    }
    let mut ind = independent_scores.to_vec();
    ind.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for s in surrogate_scores {
        let below = ind.partition_point(|v| v < s);
        let not_above = ind.partition_point(|v| v <= s);
        wins += (ind.len() - not_above) as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (surrogate_scores.len() * ind.len()) as f64)
}

/// One batch-scoring CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub arch: String,
    pub dim: usize,
    pub beta_ratio: f64,
    pub beta_percentile: f64,
    pub verdict: String,
}

pub fn write_score_rows<W: std::io::Write>(out: W, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
