//! Instance-level uncertainty scores.
//!
//! Every score keeps the raw value of its defining formula and a value
//! normalized to `[0, 1]` (0 = certain, 1 = maximally uncertain). Selection
//! thresholds always apply to the normalized value.
//!
//! * winning score: raw `-(1/n) sum_t max_c P(y_t = c)`, normalized
//!   `(1 - mean max prob) * C / (C - 1)`;
//! * entropy: raw `(1/n) sum_t sum_c p log p` (non-positive), normalized
//!   `-raw / log C`;
//! * probability variance: raw `(1/n) sum_t sum_c Var_k P_k(y_t = c)` over `K`
//!   dropout passes (population variance), normalized `min(1, raw / 0.25)`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, InstanceStatus};
use crate::crf::TokenMarginals;
use crate::encoder::DropoutConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::JointModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    WinningScore,
    Entropy,
    /// Max of the normalized winning-score and entropy values.
    Combined,
    ProbabilityVariance,
}

impl UncertaintyKind {
    pub fn label(self) -> &'static str {
        match self {
            UncertaintyKind::WinningScore => "ws",
            UncertaintyKind::Entropy => "entropy",
            UncertaintyKind::Combined => "combined",
            UncertaintyKind::ProbabilityVariance => "pv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub instance: u32,
    pub kind: UncertaintyKind,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub passes: usize,
    pub seed: u64,
    pub rate: f64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::Config(format!("need at least 2 dropout passes, got {}", self.passes)));
        }
        DropoutConfig::stochastic(self.rate, self.seed).validate()
    }
}

pub fn winning_score(m: &TokenMarginals) -> Score {
    let n = m.len().max(1) as f64;
    let c = m.num_tags();
    let mean_max: f64 = (0..m.len()).map(|t| m.row(t).iter().copied().fold(0.0, f64::max)).sum::<f64>() / n;
    let normalized = if c > 1 { ((1.0 - mean_max) * c as f64 / (c as f64 - 1.0)).clamp(0.0, 1.0) } else { 0.0 };
    Score { raw: -mean_max, normalized }
}

pub fn entropy_score(m: &TokenMarginals) -> Score {
    let n = m.len().max(1) as f64;
    let c = m.num_tags();
    let raw = (0..m.len()).map(|t| m.row(t).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()).sum::<f64>() / n;
    let normalized = if c > 1 { (-raw / (c as f64).ln()).clamp(0.0, 1.0) } else { 0.0 };
    Score { raw, normalized }
}

pub fn combined_score(m: &TokenMarginals) -> Score {
    let v = winning_score(m).normalized.max(entropy_score(m).normalized);
    Score { raw: v, normalized: v }
}

/// Probability variance of `K` sampled marginal matrices of equal shape.
pub fn variance_of_samples(samples: &[TokenMarginals]) -> Result<Score> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {}", samples.len())));
    }
    let (n, c) = samples[0].matrix().shape();
    if samples.iter().any(|s| s.matrix().shape() != (n, c)) {
        return Err(Error::Shape("samples disagree in shape".into()));
    }
    let k = samples.len() as f64;
    let mut total = 0.0;
    for t in 0..n {
        for j in 0..c {
            // Pairwise form: exactly zero when all samples agree.
            let mut acc = 0.0;
            for (a, sa) in samples.iter().enumerate() {
                for sb in &samples[a + 1..] {
                    acc += (sa.row(t)[j] - sb.row(t)[j]).powi(2);
                }
            }
            total += acc / (k * k);
        }
    }
    let raw = total / n.max(1) as f64;
    Ok(Score { raw, normalized: (raw / 0.25).min(1.0) })
}

/// `K` dropout passes of `model` on one input; pass `k` replays the mask
/// stream at path `[instance, k]` of `mc.seed`.
pub fn probability_variance(model: &JointModel, tokens: &[u32], query: usize, instance: u32, mc: &McConfig) -> Result<Score> {
    mc.validate()?;
    let dropout = DropoutConfig::stochastic(mc.rate, mc.seed);
    let samples = (0..mc.passes)
        .map(|k| {
            let masks = dropout.masks(tokens.len(), model.dim(), &[instance as u64, k as u64]);
            let fwd = model.forward(tokens, query, masks)?;
            Ok(model.probabilities(&fwd))
        })
        .collect::<Result<Vec<_>>>()?;
    variance_of_samples(&samples)
}

pub fn data_score(kind: UncertaintyKind, m: &TokenMarginals) -> Result<Score> {
    match kind {
        UncertaintyKind::WinningScore => Ok(winning_score(m)),
        UncertaintyKind::Entropy => Ok(entropy_score(m)),
        UncertaintyKind::Combined => Ok(combined_score(m)),
        UncertaintyKind::ProbabilityVariance => Err(Error::Config("probability variance needs a model, not fixed marginals".into())),
    }
}

/// One score per instance of `data`, in order.
pub fn score_dataset(model: &JointModel, data: &Dataset, kind: UncertaintyKind, mc: Option<&McConfig>) -> Result<Vec<UncertaintyScore>> {
    if kind == UncertaintyKind::ProbabilityVariance {
        mc.ok_or_else(|| Error::Config("probability variance needs an MC configuration".into()))?.validate()?;
    }
    data.instances
        .iter()
        .map(|inst| {
            let tokens = data.tokens_of(inst);
            let score = match kind {
                UncertaintyKind::ProbabilityVariance => {
                    probability_variance(model, tokens, inst.query, inst.id, mc.expect("checked above"))
                }
                _ => model.forward_deterministic(tokens, inst.query).and_then(|fwd| data_score(kind, &model.probabilities(&fwd))),
            }
            .map_err(|e| Error::Instance { id: inst.id, source: Box::new(e) })?;
            Ok(UncertaintyScore { instance: inst.id, kind, raw: score.raw, normalized: score.normalized })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    instance_id: u32,
    probs: Vec<Vec<f64>>,
}

/// Reads externally computed per-token tag probabilities, one JSON object
/// `{"instance_id": 3, "probs": [[...], ...]}` per line.
pub fn read_external_probabilities(r: impl BufRead) -> Result<HashMap<u32, TokenMarginals>> {
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let row: ExternalRow = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let width = row.probs.first().map_or(0, Vec::len);
        if row.probs.is_empty() || row.probs.iter().any(|r| r.len() != width) {
            return Err(err("ragged or empty probability rows".into()));
        }
        let m = TokenMarginals::new(Matrix::from_rows(&row.probs)).map_err(|e| err(e.to_string()))?;
        if out.insert(row.instance_id, m).is_some() {
            return Err(err(format!("duplicate instance id {}", row.instance_id)));
        }
    }
    Ok(out)
}

/// Data-uncertainty scores from imported probabilities; every instance of
/// `data` must be present with matching shape.
pub fn score_external(
    probs: &HashMap<u32, TokenMarginals>,
    data: &Dataset,
    num_tags: usize,
    kind: UncertaintyKind,
) -> Result<Vec<UncertaintyScore>> {
    data.instances
        .iter()
        .map(|inst| {
            let wrap = |e: Error| Error::Instance { id: inst.id, source: Box::new(e) };
            let m = probs.get(&inst.id).ok_or_else(|| wrap(Error::Config("no imported probabilities".into())))?;
            if m.matrix().shape() != (inst.len(), num_tags) {
                return Err(wrap(Error::Shape(format!("imported {:?}, expected ({}, {num_tags})", m.matrix().shape(), inst.len()))));
            }
            let s = data_score(kind, m).map_err(wrap)?;
            Ok(UncertaintyScore { instance: inst.id, kind, raw: s.raw, normalized: s.normalized })
        })
        .collect()
}

/// CSV dump: `instance_id,kind,raw,normalized,provenance`.
pub fn write_scores_csv(mut w: impl Write, scores: &[UncertaintyScore], status: Option<&[InstanceStatus]>) -> Result<()> {
    writeln!(w, "instance_id,kind,raw,normalized,provenance")?;
    for s in scores {
        let prov = match status.and_then(|st| st.get(s.instance as usize)) {
            Some(InstanceStatus::Clean) => "clean",
            Some(InstanceStatus::Corrupted) => "corrupted",
            _ => "unknown",
        };
        writeln!(w, "{},{},{},{},{}", s.instance, s.kind.label(), s.raw, s.normalized, prov)?;
    }
    w.flush()?;
    Ok(())
}
