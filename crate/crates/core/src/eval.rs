//! Triplet-level evaluation, validation splits and selection audits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bootstrap::SelectionState;
use crate::corpus::{Corpus, InstanceStatus};
use crate::error::Result;
use crate::model::{JointModel, WordVocab};
use crate::rng;
use crate::tagging::{decode_triplets, enumerate_inference_queries, Sentence, TagVocabulary, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl Counts {
    /// Precision, recall and F1 with `0/0 := 0`.
    pub fn prf(&self) -> (f64, f64, f64) {
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = div(self.correct, self.predicted);
        let r = div(self.correct, self.gold);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }

    fn add(&mut self, other: Counts) {
        self.predicted += other.predicted;
        self.gold += other.gold;
        self.correct += other.correct;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_relation: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn from_counts(counts: Counts, per_relation: BTreeMap<String, Counts>) -> Self {
        let (precision, recall, f1) = counts.prf();
        Self { precision, recall, f1, counts, per_relation }
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out =
            format!("{:<20} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n", "relation", "precision", "recall", "f1", "pred", "gold", "hit");
        let mut row = |name: &str, c: &Counts| {
            let (p, r, f) = c.prf();
            out.push_str(&format!("{name:<20} {p:>9.4} {r:>9.4} {f:>9.4} {:>6} {:>6} {:>6}\n", c.predicted, c.gold, c.correct));
        };
        for (name, c) in &self.per_relation {
            row(name, c);
        }
        row("(micro)", &self.counts);
        out
    }
}

/// Micro-averaged comparison of predicted and gold triplet sets, sentence by sentence.
pub fn score_triplets(predicted: &[BTreeSet<Triplet>], gold: &[BTreeSet<Triplet>], tags: &TagVocabulary) -> EvalReport {
    assert_eq!(predicted.len(), gold.len(), "one prediction set per sentence");
    let mut total = Counts::default();
    let mut per: BTreeMap<String, Counts> = tags.relation_types().iter().map(|r| (r.clone(), Counts::default())).collect();
    for (p, g) in predicted.iter().zip(gold) {
        for (ri, name) in tags.relation_types().iter().enumerate() {
            let c = Counts {
                predicted: p.iter().filter(|t| t.relation == ri).count(),
                gold: g.iter().filter(|t| t.relation == ri).count(),
                correct: p.iter().filter(|t| t.relation == ri && g.contains(t)).count(),
            };
            per.get_mut(name).expect("relation present").add(c);
            total.add(c);
        }
    }
    EvalReport::from_counts(total, per)
}

/// Deduplicated union of decoded triplets over every query position.
pub fn predict_triplets(model: &JointModel, words: &WordVocab, tags: &TagVocabulary, sentence: &Sentence) -> Result<BTreeSet<Triplet>> {
    let tokens = words.encode(&sentence.tokens);
    let mut out = BTreeSet::new();
    for p in enumerate_inference_queries(sentence) {
        let path = model.decode(&tokens, p)?;
        out.extend(decode_triplets(&path, tags, p));
    }
    Ok(out)
}

pub fn evaluate(model: &JointModel, words: &WordVocab, tags: &TagVocabulary, sentences: &[Sentence]) -> Result<EvalReport> {
    let predicted = sentences.iter().map(|s| predict_triplets(model, words, tags, s)).collect::<Result<Vec<_>>>()?;
    let gold: Vec<_> = sentences.iter().map(Sentence::gold_triplets).collect();
    Ok(score_triplets(&predicted, &gold, tags))
}

/// Seeded split of `corpus` into (validation, remainder); the validation
/// part holds `round(fraction * len)` sentences, at least one when possible.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> (Corpus, Corpus) {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must be in (0, 1)");
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5EED]));
    let k = ((fraction * corpus.len() as f64).round() as usize).clamp(usize::from(!corpus.is_empty()), corpus.len());
    let (val, rest) = idx.split_at(k);
    let mut val = val.to_vec();
    let mut rest = rest.to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    (corpus.subset(&val), corpus.subset(&rest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub iteration: usize,
    pub selected: usize,
    pub clean_fraction_selected: f64,
    pub clean_fraction_all: f64,
    pub enrichment: f64,
}

fn clean_fraction<'a>(ids: impl Iterator<Item = &'a u32>, status: &[InstanceStatus]) -> f64 {
    let (mut clean, mut total) = (0usize, 0usize);
    for &id in ids {
        total += 1;
        if status[id as usize] == InstanceStatus::Clean {
            clean += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        clean as f64 / total as f64
    }
}

/// Clean fraction of every selected set against that of the full set.
/// `None` when some instance's provenance is unknown.
pub fn selection_audit(state: &SelectionState, status: &[InstanceStatus]) -> Option<Vec<AuditRow>> {
    if status.len() != state.universe || status.contains(&InstanceStatus::Unknown) {
        return None;
    }
    let all: Vec<u32> = (0..state.universe as u32).collect();
    let base = clean_fraction(all.iter(), status);
    Some(
        state
            .selections
            .iter()
            .enumerate()
            .map(|(iteration, sel)| {
                let frac = clean_fraction(sel.iter(), status);
                AuditRow {
                    iteration,
                    selected: sel.len(),
                    clean_fraction_selected: frac,
                    clean_fraction_all: base,
                    enrichment: if base > 0.0 { frac / base } else { 0.0 },
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::Span;

    fn tags() -> TagVocabulary {
        TagVocabulary::new(vec!["A".into()], vec!["r".into(), "s".into()]).unwrap()
    }

    fn trip(h: usize, rel: usize, t: usize) -> Triplet {
        Triplet { head: Span::new(h, h + 1), head_type: 0, relation: rel, tail: Span::new(t, t + 1) }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![BTreeSet::from([trip(0, 0, 2), trip(2, 1, 0)])];
        let r = score_triplets(&gold, &gold, &tags());
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let none = vec![BTreeSet::new()];
        let r = score_triplets(&none, &gold, &tags());
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn three_predicted_four_gold_two_correct() {
        let gold = vec![BTreeSet::from([trip(0, 0, 1), trip(1, 0, 2), trip(2, 1, 3), trip(3, 1, 4)])];
        let pred = vec![BTreeSet::from([trip(0, 0, 1), trip(1, 0, 2), trip(4, 1, 0)])];
        let r = score_triplets(&pred, &gold, &tags());
        assert_eq!(r.counts, Counts { predicted: 3, gold: 4, correct: 2 });
        // Oracle: P = 2/3, R = 2/4, F = 2PR/(P+R).
        let (p, rc) = (2.0 / 3.0, 0.5);
        assert!((r.precision - p).abs() < 1e-15);
        assert!((r.recall - rc).abs() < 1e-15);
        assert!((r.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.per_relation["r"], Counts { predicted: 2, gold: 2, correct: 2 });
    }

    #[test]
    fn head_type_is_part_of_the_match() {
        let gold = vec![BTreeSet::from([trip(0, 0, 1)])];
        let mut wrong = trip(0, 0, 1);
        wrong.head_type = 1;
        let r = score_triplets(&[BTreeSet::from([wrong])], &gold, &tags());
        assert_eq!(r.counts.correct, 0);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let s = Sentence { tokens: vec!["x".into()], entities: vec![], relations: vec![] };
        let mut sentences = Vec::new();
        for i in 0..50 {
            let mut s = s.clone();
            s.tokens[0] = format!("w{i}");
            sentences.push(s);
        }
        let c = Corpus::new(tags(), sentences);
        let (v1, t1) = split_validation(&c, 0.1, 3);
        let (v2, _) = split_validation(&c, 0.1, 3);
        let (v3, _) = split_validation(&c, 0.1, 4);
        assert_eq!(v1.len(), 5);
        assert_eq!(t1.len(), 45);
        assert_eq!(v1, v2);
        assert_ne!(v1, v3);
        let a: BTreeSet<_> = v1.sentences.iter().map(|s| s.tokens[0].clone()).collect();
        assert!(t1.sentences.iter().all(|s| !a.contains(&s.tokens[0])));
    }

    #[test]
    fn audit_requires_provenance() {
        let state = SelectionState { universe: 4, selections: vec![vec![0, 1], vec![0, 1, 2, 3]], ..Default::default() };
        use InstanceStatus::*;
        assert!(selection_audit(&state, &[Clean, Unknown, Clean, Clean]).is_none());
        let rows = selection_audit(&state, &[Clean, Clean, Corrupted, Corrupted]).unwrap();
        assert_eq!(rows[0].enrichment, 2.0);
        assert_eq!(rows[1].enrichment, 1.0);
    }
}
