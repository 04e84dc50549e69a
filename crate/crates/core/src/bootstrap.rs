//! Dual-model training with the self-ensembling loss and the iterative
//! uncertainty-driven instance selection loop.
//!
//! One run:
//!
//! 1. score data uncertainty `u_d` for every instance of `D` with a scorer
//!    (a copy of `f1` warmed up for one epoch on a random subsample, or
//!    imported probabilities) and select `C = {u_d < tau_d}`;
//! 2. each epoch, train `f1` and `f2` on `C` with
//!    `L = (L_c1 + L_c2) + alpha * sum KL(P_f1 || P_f2)`, visiting `C` in
//!    ascending order of current uncertainty;
//! 3. score probability variance `u_m` of `f1` on all of `D` and reselect
//!    `C = {u_m < tau_m}`;
//! 4. evaluate `f1` on the validation sentences; stop after `patience`
//!    epochs without F1 improvement and keep the best epoch.
//!
//! A threshold of 1 disables the corresponding selection. When the initial
//! threshold selects nothing or more than `max_selected_fraction` of `D`,
//! or a reselection selects nothing, the `q` least uncertain fraction is
//! kept instead (ties at the cut included).

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dataset;
use crate::crf::{CrfGrad, TokenMarginals};
use crate::encoder::DropoutConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::linalg::{axpy, Matrix};
use crate::model::{Forward, Gradient, JointModel, ProbabilitySource, WordVocab};
use crate::optim::Adam;
use crate::rng;
use crate::tagging::{Instance, Sentence, TagVocabulary};
use crate::uncertainty::{self, McConfig, UncertaintyKind};

/// Floor applied inside the logarithms of the KL term.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub tau_data: f64,
    pub tau_model: f64,
    pub mc_passes: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_seed: u64,
    pub dropout_seed: u64,
    pub shuffle_seed: u64,
    pub data_uncertainty: UncertaintyKind,
    pub dim: usize,
    pub probability_source: ProbabilitySource,
    /// Fraction of `D` used to warm up the data-uncertainty scorer.
    pub warm_fraction: f64,
    pub initial_quantile: f64,
    pub iteration_quantile: f64,
    pub max_selected_fraction: f64,
    /// Grow `C` monotonically instead of reselecting from `D`.
    pub accumulate: bool,
    /// Pair every training instance with an all-`O` sequence queried at a
    /// random position of the same sentence that starts no entity.
    pub negative_queries: bool,
    pub curriculum: Curriculum,
}

/// Granularity of the easy-to-hard ordering used while selection is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curriculum {
    /// Sort instances by uncertainty, then cut into batches.
    Instances,
    /// Cut a shuffled `C` into batches, then sort batches by mean uncertainty.
    Batches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            learning_rate: 1e-3,
            batch_size: 8,
            dropout: 0.1,
            tau_data: 0.5,
            tau_model: 0.6,
            mc_passes: 5,
            max_epochs: 10,
            patience: 3,
            init_seed: 1,
            dropout_seed: 2,
            shuffle_seed: 3,
            data_uncertainty: UncertaintyKind::WinningScore,
            dim: 16,
            probability_source: ProbabilitySource::CrfMarginals,
            warm_fraction: 0.2,
            initial_quantile: 0.5,
            iteration_quantile: 0.7,
            max_selected_fraction: 0.95,
            accumulate: false,
            negative_queries: true,
            curriculum: Curriculum::Batches,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("tau_data", self.tau_data), ("tau_model", self.tau_model)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("warm_fraction", self.warm_fraction),
            ("initial_quantile", self.initial_quantile),
            ("iteration_quantile", self.iteration_quantile),
            ("max_selected_fraction", self.max_selected_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {v}"));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.dim == 0 {
            return bad("batch size, max epochs and dim must be positive".into());
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.data_uncertainty == UncertaintyKind::ProbabilityVariance {
            return bad("data uncertainty must be ws, entropy or combined".into());
        }
        DropoutConfig::stochastic(self.dropout, self.dropout_seed).validate()?;
        if self.tau_model < 1.0 {
            self.mc().validate()?;
        }
        Ok(())
    }

    pub fn mc(&self) -> McConfig {
        McConfig { passes: self.mc_passes, seed: rng::derive_seed(self.dropout_seed, &[0x3C]), rate: self.dropout }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::model::hex(&Sha256::digest(text.as_bytes()))
    }
}

/// Projected gradients of `KL(p || q)` w.r.t. each row-stochastic input.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTerm {
    pub loss: f64,
    pub grad_p: Matrix,
    pub grad_q: Matrix,
}

/// `sum_t KL(p_t || q_t)` with the logs floored at [`KL_EPSILON`]. Gradients
/// are projected onto the probability simplex (each row centered), which
/// leaves every parameter gradient unchanged.
pub fn ensemble_loss(p: &TokenMarginals, q: &TokenMarginals) -> Result<EnsembleTerm> {
    if p.matrix().shape() != q.matrix().shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p.matrix().shape(), q.matrix().shape())));
    }
    let (n, c) = p.matrix().shape();
    let mut loss = 0.0;
    let mut gp = Matrix::zeros(n, c);
    let mut gq = Matrix::zeros(n, c);
    for t in 0..n {
        let (pr, qr) = (p.row(t), q.row(t));
        for k in 0..c {
            let (pk, qk) = (pr[k], qr[k]);
            let lp = pk.max(KL_EPSILON).ln();
            let lq = qk.max(KL_EPSILON).ln();
            loss += pk * (lp - lq);
            gp.set(t, k, lp - lq + 1.0);
            gq.set(t, k, if qk > KL_EPSILON { -pk / qk } else { 0.0 });
        }
        for g in [&mut gp, &mut gq] {
            let row = g.row_mut(t);
            let mean = row.iter().sum::<f64>() / c as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("ensemble loss".into()));
    }
    Ok(EnsembleTerm { loss, grad_p: gp, grad_q: gq })
}

/// A model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: JointModel,
    pub optimizer: Adam,
}

impl Learner {
    pub fn new(model: JointModel, lr: f64) -> Self {
        let optimizer = Adam::new(&model.tensor_sizes(), lr);
        Self { model, optimizer }
    }

    fn apply(&mut self, grad: &Gradient) {
        let mut params = self.model.tensors_mut();
        self.optimizer.update(&mut params, &grad.tensors());
    }
}

#[derive(Debug, Clone)]
pub struct DualModel {
    pub f1: Learner,
    pub f2: Learner,
}

fn init_model(config: &TrainConfig, vocab_size: usize, num_tags: usize, which: u64) -> JointModel {
    let mut m = JointModel::init(vocab_size, num_tags, config.dim, &mut rng::stream(config.init_seed, &[which]));
    m.source = config.probability_source;
    m
}

impl DualModel {
    /// Two identically shaped, independently initialized models.
    pub fn new(config: &TrainConfig, vocab_size: usize, num_tags: usize) -> Self {
        Self {
            f1: Learner::new(init_model(config, vocab_size, num_tags, 1), config.learning_rate),
            f2: Learner::new(init_model(config, vocab_size, num_tags, 2), config.learning_rate),
        }
    }
}

/// Mean per-instance losses of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub crf_f1: f64,
    pub crf_f2: f64,
    pub ensemble: f64,
    pub total: f64,
}

/// Addresses the dropout masks of one step: `[model, epoch, step, slot]`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub epoch: u64,
    pub step: u64,
    pub negatives: Option<&'a NegativePool>,
}

const NEGATIVE_SLOT: u64 = 1 << 32;

/// Per sentence, the token positions that do not start a gold entity.
#[derive(Debug, Clone, Default)]
pub struct NegativePool {
    positions: Vec<Vec<usize>>,
    seed: u64,
}

impl NegativePool {
    pub fn new(data: &Dataset, seed: u64) -> Self {
        let mut starts: Vec<Vec<bool>> = data.tokens.iter().map(|t| vec![false; t.len()]).collect();
        for inst in &data.instances {
            starts[inst.sentence][inst.query] = true;
        }
        let positions = starts.iter().map(|c| (0..c.len()).filter(|&t| !c[t]).collect()).collect();
        Self { positions, seed }
    }

    /// Negative query paired with `inst` in `epoch`, if the sentence has one.
    pub fn sample(&self, inst: &Instance, epoch: u64) -> Option<Instance> {
        let cands = self.positions.get(inst.sentence)?;
        if cands.is_empty() {
            return None;
        }
        let q = cands[rng::stream(self.seed, &[epoch, inst.id as u64]).gen_range(0..cands.len())];
        Some(Instance { id: inst.id, sentence: inst.sentence, query: q, tags: vec![TagVocabulary::OUTSIDE; inst.tags.len()] })
    }
}

/// Forward pass and CRF loss for one instance of one model.
fn crf_term(
    model: &JointModel,
    data: &Dataset,
    inst: &Instance,
    dropout: &DropoutConfig,
    path: [u64; 4],
) -> Result<(Forward, f64, CrfGrad)> {
    let tokens = data.tokens_of(inst);
    let masks = dropout.masks(tokens.len(), model.dim(), &path);
    let fwd = model.forward(tokens, inst.query, masks)?;
    let (loss, g) = crate::crf::nll_loss_and_grad(&fwd.emissions, &inst.tags, &model.crf)?;
    Ok((fwd, loss, g))
}

fn add_scaled(g: &mut CrfGrad, s: f64, other: &CrfGrad) {
    axpy(s, other.emissions.as_slice(), g.emissions.as_mut_slice());
    axpy(s, other.transitions.as_slice(), g.transitions.as_mut_slice());
    axpy(s, &other.start, &mut g.start);
    axpy(s, &other.end, &mut g.end);
}

fn check_batch(batch: &[&Instance]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    Ok(())
}

fn finish(learner: &mut Learner, grad: &mut Gradient, batch_len: usize, what: &str) -> Result<()> {
    grad.scale(1.0 / batch_len as f64);
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("{what} gradient")));
    }
    learner.apply(grad);
    Ok(())
}

/// One Adam step of a single model on the CRF loss.
pub fn train_step_single(
    learner: &mut Learner,
    data: &Dataset,
    batch: &[&Instance],
    config: &TrainConfig,
    ctx: StepContext,
) -> Result<f64> {
    check_batch(batch)?;
    let dropout = DropoutConfig::stochastic(config.dropout, config.dropout_seed);
    let mut grad = learner.model.zeros_like();
    let mut total = 0.0;
    for (slot, inst) in batch.iter().enumerate() {
        let (fwd, loss, g) = crf_term(&learner.model, data, inst, &dropout, [1, ctx.epoch, ctx.step, slot as u64])?;
        total += loss;
        learner.model.backward(data.tokens_of(inst), inst.query, &fwd, &g, &mut grad)?;
        if let Some(neg) = ctx.negatives.and_then(|p| p.sample(inst, ctx.epoch)) {
            let path = [1, ctx.epoch, ctx.step, NEGATIVE_SLOT + slot as u64];
            let (fwd, loss, g) = crf_term(&learner.model, data, &neg, &dropout, path)?;
            total += loss;
            learner.model.backward(data.tokens_of(&neg), neg.query, &fwd, &g, &mut grad)?;
        }
    }
    finish(learner, &mut grad, batch.len(), "model")?;
    Ok(total / batch.len() as f64)
}

/// One Adam step of both models on `(L_c1 + L_c2) + alpha * L_e`.
pub fn train_step(dual: &mut DualModel, data: &Dataset, batch: &[&Instance], config: &TrainConfig, ctx: StepContext) -> Result<StepLosses> {
    check_batch(batch)?;
    let dropout = DropoutConfig::stochastic(config.dropout, config.dropout_seed);
    let (m1, m2) = (&dual.f1.model, &dual.f2.model);
    let mut g1 = m1.zeros_like();
    let mut g2 = m2.zeros_like();
    let mut sums = StepLosses::default();
    for (slot, inst) in batch.iter().enumerate() {
        let tokens = data.tokens_of(inst);
        let (fwd1, l1, mut c1) = crf_term(m1, data, inst, &dropout, [1, ctx.epoch, ctx.step, slot as u64])?;
        let (fwd2, l2, mut c2) = crf_term(m2, data, inst, &dropout, [2, ctx.epoch, ctx.step, slot as u64])?;
        let p = m1.probabilities(&fwd1);
        let q = m2.probabilities(&fwd2);
        let kl = ensemble_loss(&p, &q)?;
        if config.alpha > 0.0 {
            add_scaled(&mut c1, config.alpha, &m1.probabilities_vjp(&fwd1, &p, &kl.grad_p));
            add_scaled(&mut c2, config.alpha, &m2.probabilities_vjp(&fwd2, &q, &kl.grad_q));
        }
        m1.backward(tokens, inst.query, &fwd1, &c1, &mut g1)?;
        m2.backward(tokens, inst.query, &fwd2, &c2, &mut g2)?;
        sums.crf_f1 += l1;
        sums.crf_f2 += l2;
        sums.ensemble += kl.loss;
        if let Some(neg) = ctx.negatives.and_then(|p| p.sample(inst, ctx.epoch)) {
            for (which, model, grad) in [(1, m1, &mut g1), (2, m2, &mut g2)] {
                let path = [which, ctx.epoch, ctx.step, NEGATIVE_SLOT + slot as u64];
                let (fwd, loss, g) = crf_term(model, data, &neg, &dropout, path)?;
                model.backward(tokens, neg.query, &fwd, &g, grad)?;
                if which == 1 {
                    sums.crf_f1 += loss;
                } else {
                    sums.crf_f2 += loss;
                }
            }
        }
    }
    let b = batch.len() as f64;
    let losses = StepLosses {
        crf_f1: sums.crf_f1 / b,
        crf_f2: sums.crf_f2 / b,
        ensemble: sums.ensemble / b,
        total: (sums.crf_f1 + sums.crf_f2 + config.alpha * sums.ensemble) / b,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    finish(&mut dual.f1, &mut g1, batch.len(), "f1")?;
    finish(&mut dual.f2, &mut g2, batch.len(), "f2")?;
    Ok(losses)
}

/// Trusted-subset bookkeeping across iterations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionState {
    /// `|D|`; instance ids are `0..universe`.
    pub universe: usize,
    /// Current `C`, sorted ids.
    pub selected: Vec<u32>,
    /// `selections[0]` is the initial `C`; `selections[e]` is `C` after epoch `e`.
    pub selections: Vec<Vec<u32>>,
    pub history: Vec<HistoryRow>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub selected: usize,
    pub mean_uncertainty: Option<f64>,
    pub val_f1: Option<f64>,
    pub fallback: bool,
}

impl SelectionState {
    fn push(&mut self, selected: Vec<u32>, mean_uncertainty: Option<f64>, val_f1: Option<f64>, fallback: bool) {
        self.history.push(HistoryRow { iteration: self.iteration, selected: selected.len(), mean_uncertainty, val_f1, fallback });
        self.selections.push(selected.clone());
        self.selected = selected;
    }
}

/// Ids with `score < tau`; `tau >= 1` keeps everything. Degenerate
/// selections fall back to the `quantile` least uncertain fraction.
/// Returns the ids and whether the fallback fired.
pub fn select(scores: &[f64], tau: f64, quantile: f64, max_fraction: f64) -> (Vec<u32>, bool) {
    let n = scores.len();
    if tau >= 1.0 {
        return ((0..n as u32).collect(), false);
    }
    let picked: Vec<u32> = (0..n as u32).filter(|&i| scores[i as usize] < tau).collect();
    if !picked.is_empty() && picked.len() as f64 <= max_fraction * n as f64 {
        return (picked, false);
    }
    if n == 0 {
        return (picked, false);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((quantile * n as f64).ceil() as usize).clamp(1, n);
    let cut = sorted[k - 1];
    ((0..n as u32).filter(|&i| scores[i as usize] <= cut).collect(), true)
}

/// JSON-lines metrics record, one per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub selected: usize,
    pub l_c1: f64,
    pub l_c2: Option<f64>,
    pub l_e: Option<f64>,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub mean_u_m: Option<f64>,
    pub clean_fraction_of_c: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

impl EpochMetrics {
    /// Fields that describe `f1` alone.
    pub fn primary_view(&self) -> (usize, usize, f64, f64, f64, f64) {
        (self.epoch, self.selected, self.l_c1, self.val_precision, self.val_recall, self.val_f1)
    }
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect()
}

/// Sentences the validation F1 is measured on, with the vocabularies
/// needed to run the model over them.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub sentences: &'a [Sentence],
    pub words: &'a WordVocab,
    pub tags: &'a TagVocabulary,
}

impl Validation<'_> {
    fn evaluate(&self, model: &JointModel) -> Result<EvalReport> {
        evaluate(model, self.words, self.tags, self.sentences)
    }
}

/// Where initial data-uncertainty probabilities come from.
#[derive(Debug, Clone, Default)]
pub enum DataScorer {
    /// Copy of `f1` trained for one epoch on a `warm_fraction` subsample.
    #[default]
    WarmPass,
    /// Externally computed per-token probabilities keyed by instance id.
    Imported(HashMap<u32, TokenMarginals>),
}

#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub best: DualModel,
    pub last: DualModel,
    pub best_epoch: usize,
    pub state: SelectionState,
    pub log: Vec<EpochMetrics>,
    pub data_scores: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub best: Learner,
    pub last: Learner,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

fn shuffled(ids: &[u32], seed: u64, path: &[u64]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.shuffle(&mut rng::stream(seed, path));
    v
}

/// Ascending by score, ties by id.
fn easy_to_hard(ids: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.sort_by(|&a, &b| scores[a as usize].total_cmp(&scores[b as usize]).then(a.cmp(&b)));
    v
}

/// Shuffled batches in ascending order of mean score, ties by position.
fn easy_to_hard_batches(ids: &[u32], scores: &[f64], batch: usize, seed: u64, path: &[u64]) -> Vec<u32> {
    let shuffled = shuffled(ids, seed, path);
    let mut chunks: Vec<(f64, &[u32])> = shuffled.chunks(batch).map(|c| (mean(c.iter().map(|&i| scores[i as usize])), c)).collect();
    chunks.sort_by(|a, b| a.0.total_cmp(&b.0));
    chunks.into_iter().flat_map(|(_, c)| c.iter().copied()).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_inputs(data: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set has no instances".into()));
    }
    if data.instances.iter().enumerate().any(|(i, inst)| inst.id as usize != i) {
        return Err(Error::Config("instance ids must equal their dataset index".into()));
    }
    Ok(())
}

fn vocab_size(data: &Dataset, words: &WordVocab) -> Result<usize> {
    let v = words.len();
    if data.tokens.iter().flatten().any(|&w| w as usize >= v) {
        return Err(Error::Config("dataset token ids exceed the word vocabulary".into()));
    }
    Ok(v)
}

/// Warms a copy of `model` on a random subsample and scores `D` with it.
fn warm_pass_scores(model: &JointModel, data: &Dataset, config: &TrainConfig, pool: Option<&NegativePool>) -> Result<Vec<f64>> {
    let mut scorer = Learner::new(model.clone(), config.learning_rate);
    let all: Vec<u32> = (0..data.len() as u32).collect();
    let take = ((config.warm_fraction * data.len() as f64).ceil() as usize).clamp(1, data.len());
    let sample = &shuffled(&all, config.shuffle_seed, &[0x3A]);
    let warm_cfg = TrainConfig { dropout_seed: rng::derive_seed(config.dropout_seed, &[0x3A]), ..config.clone() };
    for (step, chunk) in sample[..take].chunks(config.batch_size).enumerate() {
        let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i as usize]).collect();
        train_step_single(&mut scorer, data, &batch, &warm_cfg, StepContext { epoch: 0, step: step as u64, negatives: pool })?;
    }
    let scores = uncertainty::score_dataset(&scorer.model, data, config.data_uncertainty, None)?;
    Ok(scores.into_iter().map(|s| s.normalized).collect())
}

fn negative_pool(data: &Dataset, config: &TrainConfig) -> Option<NegativePool> {
    config.negative_queries.then(|| NegativePool::new(data, rng::derive_seed(config.shuffle_seed, &[0x4E])))
}

/// Full bootstrap run. `tags` fixes the tag count; `words` the vocabulary size.
pub fn run_bootstrap(data: &Dataset, validation: Validation<'_>, config: &TrainConfig, scorer: &DataScorer) -> Result<BootstrapOutcome> {
    check_inputs(data, config)?;
    let v = vocab_size(data, validation.words)?;
    let c = validation.tags.num_tags();
    let n = data.len();
    let mut dual = DualModel::new(config, v, c);
    let pool = negative_pool(data, config);
    let mut warnings = Vec::new();
    let mut state = SelectionState { universe: n, ..Default::default() };

    let mut scores: Option<Vec<f64>> = None;
    if config.tau_data < 1.0 {
        let s = match scorer {
            DataScorer::WarmPass => warm_pass_scores(&dual.f1.model, data, config, pool.as_ref())?,
            DataScorer::Imported(probs) => {
                uncertainty::score_external(probs, data, c, config.data_uncertainty)?.into_iter().map(|s| s.normalized).collect()
            }
        };
        scores = Some(s);
    }
    let data_scores = scores.clone();
    let (initial, fallback) = match &scores {
        Some(s) => select(s, config.tau_data, config.initial_quantile, config.max_selected_fraction),
        None => ((0..n as u32).collect(), false),
    };
    if fallback {
        warnings.push(format!(
            "initial selection with tau_d = {} was degenerate; kept the {} least uncertain fraction ({} instances)",
            config.tau_data,
            config.initial_quantile,
            initial.len()
        ));
    }
    let initial_mean = scores.as_ref().map(|s| mean(s.iter().copied()));
    state.push(initial, initial_mean, None, fallback);

    let curriculum = config.tau_model < 1.0;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, DualModel)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        state.iteration = epoch;
        let order = match (&scores, curriculum) {
            (Some(s), true) => match config.curriculum {
                Curriculum::Instances => easy_to_hard(&state.selected, s),
                Curriculum::Batches => easy_to_hard_batches(&state.selected, s, config.batch_size, config.shuffle_seed, &[epoch as u64]),
            },
            _ => shuffled(&state.selected, config.shuffle_seed, &[epoch as u64]),
        };
        let mut steps = Vec::new();
        let mut aborted = false;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i as usize]).collect();
            match train_step(
                &mut dual,
                data,
                &batch,
                config,
                StepContext { epoch: epoch as u64, step: step as u64, negatives: pool.as_ref() },
            ) {
                Ok(l) => steps.push(l),
                Err(Error::NonFinite(what)) => {
                    warnings.push(format!("epoch {epoch} step {step}: non-finite {what}; epoch aborted"));
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let trained_on = state.selected.len();

        let mut mean_u_m = None;
        let mut fallback = false;
        if curriculum {
            let mc = McConfig { seed: rng::derive_seed(config.mc().seed, &[epoch as u64]), ..config.mc() };
            let um: Vec<f64> = uncertainty::score_dataset(&dual.f1.model, data, UncertaintyKind::ProbabilityVariance, Some(&mc))?
                .into_iter()
                .map(|s| s.normalized)
                .collect();
            mean_u_m = Some(mean(um.iter().copied()));
            let (mut next, fb) = select(&um, config.tau_model, config.iteration_quantile, 1.0);
            fallback = fb;
            if config.accumulate {
                let merged: BTreeSet<u32> = next.iter().chain(&state.selected).copied().collect();
                next = merged.into_iter().collect();
            }
            scores = Some(um);
            let report = validation.evaluate(&dual.f1.model)?;
            log.push(epoch_record(epoch, trained_on, &steps, Some(&report), mean_u_m, aborted, true));
            state.push(next, mean_u_m, Some(report.f1), fallback);
        } else {
            let report = validation.evaluate(&dual.f1.model)?;
            log.push(epoch_record(epoch, trained_on, &steps, Some(&report), None, aborted, true));
            let keep = state.selected.clone();
            state.push(keep, mean_u_m, Some(report.f1), fallback);
        }

        let f1 = log.last().expect("just pushed").val_f1;
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, dual.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(BootstrapOutcome { best, last: dual, best_epoch, state, log, data_scores, warnings })
}

fn epoch_record(
    epoch: usize,
    selected: usize,
    steps: &[StepLosses],
    report: Option<&EvalReport>,
    mean_u_m: Option<f64>,
    aborted: bool,
    dual: bool,
) -> EpochMetrics {
    let (p, r, f) = report.map_or((0.0, 0.0, 0.0), |r| (r.precision, r.recall, r.f1));
    EpochMetrics {
        epoch,
        selected,
        l_c1: mean(steps.iter().map(|s| s.crf_f1)),
        l_c2: dual.then(|| mean(steps.iter().map(|s| s.crf_f2))),
        l_e: dual.then(|| mean(steps.iter().map(|s| s.ensemble))),
        val_precision: p,
        val_recall: r,
        val_f1: f,
        mean_u_m,
        clean_fraction_of_c: None,
        aborted,
    }
}

/// Single model on all of `D`, CRF loss only, same stopping rule.
pub fn train_baseline(data: &Dataset, validation: Validation<'_>, config: &TrainConfig) -> Result<BaselineOutcome> {
    check_inputs(data, config)?;
    let v = vocab_size(data, validation.words)?;
    let c = validation.tags.num_tags();
    let mut learner = Learner::new(init_model(config, v, c, 1), config.learning_rate);
    let pool = negative_pool(data, config);
    let all: Vec<u32> = (0..data.len() as u32).collect();
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize, Learner)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let order = shuffled(&all, config.shuffle_seed, &[epoch as u64]);
        let mut steps = Vec::new();
        let mut aborted = false;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i as usize]).collect();
            match train_step_single(
                &mut learner,
                data,
                &batch,
                config,
                StepContext { epoch: epoch as u64, step: step as u64, negatives: pool.as_ref() },
            ) {
                Ok(l) => steps.push(StepLosses { crf_f1: l, total: l, ..Default::default() }),
                Err(Error::NonFinite(what)) => {
                    warnings.push(format!("epoch {epoch} step {step}: non-finite {what}; epoch aborted"));
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let report = validation.evaluate(&learner.model)?;
        log.push(epoch_record(epoch, all.len(), &steps, Some(&report), None, aborted, false));
        if best.as_ref().is_none_or(|(b, _, _)| report.f1 > *b) {
            best = Some((report.f1, epoch, learner.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(BaselineOutcome { best, last: learner, best_epoch, log, warnings })
}

/// Fills `clean_fraction_of_c` from audit rows (`rows[e - 1]` describes the
/// set trained on in epoch `e`).
pub fn annotate_clean_fraction(log: &mut [EpochMetrics], rows: &[crate::eval::AuditRow]) {
    for m in log.iter_mut() {
        if let Some(row) = rows.get(m.epoch - 1) {
            m.clean_fraction_of_c = Some(row.clean_fraction_selected);
        }
    }
}

/// Training recipes compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    WsPv,
    EntropyPv,
    WsPvEnsembled,
    EntropyPvEnsembled,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::WsPv, Variant::EntropyPv, Variant::WsPvEnsembled, Variant::EntropyPvEnsembled];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::WsPv => "ws-pv",
            Variant::EntropyPv => "entropy-pv",
            Variant::WsPvEnsembled => "ws-pv-ensembled",
            Variant::EntropyPvEnsembled => "entropy-pv-ensembled",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn is_ensembled(self) -> bool {
        matches!(self, Variant::WsPvEnsembled | Variant::EntropyPvEnsembled)
    }

    /// Sets the data-uncertainty kind; non-ensembled variants get `alpha = 0`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Baseline => {}
            Variant::WsPv | Variant::WsPvEnsembled => c.data_uncertainty = UncertaintyKind::WinningScore,
            Variant::EntropyPv | Variant::EntropyPvEnsembled => c.data_uncertainty = UncertaintyKind::Entropy,
        }
        if !self.is_ensembled() {
            c.alpha = 0.0;
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TrainConfig {
    /// Derives the init, dropout and shuffle seeds from one run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = rng::derive_seed(seed, &[1]);
        self.dropout_seed = rng::derive_seed(seed, &[2]);
        self.shuffle_seed = rng::derive_seed(seed, &[3]);
        self
    }
}

/// Result of one variant run, reduced to what callers persist.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: Variant,
    pub best: JointModel,
    pub best_partner: Option<JointModel>,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    pub state: Option<SelectionState>,
    pub warnings: Vec<String>,
}

pub fn run_variant(
    variant: Variant,
    data: &Dataset,
    validation: Validation<'_>,
    config: &TrainConfig,
    scorer: &DataScorer,
) -> Result<RunOutcome> {
    let config = variant.apply(config);
    if variant == Variant::Baseline {
        let out = train_baseline(data, validation, &config)?;
        return Ok(RunOutcome {
            variant,
            best: out.best.model,
            best_partner: None,
            best_epoch: out.best_epoch,
            log: out.log,
            state: None,
            warnings: out.warnings,
        });
    }
    let out = run_bootstrap(data, validation, &config, scorer)?;
    Ok(RunOutcome {
        variant,
        best: out.best.f1.model,
        best_partner: Some(out.best.f2.model),
        best_epoch: out.best_epoch,
        log: out.log,
        state: Some(out.state),
        warnings: out.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(rows: &[&[f64]]) -> TokenMarginals {
        TokenMarginals::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = tm(&[&[0.2, 0.3, 0.5], &[0.98, 0.01, 0.01]]);
        let term = ensemble_loss(&p, &p).unwrap();
        assert_eq!(term.loss, 0.0);
        assert!(term.grad_p.as_slice().iter().all(|&g| g == 0.0));
        assert!(term.grad_q.as_slice().iter().all(|&g| g == 0.0));
        let hard = tm(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(ensemble_loss(&hard, &hard).unwrap().loss, 0.0);
    }

    #[test]
    fn kl_worked_example() {
        let term = ensemble_loss(&tm(&[&[0.5, 0.5]]), &tm(&[&[0.25, 0.75]])).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((term.loss - oracle).abs() < 1e-15);
        assert!((term.loss - 0.1438).abs() < 5e-5);
    }

    #[test]
    fn kl_handles_zeros() {
        let term = ensemble_loss(&tm(&[&[1.0, 0.0]]), &tm(&[&[0.0, 1.0]])).unwrap();
        assert!(term.loss.is_finite() && term.loss > 0.0);
        assert!(term.grad_p.is_finite() && term.grad_q.is_finite());
    }

    #[test]
    fn selection_rules() {
        let s = [0.1, 0.9, 0.3, 0.6];
        assert_eq!(select(&s, 1.0, 0.5, 0.95), (vec![0, 1, 2, 3], false));
        assert_eq!(select(&s, 0.5, 0.5, 0.95), (vec![0, 2], false));
        // Empty selection falls back to the quantile rule.
        assert_eq!(select(&s, 0.05, 0.5, 0.95), (vec![0, 2], true));
        // Near-total selection too.
        assert_eq!(select(&s, 0.95, 0.75, 0.95), (vec![0, 2, 3], true));
        // Ties at the cut are kept together.
        assert_eq!(select(&[0.0; 5], 0.0, 0.7, 0.95), (vec![0, 1, 2, 3, 4], true));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { tau_model: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { mc_passes: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { mc_passes: 1, tau_model: 1.0, ..Default::default() }.validate().is_ok());
        assert_ne!(TrainConfig::default().hash(), TrainConfig { alpha: 0.5, ..Default::default() }.hash());
    }
}
