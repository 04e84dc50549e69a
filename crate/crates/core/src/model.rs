//! Joint tagger: encoder + CRF, plus checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{self, CrfGrad, CrfParams, TokenMarginals};
use crate::encoder::{self, DropoutMasks, EncoderCache, EncoderParams, OOV};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::tagging::TagVocabulary;

/// Word-to-id table; id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordVocab {
    pub const UNKNOWN: &'static str = "<unk>";

    /// Sorted, deduplicated vocabulary over `tokens`.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        words.sort_unstable();
        words.dedup();
        words.retain(|w| w != Self::UNKNOWN);
        words.insert(0, Self::UNKNOWN.to_string());
        Self::from_words(words).expect("freshly built vocabulary is valid")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(Self::UNKNOWN) {
            return Err(Error::Checkpoint(format!("word vocabulary must start with {}", Self::UNKNOWN)));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(OOV)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn vocab_hash(words: &WordVocab, tags: &TagVocabulary) -> String {
    let mut h = Sha256::new();
    for w in words.words() {
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    for section in [tags.entity_types(), tags.relation_types()] {
        h.update(b"\x00");
        for t in section {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
    }
    hex(&h.finalize())
}

/// Which per-token distribution the uncertainty and ensemble code reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbabilitySource {
    /// CRF posterior marginals from forward–backward.
    #[default]
    CrfMarginals,
    /// Independent softmax over each token's emission scores.
    TokenSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub encoder: EncoderParams,
    pub crf: CrfParams,
    pub source: ProbabilitySource,
}

/// Result of one forward call.
#[derive(Debug, Clone)]
pub struct Forward {
    pub cache: EncoderCache,
    pub emissions: Matrix,
}

impl JointModel {
    pub fn init(vocab_size: usize, num_tags: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let encoder = EncoderParams::init(vocab_size, dim, rng);
        let mut crf = CrfParams::zeros(num_tags, 2 * dim);
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        for v in crf.projection.as_mut_slice() {
            *v = rng.gen_range(-bound..bound);
        }
        Self { encoder, crf, source: ProbabilitySource::default() }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn num_tags(&self) -> usize {
        self.crf.num_tags()
    }

    pub fn zeros_like(&self) -> Gradient {
        Gradient {
            encoder: EncoderParams::zeros(self.encoder.vocab_size(), self.dim()),
            crf: CrfParams::zeros(self.num_tags(), 2 * self.dim()),
        }
    }

    pub fn forward(&self, tokens: &[u32], query: usize, masks: DropoutMasks) -> Result<Forward> {
        let cache = encoder::encode(tokens, query, &self.encoder, masks)?;
        let emissions = self.crf.emissions(&cache.output);
        Ok(Forward { cache, emissions })
    }

    pub fn forward_deterministic(&self, tokens: &[u32], query: usize) -> Result<Forward> {
        self.forward(tokens, query, DropoutMasks::identity(tokens.len(), self.dim()))
    }

    pub fn probabilities(&self, fwd: &Forward) -> TokenMarginals {
        match self.source {
            ProbabilitySource::CrfMarginals => crf::token_marginals(&fwd.emissions, &self.crf),
            ProbabilitySource::TokenSoftmax => crf::softmax_marginals(&fwd.emissions),
        }
    }

    /// Gradient of `sum upstream * probabilities` w.r.t. emissions and CRF structure.
    pub fn probabilities_vjp(&self, fwd: &Forward, probs: &TokenMarginals, upstream: &Matrix) -> CrfGrad {
        match self.source {
            ProbabilitySource::CrfMarginals => crf::marginals_vjp(&fwd.emissions, &self.crf, upstream),
            ProbabilitySource::TokenSoftmax => {
                let c = self.num_tags();
                CrfGrad {
                    emissions: crf::softmax_vjp(probs, upstream),
                    transitions: Matrix::zeros(c, c),
                    start: vec![0.0; c],
                    end: vec![0.0; c],
                }
            }
        }
    }

    /// Viterbi tags in deterministic mode.
    pub fn decode(&self, tokens: &[u32], query: usize) -> Result<Vec<usize>> {
        let fwd = self.forward_deterministic(tokens, query)?;
        Ok(crf::viterbi_decode(&fwd.emissions, &self.crf).0)
    }

    /// Backpropagates `g` (emission and structure gradient) into `grad`.
    pub fn backward(&self, tokens: &[u32], query: usize, fwd: &Forward, g: &CrfGrad, grad: &mut Gradient) -> Result<()> {
        grad.crf.accumulate(g);
        let grad_u = self.crf.emissions_backward(&fwd.cache.output, &g.emissions, &mut grad.crf);
        encoder::encode_backward(tokens, query, &self.encoder, &fwd.cache, &grad_u, &mut grad.encoder)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.encoder.tensors().into_iter().collect();
        v.extend(self.crf.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.encoder.tensors_mut().into_iter().collect();
        v.extend(self.crf.tensors_mut());
        v
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.crf.is_finite()
    }
}

/// Gradient buffers shaped like a [`JointModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub encoder: EncoderParams,
    pub crf: CrfParams,
}

impl Gradient {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.encoder.tensors().into_iter().collect();
        v.extend(self.crf.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.encoder.tensors_mut().into_iter().collect();
        v.extend(self.crf.tensors_mut());
        v
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Gradient) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub const CHECKPOINT_FORMAT: &str = "joint-bootstrap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    vocab_hash: String,
    words: Vec<String>,
    entity_types: Vec<String>,
    relation_types: Vec<String>,
    probability_source: ProbabilitySource,
    dim: usize,
    tensors: Vec<TensorDump>,
}

const TENSOR_NAMES: [&str; 11] = [
    "encoder.embeddings",
    "encoder.roles",
    "encoder.mix_center",
    "encoder.mix_left",
    "encoder.mix_right",
    "encoder.mix_bias",
    "encoder.attention",
    "crf.projection",
    "crf.transitions",
    "crf.start",
    "crf.end",
];

fn tensor_shapes(vocab: usize, dim: usize, tags: usize) -> [Vec<usize>; 11] {
    [
        vec![vocab, dim],
        vec![3, dim],
        vec![dim, dim],
        vec![dim, dim],
        vec![dim, dim],
        vec![dim],
        vec![dim, dim],
        vec![tags, 2 * dim],
        vec![tags, tags],
        vec![tags],
        vec![tags],
    ]
}

/// A trained model with the vocabularies it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub words: WordVocab,
    pub tags: TagVocabulary,
    pub model: JointModel,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let shapes = tensor_shapes(self.words.len(), self.model.dim(), self.tags.num_tags());
        let tensors = TENSOR_NAMES
            .iter()
            .zip(shapes)
            .zip(self.model.tensors())
            .map(|((name, shape), data)| TensorDump { name: name.to_string(), shape, data: data.to_vec() })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash.clone(),
            vocab_hash: vocab_hash(&self.words, &self.tags),
            words: self.words.words().to_vec(),
            entity_types: self.tags.entity_types().to_vec(),
            relation_types: self.tags.relation_types().to_vec(),
            probability_source: self.model.source,
            dim: self.model.dim(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: file.version.to_string(), expected: CHECKPOINT_VERSION.to_string() });
        }
        let words = WordVocab::from_words(file.words)?;
        let tags = TagVocabulary::new(file.entity_types, file.relation_types)?;
        let hash = vocab_hash(&words, &tags);
        if hash != file.vocab_hash {
            return Err(Error::Checkpoint(format!("vocabulary hash {hash} != stored {}", file.vocab_hash)));
        }
        let dim = file.dim;
        if dim == 0 {
            return Err(Error::Checkpoint("hidden width must be positive".into()));
        }
        let shapes = tensor_shapes(words.len(), dim, tags.num_tags());
        if file.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Checkpoint(format!("{} tensors, expected {}", file.tensors.len(), TENSOR_NAMES.len())));
        }
        let mut model = JointModel {
            encoder: EncoderParams::zeros(words.len(), dim),
            crf: CrfParams::zeros(tags.num_tags(), 2 * dim),
            source: file.probability_source,
        };
        for ((dump, name), (shape, target)) in file.tensors.iter().zip(TENSOR_NAMES).zip(shapes.iter().zip(model.tensors_mut())) {
            if dump.name != name || &dump.shape != shape || dump.data.len() != target.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} shaped {:?}, expected {name:?} shaped {shape:?}",
                    dump.name, dump.shape
                )));
            }
            target.copy_from_slice(&dump.data);
        }
        if !model.is_finite() {
            return Err(Error::NonFinite("checkpoint tensors".into()));
        }
        Ok(Self { words, tags, model, config_hash: file.config_hash })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
