//! Annotated corpora, their JSON-lines format and the provenance-free
//! training view.
//!
//! File layout (`v1`): the first line is a header object
//!
//! ```text
//! {"format":"joint-bootstrap-corpus","version":"v1","entity_types":["PER",...],"relation_types":["works_for",...]}
//! ```
//!
//! and every following line is one sentence:
//!
//! ```text
//! {"tokens":["Bob","works","for","Acme"],"entities":[[0,1,"PER"],[3,4,"ORG"]],"relations":[[0,"works_for",1]]}
//! ```
//!
//! Entity spans are `[start, end)` token offsets; relations reference
//! entities by their index in `entities`. Sentences may carry an optional
//! `provenance` object written by the noise injector.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WordVocab;
use crate::tagging::{build_instances, EntityMention, Instance, RelationMention, Sentence, Span, TagVocabulary};

pub const CORPUS_FORMAT: &str = "joint-bootstrap-corpus";
pub const CORPUS_VERSION: &str = "v1";

/// One applied corruption. Type fields are type ids in the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    RelationFlip { relation: usize, from: usize, to: usize },
    RelationDrop { head: usize, relation_type: usize, tail: usize },
    RelationHallucination { head: usize, relation_type: usize, tail: usize },
    EntityTypeFlip { entity: usize, from: usize, to: usize },
    SpanShift { entity: usize, from: Span, to: Span },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub corrupted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<Corruption>,
    /// Query positions whose instance tags differ from the clean annotation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrupted_queries: Vec<usize>,
}

impl Provenance {
    pub fn clean() -> Self {
        Self { corrupted: false, corruptions: Vec::new(), corrupted_queries: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tags: TagVocabulary,
    pub sentences: Vec<Sentence>,
    /// Parallel to `sentences`; `None` when unknown.
    pub provenance: Vec<Option<Provenance>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    Clean,
    Corrupted,
    Unknown,
}

/// Training view of a corpus: token ids and gold-tagged instances, with no
/// access to provenance. Instance ids equal their index in `instances`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokens: Vec<Vec<u32>>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn tokens_of(&self, inst: &Instance) -> &[u32] {
        &self.tokens[inst.sentence]
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    tokens: Vec<String>,
    entities: Vec<(usize, usize, String)>,
    relations: Vec<(usize, String, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl Corpus {
    pub fn new(tags: TagVocabulary, sentences: Vec<Sentence>) -> Self {
        let provenance = vec![None; sentences.len()];
        Self { tags, sentences, provenance }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sub-corpus with the given sentence indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            tags: self.tags.clone(),
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }

    pub fn without_provenance(&self) -> Corpus {
        Corpus::new(self.tags.clone(), self.sentences.clone())
    }

    pub fn word_vocab(&self) -> WordVocab {
        WordVocab::build(self.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
    }

    pub fn dataset(&self, words: &WordVocab) -> Result<Dataset> {
        let mut instances = Vec::new();
        let mut tokens = Vec::with_capacity(self.sentences.len());
        for (i, s) in self.sentences.iter().enumerate() {
            instances.extend(build_instances(i, s, &self.tags, instances.len() as u32)?);
            tokens.push(words.encode(&s.tokens));
        }
        Ok(Dataset { tokens, instances })
    }

    /// Per-instance clean/corrupted flags, aligned with [`Corpus::dataset`] ids.
    pub fn instance_status(&self) -> Vec<InstanceStatus> {
        let mut out = Vec::new();
        for (s, prov) in self.sentences.iter().zip(&self.provenance) {
            for e in &s.entities {
                out.push(match prov {
                    None => InstanceStatus::Unknown,
                    Some(p) if p.corrupted_queries.contains(&e.span.start) => InstanceStatus::Corrupted,
                    Some(_) => InstanceStatus::Clean,
                });
            }
        }
        out
    }

    pub fn has_provenance(&self) -> bool {
        !self.provenance.is_empty() && self.provenance.iter().all(Option::is_some)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION.into(),
            entity_types: self.tags.entity_types().to_vec(),
            relation_types: self.tags.relation_types().to_vec(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (s, prov) in self.sentences.iter().zip(&self.provenance) {
            let line = Line {
                tokens: s.tokens.clone(),
                entities: s.entities.iter().map(|e| (e.span.start, e.span.end, self.tags.entity_types()[e.kind].clone())).collect(),
                relations: s.relations.iter().map(|r| (r.head, self.tags.relation_types()[r.kind].clone(), r.tail)).collect(),
                provenance: prov.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_text = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })??;
        let header: Header = serde_json::from_str(&header_text).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        if header.format != CORPUS_FORMAT {
            return Err(Error::Parse { line: 1, msg: format!("unknown format {:?}", header.format) });
        }
        if header.version != CORPUS_VERSION {
            return Err(Error::Version { found: header.version, expected: CORPUS_VERSION.into() });
        }
        let tags = TagVocabulary::new(header.entity_types, header.relation_types)?;
        let mut corpus = Corpus::new(tags, Vec::new());
        for (i, text) in lines.enumerate() {
            let line_no = i + 2;
            let text = text?;
            if text.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let line: Line = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            let entities = line
                .entities
                .iter()
                .map(|(s, e, ty)| {
                    let kind = corpus.tags.entity_type_id(ty).ok_or_else(|| parse_err(format!("unknown entity type {ty:?}")))?;
                    Ok(EntityMention { span: Span::new(*s, *e), kind })
                })
                .collect::<Result<Vec<_>>>()?;
            let relations = line
                .relations
                .iter()
                .map(|(h, ty, t)| {
                    let kind = corpus.tags.relation_type_id(ty).ok_or_else(|| parse_err(format!("unknown relation type {ty:?}")))?;
                    Ok(RelationMention { head: *h, kind, tail: *t })
                })
                .collect::<Result<Vec<_>>>()?;
            let sentence = Sentence { tokens: line.tokens, entities, relations };
            sentence.validate(&corpus.tags).map_err(|e| parse_err(e.to_string()))?;
            corpus.sentences.push(sentence);
            corpus.provenance.push(line.provenance);
        }
        Ok(corpus)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }

    /// One line per instance: id, sentence, query, status and the corruptions
    /// of its sentence.
    pub fn write_provenance_sidecar(&self, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            instance_id: u32,
            sentence: usize,
            query: usize,
            status: InstanceStatus,
            corruptions: &'a [Corruption],
        }
        let mut id = 0u32;
        for (si, (s, prov)) in self.sentences.iter().zip(&self.provenance).enumerate() {
            for e in &s.entities {
                let status = match prov {
                    None => InstanceStatus::Unknown,
                    Some(p) if p.corrupted_queries.contains(&e.span.start) => InstanceStatus::Corrupted,
                    Some(_) => InstanceStatus::Clean,
                };
                let corruptions = prov.as_ref().map_or(&[][..], |p| &p.corruptions[..]);
                serde_json::to_writer(&mut w, &Row { instance_id: id, sentence: si, query: e.span.start, status, corruptions })?;
                w.write_all(b"\n")?;
                id += 1;
            }
        }
        w.flush()?;
        Ok(())
    }
}
