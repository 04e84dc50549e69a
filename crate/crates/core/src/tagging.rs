//! Query-position tagging scheme.
//!
//! A sentence with `m` gold entities yields `m` instances, one per entity
//! start `p`. In the instance for `p` the query entity carries `B-E:t`/`I-E:t`
//! tags, every entity that the query entity points to carries `B-R:r`/`I-R:r`
//! tags for the relation type `r`, and everything else is `O`. Relations are
//! directed: the tail of a relation is only tagged in its head's instance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub span: Span,
    pub kind: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMention {
    pub head: usize,
    pub kind: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationMention>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks bounds, overlap, type ids and relation endpoints.
    pub fn validate(&self, vocab: &TagVocabulary) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSentence(msg));
        if self.tokens.is_empty() {
            return bad("sentence has no tokens".into());
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.span.is_empty() || e.span.end > self.tokens.len() {
                return bad(format!("entity {i} span {:?} out of bounds (n = {})", e.span, self.len()));
            }
            if e.kind >= vocab.num_entity_types() {
                return bad(format!("entity {i} has unknown type id {}", e.kind));
            }
            for (j, other) in self.entities.iter().enumerate().skip(i + 1) {
                if e.span.overlaps(&other.span) {
                    return bad(format!("entities {i} {:?} and {j} {:?} overlap", e.span, other.span));
                }
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.head >= self.entities.len() || r.tail >= self.entities.len() {
                return bad(format!("relation {i} references a missing entity"));
            }
            if r.head == r.tail {
                return bad(format!("relation {i} links entity {} to itself", r.head));
            }
            if r.kind >= vocab.num_relation_types() {
                return bad(format!("relation {i} has unknown type id {}", r.kind));
            }
        }
        Ok(())
    }

    /// Gold triplets expressed by this sentence's annotation.
    pub fn gold_triplets(&self) -> BTreeSet<Triplet> {
        self.relations
            .iter()
            .map(|r| {
                let head = self.entities[r.head];
                Triplet { head: head.span, head_type: head.kind, relation: r.kind, tail: self.entities[r.tail].span }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    EntityBegin(usize),
    EntityInside(usize),
    RelationBegin(usize),
    RelationInside(usize),
}

impl Tag {
    fn is_inside(self) -> bool {
        matches!(self, Tag::EntityInside(_) | Tag::RelationInside(_))
    }

    /// The `B-` tag of the same label, `O` for `O`.
    fn begin_form(self) -> Tag {
        match self {
            Tag::EntityInside(t) => Tag::EntityBegin(t),
            Tag::RelationInside(r) => Tag::RelationBegin(r),
            other => other,
        }
    }

    /// Whether `self` may directly follow `prev` under BIO.
    fn continues(self, prev: Tag) -> bool {
        match self {
            Tag::EntityInside(t) => matches!(prev, Tag::EntityBegin(u) | Tag::EntityInside(u) if u == t),
            Tag::RelationInside(r) => {
                matches!(prev, Tag::RelationBegin(u) | Tag::RelationInside(u) if u == r)
            }
            _ => true,
        }
    }
}

/// Closed tag set: `O`, then `B-E:t`/`I-E:t` per entity type, then
/// `B-R:r`/`I-R:r` per relation type. `O` is always id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

impl TagVocabulary {
    pub const OUTSIDE: usize = 0;

    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for name in entity_types.iter() {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate entity type {name:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for name in relation_types.iter() {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate relation type {name:?}")));
            }
        }
        Ok(Self { entity_types, relation_types })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn num_relation_types(&self) -> usize {
        self.relation_types.len()
    }

    /// Number of distinct tags.
    pub fn num_tags(&self) -> usize {
        1 + 2 * self.entity_types.len() + 2 * self.relation_types.len()
    }

    pub fn entity_type_id(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|n| n == name)
    }

    pub fn relation_type_id(&self, name: &str) -> Option<usize> {
        self.relation_types.iter().position(|n| n == name)
    }

    pub fn id(&self, tag: Tag) -> usize {
        let e = self.entity_types.len();
        match tag {
            Tag::Outside => 0,
            Tag::EntityBegin(t) => 1 + 2 * t,
            Tag::EntityInside(t) => 2 + 2 * t,
            Tag::RelationBegin(r) => 1 + 2 * e + 2 * r,
            Tag::RelationInside(r) => 2 + 2 * e + 2 * r,
        }
    }

    /// Inverse of [`TagVocabulary::id`]. Panics on out-of-range ids.
    pub fn tag(&self, id: usize) -> Tag {
        assert!(id < self.num_tags(), "tag id {id} out of range");
        if id == 0 {
            return Tag::Outside;
        }
        let e = self.entity_types.len();
        let k = id - 1;
        if k < 2 * e {
            if k.is_multiple_of(2) {
                Tag::EntityBegin(k / 2)
            } else {
                Tag::EntityInside(k / 2)
            }
        } else {
            let k = k - 2 * e;
            if k.is_multiple_of(2) {
                Tag::RelationBegin(k / 2)
            } else {
                Tag::RelationInside(k / 2)
            }
        }
    }

    pub fn name(&self, id: usize) -> String {
        match self.tag(id) {
            Tag::Outside => "O".to_string(),
            Tag::EntityBegin(t) => format!("B-E:{}", self.entity_types[t]),
            Tag::EntityInside(t) => format!("I-E:{}", self.entity_types[t]),
            Tag::RelationBegin(r) => format!("B-R:{}", self.relation_types[r]),
            Tag::RelationInside(r) => format!("I-R:{}", self.relation_types[r]),
        }
    }
}

/// One (sentence, query position) pair with its gold tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u32,
    /// Index of the source sentence in its corpus.
    pub sentence: usize,
    pub query: usize,
    pub tags: Vec<usize>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: Span,
    pub head_type: usize,
    pub relation: usize,
    pub tail: Span,
}

fn write_span(tags: &mut [usize], span: Span, begin: usize, inside: usize) {
    tags[span.start] = begin;
    for t in tags.iter_mut().take(span.end).skip(span.start + 1) {
        *t = inside;
    }
}

/// Builds one instance per gold entity, anchored at the entity's first token.
/// Instance ids are `first_id`, `first_id + 1`, ... in entity order.
pub fn build_instances(sentence_index: usize, sentence: &Sentence, vocab: &TagVocabulary, first_id: u32) -> Result<Vec<Instance>> {
    sentence.validate(vocab)?;
    let n = sentence.len();
    let mut out = Vec::with_capacity(sentence.entities.len());
    for (ei, entity) in sentence.entities.iter().enumerate() {
        let mut tags = vec![TagVocabulary::OUTSIDE; n];
        // Earlier relations win if one head points at the same tail twice.
        for rel in sentence.relations.iter().rev().filter(|r| r.head == ei) {
            let tail = sentence.entities[rel.tail].span;
            write_span(&mut tags, tail, vocab.id(Tag::RelationBegin(rel.kind)), vocab.id(Tag::RelationInside(rel.kind)));
        }
        write_span(&mut tags, entity.span, vocab.id(Tag::EntityBegin(entity.kind)), vocab.id(Tag::EntityInside(entity.kind)));
        out.push(Instance { id: first_id + out.len() as u32, sentence: sentence_index, query: entity.span.start, tags });
    }
    Ok(out)
}

/// Rewrites every `I-X` that does not continue a `B-X`/`I-X` run into `B-X`.
pub fn repair_bio(tags: &[usize], vocab: &TagVocabulary) -> Vec<usize> {
    let mut prev = Tag::Outside;
    tags.iter()
        .map(|&id| {
            let mut tag = vocab.tag(id);
            if tag.is_inside() && !tag.continues(prev) {
                tag = tag.begin_form();
            }
            prev = tag;
            vocab.id(tag)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpanLabel {
    Entity(usize),
    Relation(usize),
}

/// Maximal labelled runs of a BIO-valid sequence.
fn labelled_spans(tags: &[usize], vocab: &TagVocabulary) -> Vec<(Span, SpanLabel)> {
    let mut spans: Vec<(Span, SpanLabel)> = Vec::new();
    for (i, &id) in tags.iter().enumerate() {
        match vocab.tag(id) {
            Tag::Outside => {}
            Tag::EntityBegin(t) => spans.push((Span::new(i, i + 1), SpanLabel::Entity(t))),
            Tag::RelationBegin(r) => spans.push((Span::new(i, i + 1), SpanLabel::Relation(r))),
            Tag::EntityInside(_) | Tag::RelationInside(_) => {
                if let Some(last) = spans.last_mut() {
                    last.0.end = i + 1;
                }
            }
        }
    }
    spans
}

/// Reads the triplets encoded by one instance's tags. Malformed sequences
/// are repaired first; the result is empty when no entity span covers `p`.
pub fn decode_triplets(tags: &[usize], vocab: &TagVocabulary, p: usize) -> Vec<Triplet> {
    let repaired = repair_bio(tags, vocab);
    let spans = labelled_spans(&repaired, vocab);
    let head = spans.iter().find_map(|&(span, label)| match label {
        SpanLabel::Entity(t) if span.contains(p) => Some((span, t)),
        _ => None,
    });
    let Some((head, head_type)) = head else {
        return Vec::new();
    };
    spans
        .iter()
        .filter_map(|&(span, label)| match label {
            SpanLabel::Relation(r) => Some(Triplet { head, head_type, relation: r, tail: span }),
            SpanLabel::Entity(_) => None,
        })
        .collect()
}

/// Every token position is queried at inference time.
pub fn enumerate_inference_queries(sentence: &Sentence) -> Vec<usize> {
    (0..sentence.len()).collect()
}
