//! Synthetic distant-supervision corpora with controllable label noise.
//!
//! A [`GrammarSpec`] fills templates such as `{PER} works for {ORG} .` with
//! lexicon names and distractor words. [`inject_noise`] then corrupts
//! relation labels and entity annotations at the requested rates and
//! records exactly what changed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Corruption, Provenance};
use crate::error::{Error, Result};
use crate::rng;
use crate::tagging::{build_instances, EntityMention, RelationMention, Sentence, Span, TagVocabulary};

/// One sentence pattern. Slots are written `{TYPE}` and numbered by order
/// of appearance; relations are `(head slot, relation type, tail slot)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    #[serde(default)]
    pub relations: Vec<(usize, String, usize)>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Up to this many distractor words before the template.
    pub max_prefix: usize,
    /// Up to this many distractor words after the template.
    pub max_suffix: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    /// Names per entity type; multi-token names are space separated.
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub templates: Vec<Template>,
    pub distractors: Vec<String>,
    pub jitter: Jitter,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Slot(usize),
}

/// Tag vocabulary, compiled templates and per-template slot lexicons.
type CompiledGrammar = (TagVocabulary, Vec<Compiled>, Vec<Vec<Vec<String>>>);

#[derive(Debug, Clone)]
struct Compiled {
    pieces: Vec<Piece>,
    slots: Vec<usize>,
    relations: Vec<(usize, usize, usize)>,
}

impl GrammarSpec {
    pub fn tag_vocabulary(&self) -> Result<TagVocabulary> {
        TagVocabulary::new(self.entity_types.clone(), self.relation_types.clone())
    }

    /// Checks declared types, non-empty lexicons and template slots.
    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }

    fn compile(&self) -> Result<CompiledGrammar> {
        let bad = |m: String| Err(Error::Config(m));
        let tags = self.tag_vocabulary()?;
        let mut lexicons = Vec::new();
        for ty in &self.entity_types {
            let names = self.lexicons.get(ty).map(Vec::as_slice).unwrap_or_default();
            let names: Vec<Vec<String>> =
                names.iter().map(|n| n.split_whitespace().map(String::from).collect::<Vec<_>>()).filter(|n| !n.is_empty()).collect();
            if names.is_empty() {
                return bad(format!("lexicon for {ty} is empty"));
            }
            lexicons.push(names);
        }
        if let Some(extra) = self.lexicons.keys().find(|k| tags.entity_type_id(k).is_none()) {
            return bad(format!("lexicon for undeclared type {extra}"));
        }
        if self.templates.is_empty() {
            return bad("grammar has no templates".into());
        }
        let mut compiled = Vec::new();
        for (ti, t) in self.templates.iter().enumerate() {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return bad(format!("template {ti} has weight {}", t.weight));
            }
            let mut pieces = Vec::new();
            let mut slots = Vec::new();
            for word in t.pattern.split_whitespace() {
                match word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                    Some(ty) => {
                        let Some(id) = tags.entity_type_id(ty) else {
                            return bad(format!("template {ti} uses undeclared type {ty}"));
                        };
                        pieces.push(Piece::Slot(slots.len()));
                        slots.push(id);
                    }
                    None => pieces.push(Piece::Word(word.to_string())),
                }
            }
            let mut relations = Vec::new();
            for (h, r, tl) in &t.relations {
                let Some(rid) = tags.relation_type_id(r) else {
                    return bad(format!("template {ti} uses undeclared relation {r}"));
                };
                if *h >= slots.len() || *tl >= slots.len() || h == tl {
                    return bad(format!("template {ti} relation {h} -> {tl} has bad slots"));
                }
                relations.push((*h, rid, *tl));
            }
            compiled.push(Compiled { pieces, slots, relations });
        }
        if (self.jitter.max_prefix > 0 || self.jitter.max_suffix > 0) && self.distractors.is_empty() {
            return bad("length jitter needs distractor words".into());
        }
        Ok((tags, compiled, lexicons))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: GrammarSpec = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Built-in grammar: PER/ORG/LOC and four relation types.
    pub fn standard() -> Self {
        let given = [
            "alice", "bruno", "chen", "dara", "emil", "fatima", "gustav", "hana", "ivan", "jun", "kofi", "lena", "marco", "nadia", "oscar",
            "priya", "quinn", "rosa", "sven", "tariq", "uma", "viktor", "wen", "yusuf",
        ];
        let family = ["adams", "bauer", "costa", "dubois", "evans", "fischer", "garcia", "haddad", "ito", "jensen", "kim", "lopez"];
        let mut per: Vec<String> = given.iter().map(|g| g.to_string()).collect();
        for (i, g) in given.iter().enumerate() {
            for f in family.iter().skip(i % 3).step_by(3) {
                per.push(format!("{g} {f}"));
            }
        }
        let stems = [
            "acme",
            "globex",
            "initech",
            "umbrella",
            "stark",
            "wayne",
            "tyrell",
            "cyberdyne",
            "hooli",
            "vandelay",
            "soylent",
            "oscorp",
            "wonka",
            "gringotts",
            "monarch",
            "aperture",
        ];
        let suffixes = ["corp", "labs", "group", "bank"];
        let mut org: Vec<String> = stems.iter().map(|s| s.to_string()).collect();
        for (i, s) in stems.iter().enumerate() {
            org.push(format!("{s} {}", suffixes[i % suffixes.len()]));
        }
        let loc = [
            "paris",
            "lagos",
            "lima",
            "oslo",
            "kyoto",
            "quito",
            "dakar",
            "hanoi",
            "perth",
            "tunis",
            "porto",
            "cairo",
            "new york",
            "buenos aires",
            "cape town",
            "hong kong",
            "san diego",
            "tel aviv",
            "kuala lumpur",
            "rio de janeiro",
        ];
        let t = |pattern: &str, relations: &[(usize, &str, usize)]| Template {
            pattern: pattern.to_string(),
            relations: relations.iter().map(|&(h, r, t)| (h, r.to_string(), t)).collect(),
            weight: 1.0,
        };
        let templates = vec![
            t("{PER} works for {ORG} .", &[(0, "works_for", 1)]),
            t("{PER} , an engineer at {ORG} , spoke on monday .", &[(0, "works_for", 1)]),
            t("{ORG} hired {PER} last year .", &[(1, "works_for", 0)]),
            t("{ORG} was founded by {PER} .", &[(0, "founded_by", 1)]),
            t("{PER} started {ORG} with friends .", &[(1, "founded_by", 0)]),
            t("{PER} founded {ORG} in {LOC} .", &[(1, "founded_by", 0), (1, "located_in", 2)]),
            t("{ORG} is based in {LOC} .", &[(0, "located_in", 1)]),
            t("{ORG} , headquartered in {LOC} , grew quickly .", &[(0, "located_in", 1)]),
            t("{PER} was born in {LOC} .", &[(0, "born_in", 1)]),
            t("{PER} , a native of {LOC} , joined {ORG} .", &[(0, "born_in", 1), (0, "works_for", 2)]),
            t("{PER} met {PER} in {LOC} .", &[]),
            t("{PER} visited {LOC} and {LOC} .", &[]),
            t("{ORG} and {ORG} announced a deal .", &[]),
            t("{PER} criticized {ORG} on television .", &[]),
        ];
        let distractors = [
            "yesterday",
            "reportedly",
            "however",
            "meanwhile",
            "officials",
            "said",
            "today",
            "sources",
            "noted",
            "again",
            "recently",
            "indeed",
            "still",
            "also",
        ];
        GrammarSpec {
            entity_types: vec!["PER".into(), "ORG".into(), "LOC".into()],
            relation_types: vec!["founded_by".into(), "works_for".into(), "located_in".into(), "born_in".into()],
            lexicons: BTreeMap::from([
                ("PER".to_string(), per),
                ("ORG".to_string(), org),
                ("LOC".to_string(), loc.iter().map(|s| s.to_string()).collect()),
            ]),
            templates,
            distractors: distractors.iter().map(|s| s.to_string()).collect(),
            jitter: Jitter { max_prefix: 2, max_suffix: 1 },
        }
    }
}

fn sample_sentence(
    compiled: &[Compiled],
    weights: &[f64],
    lexicons: &[Vec<Vec<String>>],
    grammar: &GrammarSpec,
    rng: &mut ChaCha8Rng,
) -> Sentence {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    let mut pick = compiled.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            pick = i;
            break;
        }
        x -= w;
    }
    let template = &compiled[pick];
    let mut tokens: Vec<String> = Vec::new();
    let prefix = rng.gen_range(0..=grammar.jitter.max_prefix);
    let suffix = rng.gen_range(0..=grammar.jitter.max_suffix);
    for _ in 0..prefix {
        tokens.push(grammar.distractors.choose(rng).expect("non-empty").clone());
    }
    let mut spans = vec![Span::new(0, 0); template.slots.len()];
    for piece in &template.pieces {
        match piece {
            Piece::Word(w) => tokens.push(w.clone()),
            Piece::Slot(s) => {
                let name = lexicons[template.slots[*s]].choose(rng).expect("non-empty");
                let start = tokens.len();
                tokens.extend(name.iter().cloned());
                spans[*s] = Span::new(start, tokens.len());
            }
        }
    }
    for _ in 0..suffix {
        tokens.push(grammar.distractors.choose(rng).expect("non-empty").clone());
    }
    Sentence {
        tokens,
        entities: spans.iter().zip(&template.slots).map(|(&span, &kind)| EntityMention { span, kind }).collect(),
        relations: template.relations.iter().map(|&(head, kind, tail)| RelationMention { head, kind, tail }).collect(),
    }
}

/// `size` clean sentences; sentence `i` depends only on `(seed, i)`.
pub fn generate_corpus(grammar: &GrammarSpec, size: usize, seed: u64) -> Result<Corpus> {
    let (tags, compiled, lexicons) = grammar.compile()?;
    let weights: Vec<f64> = grammar.templates.iter().map(|t| t.weight).collect();
    let sentences =
        (0..size).map(|i| sample_sentence(&compiled, &weights, &lexicons, grammar, &mut rng::stream(seed, &[i as u64]))).collect();
    let mut corpus = Corpus::new(tags, sentences);
    corpus.provenance = vec![Some(Provenance::clean()); size];
    Ok(corpus)
}

/// Gold relation mentions per relation type name.
pub fn relation_distribution(corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = corpus.tags.relation_types().iter().map(|r| (r.clone(), 0)).collect();
    for s in &corpus.sentences {
        for r in &s.relations {
            *out.get_mut(&corpus.tags.relation_types()[r.kind]).expect("declared") += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-sentence probability of one relation-label corruption.
    pub relation_rate: f64,
    /// Per-sentence probability of one entity corruption.
    pub entity_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("relation", self.relation_rate), ("entity", self.entity_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} noise rate must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Wrong label for an existing relation (flip, or drop when only one
/// relation type exists or by coin), or a hallucinated relation when the
/// sentence has none.
fn corrupt_relation(s: &mut Sentence, num_relations: usize, rng: &mut ChaCha8Rng) -> Option<Corruption> {
    if !s.relations.is_empty() {
        let j = rng.gen_range(0..s.relations.len());
        let flip = num_relations >= 2 && rng.gen_bool(2.0 / 3.0);
        if flip {
            let from = s.relations[j].kind;
            let mut to = rng.gen_range(0..num_relations - 1);
            if to >= from {
                to += 1;
            }
            s.relations[j].kind = to;
            return Some(Corruption::RelationFlip { relation: j, from, to });
        }
        let r = s.relations.remove(j);
        return Some(Corruption::RelationDrop { head: r.head, relation_type: r.kind, tail: r.tail });
    }
    let n = s.entities.len();
    if n < 2 || num_relations == 0 {
        return None;
    }
    let head = rng.gen_range(0..n);
    let mut tail = rng.gen_range(0..n - 1);
    if tail >= head {
        tail += 1;
    }
    let kind = rng.gen_range(0..num_relations);
    s.relations.push(RelationMention { head, kind, tail });
    Some(Corruption::RelationHallucination { head, relation_type: kind, tail })
}

/// Type flip or a one-token shift of a span that stays in bounds and clear
/// of the other entities.
fn corrupt_entity(s: &mut Sentence, num_types: usize, rng: &mut ChaCha8Rng) -> Option<Corruption> {
    if s.entities.is_empty() {
        return None;
    }
    let k = rng.gen_range(0..s.entities.len());
    let from = s.entities[k].span;
    let shifts: Vec<Span> = [-1isize, 1]
        .iter()
        .filter_map(|&d| {
            let start = from.start.checked_add_signed(d)?;
            let span = Span::new(start, from.end.checked_add_signed(d)?);
            let clear = span.end <= s.len() && s.entities.iter().enumerate().all(|(i, e)| i == k || !e.span.overlaps(&span));
            clear.then_some(span)
        })
        .collect();
    let want_shift = rng.gen_bool(0.5);
    if (want_shift || num_types < 2) && !shifts.is_empty() {
        let to = *shifts.choose(rng).expect("non-empty");
        s.entities[k].span = to;
        return Some(Corruption::SpanShift { entity: k, from, to });
    }
    if num_types < 2 {
        return None;
    }
    let old = s.entities[k].kind;
    let mut to = rng.gen_range(0..num_types - 1);
    if to >= old {
        to += 1;
    }
    s.entities[k].kind = to;
    Some(Corruption::EntityTypeFlip { entity: k, from: old, to })
}

/// Query positions of `noisy` whose instance differs from the clean one.
fn changed_queries(clean: &Sentence, noisy: &Sentence, tags: &TagVocabulary) -> Result<Vec<usize>> {
    let before: BTreeMap<usize, Vec<usize>> = build_instances(0, clean, tags, 0)?.into_iter().map(|i| (i.query, i.tags)).collect();
    let mut out = BTreeSet::new();
    for inst in build_instances(0, noisy, tags, 0)? {
        if before.get(&inst.query) != Some(&inst.tags) {
            out.insert(inst.query);
        }
    }
    Ok(out.into_iter().collect())
}

/// Corrupts each sentence independently; sentence `i` uses stream `(seed, i)`.
pub fn inject_noise(corpus: &Corpus, noise: &NoiseSpec) -> Result<Corpus> {
    noise.validate()?;
    let nr = corpus.tags.num_relation_types();
    let ne = corpus.tags.num_entity_types();
    let mut out = corpus.clone();
    for (i, (s, prov)) in out.sentences.iter_mut().zip(out.provenance.iter_mut()).enumerate() {
        let clean = s.clone();
        let mut rng = rng::stream(noise.seed, &[i as u64]);
        let hit_rel = rng.gen::<f64>() < noise.relation_rate;
        let hit_ent = rng.gen::<f64>() < noise.entity_rate;
        let mut corruptions = Vec::new();
        if hit_rel {
            corruptions.extend(corrupt_relation(s, nr, &mut rng));
        }
        if hit_ent {
            corruptions.extend(corrupt_entity(s, ne, &mut rng));
        }
        s.validate(&corpus.tags)?;
        let corrupted_queries = changed_queries(&clean, s, &corpus.tags)?;
        *prov = Some(Provenance { corrupted: !corruptions.is_empty(), corruptions, corrupted_queries });
    }
    Ok(out)
}

/// Realized per-sentence corruption fractions: (relation, entity, any).
pub fn realized_rates(corpus: &Corpus) -> (f64, f64, f64) {
    let n = corpus.len().max(1) as f64;
    let (mut rel, mut ent, mut any) = (0usize, 0usize, 0usize);
    for p in corpus.provenance.iter().flatten() {
        let r = p.corruptions.iter().any(|c| {
            matches!(c, Corruption::RelationFlip { .. } | Corruption::RelationDrop { .. } | Corruption::RelationHallucination { .. })
        });
        let e = p.corruptions.iter().any(|c| matches!(c, Corruption::EntityTypeFlip { .. } | Corruption::SpanShift { .. }));
        rel += usize::from(r);
        ent += usize::from(e);
        any += usize::from(p.corrupted);
    }
    (rel as f64 / n, ent as f64 / n, any as f64 / n)
}
