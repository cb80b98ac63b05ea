//! In-memory knowledge-graph store.
//!
//! Loads tab-separated triples, assigns dense integer ids in first-appearance
//! order, augments the graph with inverse relations and facts, and indexes
//! `(subject, relation) -> objects` for constant-time grouped neighbor access.
//! The store is immutable after construction and safe to share across threads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved marker appended to a relation label to name its inverse.
pub const INVERSE_SUFFIX: &str = "^-1";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `subject<TAB>relation<TAB>object`, got {found:?}")]
    MalformedLine {
        path: String,
        line: usize,
        found: String,
    },
    #[error("{path} contains no triples")]
    EmptyGraph { path: String },
    #[error("graph is already inverse-augmented")]
    AlreadyAugmented,
    #[error("relation label {0:?} uses the reserved inverse suffix {INVERSE_SUFFIX:?}")]
    ReservedLabel(String),
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("unknown relation id {0}")]
    UnknownRelation(u32),
    #[error("unknown entity label {0:?}")]
    UnknownEntityLabel(String),
    #[error("{path}:{line}: {message}")]
    BadQuestion {
        path: String,
        line: usize,
        message: String,
    },
}

/// Dense entity identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense relation identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// A directed fact `(subject, relation, object)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    fn get(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Immutable triple store with grouped adjacency.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    /// `true` at index r if relation r was added by inverse augmentation.
    inverse_flags: Vec<bool>,
    /// Number of forward relations; set by [`KnowledgeGraph::augment_inverse`].
    forward_relations: usize,
    triples: Vec<Triple>,
    adjacency: HashMap<(u32, u32), Vec<EntityId>>,
    /// Relations with a nonempty group per subject, ascending.
    subject_relations: Vec<Vec<RelationId>>,
}

impl KnowledgeGraph {
    /// Loads forward triples from a UTF-8 TSV file: one `subject<TAB>relation<TAB>object`
    /// per line, `#`-prefixed comment lines and blank lines ignored. Duplicate
    /// triples collapse to one (set semantics). Ids are assigned in
    /// first-appearance order, so the same file always produces the same ids.
    pub fn load_triples(path: &Path) -> Result<Self, KgError> {
        let text = fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_triples(&text, &path.display().to_string())
    }

    /// Parses TSV triple text; see [`KnowledgeGraph::load_triples`].
    pub fn parse_triples(text: &str, path: &str) -> Result<Self, KgError> {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut seen = HashSet::new();
        let mut triples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (s, r, o) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(s), Some(r), Some(o), None) if !s.is_empty() && !r.is_empty() && !o.is_empty() => {
                    (s, r, o)
                }
                _ => {
                    return Err(KgError::MalformedLine {
                        path: path.to_owned(),
                        line: idx + 1,
                        found: line.to_owned(),
                    })
                }
            };
            let triple = Triple::new(
                EntityId(entities.intern(s)),
                RelationId(relations.intern(r)),
                EntityId(entities.intern(o)),
            );
            if seen.insert(triple) {
                triples.push(triple);
            }
        }
        if triples.is_empty() {
            return Err(KgError::EmptyGraph {
                path: path.to_owned(),
            });
        }
        triples.sort_unstable();
        let inverse_flags = vec![false; relations.len()];
        let adjacency = build_adjacency(&triples);
        let subject_relations = build_subject_relations(&triples, entities.len());
        Ok(Self {
            entities,
            relations,
            inverse_flags,
            forward_relations: 0,
            triples,
            adjacency,
            subject_relations,
        })
    }

    /// Adds an inverse relation `r^-1` for every relation and an inverse fact
    /// `(o, r^-1, s)` for every fact `(s, r, o)`, then rebuilds the adjacency
    /// index. Inverse ids are `forward id + |forward relations|`, so partner
    /// lookup is arithmetic. Errors if the graph is already augmented.
    pub fn augment_inverse(mut self) -> Result<Self, KgError> {
        if self.inverse_flags.iter().any(|&f| f) {
            return Err(KgError::AlreadyAugmented);
        }
        for label in &self.relations.labels {
            if label.ends_with(INVERSE_SUFFIX) {
                return Err(KgError::ReservedLabel(label.clone()));
            }
        }
        let forward = self.relations.len();
        let inverse_labels: Vec<String> = self
            .relations
            .labels
            .iter()
            .map(|l| format!("{l}{INVERSE_SUFFIX}"))
            .collect();
        for label in &inverse_labels {
            self.relations.intern(label);
        }
        self.inverse_flags = vec![false; forward];
        self.inverse_flags.extend(std::iter::repeat(true).take(forward));
        self.forward_relations = forward;

        let mut augmented: Vec<Triple> = Vec::with_capacity(self.triples.len() * 2);
        for t in &self.triples {
            augmented.push(*t);
            augmented.push(Triple::new(
                t.object,
                RelationId(t.relation.0 + forward as u32),
                t.subject,
            ));
        }
        augmented.sort_unstable();
        augmented.dedup();
        self.adjacency = build_adjacency(&augmented);
        self.subject_relations = build_subject_relations(&augmented, self.entities.len());
        self.triples = augmented;
        Ok(self)
    }

    pub fn is_augmented(&self) -> bool {
        self.forward_relations > 0
    }

    /// Partner relation: `r^-1` for a forward relation, the forward relation
    /// for an inverse one. Only meaningful after augmentation.
    pub fn partner(&self, r: RelationId) -> Result<RelationId, KgError> {
        self.check_relation(r)?;
        let f = self.forward_relations as u32;
        if f == 0 {
            return Err(KgError::UnknownRelation(r.0));
        }
        Ok(if r.0 < f {
            RelationId(r.0 + f)
        } else {
            RelationId(r.0 - f)
        })
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        self.inverse_flags.get(r.0 as usize).copied().unwrap_or(false)
    }

    /// The grouped neighbor set `C_{e,r}`: objects of facts `(e, r, ·)`,
    /// ascending and duplicate-free. Empty slice when the group is empty.
    pub fn candidate_set(&self, e: EntityId, r: RelationId) -> Result<&[EntityId], KgError> {
        self.check_entity(e)?;
        self.check_relation(r)?;
        Ok(self
            .adjacency
            .get(&(e.0, r.0))
            .map_or(&[][..], Vec::as_slice))
    }

    /// Relations `r` for which `(e, r, ·)` has at least one fact, ascending.
    pub fn subject_relations(&self, e: EntityId) -> &[RelationId] {
        self.subject_relations
            .get(e.0 as usize)
            .map_or(&[][..], Vec::as_slice)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains_triple(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    pub fn entity_label(&self, e: EntityId) -> Result<&str, KgError> {
        self.entities
            .labels
            .get(e.0 as usize)
            .map(String::as_str)
            .ok_or(KgError::UnknownEntity(e.0))
    }

    pub fn relation_label(&self, r: RelationId) -> Result<&str, KgError> {
        self.relations
            .labels
            .get(r.0 as usize)
            .map(String::as_str)
            .ok_or(KgError::UnknownRelation(r.0))
    }

    pub fn entity_by_label(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation_by_label(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.relations.len() as u32).map(RelationId)
    }

    fn check_entity(&self, e: EntityId) -> Result<(), KgError> {
        if (e.0 as usize) < self.entities.len() {
            Ok(())
        } else {
            Err(KgError::UnknownEntity(e.0))
        }
    }

    fn check_relation(&self, r: RelationId) -> Result<(), KgError> {
        if (r.0 as usize) < self.relations.len() {
            Ok(())
        } else {
            Err(KgError::UnknownRelation(r.0))
        }
    }
}

fn build_adjacency(triples: &[Triple]) -> HashMap<(u32, u32), Vec<EntityId>> {
    let mut adjacency: HashMap<(u32, u32), Vec<EntityId>> = HashMap::new();
    // triples are sorted (subject, relation, object), so each group arrives
    // ascending and duplicate-free.
    for t in triples {
        adjacency
            .entry((t.subject.0, t.relation.0))
            .or_default()
            .push(t.object);
    }
    adjacency
}

fn build_subject_relations(triples: &[Triple], entity_count: usize) -> Vec<Vec<RelationId>> {
    let mut index = vec![Vec::new(); entity_count];
    for t in triples {
        let slot = &mut index[t.subject.0 as usize];
        if slot.last() != Some(&t.relation) {
            slot.push(t.relation);
        }
    }
    index
}

/// One question: text, topic entities anchoring it to the graph, optional gold
/// answers, and an optional candidate-answer pool (e.g. multiple-choice options).
#[derive(Clone, Debug)]
pub struct QuestionInstance {
    pub text: String,
    pub topics: Vec<EntityId>,
    pub answers: Vec<EntityId>,
    pub candidates: Option<Vec<EntityId>>,
}

#[derive(Deserialize)]
struct QuestionRecord {
    text: String,
    topics: Vec<String>,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    candidates: Option<Vec<String>>,
}

/// Loads questions from a JSONL file, one object per line:
/// `{"text": ..., "topics": [labels], "answers": [labels], "candidates": [labels]}`.
/// Topic labels must resolve in the graph; when candidates are present the
/// answers must be among them.
pub fn load_questions(path: &Path, g: &KnowledgeGraph) -> Result<Vec<QuestionInstance>, KgError> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| KgError::BadQuestion {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let record: QuestionRecord =
            serde_json::from_str(line).map_err(|e| bad(format!("invalid JSON: {e}")))?;
        if record.topics.is_empty() {
            return Err(bad("question needs at least one topic entity".into()));
        }
        let resolve = |labels: &[String]| -> Result<Vec<EntityId>, KgError> {
            labels
                .iter()
                .map(|l| {
                    g.entity_by_label(l)
                        .ok_or_else(|| bad(format!("unknown entity label {l:?}")))
                })
                .collect()
        };
        let topics = resolve(&record.topics)?;
        let answers = resolve(&record.answers)?;
        let candidates = record.candidates.as_deref().map(resolve).transpose()?;
        if let Some(c) = &candidates {
            let pool: HashSet<_> = c.iter().collect();
            if let Some(a) = answers.iter().find(|a| !pool.contains(a)) {
                return Err(bad(format!(
                    "answer {:?} is not among the candidates",
                    g.entity_label(*a).unwrap_or("?")
                )));
            }
        }
        out.push(QuestionInstance {
            text: record.text,
            topics,
            answers,
            candidates,
        });
    }
    Ok(out)
}
