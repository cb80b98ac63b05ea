//! Retrieval interfaces over a completed propagation: ranked candidate
//! entities, attention-ranked supporting facts, and shortest-path connections
//! from candidates back to the topic entities.
//!
//! All three are pure functions of the propagation outputs with fixed tie
//! rules (score/attention descending, ids ascending), so results are
//! deterministic and `k`-prefix-stable.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::kg::{EntityId, Triple};
use crate::linalg::Scalar;
use crate::propagation::{score_of, AttentionRecords, RetrievalSubgraph};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("n must be at least 1")]
    ZeroN,
    #[error("path cap must be at least 1")]
    ZeroCap,
    #[error("entity {0} is outside the retrieval subgraph")]
    OutsideSubgraph(EntityId),
}

/// An entity with its question-conditioned score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCandidate<F> {
    pub entity: EntityId,
    pub score: F,
}

/// Result of node-level retrieval.
#[derive(Clone, Debug)]
pub struct NodeRetrieval<F> {
    /// Top-k reached entities, score descending, ids ascending on ties.
    pub hits: Vec<ScoredCandidate<F>>,
    /// Candidate-filter members that propagation never reached (score zero).
    pub unreached: Vec<EntityId>,
}

/// Top-k entities of the retrieval subgraph by score. With a candidate filter
/// the pool is `filter ∩ reached`; filter members outside the subgraph are
/// reported separately. Entities missing from `scores` count as zero.
pub fn node_retrieve<F: Scalar>(
    scores: &BTreeMap<EntityId, F>,
    sub: &RetrievalSubgraph,
    k: usize,
    candidates_filter: Option<&[EntityId]>,
) -> Result<NodeRetrieval<F>, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    let mut unreached = Vec::new();
    let pool: Vec<EntityId> = match candidates_filter {
        Some(filter) => {
            let unique: BTreeSet<EntityId> = filter.iter().copied().collect();
            let mut pool = Vec::new();
            for e in unique {
                if sub.is_reached(e) {
                    pool.push(e);
                } else {
                    unreached.push(e);
                }
            }
            pool
        }
        None => sub.reached().iter().copied().collect(),
    };
    let mut hits: Vec<ScoredCandidate<F>> = pool
        .into_iter()
        .map(|e| ScoredCandidate {
            entity: e,
            score: score_of(scores, e),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.entity.cmp(&b.entity))
    });
    hits.truncate(k);
    Ok(NodeRetrieval { hits, unreached })
}

/// A fact edge ranked by its maximum attention across layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedFact<F> {
    pub edge: Triple,
    pub alpha_max: F,
}

/// Top-n incoming edges `(s, r, e)` of one entity, ranked by maximum
/// attention across message-passing layers; `(s, r)` ascending on ties.
/// An entity with no incoming reached edge yields an empty list.
pub fn edge_retrieve<F: Scalar>(
    records: &AttentionRecords<F>,
    e: EntityId,
    n: usize,
) -> Result<Vec<RankedFact<F>>, RetrieveError> {
    if n == 0 {
        return Err(RetrieveError::ZeroN);
    }
    let mut facts: Vec<RankedFact<F>> = records
        .iter()
        .filter(|(t, _)| t.object == e)
        .map(|(t, rec)| RankedFact {
            edge: *t,
            alpha_max: rec.alpha_max,
        })
        .collect();
    facts.sort_by(|a, b| {
        b.alpha_max
            .partial_cmp(&a.alpha_max)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.edge.subject, a.edge.relation).cmp(&(b.edge.subject, b.edge.relation)))
    });
    facts.truncate(n);
    Ok(facts)
}

/// A directed edge sequence from `from` to `to` inside the retrieval
/// subgraph; empty when the two coincide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    pub from: EntityId,
    pub to: EntityId,
    pub edges: Vec<Triple>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// All directed shortest paths from each source to each topic within the
/// subgraph, at most `cap` per (source, topic) pair, selected in lexicographic
/// edge order. Pairs with no directed route contribute nothing; a source that
/// is itself a topic yields one zero-length path.
pub fn path_retrieve(
    sub: &RetrievalSubgraph,
    froms: &[EntityId],
    topics: &[EntityId],
    cap: usize,
) -> Result<Vec<Path>, RetrieveError> {
    if cap == 0 {
        return Err(RetrieveError::ZeroCap);
    }
    for &e in froms.iter().chain(topics) {
        if !sub.is_reached(e) {
            return Err(RetrieveError::OutsideSubgraph(e));
        }
    }

    // forward adjacency, per-subject edges sorted by (relation, object)
    let mut out_edges: HashMap<EntityId, Vec<Triple>> = HashMap::new();
    let mut in_edges: HashMap<EntityId, Vec<Triple>> = HashMap::new();
    for t in sub.edges() {
        out_edges.entry(t.subject).or_default().push(*t);
        in_edges.entry(t.object).or_default().push(*t);
    }

    let unique_froms: BTreeSet<EntityId> = froms.iter().copied().collect();
    let unique_topics: BTreeSet<EntityId> = topics.iter().copied().collect();

    // distance-to-target maps, one reverse BFS per topic
    let mut dist_to: HashMap<EntityId, HashMap<EntityId, usize>> = HashMap::new();
    for &topic in &unique_topics {
        let mut dist = HashMap::new();
        dist.insert(topic, 0usize);
        let mut queue = VecDeque::from([topic]);
        while let Some(v) = queue.pop_front() {
            let next = dist[&v] + 1;
            if let Some(incoming) = in_edges.get(&v) {
                for t in incoming {
                    if !dist.contains_key(&t.subject) {
                        dist.insert(t.subject, next);
                        queue.push_back(t.subject);
                    }
                }
            }
        }
        dist_to.insert(topic, dist);
    }

    let mut out = Vec::new();
    for &from in &unique_froms {
        for &topic in &unique_topics {
            let dist = &dist_to[&topic];
            let Some(&total) = dist.get(&from) else {
                continue; // no directed route inside the subgraph
            };
            if total == 0 {
                out.push(Path {
                    from,
                    to: topic,
                    edges: Vec::new(),
                });
                continue;
            }
            // depth-first in lexicographic edge order; every vertex of a
            // shortest path sits at exactly its distance, so following only
            // edges that step one closer enumerates all shortest paths
            let mut stack: Vec<Triple> = Vec::with_capacity(total);
            let mut found = Vec::new();
            collect_paths(
                from,
                total,
                topic,
                &out_edges,
                dist,
                cap,
                &mut stack,
                &mut found,
            );
            out.extend(found.into_iter().map(|edges| Path {
                from,
                to: topic,
                edges,
            }));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn collect_paths(
    at: EntityId,
    remaining: usize,
    target: EntityId,
    out_edges: &HashMap<EntityId, Vec<Triple>>,
    dist: &HashMap<EntityId, usize>,
    cap: usize,
    stack: &mut Vec<Triple>,
    found: &mut Vec<Vec<Triple>>,
) {
    if found.len() >= cap {
        return;
    }
    if remaining == 0 {
        if at == target {
            found.push(stack.clone());
        }
        return;
    }
    let Some(edges) = out_edges.get(&at) else {
        return;
    };
    for t in edges {
        if dist.get(&t.object) == Some(&(remaining - 1)) {
            stack.push(*t);
            collect_paths(t.object, remaining - 1, target, out_edges, dist, cap, stack, found);
            stack.pop();
            if found.len() >= cap {
                return;
            }
        }
    }
}

/// Everything handed to the reasoning loop for one retrieval pass.
#[derive(Clone, Debug)]
pub struct RetrievalBundle<F> {
    pub candidates: Vec<ScoredCandidate<F>>,
    pub unreached_candidates: Vec<EntityId>,
    /// Per-entity ranked incoming facts, for the candidates and topics.
    pub facts: Vec<(EntityId, Vec<RankedFact<F>>)>,
    pub paths: Vec<Path>,
}

impl<F: Scalar> RetrievalBundle<F> {
    /// Union of all fact edges in the bundle.
    pub fn fact_edges(&self) -> BTreeSet<Triple> {
        self.facts
            .iter()
            .flat_map(|(_, facts)| facts.iter().map(|f| f.edge))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty() && self.facts.iter().all(|(_, f)| f.is_empty())
    }
}

/// Retrieval caps for one pass.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalLimits {
    /// Candidate entities returned (top-k).
    pub k: usize,
    /// Facts per entity (top-n).
    pub n: usize,
    /// Shortest paths kept per (candidate, topic) pair.
    pub path_cap: usize,
}

impl Default for RetrievalLimits {
    fn default() -> Self {
        Self {
            k: 20,
            n: 20,
            path_cap: 10,
        }
    }
}

/// Runs all three retrieval levels over one propagation: top-k candidates,
/// top-n incoming facts for every candidate and topic, and shortest paths
/// from the candidates to the topics.
pub fn build_bundle<F: Scalar>(
    scores: &BTreeMap<EntityId, F>,
    sub: &RetrievalSubgraph,
    records: &AttentionRecords<F>,
    limits: RetrievalLimits,
    candidates_filter: Option<&[EntityId]>,
) -> Result<RetrievalBundle<F>, RetrieveError> {
    let nodes = node_retrieve(scores, sub, limits.k, candidates_filter)?;
    let mut around: BTreeSet<EntityId> = nodes.hits.iter().map(|c| c.entity).collect();
    around.extend(sub.topics().iter().copied());
    let facts = around
        .iter()
        .map(|&e| Ok((e, edge_retrieve(records, e, limits.n)?)))
        .collect::<Result<Vec<_>, RetrieveError>>()?;
    let candidate_ids: Vec<EntityId> = nodes.hits.iter().map(|c| c.entity).collect();
    let paths = path_retrieve(sub, &candidate_ids, sub.topics(), limits.path_cap)?;
    Ok(RetrievalBundle {
        candidates: nodes.hits,
        unreached_candidates: nodes.unreached,
        facts,
        paths,
    })
}
