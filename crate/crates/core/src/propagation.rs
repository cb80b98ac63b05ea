//! Question-conditioned message passing with progressive frontier expansion
//! and degree-aware pruning.
//!
//! A run starts from the topic entities and alternates, per layer, a relation
//! update conditioned on the question embedding, a frontier-expansion step,
//! and an attention-weighted message pass over all edges reached so far.
//! Entities never reached keep an implicit zero embedding and therefore score
//! exactly zero.
//!
//! Expansion rule per `(entity, relation)` group with candidate neighbor set
//! `C`: if `|C| <= lambda` every edge of the group is emitted; otherwise only
//! edges whose object is already reached are, so high-degree groups widen the
//! subgraph only toward entities that other routes have justified.
//!
//! Everything here is generic over the scalar type: inference runs in f32,
//! the trainer and the numeric test oracles run in f64. Iteration orders are
//! fixed (ascending ids everywhere), so runs are bit-reproducible.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::kg::{EntityId, KgError, KnowledgeGraph, Triple};
use crate::linalg::{concat2, Scalar};
use crate::model::ModelParams;

/// `lambda` value that disables pruning entirely.
pub const LAMBDA_UNLIMITED: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum PropError {
    #[error("topic entity set is empty")]
    EmptyTopics,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("{what}: expected length {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("relation embeddings cover {found} relations, graph has {expected}")]
    RelationCoverage { expected: usize, found: usize },
    #[error("layer {layer} is out of range (model has {layers})")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("non-finite value at layer {layer} in {what}")]
    NonFinite { layer: usize, what: String },
}

/// Sparse per-entity embeddings at one layer; absent entities are zero.
#[derive(Clone, Debug)]
pub struct EntityState<F> {
    layer: usize,
    dim: usize,
    emb: BTreeMap<EntityId, Vec<F>>,
}

impl<F: Scalar> EntityState<F> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, e: EntityId) -> Option<&[F]> {
        self.emb.get(&e).map(Vec::as_slice)
    }

    /// Embedding with the zero default materialized.
    pub fn embedding_or_zero(&self, e: EntityId) -> Vec<F> {
        self.emb
            .get(&e)
            .cloned()
            .unwrap_or_else(|| vec![F::zero(); self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, &[F])> {
        self.emb.iter().map(|(e, v)| (*e, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.emb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.is_empty()
    }
}

/// Topic entities start as all-ones vectors; everything else is implicitly
/// zero. Errors on an empty or invalid topic set.
pub fn init_entities<F: Scalar>(
    g: &KnowledgeGraph,
    topics: &[EntityId],
    dim: usize,
) -> Result<EntityState<F>, PropError> {
    if topics.is_empty() {
        return Err(PropError::EmptyTopics);
    }
    let mut emb = BTreeMap::new();
    for &t in topics {
        g.entity_label(t)?;
        emb.insert(t, vec![F::one(); dim]);
    }
    Ok(EntityState { layer: 0, dim, emb })
}

/// The subgraph reached by expansion: cumulative entity and edge sets with
/// per-hop snapshots.
#[derive(Clone, Debug)]
pub struct RetrievalSubgraph {
    topics: Vec<EntityId>,
    reached: BTreeSet<EntityId>,
    edges: BTreeSet<Triple>,
    hop_entities: Vec<Vec<EntityId>>,
    hop_new_edges: Vec<Vec<Triple>>,
}

impl RetrievalSubgraph {
    /// Fresh subgraph at hop 0: the (deduplicated) topic set, no edges.
    pub fn new(topics: &[EntityId]) -> Self {
        let set: BTreeSet<EntityId> = topics.iter().copied().collect();
        let sorted: Vec<EntityId> = set.iter().copied().collect();
        Self {
            topics: sorted.clone(),
            reached: set,
            edges: BTreeSet::new(),
            hop_entities: vec![sorted],
            hop_new_edges: Vec::new(),
        }
    }

    /// Builds a subgraph directly from an edge list (all endpoints and topics
    /// become reached). Used to run retrieval over externally supplied graphs.
    pub fn from_edges(topics: &[EntityId], edges: impl IntoIterator<Item = Triple>) -> Self {
        let mut sub = Self::new(topics);
        sub.merge(edges.into_iter().collect());
        sub
    }

    /// Merges one hop's emitted edges; records the hop snapshot. Returns how
    /// many edges were new.
    pub fn merge(&mut self, emitted: Vec<Triple>) -> usize {
        let mut new_edges = Vec::new();
        for t in emitted {
            if self.edges.insert(t) {
                self.reached.insert(t.subject);
                self.reached.insert(t.object);
                new_edges.push(t);
            }
        }
        new_edges.sort_unstable();
        let added = new_edges.len();
        self.hop_new_edges.push(new_edges);
        self.hop_entities
            .push(self.reached.iter().copied().collect());
        added
    }

    pub fn topics(&self) -> &[EntityId] {
        &self.topics
    }

    pub fn is_reached(&self, e: EntityId) -> bool {
        self.reached.contains(&e)
    }

    pub fn reached(&self) -> &BTreeSet<EntityId> {
        &self.reached
    }

    pub fn edges(&self) -> &BTreeSet<Triple> {
        &self.edges
    }

    pub fn contains_edge(&self, t: &Triple) -> bool {
        self.edges.contains(t)
    }

    pub fn entity_count(&self) -> usize {
        self.reached.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of expansion hops merged so far.
    pub fn hops(&self) -> usize {
        self.hop_new_edges.len()
    }

    /// Cumulative entity snapshot after the given hop (0 = topics only).
    pub fn entities_at_hop(&self, hop: usize) -> &[EntityId] {
        &self.hop_entities[hop]
    }

    /// Edges newly added by the given hop (1-based like the snapshots).
    pub fn new_edges_at_hop(&self, hop: usize) -> &[Triple] {
        &self.hop_new_edges[hop - 1]
    }
}

/// One hop of frontier expansion from every reached entity. For each
/// `(entity, relation)` group, emits the whole group when its size is within
/// `lambda` and only already-reached objects otherwise. The caller merges the
/// result cumulatively.
pub fn app_expand(
    g: &KnowledgeGraph,
    sub: &RetrievalSubgraph,
    lambda: usize,
) -> Result<Vec<Triple>, PropError> {
    expand_from(g, sub.reached().iter().copied(), sub.reached(), lambda)
}

fn expand_from(
    g: &KnowledgeGraph,
    sources: impl Iterator<Item = EntityId>,
    reached: &BTreeSet<EntityId>,
    lambda: usize,
) -> Result<Vec<Triple>, PropError> {
    let mut out = Vec::new();
    for e in sources {
        for &r in g.subject_relations(e) {
            let group = g.candidate_set(e, r)?;
            if group.len() <= lambda {
                out.extend(group.iter().map(|&o| Triple::new(e, r, o)));
            } else {
                out.extend(
                    group
                        .iter()
                        .filter(|o| reached.contains(o))
                        .map(|&o| Triple::new(e, r, o)),
                );
            }
        }
    }
    Ok(out)
}

/// Per-edge attention values across the layers where the edge was active.
#[derive(Clone, Debug)]
pub struct AttentionRecord<F> {
    pub per_layer: Vec<(usize, F)>,
    pub alpha_max: F,
}

/// Attention bookkeeping for a whole propagation run.
#[derive(Clone, Debug)]
pub struct AttentionRecords<F> {
    map: BTreeMap<Triple, AttentionRecord<F>>,
}

impl<F> Default for AttentionRecords<F> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> AttentionRecords<F> {
    fn record(&mut self, t: Triple, layer: usize, alpha: F) {
        let entry = self.map.entry(t).or_insert(AttentionRecord {
            per_layer: Vec::new(),
            alpha_max: alpha,
        });
        entry.per_layer.push((layer, alpha));
        if alpha > entry.alpha_max {
            entry.alpha_max = alpha;
        }
    }

    /// Builds a record from explicit per-layer values; useful when records
    /// come from somewhere other than a propagation run (tests, tooling).
    pub fn insert_layers(&mut self, t: Triple, layers: &[(usize, F)]) {
        for (layer, alpha) in layers {
            self.record(t, *layer, *alpha);
        }
    }

    pub fn get(&self, t: &Triple) -> Option<&AttentionRecord<F>> {
        self.map.get(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Triple, &AttentionRecord<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One relation-update step: every relation embedding becomes
/// `W1[layer] * [relation; question]`.
pub fn update_relations<F: Scalar>(
    params: &ModelParams<F>,
    layer: usize,
    rels: &[Vec<F>],
    q_emb: &[F],
) -> Result<Vec<Vec<F>>, PropError> {
    let d = params.dims.hidden;
    let w1 = &params
        .layers
        .get(layer)
        .ok_or(PropError::LayerOutOfRange {
            layer,
            layers: params.dims.layers,
        })?
        .relation_update;
    check_len("question embedding", q_emb.len(), d)?;
    rels.iter()
        .map(|r| {
            check_len("relation embedding", r.len(), d)?;
            Ok(w1.matvec(&concat2(r, q_emb)))
        })
        .collect()
}

fn check_len(what: &str, found: usize, expected: usize) -> Result<(), PropError> {
    if found != expected {
        return Err(PropError::ShapeMismatch {
            what: what.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

fn attention_with_hidden<F: Scalar>(
    layer: &crate::model::LayerParams<F>,
    s_emb: &[F],
    r_emb: &[F],
    q_emb: &[F],
) -> (F, Vec<F>) {
    let mut pre = layer.attn_subject.matvec(s_emb);
    let from_r = layer.attn_relation.matvec(r_emb);
    let from_q = layer.attn_question.matvec(q_emb);
    for ((p, r), q) in pre.iter_mut().zip(&from_r).zip(&from_q) {
        *p = *p + *r + *q;
    }
    let hidden: Vec<F> = pre
        .iter()
        .map(|&h| if h > F::zero() { h } else { F::zero() })
        .collect();
    let z = layer.attn_out.matvec(&hidden)[0];
    // keep alpha strictly inside (0, 1) even when the logit saturates
    let alpha = sigmoid(z)
        .max(F::epsilon())
        .min(F::one() - F::epsilon());
    (alpha, pre)
}

/// Edge attention `sigmoid(W3 * relu(W4*s + W5*r + W6*q))` for one layer.
pub fn attention<F: Scalar>(
    params: &ModelParams<F>,
    layer: usize,
    s_emb: &[F],
    r_emb: &[F],
    q_emb: &[F],
) -> Result<F, PropError> {
    let d = params.dims.hidden;
    check_len("subject embedding", s_emb.len(), d)?;
    check_len("relation embedding", r_emb.len(), d)?;
    check_len("question embedding", q_emb.len(), d)?;
    let lp = params.layers.get(layer).ok_or(PropError::LayerOutOfRange {
        layer,
        layers: params.dims.layers,
    })?;
    let (alpha, _) = attention_with_hidden(lp, s_emb, r_emb, q_emb);
    if !alpha.is_finite() {
        return Err(PropError::NonFinite {
            layer,
            what: "attention".to_owned(),
        });
    }
    Ok(alpha)
}

/// Everything a propagation run produces.
pub struct PropagationOutput<F> {
    pub state: EntityState<F>,
    pub subgraph: RetrievalSubgraph,
    pub records: AttentionRecords<F>,
    /// Relation embeddings used at the last layer.
    pub relations: Vec<Vec<F>>,
}

/// Per-layer intermediates recorded for exact backpropagation.
pub(crate) struct ForwardTrace<F> {
    /// Relation embeddings entering each layer; index 0 holds the initial ones.
    pub rel_in: Vec<Vec<Vec<F>>>,
    /// Relation embeddings after each layer's update (used in its messages).
    pub rel_out: Vec<Vec<Vec<F>>>,
    /// Entity embeddings per layer; index 0 is the initial state, index L final.
    pub entity: Vec<BTreeMap<EntityId, Vec<F>>>,
    /// Active edges per layer, sorted by (object, subject, relation).
    pub layer_edges: Vec<Vec<TracedEdge<F>>>,
    /// Pre-W2 message sums per object entity, per layer.
    pub msg_sums: Vec<BTreeMap<EntityId, Vec<F>>>,
}

pub(crate) struct TracedEdge<F> {
    pub triple: Triple,
    /// Attention pre-activation `W4*s + W5*r + W6*q`.
    pub pre_act: Vec<F>,
    pub alpha: F,
}

/// Runs the full forward pass; see the module docs for the layer schedule.
pub fn propagate<F: Scalar>(
    g: &KnowledgeGraph,
    q_emb: &[F],
    topics: &[EntityId],
    params: &ModelParams<F>,
    rel_init: &[Vec<F>],
    lambda: usize,
) -> Result<PropagationOutput<F>, PropError> {
    let (output, _) = propagate_inner(g, q_emb, topics, params, rel_init, lambda, false)?;
    Ok(output)
}

pub(crate) fn propagate_traced<F: Scalar>(
    g: &KnowledgeGraph,
    q_emb: &[F],
    topics: &[EntityId],
    params: &ModelParams<F>,
    rel_init: &[Vec<F>],
    lambda: usize,
) -> Result<(PropagationOutput<F>, ForwardTrace<F>), PropError> {
    let (output, trace) = propagate_inner(g, q_emb, topics, params, rel_init, lambda, true)?;
    Ok((output, trace.expect("trace requested")))
}

fn propagate_inner<F: Scalar>(
    g: &KnowledgeGraph,
    q_emb: &[F],
    topics: &[EntityId],
    params: &ModelParams<F>,
    rel_init: &[Vec<F>],
    lambda: usize,
    want_trace: bool,
) -> Result<(PropagationOutput<F>, Option<ForwardTrace<F>>), PropError> {
    let d = params.dims.hidden;
    let layer_count = params.dims.layers;
    check_len("question embedding", q_emb.len(), d)?;
    if rel_init.len() != g.relation_count() {
        return Err(PropError::RelationCoverage {
            expected: g.relation_count(),
            found: rel_init.len(),
        });
    }
    for r in rel_init {
        check_len("initial relation embedding", r.len(), d)?;
    }

    let init = init_entities::<F>(g, topics, d)?;
    let mut state: BTreeMap<EntityId, Vec<F>> = init.emb;
    let mut sub = RetrievalSubgraph::new(topics);
    let mut rels: Vec<Vec<F>> = rel_init.to_vec();
    let mut records = AttentionRecords::default();

    let mut trace = want_trace.then(|| ForwardTrace {
        rel_in: Vec::with_capacity(layer_count),
        rel_out: Vec::with_capacity(layer_count),
        entity: vec![state.clone()],
        layer_edges: Vec::with_capacity(layer_count),
        msg_sums: Vec::with_capacity(layer_count),
    });

    for layer in 0..layer_count {
        // relation update first; this layer's messages see the updated values
        if let Some(t) = trace.as_mut() {
            t.rel_in.push(rels.clone());
        }
        rels = update_relations(params, layer, &rels, q_emb)?;
        for (idx, r) in rels.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(PropError::NonFinite {
                    layer,
                    what: format!("relation {idx} update"),
                });
            }
        }
        if let Some(t) = trace.as_mut() {
            t.rel_out.push(rels.clone());
        }

        let emitted = app_expand(g, &sub, lambda)?;
        sub.merge(emitted);

        // messages flow over every edge reached so far, grouped by object
        let mut active: Vec<Triple> = sub.edges().iter().copied().collect();
        active.sort_unstable_by_key(|t| (t.object, t.subject, t.relation));

        let zero = vec![F::zero(); d];
        let mut sums: BTreeMap<EntityId, Vec<F>> = BTreeMap::new();
        let mut traced_edges = want_trace.then(Vec::new);
        for t in &active {
            let s_emb = state.get(&t.subject).unwrap_or(&zero);
            let r_emb = &rels[t.relation.0 as usize];
            let lp = &params.layers[layer];
            let (alpha, pre_act) = attention_with_hidden(lp, s_emb, r_emb, q_emb);
            if !alpha.is_finite() {
                return Err(PropError::NonFinite {
                    layer,
                    what: format!("attention of edge ({}, {}, {})", t.subject, t.relation, t.object),
                });
            }
            records.record(*t, layer, alpha);
            let sum = sums
                .entry(t.object)
                .or_insert_with(|| vec![F::zero(); d]);
            for ((acc, s), r) in sum.iter_mut().zip(s_emb).zip(r_emb) {
                *acc = *acc + alpha * (*s + *r);
            }
            if let Some(edges) = traced_edges.as_mut() {
                edges.push(TracedEdge {
                    triple: *t,
                    pre_act,
                    alpha,
                });
            }
        }

        let mut next: BTreeMap<EntityId, Vec<F>> = BTreeMap::new();
        for (o, msum) in &sums {
            let emb = params.layers[layer].message.matvec(msum);
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(PropError::NonFinite {
                    layer,
                    what: format!("embedding of entity {o}"),
                });
            }
            next.insert(*o, emb);
        }
        state = next;

        if let Some(t) = trace.as_mut() {
            t.layer_edges.push(traced_edges.unwrap());
            t.msg_sums.push(sums);
            t.entity.push(state.clone());
        }
    }

    let output = PropagationOutput {
        state: EntityState {
            layer: layer_count,
            dim: d,
            emb: state,
        },
        subgraph: sub,
        records,
        relations: rels,
    };
    Ok((output, trace))
}

/// Scores every entity carried by the final state: `W7 * e`. Entities outside
/// the state (unreached, or reached without messages) score exactly zero and
/// are simply absent from the map.
pub fn score_entities<F: Scalar>(
    state: &EntityState<F>,
    params: &ModelParams<F>,
) -> BTreeMap<EntityId, F> {
    state
        .iter()
        .map(|(e, emb)| (e, params.score.matvec(emb)[0]))
        .collect()
}

/// Score lookup with the zero default for absent entities.
pub fn score_of<F: Scalar>(scores: &BTreeMap<EntityId, F>, e: EntityId) -> F {
    scores.get(&e).copied().unwrap_or_else(F::zero)
}

/// Expansion source set for structural (count-only) runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpansionSources {
    /// Progressive expansion: only entities reached so far expand.
    Reached,
    /// Progressive expansion disabled: every entity expands at every hop.
    AllEntities,
}

/// Outcome of a structural reach run.
#[derive(Clone, Copy, Debug)]
pub struct StructuralReach {
    pub entities: usize,
    pub facts: usize,
    /// Set when the edge cap aborted the run.
    pub exceeded: bool,
}

/// Runs expansion only (no embeddings) and reports subgraph sizes; used for
/// propagation-range measurements. `edge_cap` aborts the run once the edge
/// set exceeds it.
pub fn structural_reach(
    g: &KnowledgeGraph,
    topics: &[EntityId],
    hops: usize,
    lambda: usize,
    sources: ExpansionSources,
    edge_cap: Option<usize>,
) -> Result<StructuralReach, PropError> {
    if topics.is_empty() {
        return Err(PropError::EmptyTopics);
    }
    let mut sub = RetrievalSubgraph::new(topics);
    for _ in 0..hops {
        let emitted = match sources {
            ExpansionSources::Reached => app_expand(g, &sub, lambda)?,
            ExpansionSources::AllEntities => {
                expand_from(g, g.entity_ids(), sub.reached(), lambda)?
            }
        };
        sub.merge(emitted);
        if let Some(cap) = edge_cap {
            if sub.edge_count() > cap {
                return Ok(StructuralReach {
                    entities: sub.entity_count(),
                    facts: sub.edge_count(),
                    exceeded: true,
                });
            }
        }
    }
    Ok(StructuralReach {
        entities: sub.entity_count(),
        facts: sub.edge_count(),
        exceeded: false,
    })
}
