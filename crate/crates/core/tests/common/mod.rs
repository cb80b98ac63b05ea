//! Shared oracles and generators for the acceptance suite. Everything here is
//! written independently of the engine internals: dense vectors, brute-force
//! scans over the triple list, and straight-line formula transcriptions.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use kgqa_core::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use kgqa_core::model::ModelParams;
use kgqa_core::propagation::LAMBDA_UNLIMITED;

/// Random graph through the public TSV loader: entity labels `e<i>`,
/// relation labels `r<j>`, `edge_count` draws (duplicates collapse).
pub fn random_graph(
    seed: u64,
    entity_count: usize,
    relation_count: usize,
    edge_count: usize,
) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..edge_count {
        let s = rng.gen_range(0..entity_count);
        let r = rng.gen_range(0..relation_count);
        let o = rng.gen_range(0..entity_count);
        text.push_str(&format!("e{s}\tr{r}\te{o}\n"));
    }
    KnowledgeGraph::parse_triples(&text, "generated")
        .unwrap()
        .augment_inverse()
        .unwrap()
}

/// Hub-heavy graph: one entity with `hub_degree` neighbors on one relation,
/// plus a sparse random remainder.
pub fn hub_graph(seed: u64, hub_degree: usize, extra_entities: usize) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for i in 0..hub_degree {
        text.push_str(&format!("hub\tr0\tn{i}\n"));
    }
    for _ in 0..extra_entities {
        let s = rng.gen_range(0..hub_degree);
        let o = rng.gen_range(0..hub_degree);
        let r = rng.gen_range(1..3);
        text.push_str(&format!("n{s}\tr{r}\tn{o}\n"));
    }
    text.push_str("n0\tr1\thub\n");
    KnowledgeGraph::parse_triples(&text, "hub")
        .unwrap()
        .augment_inverse()
        .unwrap()
}

pub fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn random_relation_inits(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| random_unit_vector(rng, dim)).collect()
}

/// Independent L-hop reachability closure over the raw triple list,
/// ignoring any pruning.
pub fn bfs_closure(g: &KnowledgeGraph, topics: &[EntityId], hops: usize) -> BTreeSet<EntityId> {
    let mut reached: BTreeSet<EntityId> = topics.iter().copied().collect();
    for _ in 0..hops {
        let snapshot: BTreeSet<EntityId> = reached.clone();
        for t in g.triples() {
            if snapshot.contains(&t.subject) {
                reached.insert(t.object);
            }
        }
    }
    reached
}

/// Straight-line dense reimplementation of the whole forward pass: dense
/// per-entity vectors, brute-force expansion over the triple list, per-edge
/// message matrix application. Returns the final entity embeddings (dense by
/// id), the reached set, and the per-layer cumulative active edge sets.
pub fn dense_forward_oracle(
    g: &KnowledgeGraph,
    q: &[f64],
    topics: &[EntityId],
    params: &ModelParams<f64>,
    rel_init: &[Vec<f64>],
    lambda: usize,
) -> (Vec<Vec<f64>>, BTreeSet<EntityId>, Vec<BTreeSet<Triple>>) {
    let n = g.entity_count();
    let d = params.dims.hidden;
    let a = params.dims.attention;

    let mut emb = vec![vec![0.0; d]; n];
    for t in topics {
        emb[t.0 as usize] = vec![1.0; d];
    }
    let mut reached: BTreeSet<EntityId> = topics.iter().copied().collect();
    let mut active: BTreeSet<Triple> = BTreeSet::new();
    let mut per_layer_edges = Vec::new();
    let mut rels: Vec<Vec<f64>> = rel_init.to_vec();

    for layer in 0..params.dims.layers {
        let lp = &params.layers[layer];

        // relation update first: r <- W1 [r; q]
        rels = rels
            .iter()
            .map(|r| {
                (0..d)
                    .map(|row| {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += lp.relation_update.get(row, c) * r[c];
                            acc += lp.relation_update.get(row, d + c) * q[c];
                        }
                        acc
                    })
                    .collect()
            })
            .collect();

        // expansion: full group within lambda, otherwise reached objects only
        let snapshot = reached.clone();
        for &e in &snapshot {
            for r_id in 0..g.relation_count() {
                let r = RelationId(r_id as u32);
                let group: Vec<EntityId> = g
                    .triples()
                    .iter()
                    .filter(|t| t.subject == e && t.relation == r)
                    .map(|t| t.object)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let emit: Vec<EntityId> = if group.len() <= lambda {
                    group
                } else {
                    group.into_iter().filter(|o| snapshot.contains(o)).collect()
                };
                for o in emit {
                    active.insert(Triple::new(e, r, o));
                    reached.insert(e);
                    reached.insert(o);
                }
            }
        }
        per_layer_edges.push(active.clone());

        // messages: per-edge attention, per-edge W2 application
        let mut next = vec![vec![0.0; d]; n];
        for t in &active {
            let s_emb = &emb[t.subject.0 as usize];
            let r_emb = &rels[t.relation.0 as usize];
            let mut z = 0.0;
            for k in 0..a {
                let mut h = 0.0;
                for j in 0..d {
                    h += lp.attn_subject.get(k, j) * s_emb[j]
                        + lp.attn_relation.get(k, j) * r_emb[j]
                        + lp.attn_question.get(k, j) * q[j];
                }
                if h > 0.0 {
                    z += lp.attn_out.get(0, k) * h;
                }
            }
            let alpha = 1.0 / (1.0 + (-z).exp());
            let slot = &mut next[t.object.0 as usize];
            for row in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += lp.message.get(row, c) * (alpha * (s_emb[c] + r_emb[c]));
                }
                slot[row] += acc;
            }
        }
        emb = next;
    }
    (emb, reached, per_layer_edges)
}

/// Exhaustive shortest-path enumeration inside an edge set: forward BFS for
/// the distance, then depth-first collection of every path that walks one
/// BFS level per step, sorted lexicographically and truncated to `cap`.
/// Panics if more than 100k paths pile up (regenerate the graph).
pub fn oracle_shortest_paths(
    edges: &BTreeSet<Triple>,
    from: EntityId,
    to: EntityId,
    cap: usize,
) -> Vec<Vec<Triple>> {
    let mut adj: BTreeMap<EntityId, Vec<Triple>> = BTreeMap::new();
    for t in edges {
        adj.entry(t.subject).or_default().push(*t);
    }
    let mut dist: BTreeMap<EntityId, usize> = BTreeMap::new();
    dist.insert(from, 0);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let next = dist[&u] + 1;
        if let Some(outgoing) = adj.get(&u) {
            for t in outgoing {
                if !dist.contains_key(&t.object) {
                    dist.insert(t.object, next);
                    queue.push_back(t.object);
                }
            }
        }
    }
    let Some(&total) = dist.get(&to) else {
        return Vec::new();
    };
    if total == 0 {
        return vec![Vec::new()];
    }

    let mut all = Vec::new();
    let mut stack = Vec::new();
    fn walk(
        u: EntityId,
        depth: usize,
        total: usize,
        to: EntityId,
        adj: &BTreeMap<EntityId, Vec<Triple>>,
        dist: &BTreeMap<EntityId, usize>,
        stack: &mut Vec<Triple>,
        all: &mut Vec<Vec<Triple>>,
    ) {
        if depth == total {
            if u == to {
                all.push(stack.clone());
                assert!(all.len() <= 100_000, "path oracle explosion");
            }
            return;
        }
        if let Some(outgoing) = adj.get(&u) {
            for t in outgoing {
                if dist.get(&t.object) == Some(&(depth + 1)) {
                    stack.push(*t);
                    walk(t.object, depth + 1, total, to, adj, dist, stack, all);
                    stack.pop();
                }
            }
        }
    }
    walk(from, 0, total, to, &adj, &dist, &mut stack, &mut all);
    all.sort();
    all.truncate(cap);
    all
}

/// Synthetic one-hop task: a seeded 200-entity, 8-relation graph plus
/// questions of the form "answer = the unique r-neighbor of the topic".
/// Question text depends only on the relation, so held-out questions about a
/// relation share the embedding of its training questions.
pub struct OneHopTask {
    pub graph: KnowledgeGraph,
    pub train: Vec<kgqa_core::kg::QuestionInstance>,
    pub dev: Vec<kgqa_core::kg::QuestionInstance>,
}

pub fn one_hop_task(seed: u64, entities: usize, relations: usize, questions: usize) -> OneHopTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for e in 0..entities {
        // a couple of outgoing edges per entity over random relations
        for _ in 0..2 {
            let r = rng.gen_range(0..relations);
            let o = rng.gen_range(0..entities);
            text.push_str(&format!("e{e}\tr{r}\te{o}\n"));
        }
    }
    let graph = KnowledgeGraph::parse_triples(&text, "one-hop")
        .unwrap()
        .augment_inverse()
        .unwrap();

    // (topic, relation) pairs whose forward group has exactly one neighbor
    let mut pairs = Vec::new();
    for e in graph.entity_ids() {
        for r_id in 0..relations {
            let r = RelationId(r_id as u32);
            let group = graph.candidate_set(e, r).unwrap();
            if group.len() == 1 {
                pairs.push((e, r, group[0]));
            }
        }
    }
    pairs.shuffle(&mut rng);
    assert!(pairs.len() >= questions, "not enough unique-neighbor pairs");
    pairs.truncate(questions);

    let instances: Vec<kgqa_core::kg::QuestionInstance> = pairs
        .into_iter()
        .map(|(topic, r, answer)| kgqa_core::kg::QuestionInstance {
            text: format!(
                "which entity is the {} of the topic?",
                graph.relation_label(r).unwrap()
            ),
            topics: vec![topic],
            answers: vec![answer],
            candidates: None,
        })
        .collect();
    let split = questions * 4 / 5;
    let (train, dev) = instances.split_at(split);
    OneHopTask {
        train: train.to_vec(),
        dev: dev.to_vec(),
        graph,
    }
}

/// Largest `(entity, relation)` group size in the graph; `lambda` at or above
/// this value never prunes.
pub fn max_group_size(g: &KnowledgeGraph) -> usize {
    let mut max = 0;
    for e in g.entity_ids() {
        for r in g.subject_relations(e) {
            max = max.max(g.candidate_set(e, *r).unwrap().len());
        }
    }
    max
}

pub const UNLIMITED: usize = LAMBDA_UNLIMITED;
