//! Training: multi-class log-loss over entity scores, exact reverse-mode
//! gradients through the whole propagation, Adam updates, and early stopping
//! on the dev H@1 metric.
//!
//! The trainer runs entirely in f64. Question and relation embeddings are
//! constants (the encoder stays frozen); gradients flow to the per-layer
//! weight matrices and the scoring row only. One question per optimizer step:
//! each question propagates over its own subgraph, so there is nothing to
//! batch. Frontier expansion depends only on the graph structure, never on
//! parameter values, so a question's subgraph is fixed across training.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingProvider, RelationDescriptionTable};
use crate::kg::{EntityId, KnowledgeGraph, QuestionInstance};
use crate::linalg::{concat2, vec_add_assign, vec_axpy};
use crate::model::{Dims, ModelParams};
use crate::propagation::{
    propagate, propagate_traced, score_entities, app_expand, PropError, RetrievalSubgraph,
};
use crate::retrieve::node_retrieve;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("answer set is empty")]
    EmptyAnswers,
    #[error("answer {0} is not in the scored universe")]
    AnswerOutsideUniverse(EntityId),
    #[error("scored entity {0} is not in the universe")]
    ScoreOutsideUniverse(EntityId),
    #[error("no usable training question: none reaches an answer within the horizon")]
    NoUsableQuestions,
    #[error("non-finite gradient in {parameter}")]
    NonFiniteGradient { parameter: String },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Hyperparameters for [`train`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Shuffle question order each epoch (seeded; still deterministic).
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 200,
            patience: 5,
            lambda: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradients, shaped exactly like the parameters they belong to.
pub type GradientSet = ModelParams<f64>;

/// One training question, fully resolved: frozen question embedding, topic
/// entities, and gold answers.
#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub q_emb: Vec<f64>,
    pub topics: Vec<EntityId>,
    pub answers: BTreeSet<EntityId>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Multi-class log-loss: `log Σ_{x ∈ all} exp(c_x) − log Σ_{a ∈ answers} exp(c_a)`,
/// computed with max-shift stabilization. Entities absent from `scores` count
/// with score zero. Always non-negative; exactly zero when answers = all.
pub fn loss(
    scores: &BTreeMap<EntityId, f64>,
    answers: &BTreeSet<EntityId>,
    all_entities: &BTreeSet<EntityId>,
) -> Result<f64, TrainError> {
    validate_universe(scores, answers, all_entities)?;
    let value_of = |e: &EntityId| scores.get(e).copied().unwrap_or(0.0);
    let denominator = log_sum_exp(all_entities.iter().map(value_of));
    let numerator = log_sum_exp(answers.iter().map(value_of));
    Ok((denominator - numerator).max(0.0))
}

fn validate_universe(
    scores: &BTreeMap<EntityId, f64>,
    answers: &BTreeSet<EntityId>,
    all_entities: &BTreeSet<EntityId>,
) -> Result<(), TrainError> {
    if answers.is_empty() {
        return Err(TrainError::EmptyAnswers);
    }
    if let Some(a) = answers.iter().find(|a| !all_entities.contains(a)) {
        return Err(TrainError::AnswerOutsideUniverse(*a));
    }
    if let Some(e) = scores.keys().find(|e| !all_entities.contains(e)) {
        return Err(TrainError::ScoreOutsideUniverse(*e));
    }
    Ok(())
}

/// Loss plus `∂loss/∂c_e` for every scored entity.
fn loss_and_score_grads(
    scores: &BTreeMap<EntityId, f64>,
    answers: &BTreeSet<EntityId>,
    all_entities: &BTreeSet<EntityId>,
) -> Result<(f64, BTreeMap<EntityId, f64>), TrainError> {
    validate_universe(scores, answers, all_entities)?;
    let value_of = |e: &EntityId| scores.get(e).copied().unwrap_or(0.0);

    let den_max = all_entities.iter().map(&value_of).fold(f64::NEG_INFINITY, f64::max);
    let den_sum: f64 = all_entities.iter().map(|e| (value_of(e) - den_max).exp()).sum();
    let num_max = answers.iter().map(&value_of).fold(f64::NEG_INFINITY, f64::max);
    let num_sum: f64 = answers.iter().map(|e| (value_of(e) - num_max).exp()).sum();

    let loss_value = ((den_max + den_sum.ln()) - (num_max + num_sum.ln())).max(0.0);
    let grads = scores
        .iter()
        .map(|(e, c)| {
            let mut grad = (c - den_max).exp() / den_sum;
            if answers.contains(e) {
                grad -= (c - num_max).exp() / num_sum;
            }
            (*e, grad)
        })
        .collect();
    Ok((loss_value, grads))
}

/// Forward-only loss of one question; the finite-difference oracle calls this
/// with perturbed parameters.
pub fn question_loss(
    instance: &TrainInstance,
    g: &KnowledgeGraph,
    params: &ModelParams<f64>,
    rel_init: &[Vec<f64>],
    lambda: usize,
    all_entities: &BTreeSet<EntityId>,
) -> Result<f64, TrainError> {
    let out = propagate(g, &instance.q_emb, &instance.topics, params, rel_init, lambda)?;
    let scores = score_entities(&out.state, params);
    loss(&scores, &instance.answers, all_entities)
}

/// Summed loss and exact gradients over a batch of questions. Question and
/// relation initial embeddings are treated as constants.
pub fn backward(
    batch: &[TrainInstance],
    g: &KnowledgeGraph,
    params: &ModelParams<f64>,
    rel_init: &[Vec<f64>],
    lambda: usize,
) -> Result<(f64, GradientSet), TrainError> {
    let all_entities: BTreeSet<EntityId> = g.entity_ids().collect();
    let mut grads = ModelParams::<f64>::zeros(params.dims);
    let mut total_loss = 0.0;
    for instance in batch {
        total_loss += accumulate_question(instance, g, params, rel_init, lambda, &all_entities, &mut grads)?;
    }
    if let Some((name, _)) = grads.matrices().iter().find(|(_, m)| !m.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            parameter: name.clone(),
        });
    }
    Ok((total_loss, grads))
}

fn accumulate_question(
    instance: &TrainInstance,
    g: &KnowledgeGraph,
    params: &ModelParams<f64>,
    rel_init: &[Vec<f64>],
    lambda: usize,
    all_entities: &BTreeSet<EntityId>,
    grads: &mut GradientSet,
) -> Result<f64, TrainError> {
    let d = params.dims.hidden;
    let layer_count = params.dims.layers;
    let relation_count = g.relation_count();
    let q_emb = &instance.q_emb;

    let (out, trace) =
        propagate_traced(g, q_emb, &instance.topics, params, rel_init, lambda)?;
    let scores = score_entities(&out.state, params);
    let (loss_value, dscores) = loss_and_score_grads(&scores, &instance.answers, all_entities)?;

    // scoring: c_e = W7 · e^(L)
    let score_row: Vec<f64> = params.score.data().to_vec();
    let mut d_entity: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    for (e, dc) in &dscores {
        let emb = trace.entity[layer_count]
            .get(e)
            .expect("scored entities carry final embeddings");
        grads.score.add_outer(&[*dc], emb);
        let mut de = vec![0.0; d];
        vec_axpy(&mut de, *dc, &score_row);
        d_entity.insert(*e, de);
    }

    // gradient w.r.t. the relation embeddings produced at the current layer
    let mut d_rel: Vec<Vec<f64>> = vec![vec![0.0; d]; relation_count];
    let zero = vec![0.0; d];

    for layer in (0..layer_count).rev() {
        let lp = &params.layers[layer];
        let glp = &mut grads.layers[layer];

        // e^(layer+1)[o] = W2 · msum_o; objects without messages are constants
        let mut d_msum: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
        for (o, de_o) in &d_entity {
            if let Some(msum) = trace.msg_sums[layer].get(o) {
                glp.message.add_outer(de_o, msum);
                d_msum.insert(*o, lp.message.matvec_t(de_o));
            }
        }

        let attn_out_row: Vec<f64> = lp.attn_out.data().to_vec();
        let mut d_entity_prev: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
        for edge in &trace.layer_edges[layer] {
            let Some(dm) = d_msum.get(&edge.triple.object) else {
                continue;
            };
            let s_emb = trace.entity[layer]
                .get(&edge.triple.subject)
                .unwrap_or(&zero);
            let r_idx = edge.triple.relation.0 as usize;
            let r_emb = &trace.rel_out[layer][r_idx];
            let alpha = edge.alpha;

            // msum_o += α · (s + r)
            let mut d_alpha = 0.0;
            for j in 0..d {
                d_alpha += dm[j] * (s_emb[j] + r_emb[j]);
            }
            let ds = d_entity_prev
                .entry(edge.triple.subject)
                .or_insert_with(|| vec![0.0; d]);
            vec_axpy(ds, alpha, dm);
            vec_axpy(&mut d_rel[r_idx], alpha, dm);

            // α = σ(W3 · relu(pre)); relu' at 0 is 0
            let dz = d_alpha * alpha * (1.0 - alpha);
            let hidden: Vec<f64> = edge.pre_act.iter().map(|&h| h.max(0.0)).collect();
            glp.attn_out.add_outer(&[dz], &hidden);
            let dh: Vec<f64> = edge
                .pre_act
                .iter()
                .zip(&attn_out_row)
                .map(|(&pre, &w)| if pre > 0.0 { dz * w } else { 0.0 })
                .collect();
            glp.attn_subject.add_outer(&dh, s_emb);
            glp.attn_relation.add_outer(&dh, r_emb);
            glp.attn_question.add_outer(&dh, q_emb);
            let ds = d_entity_prev.get_mut(&edge.triple.subject).unwrap();
            vec_add_assign(ds, &lp.attn_subject.matvec_t(&dh));
            vec_add_assign(&mut d_rel[r_idx], &lp.attn_relation.matvec_t(&dh));
        }

        // rel_out[layer][r] = W1 · [rel_in[layer][r]; q] for every relation
        let mut d_rel_prev: Vec<Vec<f64>> = vec![vec![0.0; d]; relation_count];
        for (r_idx, dr) in d_rel.iter().enumerate() {
            if dr.iter().all(|v| *v == 0.0) {
                continue;
            }
            let input = concat2(&trace.rel_in[layer][r_idx], q_emb);
            glp.relation_update.add_outer(dr, &input);
            let full = lp.relation_update.matvec_t(dr);
            d_rel_prev[r_idx].copy_from_slice(&full[..d]);
        }
        d_rel = d_rel_prev;
        d_entity = d_entity_prev;
    }

    Ok(loss_value)
}

/// Adam optimizer state over a full parameter set.
pub struct Adam {
    first: ModelParams<f64>,
    second: ModelParams<f64>,
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(dims: Dims, config: &TrainConfig) -> Self {
        Self {
            first: ModelParams::zeros(dims),
            second: ModelParams::zeros(dims),
            step_count: 0,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f64>, grads: &GradientSet) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let mut m_all = self.first.matrices_mut();
        let mut v_all = self.second.matrices_mut();
        let g_all = grads.matrices();
        for (((_, p), (_, m)), ((_, v), (_, g))) in params
            .matrices_mut()
            .into_iter()
            .zip(m_all.iter_mut())
            .zip(v_all.iter_mut().zip(g_all.iter()))
        {
            let p_data = p.data_mut();
            let m_data = m.data_mut();
            let v_data = v.data_mut();
            let g_data = g.data();
            for i in 0..p_data.len() {
                m_data[i] = self.beta1 * m_data[i] + (1.0 - self.beta1) * g_data[i];
                v_data[i] = self.beta2 * v_data[i] + (1.0 - self.beta2) * g_data[i] * g_data[i];
                let m_hat = m_data[i] / bias1;
                let v_hat = v_data[i] / bias2;
                p_data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_h1: f64,
    pub wall_ms: u128,
}

/// What [`train`] returns: the best-dev checkpoint and the per-epoch log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_h1: f64,
    /// Questions dropped because their propagation reaches no answer.
    pub skipped_questions: usize,
}

fn embed_text(
    provider: &dyn EmbeddingProvider,
    cache: &mut HashMap<String, Vec<f64>>,
    text: &str,
) -> Result<Vec<f64>, TrainError> {
    if let Some(v) = cache.get(text) {
        return Ok(v.clone());
    }
    let v: Vec<f64> = provider
        .encode(text)?
        .vector
        .into_iter()
        .map(f64::from)
        .collect();
    cache.insert(text.to_owned(), v.clone());
    Ok(v)
}

/// Relation initial embeddings: the encoded description of each relation.
pub fn encode_relation_initials(
    g: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    descriptions: &RelationDescriptionTable,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut cache = HashMap::new();
    g.relation_ids()
        .map(|r| {
            let text = descriptions.description(r)?;
            embed_text(provider, &mut cache, text)
        })
        .collect()
}

/// Answers reachable within `hops` expansion steps; the skip test for
/// training questions. Purely structural, so it never changes across epochs.
fn reaches_an_answer(
    g: &KnowledgeGraph,
    q: &QuestionInstance,
    hops: usize,
    lambda: usize,
) -> Result<bool, TrainError> {
    if q.answers.is_empty() {
        return Ok(false);
    }
    let mut sub = RetrievalSubgraph::new(&q.topics);
    for _ in 0..hops {
        let emitted = app_expand(g, &sub, lambda)?;
        sub.merge(emitted);
    }
    Ok(q.answers.iter().any(|a| sub.is_reached(*a)))
}

/// Dev-set H@1 under the current parameters: fraction of questions whose
/// top-scored reached entity (restricted to the candidate pool when present)
/// is a gold answer.
pub fn dev_h1(
    dev: &[(TrainInstance, Option<Vec<EntityId>>)],
    g: &KnowledgeGraph,
    params: &ModelParams<f64>,
    rel_init: &[Vec<f64>],
    lambda: usize,
) -> Result<f64, TrainError> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (instance, candidates) in dev {
        let out = propagate(g, &instance.q_emb, &instance.topics, params, rel_init, lambda)?;
        let scores = score_entities(&out.state, params);
        let retrieval = node_retrieve(&scores, &out.subgraph, 1, candidates.as_deref())
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if let Some(top) = retrieval.hits.first() {
            if instance.answers.contains(&top.entity) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / dev.len() as f64)
}

/// Pre-trains the retriever. One Adam step per usable question, dev H@1
/// evaluated after every epoch, early stop after `patience` epochs without
/// improvement. Returns the checkpoint of the best dev epoch.
pub fn train(
    dataset: &[QuestionInstance],
    dev: &[QuestionInstance],
    g: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    descriptions: &RelationDescriptionTable,
    dims: Dims,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if provider.dim() != dims.hidden {
        return Err(TrainError::BadConfig(format!(
            "provider dimension {} differs from hidden width {}",
            provider.dim(),
            dims.hidden
        )));
    }

    let rel_init = encode_relation_initials(g, provider, descriptions)?;
    let mut cache = HashMap::new();
    let mut instances = Vec::new();
    let mut skipped = 0usize;
    for q in dataset {
        if !reaches_an_answer(g, q, dims.layers, config.lambda)? {
            skipped += 1;
            continue;
        }
        instances.push(TrainInstance {
            q_emb: embed_text(provider, &mut cache, &q.text)?,
            topics: q.topics.clone(),
            answers: q.answers.iter().copied().collect(),
        });
    }
    if instances.is_empty() {
        return Err(TrainError::NoUsableQuestions);
    }
    let dev_instances: Vec<(TrainInstance, Option<Vec<EntityId>>)> = dev
        .iter()
        .map(|q| {
            Ok((
                TrainInstance {
                    q_emb: embed_text(provider, &mut cache, &q.text)?,
                    topics: q.topics.clone(),
                    answers: q.answers.iter().copied().collect(),
                },
                q.candidates.clone(),
            ))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut params = ModelParams::<f32>::init(dims, config.seed).convert::<f64>();
    let mut adam = Adam::new(dims, config);
    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale_epochs = 0usize;

    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let (loss_value, grads) = backward(
                std::slice::from_ref(&instances[idx]),
                g,
                &params,
                &rel_init,
                config.lambda,
            )?;
            adam.step(&mut params, &grads);
            epoch_loss += loss_value;
        }
        let metric = dev_h1(&dev_instances, g, &params, &rel_init, config.lambda)?;
        log.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / instances.len() as f64,
            dev_h1: metric,
            wall_ms: started.elapsed().as_millis(),
        });
        if metric > best_dev {
            best_dev = metric;
            best_params = params.clone();
            best_epoch = epoch;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params.convert::<f32>(),
        log,
        best_epoch,
        best_dev_h1: best_dev,
        skipped_questions: skipped,
    })
}
