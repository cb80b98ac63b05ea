//! The two-stage reasoning loop: an initial retrieval pass builds evidence,
//! then the LLM alternates answer generation and reflection, optionally
//! rewriting the question into sub-questions (new retrieval) or focusing on
//! entities (extra edge retrieval), until it confirms an answer or the step
//! budget runs out.
//!
//! Every prompt is assembled from retrieval outputs only, so each fact
//! sentence shown to the LLM maps back to an edge of some recorded retrieval
//! subgraph. With a scripted client the whole loop is byte-deterministic.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingProvider, RelationDescriptionTable};
use crate::kg::{EntityId, KgError, KnowledgeGraph, QuestionInstance, RelationId, Triple};
use crate::llm::{LlmClient, LlmError};
use crate::model::ModelParams;
use crate::propagation::{
    propagate, score_entities, AttentionRecords, PropError, RetrievalSubgraph,
};
use crate::retrieve::{
    build_bundle, edge_retrieve, RetrievalBundle, RetrievalLimits, RetrieveError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("llm failure at step {step}: {source}")]
    Llm {
        step: usize,
        #[source]
        source: LlmError,
        session: Box<Session>,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("no verbalization template for relation {0}")]
    MissingTemplate(RelationId),
}

/// Where a verbalization template came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateProvenance {
    LlmGenerated,
    Fallback,
}

/// Sentence pattern for one relation with `{s}` and `{o}` placeholders,
/// each appearing exactly once.
#[derive(Clone, Debug)]
pub struct VerbalizationTemplate {
    pub pattern: String,
    pub provenance: TemplateProvenance,
}

/// One template per relation, indexed by relation id.
#[derive(Clone, Debug)]
pub struct TemplateTable {
    templates: Vec<VerbalizationTemplate>,
}

impl TemplateTable {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, r: RelationId) -> Option<&VerbalizationTemplate> {
        self.templates.get(r.0 as usize)
    }

    /// Table of pure fallback patterns, no LLM involved.
    pub fn fallback(g: &KnowledgeGraph) -> Self {
        let templates = g
            .relation_ids()
            .map(|r| VerbalizationTemplate {
                pattern: fallback_pattern(g.relation_label(r).unwrap()),
                provenance: TemplateProvenance::Fallback,
            })
            .collect();
        Self { templates }
    }
}

fn fallback_pattern(label: &str) -> String {
    format!("{{s}} [{label}] {{o}}.")
}

fn valid_template(pattern: &str) -> bool {
    pattern.matches("{s}").count() == 1 && pattern.matches("{o}").count() == 1
}

/// Prompt asking for one relation's verbalization template.
pub fn template_prompt(g: &KnowledgeGraph, descriptions: &RelationDescriptionTable, r: RelationId) -> String {
    let name = g.relation_label(r).unwrap_or("?");
    let description = descriptions.description(r).unwrap_or(name);
    let mut example = String::new();
    for t in g.triples() {
        if t.relation == r {
            example = format!(
                "({}, {}, {})",
                g.entity_label(t.subject).unwrap_or("?"),
                name,
                g.entity_label(t.object).unwrap_or("?"),
            );
            break;
        }
    }
    format!(
        "Task: Write a sentence template that turns facts of the given relation into natural language.\n\
         Relation: {name}\n\
         Description: {description}\n\
         Example fact: {example}\n\
         Use the placeholder {{s}} for the subject exactly once and {{o}} for the object exactly once.\n\
         Output Example: {{s}} is the capital city of {{o}}.\n\
         Reply with the template sentence only."
    )
}

/// Builds one verbalization template per relation. A failed call or a reply
/// without exactly one `{s}` and one `{o}` falls back to
/// `"{s} [label] {o}."` and is flagged.
pub fn build_templates(
    g: &KnowledgeGraph,
    llm: &dyn LlmClient,
    descriptions: &RelationDescriptionTable,
) -> TemplateTable {
    let templates = g
        .relation_ids()
        .map(|r| {
            let prompt = template_prompt(g, descriptions, r);
            match llm.complete(&prompt) {
                Ok(reply) if valid_template(reply.trim()) => VerbalizationTemplate {
                    pattern: reply.trim().to_owned(),
                    provenance: TemplateProvenance::LlmGenerated,
                },
                _ => VerbalizationTemplate {
                    pattern: fallback_pattern(g.relation_label(r).unwrap()),
                    provenance: TemplateProvenance::Fallback,
                },
            }
        })
        .collect();
    TemplateTable { templates }
}

/// Renders one fact through its relation's template.
pub fn verbalize(
    fact: &Triple,
    templates: &TemplateTable,
    g: &KnowledgeGraph,
) -> Result<String, PipelineError> {
    let template = templates
        .get(fact.relation)
        .ok_or(PipelineError::MissingTemplate(fact.relation))?;
    let subject = g.entity_label(fact.subject)?;
    let object = g.entity_label(fact.object)?;
    Ok(template
        .pattern
        .replacen("{s}", subject, 1)
        .replacen("{o}", object, 1))
}

/// One retrieval pass: the bundle plus the subgraph and attention records it
/// was computed from.
#[derive(Clone, Debug)]
pub struct Retrieved {
    pub bundle: RetrievalBundle<f32>,
    pub subgraph: RetrievalSubgraph,
    pub records: AttentionRecords<f32>,
}

/// Inference-side engine: graph, trained parameters, frozen encoder, and the
/// encoded relation descriptions, ready to serve retrieval passes.
pub struct Retriever<'a> {
    g: &'a KnowledgeGraph,
    params: &'a ModelParams<f32>,
    provider: &'a dyn EmbeddingProvider,
    rel_init: Vec<Vec<f32>>,
    pub lambda: usize,
    pub limits: RetrievalLimits,
}

impl<'a> Retriever<'a> {
    /// Encodes every relation description once up front.
    pub fn new(
        g: &'a KnowledgeGraph,
        params: &'a ModelParams<f32>,
        provider: &'a dyn EmbeddingProvider,
        descriptions: &RelationDescriptionTable,
        lambda: usize,
        limits: RetrievalLimits,
    ) -> Result<Self, PipelineError> {
        let mut cache: std::collections::HashMap<String, Vec<f32>> = Default::default();
        let rel_init = g
            .relation_ids()
            .map(|r| {
                let text = descriptions.description(r)?;
                if let Some(v) = cache.get(text) {
                    return Ok(v.clone());
                }
                let v = provider.encode(text)?.vector;
                cache.insert(text.to_owned(), v.clone());
                Ok(v)
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        Ok(Self {
            g,
            params,
            provider,
            rel_init,
            lambda,
            limits,
        })
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.g
    }

    /// Full pass for one question text: encode, propagate, retrieve at all
    /// three levels.
    pub fn retrieve(
        &self,
        text: &str,
        topics: &[EntityId],
        candidates_filter: Option<&[EntityId]>,
    ) -> Result<Retrieved, PipelineError> {
        let q_emb = self.provider.encode(text)?.vector;
        let out = propagate(
            self.g,
            &q_emb,
            topics,
            self.params,
            &self.rel_init,
            self.lambda,
        )?;
        let scores = score_entities(&out.state, self.params);
        let bundle = build_bundle(
            &scores,
            &out.subgraph,
            &out.records,
            self.limits,
            candidates_filter,
        )?;
        Ok(Retrieved {
            bundle,
            subgraph: out.subgraph,
            records: out.records,
        })
    }
}

/// Reasoning-loop configuration.
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub max_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { max_steps: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionStatus {
    Running,
    Confirmed,
    Exhausted,
}

/// One prompt/reply pair of the transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exchange {
    pub prompt: String,
    pub reply: String,
}

/// A predicted answer: free text, resolved to an entity when the text is an
/// exact entity label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    pub text: String,
    pub entity: Option<EntityId>,
}

/// One round of evidence and where it came from.
#[derive(Clone, Debug)]
pub struct EvidenceRound {
    pub origin: String,
    pub retrieved: Retrieved,
}

/// Everything accumulated while answering one question.
#[derive(Clone, Debug)]
pub struct Session {
    pub question: QuestionInstance,
    pub step: usize,
    pub sub_questions: Vec<String>,
    pub focus_entities: Vec<EntityId>,
    pub evidence: Vec<EvidenceRound>,
    pub transcript: Vec<Exchange>,
    pub status: SessionStatus,
    /// Ordered union of the answers of every round; first occurrence wins.
    pub answers: Vec<Answer>,
    pub warnings: Vec<String>,
}

impl Session {
    fn new(question: QuestionInstance) -> Self {
        Self {
            question,
            step: 0,
            sub_questions: Vec::new(),
            focus_entities: Vec::new(),
            evidence: Vec::new(),
            transcript: Vec::new(),
            status: SessionStatus::Running,
            answers: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Union of all fact edges ever shown as evidence.
    pub fn all_fact_edges(&self) -> BTreeSet<Triple> {
        self.evidence
            .iter()
            .flat_map(|round| round.retrieved.bundle.fact_edges())
            .collect()
    }

    /// Union of all edges of the recorded retrieval subgraphs.
    pub fn all_subgraph_edges(&self) -> BTreeSet<Triple> {
        self.evidence
            .iter()
            .flat_map(|round| round.retrieved.subgraph.edges().iter().copied())
            .collect()
    }

    /// The transcript as a structured text document.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for (i, exchange) in self.transcript.iter().enumerate() {
            out.push_str(&format!("=== PROMPT {} ===\n{}\n", i + 1, exchange.prompt));
            out.push_str(&format!("=== REPLY {} ===\n{}\n", i + 1, exchange.reply));
        }
        out
    }

    fn merge_answers(&mut self, new: Vec<Answer>) {
        for answer in new {
            if !self.answers.iter().any(|a| a.text == answer.text) {
                self.answers.push(answer);
            }
        }
    }
}

/// Reflection outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reflection {
    Confirmed,
    Rewrite(Vec<String>),
    Focus(Vec<EntityId>),
    GiveBest,
}

fn render_bundle(
    g: &KnowledgeGraph,
    templates: &TemplateTable,
    bundle: &RetrievalBundle<f32>,
) -> Result<String, PipelineError> {
    let mut out = String::new();
    if !bundle.candidates.is_empty() {
        out.push_str("Candidate entities (ranked):\n");
        for (i, c) in bundle.candidates.iter().enumerate() {
            out.push_str(&format!(
                "{}. {} (score {:.4})\n",
                i + 1,
                g.entity_label(c.entity)?,
                c.score
            ));
        }
    }
    if !bundle.unreached_candidates.is_empty() {
        out.push_str("Candidates not reached by retrieval (score 0):\n");
        for e in &bundle.unreached_candidates {
            out.push_str(&format!("- {}\n", g.entity_label(*e)?));
        }
    }
    let mut any_fact = false;
    for (entity, facts) in &bundle.facts {
        if facts.is_empty() {
            continue;
        }
        if !any_fact {
            out.push_str("Supporting facts:\n");
            any_fact = true;
        }
        let label = g.entity_label(*entity)?;
        for fact in facts {
            out.push_str(&format!(
                "- [{label}] {}\n",
                verbalize(&fact.edge, templates, g)?
            ));
        }
    }
    if !bundle.paths.is_empty() {
        out.push_str("Connections to the topic entities:\n");
        for path in &bundle.paths {
            if path.is_empty() {
                out.push_str(&format!(
                    "- {} is itself a topic entity\n",
                    g.entity_label(path.from)?
                ));
            } else {
                let mut line = format!("- {}", g.entity_label(path.from)?);
                for edge in &path.edges {
                    line.push_str(&format!(
                        " -[{}]-> {}",
                        g.relation_label(edge.relation)?,
                        g.entity_label(edge.object)?
                    ));
                }
                out.push('\n');
                out.insert_str(out.len(), &line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn answer_prompt(
    g: &KnowledgeGraph,
    templates: &TemplateTable,
    session: &Session,
) -> Result<String, PipelineError> {
    let mut out = format!(
        "You answer questions using retrieved knowledge-graph evidence. Use only the evidence below.\n\n\
         Question: {}\n\n",
        session.question.text
    );
    for round in &session.evidence {
        out.push_str(&format!("[Evidence: {}]\n", round.origin));
        out.push_str(&render_bundle(g, templates, &round.retrieved.bundle)?);
        out.push('\n');
    }
    out.push_str(
        "Reply with one line in exactly this form, best answer first:\n\
         ANSWERS: <answer> | <answer> | ...\n\
         then a short rationale.",
    );
    Ok(out)
}

fn reflect_prompt(session: &Session) -> String {
    let answers = if session.answers.is_empty() {
        "(none)".to_owned()
    } else {
        session
            .answers
            .iter()
            .map(|a| a.text.as_str())
            .collect::<Vec<_>>()
            .join(" | ")
    };
    format!(
        "Question: {}\n\
         Proposed answers so far: {answers}\n\
         Reflect: is the retrieved evidence sufficient and are the answers consistent with it?\n\
         Reply with these lines:\n\
         STATUS: confirmed        (if the answers are well supported)\n\
         STATUS: insufficient     (otherwise)\n\
         SUBQUESTIONS: <q1> | <q2>   (optional, at most 3 simpler sub-questions to retrieve for)\n\
         FOCUS: <entity> | <entity>  (optional, entities whose facts should be inspected)",
        session.question.text
    )
}

fn field_after<'t>(reply: &'t str, key: &str) -> Option<&'t str> {
    reply.lines().find_map(|line| {
        let trimmed = line.trim().trim_start_matches(['-', '*', ' ']);
        let rest = trimmed.strip_prefix(key)?;
        Some(rest.trim())
    })
}

fn split_list(raw: &str) -> Vec<String> {
    raw.split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Parses the `ANSWERS:` line into ordered answers; KG labels resolve to
/// entity ids, anything else stays as free text.
pub fn parse_answers(g: &KnowledgeGraph, reply: &str) -> Option<Vec<Answer>> {
    let raw = field_after(reply, "ANSWERS:")?;
    let answers: Vec<Answer> = split_list(raw)
        .into_iter()
        .map(|text| Answer {
            entity: g.entity_by_label(&text),
            text,
        })
        .collect();
    Some(answers)
}

/// Parses a reflection reply. Priority: confirmed status, then sub-questions,
/// then focus entities; anything unparseable means "go with the best so far".
pub fn parse_reflection(
    g: &KnowledgeGraph,
    reply: &str,
    warnings: &mut Vec<String>,
) -> Reflection {
    let status = field_after(reply, "STATUS:").map(str::to_lowercase);
    if status.as_deref().is_some_and(|s| s.starts_with("confirmed")) {
        return Reflection::Confirmed;
    }
    if let Some(raw) = field_after(reply, "SUBQUESTIONS:") {
        let mut subs = split_list(raw);
        if subs.len() > 3 {
            warnings.push(format!("reflection produced {} sub-questions, keeping 3", subs.len()));
            subs.truncate(3);
        }
        if !subs.is_empty() {
            return Reflection::Rewrite(subs);
        }
    }
    if let Some(raw) = field_after(reply, "FOCUS:") {
        let mut entities = Vec::new();
        for label in split_list(raw) {
            match g.entity_by_label(&label) {
                Some(e) => entities.push(e),
                None => warnings.push(format!("focus entity {label:?} is not in the graph")),
            }
        }
        if !entities.is_empty() {
            return Reflection::Focus(entities);
        }
    }
    Reflection::GiveBest
}

/// Exact-substring topic resolution for a sub-question; falls back to the
/// original topics when no entity label occurs in the text.
fn resolve_subquestion_topics(
    g: &KnowledgeGraph,
    text: &str,
    original: &[EntityId],
) -> Vec<EntityId> {
    let mut found: Vec<EntityId> = g
        .entity_ids()
        .filter(|e| {
            let label = g.entity_label(*e).unwrap();
            label.len() >= 2 && text.contains(label)
        })
        .collect();
    found.sort_unstable();
    if found.is_empty() {
        original.to_vec()
    } else {
        found
    }
}

/// Drives the full loop for one question. Stage 1 retrieves initial evidence;
/// stage 2 alternates answer generation and reflection for at most
/// `config.max_steps` rounds.
pub fn run_pipeline(
    question: &QuestionInstance,
    retriever: &Retriever<'_>,
    templates: &TemplateTable,
    llm: &dyn LlmClient,
    config: &PipelineConfig,
) -> Result<(Vec<Answer>, Session), PipelineError> {
    let g = retriever.graph();
    let mut session = Session::new(question.clone());

    let initial = retriever.retrieve(
        &question.text,
        &question.topics,
        question.candidates.as_deref(),
    )?;
    session.evidence.push(EvidenceRound {
        origin: "initial retrieval".to_owned(),
        retrieved: initial,
    });

    while session.step < config.max_steps {
        session.step += 1;

        // answer round: ask, parse, re-ask once on a malformed reply
        let prompt = answer_prompt(g, templates, &session)?;
        let reply = complete(llm, &prompt, &mut session)?;
        let mut parsed = parse_answers(g, &reply);
        if parsed.is_none() {
            let retry_prompt = format!(
                "{prompt}\n\nYour previous reply could not be parsed. \
                 Reply again with a line starting exactly with `ANSWERS:`."
            );
            let retry_reply = complete(llm, &retry_prompt, &mut session)?;
            parsed = parse_answers(g, &retry_reply);
            if parsed.is_none() {
                session
                    .warnings
                    .push(format!("step {}: unparseable answer reply", session.step));
            }
        }
        session.merge_answers(parsed.unwrap_or_default());

        // reflection round
        let prompt = reflect_prompt(&session);
        let reply = complete(llm, &prompt, &mut session)?;
        let decision = parse_reflection(g, &reply, &mut session.warnings);
        match decision {
            Reflection::Confirmed if !session.answers.is_empty() => {
                session.status = SessionStatus::Confirmed;
                break;
            }
            Reflection::Confirmed | Reflection::GiveBest => {
                session.status = SessionStatus::Exhausted;
                break;
            }
            Reflection::Rewrite(subs) => {
                if session.step < config.max_steps {
                    for sub in &subs {
                        let topics = resolve_subquestion_topics(g, sub, &question.topics);
                        let retrieved =
                            retriever.retrieve(sub, &topics, question.candidates.as_deref())?;
                        session.evidence.push(EvidenceRound {
                            origin: format!("sub-question: {sub}"),
                            retrieved,
                        });
                    }
                }
                session.sub_questions.extend(subs);
            }
            Reflection::Focus(entities) => {
                if session.step < config.max_steps {
                    let latest = session
                        .evidence
                        .last()
                        .expect("initial evidence always present");
                    let records = latest.retrieved.records.clone();
                    let subgraph = latest.retrieved.subgraph.clone();
                    let mut facts = Vec::new();
                    for &e in &entities {
                        facts.push((e, edge_retrieve(&records, e, retriever.limits.n)?));
                    }
                    session.evidence.push(EvidenceRound {
                        origin: format!(
                            "focused facts around: {}",
                            entities
                                .iter()
                                .map(|e| g.entity_label(*e).unwrap_or("?"))
                                .collect::<Vec<_>>()
                                .join(", ")
                        ),
                        retrieved: Retrieved {
                            bundle: RetrievalBundle {
                                candidates: Vec::new(),
                                unreached_candidates: Vec::new(),
                                facts,
                                paths: Vec::new(),
                            },
                            subgraph,
                            records,
                        },
                    });
                }
                session.focus_entities.extend(entities);
            }
        }
    }

    if session.status == SessionStatus::Running {
        session.status = SessionStatus::Exhausted;
    }
    Ok((session.answers.clone(), session))
}

fn complete(
    llm: &dyn LlmClient,
    prompt: &str,
    session: &mut Session,
) -> Result<String, PipelineError> {
    match llm.complete(prompt) {
        Ok(reply) => {
            session.transcript.push(Exchange {
                prompt: prompt.to_owned(),
                reply: reply.clone(),
            });
            Ok(reply)
        }
        Err(source) => Err(PipelineError::Llm {
            step: session.step,
            source,
            session: Box::new(session.clone()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::llm::{ScriptEntry, ScriptedClient};
    use crate::model::Dims;

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::parse_triples(
            "Basketball\tsports.sport.teams\tLakers\nLakers\tlocated_in\tLos Angeles\n",
            "test",
        )
        .unwrap()
        .augment_inverse()
        .unwrap()
    }

    fn question(g: &KnowledgeGraph) -> QuestionInstance {
        QuestionInstance {
            text: "Which team plays basketball?".into(),
            topics: vec![g.entity_by_label("Basketball").unwrap()],
            answers: vec![g.entity_by_label("Lakers").unwrap()],
            candidates: None,
        }
    }

    fn fixture<'a>(
        g: &'a KnowledgeGraph,
        params: &'a ModelParams<f32>,
        provider: &'a HashEmbedder,
        descriptions: &RelationDescriptionTable,
    ) -> Retriever<'a> {
        Retriever::new(g, params, provider, descriptions, 100, RetrievalLimits::default())
            .unwrap()
    }

    #[test]
    fn templates_store_valid_replies_and_fall_back_otherwise() {
        let g = graph();
        let descriptions = RelationDescriptionTable::from_names(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("sports.sport.teams", "{s} has the team {o}."),
            ScriptEntry::reply("located_in", "no placeholders here"),
            ScriptEntry::failure("sports.sport.teams^-1", "down"),
            ScriptEntry::reply("located_in^-1", "{o} hosts {s}."),
        ]);
        let table = build_templates(&g, &llm, &descriptions);
        assert_eq!(table.len(), 4);
        let teams = g.relation_by_label("sports.sport.teams").unwrap();
        assert_eq!(table.get(teams).unwrap().pattern, "{s} has the team {o}.");
        assert_eq!(
            table.get(teams).unwrap().provenance,
            TemplateProvenance::LlmGenerated
        );
        let located = g.relation_by_label("located_in").unwrap();
        assert_eq!(
            table.get(located).unwrap().pattern,
            "{s} [located_in] {o}."
        );
        assert_eq!(
            table.get(located).unwrap().provenance,
            TemplateProvenance::Fallback
        );
    }

    #[test]
    fn verbalize_substitutes_labels() {
        let g = graph();
        let mut table = TemplateTable::fallback(&g);
        let teams = g.relation_by_label("sports.sport.teams").unwrap();
        table.templates[teams.0 as usize] = VerbalizationTemplate {
            pattern: "{s} has team {o}.".into(),
            provenance: TemplateProvenance::LlmGenerated,
        };
        let fact = Triple::new(
            g.entity_by_label("Basketball").unwrap(),
            teams,
            g.entity_by_label("Lakers").unwrap(),
        );
        assert_eq!(
            verbalize(&fact, &table, &g).unwrap(),
            "Basketball has team Lakers."
        );
        // fallback form
        let table = TemplateTable::fallback(&g);
        assert_eq!(
            verbalize(&fact, &table, &g).unwrap(),
            "Basketball [sports.sport.teams] Lakers."
        );
        // inverse facts use the inverse relation's own template
        let inv = g.partner(teams).unwrap();
        let inv_fact = Triple::new(
            g.entity_by_label("Lakers").unwrap(),
            inv,
            g.entity_by_label("Basketball").unwrap(),
        );
        assert_eq!(
            verbalize(&inv_fact, &table, &g).unwrap(),
            "Lakers [sports.sport.teams^-1] Basketball."
        );
    }

    #[test]
    fn happy_path_confirms_in_one_step() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers\nbecause the fact list says so"),
            ScriptEntry::reply("STATUS", "STATUS: confirmed"),
        ]);
        let (answers, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(session.status, SessionStatus::Confirmed);
        assert_eq!(session.step, 1);
        assert_eq!(answers.len(), 1);
        assert_eq!(answers[0].text, "Lakers");
        assert_eq!(answers[0].entity, g.entity_by_label("Lakers"));
        assert_eq!(session.transcript.len(), 2);
    }

    #[test]
    fn rewrite_then_confirm_runs_two_steps_with_new_retrieval() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
            ScriptEntry::reply(
                "STATUS",
                "STATUS: insufficient\nSUBQUESTIONS: Where is Lakers located? | What plays in Los Angeles?",
            ),
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers | Los Angeles"),
            ScriptEntry::reply("STATUS", "STATUS: confirmed"),
        ]);
        let (answers, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(session.status, SessionStatus::Confirmed);
        assert_eq!(session.step, 2);
        assert_eq!(session.sub_questions.len(), 2);
        // initial + 2 sub-question rounds
        assert_eq!(session.evidence.len(), 3);
        // "Where is Lakers located?" resolves Lakers as its topic
        assert_eq!(session.transcript.len(), 4);
        assert_eq!(answers.len(), 2);
    }

    #[test]
    fn focus_branch_adds_edge_evidence() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
            ScriptEntry::reply("STATUS", "STATUS: insufficient\nFOCUS: Lakers | Unknown Place"),
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
            ScriptEntry::reply("STATUS", "STATUS: confirmed"),
        ]);
        let (_, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(session.status, SessionStatus::Confirmed);
        assert_eq!(session.focus_entities, vec![g.entity_by_label("Lakers").unwrap()]);
        assert_eq!(session.evidence.len(), 2);
        assert!(session.evidence[1].origin.starts_with("focused facts"));
        assert!(!session.evidence[1].retrieved.bundle.facts[0].1.is_empty());
        assert!(session.warnings.iter().any(|w| w.contains("Unknown Place")));
    }

    #[test]
    fn never_confirming_script_exhausts_at_max_steps() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let entries: Vec<ScriptEntry> = (0..3)
            .flat_map(|_| {
                vec![
                    ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
                    ScriptEntry::reply("STATUS", "STATUS: insufficient\nFOCUS: Lakers"),
                ]
            })
            .collect();
        let llm = ScriptedClient::new(entries);
        let (answers, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(session.status, SessionStatus::Exhausted);
        assert_eq!(session.step, 3);
        assert_eq!(session.transcript.len(), 6);
        assert!(!answers.is_empty());
    }

    #[test]
    fn malformed_reply_gets_one_retry_then_empty_round() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("ANSWERS:", "no structured block at all"),
            ScriptEntry::reply("could not be parsed", "ANSWERS: Lakers"),
            ScriptEntry::reply("STATUS", "STATUS: confirmed"),
        ]);
        let (answers, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(answers.len(), 1);
        assert_eq!(session.transcript.len(), 3);
        assert_eq!(session.status, SessionStatus::Confirmed);
    }

    #[test]
    fn non_kg_answers_are_kept_as_free_text() {
        let g = graph();
        let answers = parse_answers(&g, "ANSWERS: Lakers | The Moon\nrationale").unwrap();
        assert_eq!(answers.len(), 2);
        assert!(answers[0].entity.is_some());
        assert!(answers[1].entity.is_none());
        assert_eq!(answers[1].text, "The Moon");
    }

    #[test]
    fn transport_failure_carries_partial_session() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![ScriptEntry::failure("ANSWERS:", "socket closed")]);
        let err = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap_err();
        match err {
            PipelineError::Llm { step, session, .. } => {
                assert_eq!(step, 1);
                assert_eq!(session.evidence.len(), 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn transcripts_are_byte_identical_across_runs() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let run = || {
            let llm = ScriptedClient::new(vec![
                ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
                ScriptEntry::reply("STATUS", "STATUS: confirmed"),
            ]);
            let (_, session) = run_pipeline(
                &question(&g),
                &retriever,
                &templates,
                &llm,
                &PipelineConfig::default(),
            )
            .unwrap();
            session.transcript_text()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_prompted_fact_comes_from_a_recorded_subgraph() {
        let g = graph();
        let params = ModelParams::<f32>::init(Dims::new(2, 8, 4).unwrap(), 0);
        let provider = HashEmbedder::new(8, 0);
        let descriptions = RelationDescriptionTable::from_names(&g);
        let retriever = fixture(&g, &params, &provider, &descriptions);
        let templates = TemplateTable::fallback(&g);
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
            ScriptEntry::reply("STATUS", "STATUS: insufficient\nFOCUS: Lakers"),
            ScriptEntry::reply("ANSWERS:", "ANSWERS: Lakers"),
            ScriptEntry::reply("STATUS", "STATUS: confirmed"),
        ]);
        let (_, session) = run_pipeline(
            &question(&g),
            &retriever,
            &templates,
            &llm,
            &PipelineConfig::default(),
        )
        .unwrap();
        let shown = session.all_fact_edges();
        let recorded = session.all_subgraph_edges();
        assert!(!shown.is_empty());
        assert!(shown.is_subset(&recorded));
        for t in &shown {
            assert!(g.contains_triple(t));
        }
    }
}
