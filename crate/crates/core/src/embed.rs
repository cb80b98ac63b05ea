//! Text-embedding providers.
//!
//! The engine never runs a text encoder itself; it consumes d-dimensional
//! vectors through the [`EmbeddingProvider`] trait. Three backends are
//! provided: a deterministic hash-seeded embedder for tests and synthetic
//! tasks, a precomputed-file provider serving stored vectors bit-exactly, and
//! a remote encoder client. This module also builds the per-relation
//! description table that seeds relation embeddings.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, RelationId};
use crate::llm::{Gate, LlmClient};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: provider serves {provider} but {expected} was configured")]
    DimensionMismatch { provider: usize, expected: usize },
    #[error("no stored embedding for key {0:?}")]
    KeyNotFound(String),
    #[error("{path}: {message}")]
    BadFile { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("remote encoder failure after {attempts} attempt(s): {message}")]
    Remote { attempts: u32, message: String },
    #[error("non-finite component in embedding for {0:?}")]
    NonFinite(String),
    #[error("description table misses relation {0}")]
    MissingDescription(RelationId),
}

/// A fixed-length text embedding plus the id of the backend that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub source_tag: String,
}

/// Deterministic text-to-vector backend of dimension `dim()`.
///
/// Contract: the same text always yields the same vector, every vector has
/// exactly `dim()` finite components.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn source_tag(&self) -> &str;
    fn encode(&self, text: &str) -> Result<TextEmbedding, EmbedError>;
}

fn check_vector(tag: &str, text: &str, dim: usize, vector: Vec<f32>) -> Result<TextEmbedding, EmbedError> {
    if vector.len() != dim {
        return Err(EmbedError::DimensionMismatch {
            provider: vector.len(),
            expected: dim,
        });
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite(text.to_owned()));
    }
    Ok(TextEmbedding {
        vector,
        source_tag: tag.to_owned(),
    })
}

/// Test backend: a seeded PRNG keyed by the text bytes, L2-normalized.
/// Reproducible across runs and platforms for a fixed seed. Carries no
/// semantics; two distinct texts map to independent unit vectors.
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source_tag(&self) -> &str {
        "hash"
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f32> = (0..self.dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            v[0] = 1.0;
        } else {
            let inv = (1.0 / norm) as f32;
            for x in &mut v {
                *x *= inv;
            }
        }
        check_vector("hash", text, self.dim, v)
    }
}

/// Magic bytes opening a precomputed-embedding file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"KGQAEMB1";
/// Current embedding-file version.
pub const EMBEDDING_VERSION: u32 = 1;

/// Writes a precomputed-embedding file: magic, version, dimension, entry
/// count, then per entry a length-prefixed UTF-8 key and `dim` little-endian
/// f32 components. Rejects entries whose vector length is not `dim`.
pub fn write_embeddings(
    path: &Path,
    dim: usize,
    entries: &[(String, Vec<f32>)],
) -> Result<(), EmbedError> {
    let io_err = |source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, vector) in entries {
        if vector.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                provider: vector.len(),
                expected: dim,
            });
        }
        buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        for v in vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

/// Serves exact stored vectors from a file written by [`write_embeddings`].
pub struct PrecomputedProvider {
    dim: usize,
    entries: HashMap<String, Vec<f32>>,
}

impl PrecomputedProvider {
    /// Loads the file and checks its header dimension against `expected_dim`.
    pub fn load(path: &Path, expected_dim: usize) -> Result<Self, EmbedError> {
        let bad = |message: &str| EmbedError::BadFile {
            path: path.display().to_string(),
            message: message.to_owned(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| EmbedError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], EmbedError> {
            let end = *cursor + n;
            if end > bytes.len() {
                return Err(bad("truncated file"));
            }
            let slice = &bytes[*cursor..end];
            *cursor = end;
            Ok(slice)
        };
        let u32_at = |cursor: &mut usize| -> Result<u32, EmbedError> {
            let b = take(cursor, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };

        if take(&mut cursor, 8)? != EMBEDDING_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32_at(&mut cursor)?;
        if version != EMBEDDING_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32_at(&mut cursor)? as usize;
        if dim != expected_dim {
            return Err(EmbedError::DimensionMismatch {
                provider: dim,
                expected: expected_dim,
            });
        }
        let count = u32_at(&mut cursor)? as usize;
        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let key_len = u32_at(&mut cursor)? as usize;
            let key = std::str::from_utf8(take(&mut cursor, key_len)?)
                .map_err(|_| bad("key is not UTF-8"))?
                .to_owned();
            let raw = take(&mut cursor, dim * 4)?;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.insert(key, vector);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Self { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source_tag(&self) -> &str {
        "precomputed"
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        let vector = self
            .entries
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::KeyNotFound(text.to_owned()))?;
        check_vector("precomputed", text, self.dim, vector)
    }
}

/// Env var holding the remote encoder endpoint URL.
pub const ENCODER_URL_VAR: &str = "KGQA_ENCODER_URL";
/// Env var holding the remote encoder credential (optional).
pub const ENCODER_API_KEY_VAR: &str = "KGQA_ENCODER_API_KEY";

#[derive(Clone, Debug)]
pub struct RemoteEncoderConfig {
    pub url: String,
    pub dim: usize,
    pub timeout: Duration,
    pub retries: u32,
    pub max_in_flight: usize,
    pub api_key: Option<String>,
}

impl RemoteEncoderConfig {
    /// Reads the endpoint from [`ENCODER_URL_VAR`] and the optional credential
    /// from [`ENCODER_API_KEY_VAR`].
    pub fn from_env(dim: usize) -> Result<Self, EmbedError> {
        let url = std::env::var(ENCODER_URL_VAR).map_err(|_| EmbedError::BadFile {
            path: ENCODER_URL_VAR.to_owned(),
            message: "environment variable not set".to_owned(),
        })?;
        Ok(Self {
            url,
            dim,
            timeout: Duration::from_secs(30),
            retries: 2,
            max_in_flight: 4,
            api_key: std::env::var(ENCODER_API_KEY_VAR).ok(),
        })
    }
}

#[derive(Deserialize)]
struct EncodeResponse {
    vector: Vec<f32>,
}

/// Posts `{"text": ...}` to the configured endpoint and expects
/// `{"vector": [f32; d]}` back. Transient failures are retried; in-flight
/// requests are bounded by `max_in_flight`.
pub struct RemoteEncoder {
    config: RemoteEncoderConfig,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteEncoder {
    pub fn new(config: RemoteEncoderConfig) -> Result<Self, EmbedError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EmbedError::Remote {
                attempts: 0,
                message: e.to_string(),
            })?;
        let gate = Gate::new(config.max_in_flight);
        Ok(Self { config, http, gate })
    }

    fn post_once(&self, text: &str) -> Result<Vec<f32>, String> {
        let mut request = self
            .http
            .post(&self.config.url)
            .json(&serde_json::json!({ "text": text }));
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("status {status}"));
        }
        let parsed: EncodeResponse = response.json().map_err(|e| e.to_string())?;
        Ok(parsed.vector)
    }
}

impl EmbeddingProvider for RemoteEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn source_tag(&self) -> &str {
        "remote"
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        self.gate.run(|| {
            let attempts = self.config.retries + 1;
            let mut last = String::new();
            for attempt in 0..attempts {
                match self.post_once(text) {
                    Ok(vector) => return check_vector("remote", text, self.config.dim, vector),
                    Err(message) => last = message,
                }
                if attempt + 1 < attempts {
                    std::thread::sleep(Duration::from_millis(100 << attempt));
                }
            }
            Err(EmbedError::Remote {
                attempts,
                message: last,
            })
        })
    }
}

/// Where a relation description came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptionProvenance {
    LlmGenerated,
    FileLoaded,
    FallbackName,
}

impl DescriptionProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LlmGenerated => "llm-generated",
            Self::FileLoaded => "file-loaded",
            Self::FallbackName => "fallback-name",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "llm-generated" => Some(Self::LlmGenerated),
            "file-loaded" => Some(Self::FileLoaded),
            "fallback-name" => Some(Self::FallbackName),
            _ => None,
        }
    }
}

/// One textual description per relation (inverses included), with provenance.
#[derive(Clone, Debug)]
pub struct RelationDescriptionTable {
    entries: Vec<(String, DescriptionProvenance)>,
}

impl RelationDescriptionTable {
    /// Fallback table using raw relation labels as descriptions.
    pub fn from_names(g: &KnowledgeGraph) -> Self {
        let entries = g
            .relation_ids()
            .map(|r| {
                (
                    g.relation_label(r).unwrap().to_owned(),
                    DescriptionProvenance::FallbackName,
                )
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn description(&self, r: RelationId) -> Result<&str, EmbedError> {
        self.entries
            .get(r.0 as usize)
            .map(|(d, _)| d.as_str())
            .ok_or(EmbedError::MissingDescription(r))
    }

    pub fn provenance(&self, r: RelationId) -> Result<DescriptionProvenance, EmbedError> {
        self.entries
            .get(r.0 as usize)
            .map(|(_, p)| *p)
            .ok_or(EmbedError::MissingDescription(r))
    }

    /// Writes `label<TAB>provenance<TAB>description` per relation. Tabs and
    /// newlines inside descriptions are flattened to spaces.
    pub fn save(&self, path: &Path, g: &KnowledgeGraph) -> Result<(), EmbedError> {
        let mut out = String::new();
        for (idx, (description, provenance)) in self.entries.iter().enumerate() {
            let label = g.relation_label(RelationId(idx as u32)).map_err(|_| {
                EmbedError::MissingDescription(RelationId(idx as u32))
            })?;
            let clean: String = description
                .chars()
                .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
                .collect();
            out.push_str(&format!("{label}\t{}\t{clean}\n", provenance.as_str()));
        }
        fs::write(path, out).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads a table saved by [`RelationDescriptionTable::save`]; every
    /// relation of `g` must have exactly one entry.
    pub fn load(path: &Path, g: &KnowledgeGraph) -> Result<Self, EmbedError> {
        let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |message: String| EmbedError::BadFile {
            path: path.display().to_string(),
            message,
        };
        let mut by_label: HashMap<String, (String, DescriptionProvenance)> = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(label), Some(prov), Some(desc)) => {
                    let provenance = DescriptionProvenance::parse(prov)
                        .ok_or_else(|| bad(format!("line {}: bad provenance {prov:?}", idx + 1)))?;
                    by_label.insert(label.to_owned(), (desc.to_owned(), provenance));
                }
                _ => return Err(bad(format!("line {}: expected 3 tab-separated fields", idx + 1))),
            }
        }
        let entries = g
            .relation_ids()
            .map(|r| {
                let label = g.relation_label(r).unwrap();
                by_label
                    .get(label)
                    .cloned()
                    .ok_or_else(|| bad(format!("no description for relation {label:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }
}

/// Builds the description-generation prompt for one relation: the relation
/// name plus up to `samples` example facts rendered with entity labels.
pub fn description_prompt(g: &KnowledgeGraph, r: RelationId, samples: usize) -> String {
    let name = g.relation_label(r).unwrap_or("?");
    let mut examples = String::new();
    let mut shown = 0;
    for t in g.triples() {
        if t.relation != r || shown >= samples {
            continue;
        }
        if shown > 0 {
            examples.push_str("; ");
        }
        examples.push_str(&format!(
            "({}, {}, {})",
            g.entity_label(t.subject).unwrap_or("?"),
            name,
            g.entity_label(t.object).unwrap_or("?"),
        ));
        shown += 1;
    }
    if shown == 0 {
        examples.push_str("(none)");
    }
    format!(
        "Task: Generate a description of the given relation.\n\
         Relation: {name}\n\
         Examples: {examples}\n\
         Output Example: {name} describes how a subject entity is associated with an object entity.\n\
         Reply with one sentence describing the relation."
    )
}

/// Asks the LLM for a unified description of every relation (inverses get
/// their own prompts with inverse-direction examples). A failed call falls
/// back to the raw relation name and is flagged as such; failures are never
/// fatal.
pub fn describe_all_relations(
    g: &KnowledgeGraph,
    llm: &dyn LlmClient,
    samples_per_relation: usize,
) -> RelationDescriptionTable {
    let entries = g
        .relation_ids()
        .map(|r| {
            let prompt = description_prompt(g, r, samples_per_relation);
            match llm.complete(&prompt) {
                Ok(reply) if !reply.trim().is_empty() => {
                    (reply.trim().to_owned(), DescriptionProvenance::LlmGenerated)
                }
                _ => (
                    g.relation_label(r).unwrap().to_owned(),
                    DescriptionProvenance::FallbackName,
                ),
            }
        })
        .collect();
    RelationDescriptionTable { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptEntry, ScriptedClient};

    fn toy_graph() -> KnowledgeGraph {
        KnowledgeGraph::parse_triples("A\tcapital_of\tB\nC\tborders\tB\n", "test")
            .unwrap()
            .augment_inverse()
            .unwrap()
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit_norm() {
        let p = HashEmbedder::new(16, 7);
        let a = p.encode("some text").unwrap();
        let b = p.encode("some text").unwrap();
        assert_eq!(a.vector, b.vector);
        let norm: f64 = a.vector.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        assert_eq!(a.source_tag, "hash");
    }

    #[test]
    fn hash_embedder_seed_changes_vectors() {
        let a = HashEmbedder::new(8, 1).encode("t").unwrap();
        let b = HashEmbedder::new(8, 2).encode("t").unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn distinct_texts_never_collided_over_ten_thousand_strings() {
        let p = HashEmbedder::new(16, 0);
        let mut seen = std::collections::HashSet::new();
        for i in 0..10_000 {
            let v = p.encode(&format!("string-{i}")).unwrap().vector;
            let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits), "collision at string-{i}");
        }
    }

    #[test]
    fn precomputed_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let entries = vec![
            ("hello".to_owned(), vec![1.0_f32, -2.5, 3.25e-7, 0.0]),
            ("world".to_owned(), vec![f32::MIN_POSITIVE, 1e30, -0.0, 42.0]),
        ];
        write_embeddings(&path, 4, &entries).unwrap();
        let p = PrecomputedProvider::load(&path, 4).unwrap();
        for (key, vector) in &entries {
            let got = p.encode(key).unwrap().vector;
            let want: Vec<u32> = vector.iter().map(|v| v.to_bits()).collect();
            let have: Vec<u32> = got.iter().map(|v| v.to_bits()).collect();
            assert_eq!(want, have);
        }
        assert!(matches!(
            p.encode("missing"),
            Err(EmbedError::KeyNotFound(_))
        ));
    }

    #[test]
    fn precomputed_dimension_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embeddings(&path, 8, &[("k".to_owned(), vec![0.5; 8])]).unwrap();
        assert!(PrecomputedProvider::load(&path, 8).is_ok());
        assert!(matches!(
            PrecomputedProvider::load(&path, 16),
            Err(EmbedError::DimensionMismatch {
                provider: 8,
                expected: 16
            })
        ));
    }

    #[test]
    fn scripted_descriptions_cover_all_relations() {
        let g = toy_graph();
        assert_eq!(g.relation_count(), 4);
        let llm = ScriptedClient::constant("links a place to its country.");
        let table = describe_all_relations(&g, &llm, 2);
        assert_eq!(table.len(), 4);
        for r in g.relation_ids() {
            assert_eq!(table.description(r).unwrap(), "links a place to its country.");
            assert_eq!(table.provenance(r).unwrap(), DescriptionProvenance::LlmGenerated);
        }
    }

    #[test]
    fn failed_description_falls_back_to_relation_name() {
        let g = toy_graph();
        let llm = ScriptedClient::new(vec![
            ScriptEntry::reply("capital_of", "desc 0"),
            ScriptEntry::failure("borders", "unavailable"),
            ScriptEntry::reply("capital_of^-1", "desc 2"),
            ScriptEntry::reply("borders^-1", "desc 3"),
        ]);
        let table = describe_all_relations(&g, &llm, 1);
        assert_eq!(table.description(RelationId(1)).unwrap(), "borders");
        assert_eq!(
            table.provenance(RelationId(1)).unwrap(),
            DescriptionProvenance::FallbackName
        );
        assert_eq!(
            table.provenance(RelationId(0)).unwrap(),
            DescriptionProvenance::LlmGenerated
        );
    }

    #[test]
    fn description_prompt_uses_inverse_direction_examples() {
        let g = toy_graph();
        let rinv = g.relation_by_label("capital_of^-1").unwrap();
        let prompt = description_prompt(&g, rinv, 3);
        assert!(prompt.contains("(B, capital_of^-1, A)"), "{prompt}");
    }

    #[test]
    fn description_table_save_load_round_trip() {
        let g = toy_graph();
        let llm = ScriptedClient::constant("a description\twith a tab");
        let table = describe_all_relations(&g, &llm, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.tsv");
        table.save(&path, &g).unwrap();
        let loaded = RelationDescriptionTable::load(&path, &g).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(
            loaded.description(RelationId(0)).unwrap(),
            "a description with a tab"
        );
    }
}
