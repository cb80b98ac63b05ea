//! Learnable model state: the per-layer weight matrices and the scoring row,
//! plus a bit-exact binary checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{Matrix, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    BadCheckpoint { path: String, message: String },
    #[error("invalid dimensions: layers {layers}, hidden {hidden}, attention {attention}")]
    BadDims {
        layers: usize,
        hidden: usize,
        attention: usize,
    },
}

/// Model sizes: layer count, hidden width, and attention projection width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub layers: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl Dims {
    pub fn new(layers: usize, hidden: usize, attention: usize) -> Result<Self, ModelError> {
        if layers == 0 || hidden == 0 || attention == 0 {
            return Err(ModelError::BadDims {
                layers,
                hidden,
                attention,
            });
        }
        Ok(Self {
            layers,
            hidden,
            attention,
        })
    }

    /// Small configuration for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            layers: 3,
            hidden: 64,
            attention: 8,
        }
    }

    /// Full-scale configuration (1024-wide hidden state).
    pub fn full_scale() -> Self {
        Self {
            layers: 3,
            hidden: 1024,
            attention: 4,
        }
    }
}

/// Weights of one message-passing layer.
///
/// Shapes: `relation_update` d×2d, `message` d×d, `attn_out` 1×a, and
/// `attn_subject`/`attn_relation`/`attn_question` a×d, where d is the hidden
/// width and a the attention projection width.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    /// W1: maps `[relation; question]` to the next relation embedding.
    pub relation_update: Matrix<F>,
    /// W2: applied to the aggregated message sum of each entity.
    pub message: Matrix<F>,
    /// W3: projects the attention hidden vector to a scalar logit.
    pub attn_out: Matrix<F>,
    /// W4: subject-embedding term of the attention pre-activation.
    pub attn_subject: Matrix<F>,
    /// W5: relation-embedding term.
    pub attn_relation: Matrix<F>,
    /// W6: question-embedding term.
    pub attn_question: Matrix<F>,
}

/// All learnable state: one [`LayerParams`] per layer plus the scoring row W7.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub dims: Dims,
    pub layers: Vec<LayerParams<F>>,
    /// W7: 1×d row reading an entity embedding into a scalar score.
    pub score: Matrix<F>,
}

fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        // sample in f32 first so f32 and f64 initializations agree exactly
        let u: f32 = rng.gen::<f32>() * 2.0 - 1.0;
        *v = F::from_f64(f64::from(u) * bound);
    }
    m
}

impl<F: Scalar> ModelParams<F> {
    /// Xavier-uniform initialization with a fixed seed; the draw order is
    /// fixed (layer-ascending, W1..W6, then W7) so results are reproducible.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.hidden;
        let a = dims.attention;
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                relation_update: xavier(&mut rng, d, 2 * d),
                message: xavier(&mut rng, d, d),
                attn_out: xavier(&mut rng, 1, a),
                attn_subject: xavier(&mut rng, a, d),
                attn_relation: xavier(&mut rng, a, d),
                attn_question: xavier(&mut rng, a, d),
            })
            .collect();
        let score = xavier(&mut rng, 1, d);
        Self {
            dims,
            layers,
            score,
        }
    }

    /// All-zero parameters with the same shapes; the gradient container.
    pub fn zeros(dims: Dims) -> Self {
        let d = dims.hidden;
        let a = dims.attention;
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                relation_update: Matrix::zeros(d, 2 * d),
                message: Matrix::zeros(d, d),
                attn_out: Matrix::zeros(1, a),
                attn_subject: Matrix::zeros(a, d),
                attn_relation: Matrix::zeros(a, d),
                attn_question: Matrix::zeros(a, d),
            })
            .collect();
        Self {
            dims,
            layers,
            score: Matrix::zeros(1, d),
        }
    }

    pub fn convert<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            dims: self.dims,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    relation_update: l.relation_update.convert(),
                    message: l.message.convert(),
                    attn_out: l.attn_out.convert(),
                    attn_subject: l.attn_subject.convert(),
                    attn_relation: l.attn_relation.convert(),
                    attn_question: l.attn_question.convert(),
                })
                .collect(),
            score: self.score.convert(),
        }
    }

    /// Named views of every matrix, in checkpoint order.
    pub fn matrices(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 6 + 1);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("W1[{i}]"), &l.relation_update));
            out.push((format!("W2[{i}]"), &l.message));
            out.push((format!("W3[{i}]"), &l.attn_out));
            out.push((format!("W4[{i}]"), &l.attn_subject));
            out.push((format!("W5[{i}]"), &l.attn_relation));
            out.push((format!("W6[{i}]"), &l.attn_question));
        }
        out.push(("W7".to_owned(), &self.score));
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 6 + 1);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("W1[{i}]"), &mut l.relation_update));
            out.push((format!("W2[{i}]"), &mut l.message));
            out.push((format!("W3[{i}]"), &mut l.attn_out));
            out.push((format!("W4[{i}]"), &mut l.attn_subject));
            out.push((format!("W5[{i}]"), &mut l.attn_relation));
            out.push((format!("W6[{i}]"), &mut l.attn_question));
        }
        out.push(("W7".to_owned(), &mut self.score));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|(_, m)| m.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.data().len()).sum()
    }
}

/// Magic bytes opening a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KGQACKP1";
/// Current checkpoint version.
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams<f32> {
    /// Writes magic, version, dims, then every matrix row-major as
    /// little-endian f32 in [`ModelParams::matrices`] order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dims.layers as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims.attention as u32).to_le_bytes());
        for (_, m) in self.matrices() {
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bad = |message: String| ModelError::BadCheckpoint {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dims = Dims::new(u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize)
            .map_err(|e| bad(e.to_string()))?;
        let mut params = ModelParams::<f32>::zeros(dims);
        let mut off = 24usize;
        for (name, m) in params.matrices_mut() {
            for v in m.data_mut() {
                let end = off + 4;
                if end > bytes.len() {
                    return Err(bad(format!("truncated while reading {name}")));
                }
                *v = f32::from_le_bytes(bytes[off..end].try_into().unwrap());
                off = end;
            }
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after last matrix".into()));
        }
        Ok(params)
    }
}
