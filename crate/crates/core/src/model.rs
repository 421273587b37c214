//! Toy encoders: per-anatomy query cross-attention on the visual side, pooled
//! sentence features through a linear map on the text side, and a
//! log-parameterized temperature.

use std::path::Path;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Matrix};

pub const PARAM_Q: &str = "Q";
pub const PARAM_W_V: &str = "W_v";
pub const PARAM_W_T: &str = "W_t";
pub const PARAM_LOG_TAU: &str = "log_tau";

/// Decay of positional pooling weights, `w_s = GAMMA^(s-1)`.
pub const POSITIONAL_GAMMA: f64 = 0.8;

pub const INIT_TAU: f64 = 0.07;
pub const INIT_PROJ_NOISE: f64 = 0.01;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "xanat-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    #[default]
    Positional,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "positional" => Ok(Pooling::Positional),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected mean or positional)"
            ))),
        }
    }
}

/// Normalized pooling weights for `len` sentences.
pub fn pooling_weights(len: usize, pooling: Pooling) -> Vec<f64> {
    let raw: Vec<f64> = match pooling {
        Pooling::Mean => vec![1.0; len],
        Pooling::Positional => (0..len).map(|s| POSITIONAL_GAMMA.powi(s as i32)).collect(),
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted sentence average, before projection.
pub fn pool_sentences(sentences: &[Vec<f64>], pooling: Pooling) -> Result<Vec<f64>> {
    let Some(first) = sentences.first() else {
        return Err(Error::InvalidArgument("report has no sentences".into()));
    };
    let d = first.len();
    let w = pooling_weights(sentences.len(), pooling);
    let mut out = vec![0.0; d];
    for (s, ws) in sentences.iter().zip(&w) {
        if s.len() != d {
            return Err(Error::Shape("sentences of unequal length".into()));
        }
        for (o, x) in out.iter_mut().zip(s) {
            *o += ws * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    m: usize,
    d: usize,
    /// Row `j` is the query token of anatomy `j`.
    pub q: Matrix,
    pub w_v: Matrix,
    pub w_t: Matrix,
    pub log_tau: f64,
}

impl ModelParams {
    /// Identity projections, zero queries, tau = 0.07. Mostly for tests.
    pub fn identity(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            q: Matrix::zeros(m, d),
            w_v: Matrix::identity(d),
            w_t: Matrix::identity(d),
            log_tau: INIT_TAU.ln(),
        }
    }

    /// Default initialization: projections `I + U[-0.01, 0.01]`, queries
    /// `U[-1/sqrt(D), 1/sqrt(D)]`, `log_tau = ln 0.07`.
    pub fn init(m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Config("model needs M >= 1 and D >= 1".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = Self::identity(m, d);
        for x in p.q.as_mut_slice() {
            *x = rng.uniform_range(-bound, bound);
        }
        for w in [&mut p.w_v, &mut p.w_t] {
            for x in w.as_mut_slice() {
                *x += rng.uniform_range(-INIT_PROJ_NOISE, INIT_PROJ_NOISE);
            }
        }
        Ok(p)
    }

    pub fn anatomies(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn temperature(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.w_v.is_finite() && self.w_t.is_finite() && self.log_tau.is_finite()
    }

    fn check_anatomy(&self, j: usize) -> Result<()> {
        if j >= self.m {
            return Err(Error::InvalidArgument(format!(
                "anatomy index {j} out of range for M={}",
                self.m
            )));
        }
        Ok(())
    }

    /// Attention weights over the T token rows for anatomy `j`.
    pub fn attention_weights(&self, j: usize, tokens: &Matrix) -> Result<Vec<f64>> {
        self.check_anatomy(j)?;
        if tokens.rows() == 0 || tokens.cols() != self.d {
            return Err(Error::Shape(format!(
                "visual tokens {:?} for D={}",
                tokens.shape(),
                self.d
            )));
        }
        let proj = tokens.matmul(&self.w_v.transpose())?;
        let scale = 1.0 / (self.d as f64).sqrt();
        let q = self.q.row(j);
        let logits: Vec<f64> = proj.iter_rows().map(|p| tensor::dot(q, p) * scale).collect();
        tensor::softmax(&logits)
    }

    /// Unit-norm visual anatomy token for one (patient, anatomy) pair.
    pub fn aggregate_visual(&self, j: usize, tokens: &Matrix) -> Result<Vec<f64>> {
        let w = self.attention_weights(j, tokens)?;
        let proj = tokens.matmul(&self.w_v.transpose())?;
        let mut out = vec![0.0; self.d];
        for (wt, p) in w.iter().zip(proj.iter_rows()) {
            for (o, x) in out.iter_mut().zip(p) {
                *o += wt * x;
            }
        }
        tensor::l2_normalize(&out)
    }

    /// Unit-norm report token.
    pub fn encode_report(&self, sentences: &[Vec<f64>], pooling: Pooling) -> Result<Vec<f64>> {
        let pooled = pool_sentences(sentences, pooling)?;
        if pooled.len() != self.d {
            return Err(Error::Shape(format!(
                "sentence features of length {} for D={}",
                pooled.len(),
                self.d
            )));
        }
        tensor::l2_normalize(&self.w_t.mul_vec(&pooled)?)
    }

    pub fn to_bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        b.insert(PARAM_Q.into(), self.q.clone());
        b.insert(PARAM_W_V.into(), self.w_v.clone());
        b.insert(PARAM_W_T.into(), self.w_t.clone());
        b.insert(PARAM_LOG_TAU.into(), Matrix::scalar(self.log_tau));
        b
    }

    /// Parameters as name-ordered flat slices, the order the optimizer uses.
    pub fn flat_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let Self {
            q,
            w_v,
            w_t,
            log_tau,
            ..
        } = self;
        vec![
            (PARAM_Q, q.as_mut_slice()),
            (PARAM_W_T, w_t.as_mut_slice()),
            (PARAM_W_V, w_v.as_mut_slice()),
            (PARAM_LOG_TAU, std::slice::from_mut(log_tau)),
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let entry = |m: &Matrix| TensorEntry {
            shape: [m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        };
        let mut params = BTreeMap::new();
        params.insert(PARAM_Q.to_string(), entry(&self.q));
        params.insert(PARAM_W_V.to_string(), entry(&self.w_v));
        params.insert(PARAM_W_T.to_string(), entry(&self.w_t));
        params.insert(PARAM_LOG_TAU.to_string(), entry(&Matrix::scalar(self.log_tau)));
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            anatomies: self.m,
            dim: self.d,
            params,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("not a checkpoint (format `{}`)", c.format),
            });
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: c.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (m, d) = (c.anatomies, c.dim);
        let get = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let e = c.params.get(name).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("checkpoint lacks `{name}`"),
            })?;
            if e.shape != [rows, cols] {
                return Err(Error::Shape(format!(
                    "checkpoint `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    e.shape
                )));
            }
            let mat = Matrix::from_vec(rows, cols, e.values.clone())?;
            if !mat.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint `{name}`")));
            }
            Ok(mat)
        };
        Ok(Self {
            m,
            d,
            q: get(PARAM_Q, m, d)?,
            w_v: get(PARAM_W_V, d, d)?,
            w_t: get(PARAM_W_T, d, d)?,
            log_tau: get(PARAM_LOG_TAU, 1, 1)?.get(0, 0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        crate::io::write_atomic(path, format!("{text}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_checkpoint(&c)
    }
}

/// One parameter tensor in a checkpoint, values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Checkpoint file layout (JSON):
///
/// ```json
/// {"format": "xanat-checkpoint", "version": 1, "anatomies": M, "dim": D,
///  "params": {"Q": {"shape": [M, D], "values": [...]}, "W_t": ..., "W_v": ...,
///             "log_tau": {"shape": [1, 1], "values": [..]}}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub anatomies: usize,
    pub dim: usize,
    pub params: BTreeMap<String, TensorEntry>,
}

/// Parameter leaves plus derived nodes shared by every encoder call in a graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub q: NodeId,
    pub w_v: NodeId,
    pub w_t: NodeId,
    pub log_tau: NodeId,
    w_v_t: NodeId,
    w_t_t: NodeId,
    /// `1 / tau = exp(-log_tau)`.
    pub inv_tau: NodeId,
    d: usize,
}

impl ParamNodes {
    pub fn declare(g: &mut Graph, m: usize, d: usize) -> Result<Self> {
        let q = g.leaf(PARAM_Q, m, d)?;
        let w_v = g.leaf(PARAM_W_V, d, d)?;
        let w_t = g.leaf(PARAM_W_T, d, d)?;
        let log_tau = g.leaf(PARAM_LOG_TAU, 1, 1)?;
        let w_v_t = g.transpose(w_v);
        let w_t_t = g.transpose(w_t);
        let neg = g.negate(log_tau);
        let inv_tau = g.exp(neg);
        Ok(Self {
            q,
            w_v,
            w_t,
            log_tau,
            w_v_t,
            w_t_t,
            inv_tau,
            d,
        })
    }

    /// Visual anatomy token (1 x D, unit norm) from a T x D token node.
    pub fn visual(&self, g: &mut Graph, j: usize, tokens: NodeId) -> Result<NodeId> {
        let proj = g.matmul(tokens, self.w_v_t)?;
        let qj = g.gather_rows(self.q, &[j])?;
        let pt = g.transpose(proj);
        let logits = g.matmul(qj, pt)?;
        let logits = g.scale(logits, 1.0 / (self.d as f64).sqrt());
        let w = g.softmax_rows(logits)?;
        let out = g.matmul(w, proj)?;
        Ok(g.normalize_rows(out))
    }

    /// Report tokens for a stack of pooled sentence vectors (rows), unit norm.
    pub fn text(&self, g: &mut Graph, pooled: NodeId) -> Result<NodeId> {
        let proj = g.matmul(pooled, self.w_t_t)?;
        Ok(g.normalize_rows(proj))
    }

    /// Pool an L x D sentence node to 1 x D.
    pub fn pool(&self, g: &mut Graph, sentences: NodeId, pooling: Pooling) -> Result<NodeId> {
        let l = g.shape(sentences).0;
        let w = g.constant(Matrix::row_vector(&pooling_weights(l, pooling)));
        g.matmul(w, sentences)
    }
}
