//! Forecasting model families built from one template: an encoder lifts each
//! observation (plus exogenous features and an optional node embedding) into
//! a hidden state, a family-specific body mixes sequence encoding with
//! message passing, and a one-hidden-layer decoder emits all horizon steps at
//! once from the final representation.
//!
//! Families: `rnn` shares one recurrent encoder across nodes and never mixes
//! them; `fcrnn` flattens the node axis into one multivariate stream;
//! `local_rnns` trains a disjoint model per node; `tts` encodes time first
//! and applies message passing to the final states; `stt` propagates over
//! the graph at every step before the recurrence; `tas` runs message passing
//! inside the recurrent cell itself.

mod checkpoint;
mod forward;
mod gcrnn;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::ModelVars;
pub use gcrnn::{GcrnnCell, GcrnnVars};
pub use crate::mp::MpKind;

use crate::graph::Graph;
use crate::graph_learning::{FactorizedScores, GraphLearningError, LearnedGraph, ScoreMatrix};
use crate::mp::{Activation, MpBlock};
use crate::nn::{Linear, LocalLinear, Mlp};
use crate::rnn::{GruCell, LocalGru};
use crate::tensor::{Parameter, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model family `{name}`")]
    UnknownFamily { name: String },
    #[error("embeddings are not supported for family {family}")]
    EmbeddingsNotSupported { family: Family },
    #[error("family {family} needs a graph but none was bound")]
    MissingGraph { family: Family },
    #[error("invalid model configuration: {detail}")]
    BadConfig { detail: String },
    #[error("model bound to {expected} nodes, input has {got}")]
    NodeCountMismatch { expected: usize, got: usize },
    #[error("window must contain at least one step")]
    WindowTooShort,
    #[error("bad input shape: {detail}")]
    ShapeMismatch { detail: String },
    #[error("checkpoint error: {detail}")]
    Checkpoint { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    GraphLearning(#[from] GraphLearningError),
}

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rnn,
    Fcrnn,
    LocalRnns,
    Tts,
    Stt,
    Tas,
}

impl Family {
    /// Families whose body exchanges information across the graph.
    pub fn uses_graph(self) -> bool {
        matches!(self, Family::Tts | Family::Stt | Family::Tas)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Rnn => "rnn",
            Family::Fcrnn => "fcrnn",
            Family::LocalRnns => "local_rnns",
            Family::Tts => "tts",
            Family::Stt => "stt",
            Family::Tas => "tas",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "rnn" => Ok(Family::Rnn),
            "fcrnn" => Ok(Family::Fcrnn),
            "local_rnns" => Ok(Family::LocalRnns),
            "tts" => Ok(Family::Tts),
            "stt" => Ok(Family::Stt),
            "tas" => Ok(Family::Tas),
            other => Err(ModelError::UnknownFamily { name: other.to_string() }),
        }
    }
}

/// Hyperparameters shared by every family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "default_mp_kind")]
    pub mp_kind: MpKind,
    #[serde(default = "default_mp_layers")]
    pub mp_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub use_embeddings: bool,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    #[serde(default)]
    pub additive_local: bool,
}

fn default_mp_kind() -> MpKind {
    MpKind::Iso
}
fn default_mp_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    16
}
fn default_window() -> usize {
    12
}
fn default_horizon() -> usize {
    1
}
fn default_emb_dim() -> usize {
    8
}

impl ModelConfig {
    pub fn new(family: Family) -> Self {
        ModelConfig {
            family,
            mp_kind: default_mp_kind(),
            mp_layers: default_mp_layers(),
            hidden: default_hidden(),
            window: default_window(),
            horizon: default_horizon(),
            use_embeddings: false,
            emb_dim: default_emb_dim(),
            additive_local: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.window < 1 || self.horizon < 1 {
            return Err(ModelError::BadConfig {
                detail: "window and horizon must be at least 1".into(),
            });
        }
        if self.hidden < 1 {
            return Err(ModelError::BadConfig { detail: "hidden size must be at least 1".into() });
        }
        if self.family.uses_graph() && self.mp_layers < 1 {
            return Err(ModelError::BadConfig {
                detail: "graph families need at least one message-passing layer".into(),
            });
        }
        if self.use_embeddings {
            if self.family == Family::Fcrnn {
                return Err(ModelError::EmbeddingsNotSupported { family: self.family });
            }
            if self.emb_dim < 1 {
                return Err(ModelError::BadConfig {
                    detail: "emb_dim must be positive when embeddings are enabled".into(),
                });
            }
        }
        Ok(())
    }
}

/// Learnable per-node vectors injected at the encoder and decoder.
#[derive(Debug, Clone)]
pub struct NodeEmbeddingTable {
    pub q: Parameter,
}

impl NodeEmbeddingTable {
    pub fn init(n_nodes: usize, emb_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (emb_dim as f64).sqrt();
        NodeEmbeddingTable {
            q: Parameter::uniform("emb.q", vec![n_nodes, emb_dim], bound, rng),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.q.tensor.shape()[0]
    }
}

/// How a model gets its relational structure.
pub enum GraphSpec {
    /// No graph; only valid for the graph-free families.
    None,
    /// A fixed graph shared by every sample.
    Fixed(Graph),
    /// Trainable dense scores, no prior structure.
    LearnedDense,
    /// Trainable factorized scores of width d_z.
    LearnedFactorized { d_z: usize },
}

/// Resolved graph attachment stored inside the model.
#[derive(Debug, Clone)]
pub enum GraphBinding {
    None,
    Fixed(Graph),
    Learned(LearnedGraph),
}

#[derive(Debug, Clone)]
pub(crate) enum Body {
    Rnn { enc: Linear, seq: GruCell, dec: Mlp },
    Fcrnn { enc: Linear, seq: GruCell, dec: Mlp },
    LocalRnns { enc: LocalLinear, seq: LocalGru, dec1: LocalLinear, dec2: LocalLinear },
    Tts { enc: Linear, seq: GruCell, mps: Vec<MpBlock>, dec: Mlp },
    Stt { enc: Linear, mps: Vec<MpBlock>, seq: GruCell, dec: Mlp },
    Tas { enc: Linear, cells: Vec<GcrnnCell>, dec: Mlp },
}

/// A built model: configuration, parameters, and the bound graph.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub n_nodes: usize,
    pub d_x: usize,
    pub d_u: usize,
    pub(crate) body: Body,
    pub(crate) emb: Option<NodeEmbeddingTable>,
    pub(crate) local_ar: Option<LocalLinear>,
    pub(crate) graph: GraphBinding,
}

/// Independent deterministic RNG per component, so families sharing a
/// component (encoder, recurrence, decoder) get identical initial values for
/// the same seed regardless of what else they build.
fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    crate::seed_stream(seed, tag)
}

/// Assemble a model for `n_nodes` series with `d_x` observed and `d_u`
/// exogenous channels. All initialization derives from `seed`.
pub fn build_model(
    config: &ModelConfig,
    n_nodes: usize,
    d_x: usize,
    d_u: usize,
    graph: GraphSpec,
    seed: u64,
) -> Result<ForecastModel, ModelError> {
    config.validate()?;
    if n_nodes < 1 || d_x < 1 {
        return Err(ModelError::BadConfig {
            detail: "need at least one node and one observed channel".into(),
        });
    }
    let fam = config.family;
    let graph = match graph {
        GraphSpec::None => {
            if fam.uses_graph() {
                return Err(ModelError::MissingGraph { family: fam });
            }
            GraphBinding::None
        }
        GraphSpec::Fixed(g) => {
            if g.n_nodes() != n_nodes {
                return Err(ModelError::NodeCountMismatch {
                    expected: n_nodes,
                    got: g.n_nodes(),
                });
            }
            GraphBinding::Fixed(g)
        }
        GraphSpec::LearnedDense | GraphSpec::LearnedFactorized { .. } => {
            if !matches!(fam, Family::Tts | Family::Stt) {
                return Err(ModelError::BadConfig {
                    detail: format!("learned adjacency is not supported for family {fam}"),
                });
            }
            if config.mp_kind != MpKind::Iso {
                return Err(ModelError::BadConfig {
                    detail: "learned adjacency requires isotropic message passing".into(),
                });
            }
            let mut rng = stream(seed, "graph");
            let learned = match graph {
                GraphSpec::LearnedDense => {
                    LearnedGraph::Dense(ScoreMatrix::init("graph", n_nodes, &mut rng))
                }
                GraphSpec::LearnedFactorized { d_z } => {
                    if d_z < 1 {
                        return Err(ModelError::BadConfig {
                            detail: "factor width d_z must be positive".into(),
                        });
                    }
                    LearnedGraph::Factorized(FactorizedScores::init("graph", n_nodes, d_z, &mut rng))
                }
                _ => unreachable!(),
            };
            GraphBinding::Learned(learned)
        }
    };

    let d_h = config.hidden;
    let horizon = config.horizon;
    let emb_eff = if config.use_embeddings { config.emb_dim } else { 0 };
    let d_node_in = d_x + d_u + emb_eff;
    let d_node_dec_in = d_h + emb_eff + horizon * d_u;

    let body = match fam {
        Family::Rnn | Family::Tts | Family::Stt | Family::Tas => {
            let enc = Linear::init("enc", d_node_in, d_h, &mut stream(seed, "encoder"));
            let dec = Mlp::init("dec", d_node_dec_in, d_h, horizon * d_x, &mut stream(seed, "decoder"));
            match fam {
                Family::Rnn => {
                    let seq = GruCell::init("seq", d_h, d_h, &mut stream(seed, "seq"));
                    Body::Rnn { enc, seq, dec }
                }
                Family::Tts => {
                    let seq = GruCell::init("seq", d_h, d_h, &mut stream(seed, "seq"));
                    let mut rng = stream(seed, "mp");
                    let mps = (0..config.mp_layers)
                        .map(|l| {
                            MpBlock::init(
                                config.mp_kind,
                                &format!("mp{l}"),
                                d_h,
                                d_h,
                                Activation::Tanh,
                                &mut rng,
                            )
                        })
                        .collect();
                    Body::Tts { enc, seq, mps, dec }
                }
                Family::Stt => {
                    let seq = GruCell::init("seq", d_h, d_h, &mut stream(seed, "seq"));
                    let mut rng = stream(seed, "mp");
                    let mps = (0..config.mp_layers)
                        .map(|l| {
                            MpBlock::init(
                                config.mp_kind,
                                &format!("mp{l}"),
                                d_h,
                                d_h,
                                Activation::Tanh,
                                &mut rng,
                            )
                        })
                        .collect();
                    Body::Stt { enc, mps, seq, dec }
                }
                Family::Tas => {
                    let mut rng = stream(seed, "mp");
                    let cells = (0..config.mp_layers)
                        .map(|l| {
                            GcrnnCell::init(
                                &format!("gcrnn{l}"),
                                config.mp_kind,
                                d_h,
                                d_h,
                                &mut rng,
                            )
                        })
                        .collect();
                    Body::Tas { enc, cells, dec }
                }
                _ => unreachable!(),
            }
        }
        Family::Fcrnn => {
            let d_in = n_nodes * (d_x + d_u);
            let enc = Linear::init("enc", d_in, d_h, &mut stream(seed, "encoder"));
            let seq = GruCell::init("seq", d_h, d_h, &mut stream(seed, "seq"));
            let dec = Mlp::init(
                "dec",
                d_h + horizon * n_nodes * d_u,
                d_h,
                horizon * n_nodes * d_x,
                &mut stream(seed, "decoder"),
            );
            Body::Fcrnn { enc, seq, dec }
        }
        Family::LocalRnns => {
            let enc = LocalLinear::init("enc", n_nodes, d_node_in, d_h, &mut stream(seed, "encoder"));
            let seq = LocalGru::init("seq", n_nodes, d_h, d_h, &mut stream(seed, "seq"));
            let mut dec_rng = stream(seed, "decoder");
            let dec1 = LocalLinear::init("dec1", n_nodes, d_node_dec_in, d_h, &mut dec_rng);
            let dec2 = LocalLinear::init("dec2", n_nodes, d_h, horizon * d_x, &mut dec_rng);
            Body::LocalRnns { enc, seq, dec1, dec2 }
        }
    };

    let emb = if config.use_embeddings {
        Some(NodeEmbeddingTable::init(n_nodes, config.emb_dim, &mut stream(seed, "emb")))
    } else {
        None
    };
    let local_ar = if config.additive_local {
        Some(LocalLinear::init(
            "local_ar",
            n_nodes,
            config.window * d_x,
            horizon * d_x,
            &mut stream(seed, "local_ar"),
        ))
    } else {
        None
    };

    let model = ForecastModel {
        config: config.clone(),
        n_nodes,
        d_x,
        d_u,
        body,
        emb,
        local_ar,
        graph,
    };
    debug_assert!(
        {
            let names: std::collections::HashSet<_> =
                model.params().iter().map(|p| p.name.clone()).collect();
            names.len() == model.params().len()
        },
        "parameter names must be unique"
    );
    Ok(model)
}

impl ForecastModel {
    /// Every trainable parameter, in a fixed deterministic order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        match &self.body {
            Body::Rnn { enc, seq, dec } | Body::Fcrnn { enc, seq, dec } => {
                out.extend(enc.params());
                out.extend(seq.params());
                out.extend(dec.params());
            }
            Body::LocalRnns { enc, seq, dec1, dec2 } => {
                out.extend(enc.params());
                out.extend(seq.params());
                out.extend(dec1.params());
                out.extend(dec2.params());
            }
            Body::Tts { enc, seq, mps, dec } => {
                out.extend(enc.params());
                out.extend(seq.params());
                for mp in mps {
                    out.extend(mp.params());
                }
                out.extend(dec.params());
            }
            Body::Stt { enc, mps, seq, dec } => {
                out.extend(enc.params());
                for mp in mps {
                    out.extend(mp.params());
                }
                out.extend(seq.params());
                out.extend(dec.params());
            }
            Body::Tas { enc, cells, dec } => {
                out.extend(enc.params());
                for c in cells {
                    out.extend(c.params());
                }
                out.extend(dec.params());
            }
        }
        if let Some(e) = &self.emb {
            out.push(&e.q);
        }
        if let Some(la) = &self.local_ar {
            out.extend(la.params());
        }
        if let GraphBinding::Learned(lg) = &self.graph {
            out.extend(lg.params());
        }
        out
    }

    /// Mutable view of every parameter, same order as [`ForecastModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        match &mut self.body {
            Body::Rnn { enc, seq, dec } | Body::Fcrnn { enc, seq, dec } => {
                out.push(&mut enc.w);
                out.push(&mut enc.b);
                out.extend(gru_params_mut(seq));
                out.extend(mlp_params_mut(dec));
            }
            Body::LocalRnns { enc, seq, dec1, dec2 } => {
                out.extend(local_linear_params_mut(enc));
                for cell in &mut seq.cells {
                    out.extend(gru_params_mut(cell));
                }
                out.extend(local_linear_params_mut(dec1));
                out.extend(local_linear_params_mut(dec2));
            }
            Body::Tts { enc, seq, mps, dec } => {
                out.push(&mut enc.w);
                out.push(&mut enc.b);
                out.extend(gru_params_mut(seq));
                for mp in mps {
                    out.extend(mp.params_mut());
                }
                out.extend(mlp_params_mut(dec));
            }
            Body::Stt { enc, mps, seq, dec } => {
                out.push(&mut enc.w);
                out.push(&mut enc.b);
                for mp in mps {
                    out.extend(mp.params_mut());
                }
                out.extend(gru_params_mut(seq));
                out.extend(mlp_params_mut(dec));
            }
            Body::Tas { enc, cells, dec } => {
                out.push(&mut enc.w);
                out.push(&mut enc.b);
                for c in cells {
                    out.extend(c.params_mut());
                }
                out.extend(mlp_params_mut(dec));
            }
        }
        if let Some(e) = &mut self.emb {
            out.push(&mut e.q);
        }
        if let Some(la) = &mut self.local_ar {
            out.extend(local_linear_params_mut(la));
        }
        if let GraphBinding::Learned(lg) = &mut self.graph {
            out.extend(lg.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// All parameter values concatenated in [`ForecastModel::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(ModelError::ShapeMismatch {
                detail: format!("flat parameter vector has {} values, model needs {total}", flat.len()),
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// The fixed graph, when one is bound.
    pub fn fixed_graph(&self) -> Option<&Graph> {
        match &self.graph {
            GraphBinding::Fixed(g) => Some(g),
            _ => None,
        }
    }

    pub fn graph_binding(&self) -> &GraphBinding {
        &self.graph
    }
}

fn gru_params_mut(c: &mut GruCell) -> Vec<&mut Parameter> {
    vec![
        &mut c.w_r, &mut c.u_r, &mut c.b_r, &mut c.w_o, &mut c.u_o, &mut c.b_o, &mut c.w_c,
        &mut c.u_c, &mut c.b_c,
    ]
}

fn mlp_params_mut(m: &mut Mlp) -> Vec<&mut Parameter> {
    vec![&mut m.l1.w, &mut m.l1.b, &mut m.l2.w, &mut m.l2.b]
}

fn local_linear_params_mut(l: &mut LocalLinear) -> Vec<&mut Parameter> {
    l.ws.iter_mut().chain(l.bs.iter_mut()).collect()
}
