//! Message-passing layers. Both variants follow the receiver convention used
//! throughout the crate: an edge (src, dst) carries information from src to
//! dst, and undirected graphs expand to both directions before batching.
//!
//! Row-vector convention: states are [rows × d] and weights multiply on the
//! right, so the self term reads h·W1 rather than W1·h.

use crate::graph::Graph;
use crate::tensor::{Parameter, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Nonlinearity applied by message-passing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Pass-through; mainly for collapsing a layer to a linear map in tests.
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Graph edges replicated across a batch of samples that share the graph.
/// Row space is [batch × n_nodes] with node-major rows per sample.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weight: Vec<f64>,
    pub n_rows: usize,
}

impl EdgeIndex {
    pub fn from_graph(g: &Graph, batch: usize) -> Self {
        let expanded = g.directed_edges();
        let n = g.n_nodes();
        let mut src = Vec::with_capacity(batch * expanded.len());
        let mut dst = Vec::with_capacity(batch * expanded.len());
        let mut weight = Vec::with_capacity(batch * expanded.len());
        for b in 0..batch {
            let off = b * n;
            for e in &expanded {
                src.push(off + e.src);
                dst.push(off + e.dst);
                weight.push(e.weight);
            }
        }
        EdgeIndex { src, dst, weight, n_rows: batch * n }
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Isotropic layer: h'_i = ξ(h_i·W1 + Σ_{j→i} a_ji · h_j·W2).
#[derive(Debug, Clone)]
pub struct IsoMp {
    pub w1: Parameter,
    pub w2: Parameter,
    pub act: Activation,
}

pub struct IsoMpVars {
    pub w1: Var,
    pub w2: Var,
}

impl IsoMp {
    pub fn init(prefix: &str, d_in: usize, d_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        IsoMp {
            w1: Parameter::uniform(format!("{prefix}.w1"), vec![d_in, d_out], bound, rng),
            w2: Parameter::uniform(format!("{prefix}.w2"), vec![d_in, d_out], bound, rng),
            act,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> IsoMpVars {
        IsoMpVars { w1: tape.leaf_param(&self.w1), w2: tape.leaf_param(&self.w2) }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &IsoMpVars,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<Var, TensorError> {
        let self_term = tape.matmul(h, vars.w1)?;
        let msgs_all = tape.matmul(h, vars.w2)?;
        let picked = tape.gather_rows(msgs_all, &edges.src)?;
        let weighted = tape.scale_rows(picked, &edges.weight)?;
        let agg = tape.segment_sum(weighted, &edges.dst, edges.n_rows)?;
        let pre = tape.add(self_term, agg)?;
        self.act.apply(tape, pre)
    }

    /// Dense variant for a learned adjacency: the neighbor sum becomes
    /// Aᵀ·(h·W2) per sample, differentiable in both h and A. `adj` is [n × n]
    /// with adj[j][i] weighting the j -> i message.
    pub fn forward_dense(
        &self,
        tape: &mut Tape,
        vars: &IsoMpVars,
        h: Var,
        adj: Var,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let (rows, _) = tape.value(h).dims2()?;
        let n = tape.value(adj).dims2()?.0;
        if rows != batch * n {
            return Err(TensorError::ShapeMismatch {
                op: "iso_forward_dense",
                left: vec![rows],
                right: vec![batch, n],
            });
        }
        let self_term = tape.matmul(h, vars.w1)?;
        let msgs_all = tape.matmul(h, vars.w2)?;
        let at = tape.transpose2d(adj)?;
        let mut per_sample = Vec::with_capacity(batch);
        for b in 0..batch {
            let idx: Vec<usize> = (b * n..(b + 1) * n).collect();
            let slice = tape.gather_rows(msgs_all, &idx)?;
            per_sample.push(tape.matmul(at, slice)?);
        }
        let agg = tape.concat(&per_sample, 0)?;
        let pre = tape.add(self_term, agg)?;
        self.act.apply(tape, pre)
    }
}

/// Anisotropic layer with gated messages:
/// m_ji = ξ([h_i ‖ h_j ‖ e_ji]·W1)·W2, α_ji = σ(m_ji·w0),
/// h'_i = ξ(h_i·W3 + Σ_{j→i} α_ji·m_ji).
/// The scalar edge weight doubles as the edge feature.
#[derive(Debug, Clone)]
pub struct AnisoMp {
    pub w1: Parameter,
    pub w2: Parameter,
    pub w0: Parameter,
    pub w3: Parameter,
    pub act: Activation,
    d_out: usize,
}

pub struct AnisoMpVars {
    pub w1: Var,
    pub w2: Var,
    pub w0: Var,
    pub w3: Var,
}

impl AnisoMp {
    pub fn init(prefix: &str, d_in: usize, d_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let cat = 2 * d_in + 1;
        let b1 = 1.0 / (cat as f64).sqrt();
        let b2 = 1.0 / (d_out as f64).sqrt();
        let b3 = 1.0 / (d_in as f64).sqrt();
        AnisoMp {
            w1: Parameter::uniform(format!("{prefix}.w1"), vec![cat, d_out], b1, rng),
            w2: Parameter::uniform(format!("{prefix}.w2"), vec![d_out, d_out], b2, rng),
            w0: Parameter::uniform(format!("{prefix}.w0"), vec![d_out, 1], b2, rng),
            w3: Parameter::uniform(format!("{prefix}.w3"), vec![d_in, d_out], b3, rng),
            act,
            d_out,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AnisoMpVars {
        AnisoMpVars {
            w1: tape.leaf_param(&self.w1),
            w2: tape.leaf_param(&self.w2),
            w0: tape.leaf_param(&self.w0),
            w3: tape.leaf_param(&self.w3),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &AnisoMpVars,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<Var, TensorError> {
        let self_term = tape.matmul(h, vars.w3)?;
        let h_dst = tape.gather_rows(h, &edges.dst)?;
        let h_src = tape.gather_rows(h, &edges.src)?;
        let feat = tape.input(
            Tensor::matrix(edges.n_edges(), 1, edges.weight.clone()).expect("edge count matches"),
        );
        let cat = tape.concat(&[h_dst, h_src, feat], 1)?;
        let pre_m = tape.matmul(cat, vars.w1)?;
        let act_m = self.act.apply(tape, pre_m)?;
        let m = tape.matmul(act_m, vars.w2)?;
        let gate_pre = tape.matmul(m, vars.w0)?;
        let alpha = tape.sigmoid(gate_pre)?;
        let ones = tape.input(Tensor::matrix(1, self.d_out, vec![1.0; self.d_out]).expect("ones"));
        let alpha_wide = tape.matmul(alpha, ones)?;
        let gated = tape.mul(alpha_wide, m)?;
        let agg = tape.segment_sum(gated, &edges.dst, edges.n_rows)?;
        let pre = tape.add(self_term, agg)?;
        self.act.apply(tape, pre)
    }
}

/// Which message-passing variant a layer stack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpKind {
    Iso,
    Aniso,
}

/// Either message-passing layer behind one interface, so model assembly can
/// stay agnostic of the variant.
#[derive(Debug, Clone)]
pub enum MpBlock {
    Iso(IsoMp),
    Aniso(AnisoMp),
}

pub enum MpBlockVars {
    Iso(IsoMpVars),
    Aniso(AnisoMpVars),
}

impl MpBlock {
    pub fn init(
        kind: MpKind,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            MpKind::Iso => MpBlock::Iso(IsoMp::init(prefix, d_in, d_out, act, rng)),
            MpKind::Aniso => MpBlock::Aniso(AnisoMp::init(prefix, d_in, d_out, act, rng)),
        }
    }

    pub fn kind(&self) -> MpKind {
        match self {
            MpBlock::Iso(_) => MpKind::Iso,
            MpBlock::Aniso(_) => MpKind::Aniso,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MpBlockVars {
        match self {
            MpBlock::Iso(l) => MpBlockVars::Iso(l.bind(tape)),
            MpBlock::Aniso(l) => MpBlockVars::Aniso(l.bind(tape)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &MpBlockVars,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<Var, TensorError> {
        match (self, vars) {
            (MpBlock::Iso(l), MpBlockVars::Iso(v)) => l.forward(tape, v, h, edges),
            (MpBlock::Aniso(l), MpBlockVars::Aniso(v)) => l.forward(tape, v, h, edges),
            _ => unreachable!("vars bound from a different block kind"),
        }
    }

    /// Dense-adjacency path; only the isotropic layer supports it, and model
    /// assembly validates that before ever calling here.
    pub fn forward_dense(
        &self,
        tape: &mut Tape,
        vars: &MpBlockVars,
        h: Var,
        adj: Var,
        batch: usize,
    ) -> Result<Var, TensorError> {
        match (self, vars) {
            (MpBlock::Iso(l), MpBlockVars::Iso(v)) => l.forward_dense(tape, v, h, adj, batch),
            _ => unreachable!("dense adjacency requires isotropic layers"),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            MpBlock::Iso(l) => vec![&l.w1, &l.w2],
            MpBlock::Aniso(l) => vec![&l.w1, &l.w2, &l.w0, &l.w3],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            MpBlock::Iso(l) => vec![&mut l.w1, &mut l.w2],
            MpBlock::Aniso(l) => vec![&mut l.w1, &mut l.w2, &mut l.w0, &mut l.w3],
        }
    }
}
