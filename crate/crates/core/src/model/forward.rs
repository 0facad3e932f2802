//! Batched forward evaluation. Inputs arrive as plain tensors shaped
//! [B × W × N × d]; the family dispatch slices them into per-step row
//! matrices, runs the body, and reshapes the decoder output back to
//! [B × H × N × d_x].
//!
//! Row layouts: shared-parameter families use sample-major rows (row b·N+n),
//! per-node families use node-major rows (row n·B+b) to line up with the
//! grouped matmul, and the fully-connected family keeps one row per sample.

use super::gcrnn::GcrnnVars;
use super::{Body, ForecastModel, GraphBinding, ModelError};
use crate::graph_learning::LearnedGraphVars;
use crate::mp::{EdgeIndex, MpBlockVars};
use crate::nn::{LinearVars, LocalLinearVars, MlpVars};
use crate::rnn::{GruCellVars, LocalGruVars};
use crate::tensor::{Tape, Tensor, Var};

/// Tape bindings for every parameter of a model, created once per tape.
pub struct ModelVars {
    pub(crate) body: BodyVars,
    pub(crate) emb: Option<Var>,
    pub(crate) local_ar: Option<LocalLinearVars>,
    pub(crate) graph: Option<LearnedGraphVars>,
}

pub(crate) enum BodyVars {
    Rnn { enc: LinearVars, seq: GruCellVars, dec: MlpVars },
    Fcrnn { enc: LinearVars, seq: GruCellVars, dec: MlpVars },
    LocalRnns {
        enc: LocalLinearVars,
        seq: LocalGruVars,
        dec1: LocalLinearVars,
        dec2: LocalLinearVars,
    },
    Tts { enc: LinearVars, seq: GruCellVars, mps: Vec<MpBlockVars>, dec: MlpVars },
    Stt { enc: LinearVars, mps: Vec<MpBlockVars>, seq: GruCellVars, dec: MlpVars },
    Tas { enc: LinearVars, cells: Vec<GcrnnVars>, dec: MlpVars },
}

impl ForecastModel {
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars, ModelError> {
        let body = match &self.body {
            Body::Rnn { enc, seq, dec } => BodyVars::Rnn {
                enc: enc.bind(tape),
                seq: seq.bind(tape),
                dec: dec.bind(tape),
            },
            Body::Fcrnn { enc, seq, dec } => BodyVars::Fcrnn {
                enc: enc.bind(tape),
                seq: seq.bind(tape),
                dec: dec.bind(tape),
            },
            Body::LocalRnns { enc, seq, dec1, dec2 } => BodyVars::LocalRnns {
                enc: enc.bind(tape)?,
                seq: seq.bind(tape)?,
                dec1: dec1.bind(tape)?,
                dec2: dec2.bind(tape)?,
            },
            Body::Tts { enc, seq, mps, dec } => BodyVars::Tts {
                enc: enc.bind(tape),
                seq: seq.bind(tape),
                mps: mps.iter().map(|m| m.bind(tape)).collect(),
                dec: dec.bind(tape),
            },
            Body::Stt { enc, mps, seq, dec } => BodyVars::Stt {
                enc: enc.bind(tape),
                mps: mps.iter().map(|m| m.bind(tape)).collect(),
                seq: seq.bind(tape),
                dec: dec.bind(tape),
            },
            Body::Tas { enc, cells, dec } => BodyVars::Tas {
                enc: enc.bind(tape),
                cells: cells.iter().map(|c| c.bind(tape)).collect(),
                dec: dec.bind(tape),
            },
        };
        Ok(ModelVars {
            body,
            emb: self.emb.as_ref().map(|e| tape.leaf_param(&e.q)),
            local_ar: match &self.local_ar {
                Some(la) => Some(la.bind(tape)?),
                None => None,
            },
            graph: match &self.graph {
                GraphBinding::Learned(lg) => Some(lg.bind(tape)),
                _ => None,
            },
        })
    }

    /// Predict [B × H × N × d_x] from a window [B × W × N × d_x]. Exogenous
    /// inputs are required exactly when the model was built with d_u > 0:
    /// `u_past` aligned with the window, `u_future` with the horizon.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: &Tensor,
        u_past: Option<&Tensor>,
        u_future: Option<&Tensor>,
    ) -> Result<Var, ModelError> {
        let (b, w, n, dx) = dims4(x, "input window")?;
        if n != self.n_nodes {
            return Err(ModelError::NodeCountMismatch { expected: self.n_nodes, got: n });
        }
        if w < 1 {
            return Err(ModelError::WindowTooShort);
        }
        if dx != self.d_x {
            return Err(ModelError::ShapeMismatch {
                detail: format!("expected {} observed channels, got {dx}", self.d_x),
            });
        }
        if b < 1 {
            return Err(ModelError::ShapeMismatch { detail: "empty batch".into() });
        }
        let horizon = self.config.horizon;
        if self.d_u > 0 {
            let up = u_past.ok_or_else(|| ModelError::ShapeMismatch {
                detail: "model expects exogenous inputs but u_past is missing".into(),
            })?;
            let uf = u_future.ok_or_else(|| ModelError::ShapeMismatch {
                detail: "model expects exogenous inputs but u_future is missing".into(),
            })?;
            if dims4(up, "u_past")? != (b, w, n, self.d_u) {
                return Err(ModelError::ShapeMismatch {
                    detail: format!("u_past shape {:?} does not match the window", up.shape()),
                });
            }
            if dims4(uf, "u_future")? != (b, horizon, n, self.d_u) {
                return Err(ModelError::ShapeMismatch {
                    detail: format!("u_future shape {:?} does not match the horizon", uf.shape()),
                });
            }
        } else if u_past.is_some() || u_future.is_some() {
            return Err(ModelError::ShapeMismatch {
                detail: "model was built without exogenous channels".into(),
            });
        }
        if self.local_ar.is_some() && w != self.config.window {
            return Err(ModelError::ShapeMismatch {
                detail: format!(
                    "additive local part is fixed to window {}, got {w}",
                    self.config.window
                ),
            });
        }

        let global = match (&self.body, &vars.body) {
            (Body::Rnn { enc, seq, dec }, BodyVars::Rnn { enc: ev, seq: sv, dec: dv }) => {
                let emb_rows = self.embedding_rows(tape, vars, b, false)?;
                let mut steps = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(step_rows(x, u_past, t, false));
                    let inp = concat_opt(tape, raw, emb_rows)?;
                    steps.push(enc.forward(tape, ev, inp)?);
                }
                let h = seq.encode_last(tape, sv, &steps)?;
                let dec_in = decoder_input(tape, h, emb_rows, u_future, false)?;
                let out = dec.forward(tape, dv, dec_in)?;
                node_rows_to_output(tape, out, b, n, horizon, dx, false)?
            }
            (Body::Tts { enc, seq, mps, dec }, BodyVars::Tts { enc: ev, seq: sv, mps: mv, dec: dv }) => {
                let emb_rows = self.embedding_rows(tape, vars, b, false)?;
                let mut steps = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(step_rows(x, u_past, t, false));
                    let inp = concat_opt(tape, raw, emb_rows)?;
                    steps.push(enc.forward(tape, ev, inp)?);
                }
                let mut h = seq.encode_last(tape, sv, &steps)?;
                match self.graph_ctx(tape, vars, b)? {
                    GraphCtx::Edges(edges) => {
                        for (mp, mpv) in mps.iter().zip(mv) {
                            h = mp.forward(tape, mpv, h, &edges)?;
                        }
                    }
                    GraphCtx::Dense(adj) => {
                        for (mp, mpv) in mps.iter().zip(mv) {
                            h = mp.forward_dense(tape, mpv, h, adj, b)?;
                        }
                    }
                }
                let dec_in = decoder_input(tape, h, emb_rows, u_future, false)?;
                let out = dec.forward(tape, dv, dec_in)?;
                node_rows_to_output(tape, out, b, n, horizon, dx, false)?
            }
            (Body::Stt { enc, mps, seq, dec }, BodyVars::Stt { enc: ev, mps: mv, seq: sv, dec: dv }) => {
                let emb_rows = self.embedding_rows(tape, vars, b, false)?;
                let ctx = self.graph_ctx(tape, vars, b)?;
                let mut steps = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(step_rows(x, u_past, t, false));
                    let inp = concat_opt(tape, raw, emb_rows)?;
                    let mut h = enc.forward(tape, ev, inp)?;
                    match &ctx {
                        GraphCtx::Edges(edges) => {
                            for (mp, mpv) in mps.iter().zip(mv) {
                                h = mp.forward(tape, mpv, h, edges)?;
                            }
                        }
                        GraphCtx::Dense(adj) => {
                            for (mp, mpv) in mps.iter().zip(mv) {
                                h = mp.forward_dense(tape, mpv, h, *adj, b)?;
                            }
                        }
                    }
                    steps.push(h);
                }
                let h = seq.encode_last(tape, sv, &steps)?;
                let dec_in = decoder_input(tape, h, emb_rows, u_future, false)?;
                let out = dec.forward(tape, dv, dec_in)?;
                node_rows_to_output(tape, out, b, n, horizon, dx, false)?
            }
            (Body::Tas { enc, cells, dec }, BodyVars::Tas { enc: ev, cells: cv, dec: dv }) => {
                let emb_rows = self.embedding_rows(tape, vars, b, false)?;
                let GraphCtx::Edges(edges) = self.graph_ctx(tape, vars, b)? else {
                    unreachable!("learned adjacency is rejected for tas at build time");
                };
                let mut layer_in = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(step_rows(x, u_past, t, false));
                    let inp = concat_opt(tape, raw, emb_rows)?;
                    layer_in.push(enc.forward(tape, ev, inp)?);
                }
                let mut h_last = None;
                for (cell, cvars) in cells.iter().zip(cv) {
                    let mut h = tape.input(Tensor::zeros(vec![b * n, cell.d_h]));
                    let mut outs = Vec::with_capacity(w);
                    for &z in &layer_in {
                        h = cell.step(tape, cvars, z, h, &edges)?;
                        outs.push(h);
                    }
                    h_last = Some(h);
                    layer_in = outs;
                }
                let h = h_last.expect("at least one gcrnn layer");
                let dec_in = decoder_input(tape, h, emb_rows, u_future, false)?;
                let out = dec.forward(tape, dv, dec_in)?;
                node_rows_to_output(tape, out, b, n, horizon, dx, false)?
            }
            (Body::LocalRnns { enc, seq, dec1, dec2 }, BodyVars::LocalRnns { enc: ev, seq: sv, dec1: d1, dec2: d2 }) => {
                let emb_rows = self.embedding_rows(tape, vars, b, true)?;
                let mut steps = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(step_rows(x, u_past, t, true));
                    let inp = concat_opt(tape, raw, emb_rows)?;
                    steps.push(enc.forward(tape, ev, inp, b)?);
                }
                let h = *seq.encode(tape, sv, &steps, b)?.last().unwrap();
                let dec_in = decoder_input(tape, h, emb_rows, u_future, true)?;
                let mid = dec1.forward(tape, d1, dec_in, b)?;
                let mid = tape.relu(mid)?;
                let out = dec2.forward(tape, d2, mid, b)?;
                node_rows_to_output(tape, out, b, n, horizon, dx, true)?
            }
            (Body::Fcrnn { enc, seq, dec }, BodyVars::Fcrnn { enc: ev, seq: sv, dec: dv }) => {
                let mut steps = Vec::with_capacity(w);
                for t in 0..w {
                    let raw = tape.input(flat_step_rows(x, u_past, t));
                    steps.push(enc.forward(tape, ev, raw)?);
                }
                let h = seq.encode_last(tape, sv, &steps)?;
                let dec_in = match u_future {
                    Some(uf) => {
                        let fut = tape.input(flat_future_rows(uf));
                        tape.concat(&[h, fut], 1)?
                    }
                    None => h,
                };
                let out = dec.forward(tape, dv, dec_in)?;
                // Row b is already laid out horizon-major, node, channel.
                tape.reshape(out, vec![b, horizon, n, dx])?
            }
            _ => unreachable!("vars bound from a different model"),
        };

        let out = match (&self.local_ar, &vars.local_ar) {
            (Some(la), Some(lav)) => {
                let win = tape.input(window_rows_node_major(x));
                let local = la.forward(tape, lav, win, b)?;
                let local = node_rows_to_output(tape, local, b, n, horizon, dx, true)?;
                tape.add(global, local)?
            }
            _ => global,
        };
        Ok(out)
    }

    /// Per-row embedding lookup for the requested row layout, or None when
    /// embeddings are off.
    fn embedding_rows(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: usize,
        node_major: bool,
    ) -> Result<Option<Var>, ModelError> {
        let Some(q) = vars.emb else { return Ok(None) };
        let n = self.n_nodes;
        let idx: Vec<usize> = if node_major {
            (0..n * batch).map(|r| r / batch).collect()
        } else {
            (0..batch * n).map(|r| r % n).collect()
        };
        Ok(Some(tape.gather_rows(q, &idx)?))
    }

    fn graph_ctx(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: usize,
    ) -> Result<GraphCtx, ModelError> {
        match (&self.graph, &vars.graph) {
            (GraphBinding::Fixed(g), _) => Ok(GraphCtx::Edges(EdgeIndex::from_graph(g, batch))),
            (GraphBinding::Learned(lg), Some(gv)) => Ok(GraphCtx::Dense(lg.adjacency(tape, gv)?)),
            _ => Err(ModelError::MissingGraph { family: self.config.family }),
        }
    }
}

enum GraphCtx {
    Edges(EdgeIndex),
    Dense(Var),
}

/// [x ‖ u] rows for step `t`: sample-major rows b·N+n, or node-major n·B+b.
fn step_rows(x: &Tensor, u: Option<&Tensor>, t: usize, node_major: bool) -> Tensor {
    let (b, w, n, dx) = shape4(x);
    let du = u.map(|uu| uu.shape()[3]).unwrap_or(0);
    let d = dx + du;
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        for ni in 0..n {
            let row = if node_major { ni * b + bi } else { bi * n + ni };
            let dst = row * d;
            let src = ((bi * w + t) * n + ni) * dx;
            out[dst..dst + dx].copy_from_slice(&x.data()[src..src + dx]);
            if let Some(uu) = u {
                let us = ((bi * w + t) * n + ni) * du;
                out[dst + dx..dst + d].copy_from_slice(&uu.data()[us..us + du]);
            }
        }
    }
    Tensor::matrix(b * n, d, out).expect("consistent step slice")
}

/// One row per sample holding all nodes' channels for step `t` (x block then
/// u block).
fn flat_step_rows(x: &Tensor, u: Option<&Tensor>, t: usize) -> Tensor {
    let (b, w, n, dx) = shape4(x);
    let du = u.map(|uu| uu.shape()[3]).unwrap_or(0);
    let d = n * (dx + du);
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        let dst = bi * d;
        let src = (bi * w + t) * n * dx;
        out[dst..dst + n * dx].copy_from_slice(&x.data()[src..src + n * dx]);
        if let Some(uu) = u {
            let us = (bi * w + t) * n * du;
            out[dst + n * dx..dst + d].copy_from_slice(&uu.data()[us..us + n * du]);
        }
    }
    Tensor::matrix(b, d, out).expect("consistent flat step slice")
}

/// Future exogenous steps flattened per row: [rows × H·d_u].
fn future_rows(u: &Tensor, node_major: bool) -> Tensor {
    let (b, h, n, du) = shape4(u);
    let mut out = vec![0.0; b * n * h * du];
    for bi in 0..b {
        for ni in 0..n {
            let row = if node_major { ni * b + bi } else { bi * n + ni };
            for t in 0..h {
                let dst = row * h * du + t * du;
                let src = ((bi * h + t) * n + ni) * du;
                out[dst..dst + du].copy_from_slice(&u.data()[src..src + du]);
            }
        }
    }
    Tensor::matrix(b * n, h * du, out).expect("consistent future slice")
}

/// Whole future exogenous block per sample: [B × H·N·d_u].
fn flat_future_rows(u: &Tensor) -> Tensor {
    let (b, h, n, du) = shape4(u);
    Tensor::matrix(b, h * n * du, u.data().to_vec()).expect("contiguous future block")
}

/// Full window of observed values, node-major: [N·B × W·d_x].
fn window_rows_node_major(x: &Tensor) -> Tensor {
    let (b, w, n, dx) = shape4(x);
    let mut out = vec![0.0; n * b * w * dx];
    for ni in 0..n {
        for bi in 0..b {
            for t in 0..w {
                let dst = (ni * b + bi) * w * dx + t * dx;
                let src = ((bi * w + t) * n + ni) * dx;
                out[dst..dst + dx].copy_from_slice(&x.data()[src..src + dx]);
            }
        }
    }
    Tensor::matrix(n * b, w * dx, out).expect("consistent window slice")
}

fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize), ModelError> {
    if t.rank() != 4 {
        return Err(ModelError::ShapeMismatch {
            detail: format!("{what} must be rank 4, got shape {:?}", t.shape()),
        });
    }
    Ok(shape4(t))
}

fn concat_opt(tape: &mut Tape, x: Var, extra: Option<Var>) -> Result<Var, ModelError> {
    match extra {
        Some(e) => Ok(tape.concat(&[x, e], 1)?),
        None => Ok(x),
    }
}

/// Decoder input [h ‖ q ‖ u_future]; the optional parts are skipped when
/// absent.
fn decoder_input(
    tape: &mut Tape,
    h: Var,
    emb_rows: Option<Var>,
    u_future: Option<&Tensor>,
    node_major: bool,
) -> Result<Var, ModelError> {
    let mut parts = vec![h];
    if let Some(q) = emb_rows {
        parts.push(q);
    }
    if let Some(uf) = u_future {
        parts.push(tape.input(future_rows(uf, node_major)));
    }
    if parts.len() == 1 {
        Ok(h)
    } else {
        Ok(tape.concat(&parts, 1)?)
    }
}

/// Decoder rows [rows × H·d_x] back to [B × H × N × d_x].
fn node_rows_to_output(
    tape: &mut Tape,
    out: Var,
    b: usize,
    n: usize,
    h: usize,
    dx: usize,
    node_major: bool,
) -> Result<Var, ModelError> {
    let shaped = if node_major {
        let r = tape.reshape(out, vec![n, b, h, dx])?;
        tape.permute_axes(r, &[1, 2, 0, 3])?
    } else {
        let r = tape.reshape(out, vec![b, n, h, dx])?;
        tape.permute_axes(r, &[0, 2, 1, 3])?
    };
    Ok(shaped)
}
