//! Gated recurrent sequence encoders. The cell uses the convex state update
//! h' = o⊙h + (1−o)⊙c, so all-zero parameters halve the state per step, and
//! the candidate applies the reset gate to the previous state before the
//! hidden-to-hidden product.
//!
//! States are rows ([batch × d_h]) and weights multiply on the right. The
//! per-node variant keeps one disjoint parameter set per node and evaluates
//! all of them in a single grouped pass.

use crate::tensor::{Parameter, Tape, Tensor, TensorError, Var};
use rand::Rng;

/// Single gated recurrent cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_r: Parameter,
    pub u_r: Parameter,
    pub b_r: Parameter,
    pub w_o: Parameter,
    pub u_o: Parameter,
    pub b_o: Parameter,
    pub w_c: Parameter,
    pub u_c: Parameter,
    pub b_c: Parameter,
    pub d_in: usize,
    pub d_h: usize,
}

/// Tape bindings for one [`GruCell`].
pub struct GruCellVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_o: Var,
    pub u_o: Var,
    pub b_o: Var,
    pub w_c: Var,
    pub u_c: Var,
    pub b_c: Var,
}

impl GruCell {
    /// Weights uniform in ±1/√d_h, biases zero.
    pub fn init(prefix: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        GruCell {
            w_r: Parameter::uniform(format!("{prefix}.w_r"), vec![d_in, d_h], bound, rng),
            u_r: Parameter::uniform(format!("{prefix}.u_r"), vec![d_h, d_h], bound, rng),
            b_r: Parameter::zeros(format!("{prefix}.b_r"), vec![d_h]),
            w_o: Parameter::uniform(format!("{prefix}.w_o"), vec![d_in, d_h], bound, rng),
            u_o: Parameter::uniform(format!("{prefix}.u_o"), vec![d_h, d_h], bound, rng),
            b_o: Parameter::zeros(format!("{prefix}.b_o"), vec![d_h]),
            w_c: Parameter::uniform(format!("{prefix}.w_c"), vec![d_in, d_h], bound, rng),
            u_c: Parameter::uniform(format!("{prefix}.u_c"), vec![d_h, d_h], bound, rng),
            b_c: Parameter::zeros(format!("{prefix}.b_c"), vec![d_h]),
            d_in,
            d_h,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GruCellVars {
        GruCellVars {
            w_r: tape.leaf_param(&self.w_r),
            u_r: tape.leaf_param(&self.u_r),
            b_r: tape.leaf_param(&self.b_r),
            w_o: tape.leaf_param(&self.w_o),
            u_o: tape.leaf_param(&self.u_o),
            b_o: tape.leaf_param(&self.b_o),
            w_c: tape.leaf_param(&self.w_c),
            u_c: tape.leaf_param(&self.u_c),
            b_c: tape.leaf_param(&self.b_c),
        }
    }

    /// One step: r = σ(x·W_r + h·U_r + b_r), o = σ(x·W_o + h·U_o + b_o),
    /// c = tanh(x·W_c + (r⊙h)·U_c + b_c), h' = o⊙h + (1−o)⊙c.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &GruCellVars,
        x: Var,
        h: Var,
    ) -> Result<Var, TensorError> {
        let gate = |tape: &mut Tape, hin: Var, w: Var, u: Var, b: Var| -> Result<Var, TensorError> {
            let xa = tape.matmul(x, w)?;
            let ha = tape.matmul(hin, u)?;
            let s = tape.add(xa, ha)?;
            tape.add(s, b)
        };
        let r_pre = gate(tape, h, vars.w_r, vars.u_r, vars.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let o_pre = gate(tape, h, vars.w_o, vars.u_o, vars.b_o)?;
        let o = tape.sigmoid(o_pre)?;
        let rh = tape.mul(r, h)?;
        let c_pre = gate(tape, rh, vars.w_c, vars.u_c, vars.b_c)?;
        let c = tape.tanh(c_pre)?;
        convex_update(tape, o, h, c)
    }

    /// Left-to-right unroll from a zero initial state; returns every hidden
    /// state in step order.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &GruCellVars,
        xs: &[Var],
    ) -> Result<Vec<Var>, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "gru_encode" });
        }
        let (batch, _) = tape.value(xs[0]).dims2()?;
        let mut h = tape.input(Tensor::zeros(vec![batch, self.d_h]));
        let mut states = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(tape, vars, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Last state of [`GruCell::encode`].
    pub fn encode_last(
        &self,
        tape: &mut Tape,
        vars: &GruCellVars,
        xs: &[Var],
    ) -> Result<Var, TensorError> {
        Ok(*self.encode(tape, vars, xs)?.last().unwrap())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.w_r, &self.u_r, &self.b_r, &self.w_o, &self.u_o, &self.b_o, &self.w_c,
            &self.u_c, &self.b_c,
        ]
    }
}

/// h' = o⊙h + (1−o)⊙c.
pub(crate) fn convex_update(tape: &mut Tape, o: Var, h: Var, c: Var) -> Result<Var, TensorError> {
    let oh = tape.mul(o, h)?;
    let one = tape.input(Tensor::scalar(1.0));
    let om = tape.sub(one, o)?;
    let oc = tape.mul(om, c)?;
    tape.add(oh, oc)
}

/// One independent [`GruCell`] per node, stepped jointly. Rows are node-major:
/// row n·B + b holds node n of sample b, matching the grouped matmul layout.
#[derive(Debug, Clone)]
pub struct LocalGru {
    pub cells: Vec<GruCell>,
    pub d_in: usize,
    pub d_h: usize,
}

/// Stacked tape bindings for a [`LocalGru`]; weight leaves are [N × d × d_h],
/// bias leaves [N × d_h].
pub struct LocalGruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_o: Var,
    pub u_o: Var,
    pub b_o: Var,
    pub w_c: Var,
    pub u_c: Var,
    pub b_c: Var,
}

impl LocalGru {
    pub fn init(
        prefix: &str,
        n_nodes: usize,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cells = (0..n_nodes)
            .map(|n| GruCell::init(&format!("{prefix}.node{n}"), d_in, d_h, rng))
            .collect();
        LocalGru { cells, d_in, d_h }
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LocalGruVars, TensorError> {
        let stack = |tape: &mut Tape, pick: fn(&GruCell) -> &Parameter| {
            let ps: Vec<&Parameter> = self.cells.iter().map(pick).collect();
            tape.leaf_params_stacked(&ps)
        };
        Ok(LocalGruVars {
            w_r: stack(tape, |c| &c.w_r)?,
            u_r: stack(tape, |c| &c.u_r)?,
            b_r: stack(tape, |c| &c.b_r)?,
            w_o: stack(tape, |c| &c.w_o)?,
            u_o: stack(tape, |c| &c.u_o)?,
            b_o: stack(tape, |c| &c.b_o)?,
            w_c: stack(tape, |c| &c.w_c)?,
            u_c: stack(tape, |c| &c.u_c)?,
            b_c: stack(tape, |c| &c.b_c)?,
        })
    }

    /// One joint step over all nodes. `x` is [N·B × d_in], `h` [N·B × d_h],
    /// with `batch` rows per node.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &LocalGruVars,
        x: Var,
        h: Var,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let row_node: Vec<usize> = (0..self.n_nodes() * batch).map(|r| r / batch).collect();
        let gate = |tape: &mut Tape, hin: Var, w: Var, u: Var, b: Var| -> Result<Var, TensorError> {
            let xa = tape.group_matmul(x, w)?;
            let ha = tape.group_matmul(hin, u)?;
            let s = tape.add(xa, ha)?;
            let b_rows = tape.gather_rows(b, &row_node)?;
            tape.add(s, b_rows)
        };
        let r_pre = gate(tape, h, vars.w_r, vars.u_r, vars.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let o_pre = gate(tape, h, vars.w_o, vars.u_o, vars.b_o)?;
        let o = tape.sigmoid(o_pre)?;
        let rh = tape.mul(r, h)?;
        let c_pre = gate(tape, rh, vars.w_c, vars.u_c, vars.b_c)?;
        let c = tape.tanh(c_pre)?;
        convex_update(tape, o, h, c)
    }

    /// Unroll from zero states; returns every joint hidden state.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &LocalGruVars,
        xs: &[Var],
        batch: usize,
    ) -> Result<Vec<Var>, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "local_gru_encode" });
        }
        let rows = self.n_nodes() * batch;
        let mut h = tape.input(Tensor::zeros(vec![rows, self.d_h]));
        let mut states = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(tape, vars, x, h, batch)?;
            states.push(h);
        }
        Ok(states)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.cells.iter().flat_map(|c| c.params()).collect()
    }
}
