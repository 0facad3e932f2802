//! Recurrent cell whose gate maps are message-passing layers: each gate sees
//! the concatenation of the step input and the previous state, exchanges it
//! over the graph, and the state follows the same convex update as the plain
//! recurrent cell. The gate blocks use a pass-through activation, so on an
//! edgeless graph the cell collapses to a gated cell with linear gate maps.

use crate::mp::{Activation, EdgeIndex, MpBlock, MpBlockVars, MpKind};
use crate::rnn::convex_update;
use crate::tensor::{Parameter, Tape, TensorError, Var};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GcrnnCell {
    pub mp_r: MpBlock,
    pub mp_o: MpBlock,
    pub mp_c: MpBlock,
    pub d_h: usize,
}

pub struct GcrnnVars {
    pub mp_r: MpBlockVars,
    pub mp_o: MpBlockVars,
    pub mp_c: MpBlockVars,
}

impl GcrnnCell {
    pub fn init(prefix: &str, kind: MpKind, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let cat = d_in + d_h;
        GcrnnCell {
            mp_r: MpBlock::init(kind, &format!("{prefix}.r"), cat, d_h, Activation::Identity, rng),
            mp_o: MpBlock::init(kind, &format!("{prefix}.o"), cat, d_h, Activation::Identity, rng),
            mp_c: MpBlock::init(kind, &format!("{prefix}.c"), cat, d_h, Activation::Identity, rng),
            d_h,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GcrnnVars {
        GcrnnVars {
            mp_r: self.mp_r.bind(tape),
            mp_o: self.mp_o.bind(tape),
            mp_c: self.mp_c.bind(tape),
        }
    }

    /// One step: r = σ(MP_r([z ‖ h])), o = σ(MP_o([z ‖ h])),
    /// c = tanh(MP_c([z ‖ r⊙h])), h' = o⊙h + (1−o)⊙c.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &GcrnnVars,
        z: Var,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<Var, TensorError> {
        let zh = tape.concat(&[z, h], 1)?;
        let r_pre = self.mp_r.forward(tape, &vars.mp_r, zh, edges)?;
        let r = tape.sigmoid(r_pre)?;
        let o_pre = self.mp_o.forward(tape, &vars.mp_o, zh, edges)?;
        let o = tape.sigmoid(o_pre)?;
        let rh = tape.mul(r, h)?;
        let zrh = tape.concat(&[z, rh], 1)?;
        let c_pre = self.mp_c.forward(tape, &vars.mp_c, zrh, edges)?;
        let c = tape.tanh(c_pre)?;
        convex_update(tape, o, h, c)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.mp_r.params();
        out.extend(self.mp_o.params());
        out.extend(self.mp_c.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.mp_r.params_mut();
        out.extend(self.mp_o.params_mut());
        out.extend(self.mp_c.params_mut());
        out
    }
}
