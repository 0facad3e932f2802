//! Small feed-forward building blocks shared by the model families: a plain
//! affine map, its per-node grouped counterpart, and a one-hidden-layer MLP.
//! All of them follow the row-vector convention of the rest of the crate.

use crate::tensor::{Parameter, Tape, TensorError, Var};
use rand::Rng;

/// Affine map x·W + b with shared weights.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init(prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Parameter::uniform(format!("{prefix}.w"), vec![d_in, d_out], bound, rng),
            b: Parameter::zeros(format!("{prefix}.b"), vec![d_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars { w: tape.leaf_param(&self.w), b: tape.leaf_param(&self.b) }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &LinearVars, x: Var) -> Result<Var, TensorError> {
        let xw = tape.matmul(x, vars.w)?;
        tape.add(xw, vars.b)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

/// One affine map per node, evaluated jointly on node-major rows
/// (row n·B + b holds node n of sample b).
#[derive(Debug, Clone)]
pub struct LocalLinear {
    pub ws: Vec<Parameter>,
    pub bs: Vec<Parameter>,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct LocalLinearVars {
    pub w: Var,
    pub b: Var,
}

impl LocalLinear {
    pub fn init(
        prefix: &str,
        n_nodes: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let ws = (0..n_nodes)
            .map(|n| {
                Parameter::uniform(format!("{prefix}.node{n}.w"), vec![d_in, d_out], bound, rng)
            })
            .collect();
        let bs = (0..n_nodes)
            .map(|n| Parameter::zeros(format!("{prefix}.node{n}.b"), vec![d_out]))
            .collect();
        LocalLinear { ws, bs, d_in, d_out }
    }

    pub fn n_nodes(&self) -> usize {
        self.ws.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LocalLinearVars, TensorError> {
        let ws: Vec<&Parameter> = self.ws.iter().collect();
        let bs: Vec<&Parameter> = self.bs.iter().collect();
        Ok(LocalLinearVars {
            w: tape.leaf_params_stacked(&ws)?,
            b: tape.leaf_params_stacked(&bs)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &LocalLinearVars,
        x: Var,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let xw = tape.group_matmul(x, vars.w)?;
        let row_node: Vec<usize> = (0..self.n_nodes() * batch).map(|r| r / batch).collect();
        let b_rows = tape.gather_rows(vars.b, &row_node)?;
        tape.add(xw, b_rows)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.ws.iter().chain(self.bs.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.ws.iter_mut().chain(self.bs.iter_mut()).collect()
    }
}

/// One-hidden-layer MLP with relu in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct MlpVars {
    pub l1: LinearVars,
    pub l2: LinearVars,
}

impl Mlp {
    pub fn init(
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            l1: Linear::init(&format!("{prefix}.l1"), d_in, d_hidden, rng),
            l2: Linear::init(&format!("{prefix}.l2"), d_hidden, d_out, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars { l1: self.l1.bind(tape), l2: self.l2.bind(tape) }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(tape, &vars.l1, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, &vars.l2, h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.l1.params();
        v.extend(self.l2.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_explicit_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::init("l", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = lin.bind(&mut tape);
        let x = tape.input(Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.0, 1.5, -1.0]).unwrap());
        let y = lin.forward(&mut tape, &vars, x).unwrap();
        let (w, b) = (lin.w.tensor.data(), lin.b.tensor.data());
        let xs = [1.0, -0.5, 2.0, 0.0, 1.5, -1.0];
        for r in 0..2 {
            for c in 0..2 {
                let want: f64 =
                    (0..3).map(|k| xs[r * 3 + k] * w[k * 2 + c]).sum::<f64>() + b[c];
                assert!((tape.value(y).data()[r * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_linear_matches_per_node_evaluation() {
        let (n_nodes, batch, d_in, d_out) = (3, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let local = LocalLinear::init("L", n_nodes, d_in, d_out, &mut rng);
        let x = Tensor::matrix(
            n_nodes * batch,
            d_in,
            (0..n_nodes * batch * d_in).map(|i| i as f64 * 0.1 - 0.5).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = local.bind(&mut tape).unwrap();
        let xv = tape.input(x.clone());
        let y = local.forward(&mut tape, &vars, xv, batch).unwrap();

        for n in 0..n_nodes {
            let single = Linear { w: local.ws[n].clone(), b: local.bs[n].clone() };
            let mut solo = Tape::new();
            let sv = single.bind(&mut solo);
            let rows = &x.data()[n * batch * d_in..(n + 1) * batch * d_in];
            let xs = solo.input(Tensor::matrix(batch, d_in, rows.to_vec()).unwrap());
            let ys = single.forward(&mut solo, &sv, xs).unwrap();
            assert_eq!(
                solo.value(ys).data(),
                &tape.value(y).data()[n * batch * d_out..(n + 1) * batch * d_out]
            );
        }
    }

    #[test]
    fn mlp_with_zero_second_layer_is_constant_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::init("m", 2, 4, 3, &mut rng);
        mlp.l2.w.tensor.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.input(Tensor::matrix(2, 2, vec![0.3, -0.7, 1.2, 0.4]).unwrap());
        let y = mlp.forward(&mut tape, &vars, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
