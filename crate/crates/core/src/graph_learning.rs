//! Learned adjacency from edge scores. A score matrix (dense or factorized)
//! is turned into a weighted adjacency either by relu + row softmax, which is
//! differentiable and row-stochastic, or by hard thresholding, which is not a
//! training path. The diagonal is excluded before the softmax: explicit self
//! terms already exist in the message-passing layers, and a learned self-loop
//! would double-count them.
//!
//! Post-relu zeros stay in the softmax as 0-valued logits, so an all-zero row
//! spreads uniform weight 1/(N−1) over the off-diagonal.

use crate::tensor::{Parameter, Tape, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphLearningError {
    #[error("score matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("factor shapes disagree: Z_src {src:?} vs Z_tgt {tgt:?}")]
    FactorMismatch { src: Vec<usize>, tgt: Vec<usize> },
    #[error("adjacency needs at least 2 nodes, got {n}")]
    TooSmall { n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dense per-pair edge scores.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub phi: Parameter,
}

impl ScoreMatrix {
    pub fn init(prefix: &str, n: usize, rng: &mut impl Rng) -> Self {
        ScoreMatrix { phi: Parameter::uniform(format!("{prefix}.phi"), vec![n, n], 1.0, rng) }
    }

    pub fn new(phi: Parameter) -> Result<Self, GraphLearningError> {
        let s = phi.tensor.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(GraphLearningError::NotSquare {
                rows: s.first().copied().unwrap_or(0),
                cols: s.get(1).copied().unwrap_or(0),
            });
        }
        Ok(ScoreMatrix { phi })
    }

    pub fn n_nodes(&self) -> usize {
        self.phi.tensor.shape()[0]
    }
}

/// Rank-limited scores Φ = Z_src·Z_tgtᵀ; memory O(N·d_z) instead of O(N²).
#[derive(Debug, Clone)]
pub struct FactorizedScores {
    pub z_src: Parameter,
    pub z_tgt: Parameter,
}

impl FactorizedScores {
    pub fn init(prefix: &str, n: usize, d_z: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_z as f64).sqrt();
        FactorizedScores {
            z_src: Parameter::uniform(format!("{prefix}.z_src"), vec![n, d_z], bound, rng),
            z_tgt: Parameter::uniform(format!("{prefix}.z_tgt"), vec![n, d_z], bound, rng),
        }
    }

    pub fn new(z_src: Parameter, z_tgt: Parameter) -> Result<Self, GraphLearningError> {
        if z_src.tensor.shape() != z_tgt.tensor.shape() || z_src.tensor.rank() != 2 {
            return Err(GraphLearningError::FactorMismatch {
                src: z_src.tensor.shape().to_vec(),
                tgt: z_tgt.tensor.shape().to_vec(),
            });
        }
        Ok(FactorizedScores { z_src, z_tgt })
    }

    pub fn n_nodes(&self) -> usize {
        self.z_src.tensor.shape()[0]
    }
}

/// Trainable graph attached to a model when no fixed graph is bound.
#[derive(Debug, Clone)]
pub enum LearnedGraph {
    Dense(ScoreMatrix),
    Factorized(FactorizedScores),
}

/// Tape bindings for a [`LearnedGraph`].
pub enum LearnedGraphVars {
    Dense { phi: Var },
    Factorized { z_src: Var, z_tgt: Var },
}

impl LearnedGraph {
    pub fn n_nodes(&self) -> usize {
        match self {
            LearnedGraph::Dense(s) => s.n_nodes(),
            LearnedGraph::Factorized(f) => f.n_nodes(),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            LearnedGraph::Dense(s) => vec![&s.phi],
            LearnedGraph::Factorized(f) => vec![&f.z_src, &f.z_tgt],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            LearnedGraph::Dense(s) => vec![&mut s.phi],
            LearnedGraph::Factorized(f) => vec![&mut f.z_src, &mut f.z_tgt],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LearnedGraphVars {
        match self {
            LearnedGraph::Dense(s) => LearnedGraphVars::Dense { phi: tape.leaf_param(&s.phi) },
            LearnedGraph::Factorized(f) => LearnedGraphVars::Factorized {
                z_src: tape.leaf_param(&f.z_src),
                z_tgt: tape.leaf_param(&f.z_tgt),
            },
        }
    }

    /// Score matrix on the tape: Φ itself, or the factor product.
    pub fn scores(&self, tape: &mut Tape, vars: &LearnedGraphVars) -> Result<Var, TensorError> {
        match vars {
            LearnedGraphVars::Dense { phi } => Ok(*phi),
            LearnedGraphVars::Factorized { z_src, z_tgt } => {
                let t = tape.transpose2d(*z_tgt)?;
                tape.matmul(*z_src, t)
            }
        }
    }

    /// Differentiable adjacency: relu + diagonal-masked row softmax.
    pub fn adjacency(
        &self,
        tape: &mut Tape,
        vars: &LearnedGraphVars,
    ) -> Result<Var, GraphLearningError> {
        let phi = self.scores(tape, vars)?;
        relu_row_softmax_adjacency(tape, phi)
    }
}

/// Row-stochastic adjacency from scores: relu, then row softmax with the
/// diagonal excluded (masked entries come back as exact zeros).
pub fn relu_row_softmax_adjacency(tape: &mut Tape, phi: Var) -> Result<Var, GraphLearningError> {
    let (n, m) = tape.value(phi).dims2()?;
    if n != m {
        return Err(GraphLearningError::NotSquare { rows: n, cols: m });
    }
    if n < 2 {
        return Err(GraphLearningError::TooSmall { n });
    }
    let pos = tape.relu(phi)?;
    let diag: Vec<bool> = (0..n * n).map(|i| i / n == i % n).collect();
    Ok(tape.masked_row_softmax(pos, &diag)?)
}

/// Hard binary adjacency A_ij = 1 iff φ_ij > ε (diagonal forced to 0). Plain
/// data, no gradient path.
pub fn threshold_adjacency(phi: &Tensor, eps: f64) -> Result<Tensor, GraphLearningError> {
    let (n, m) = phi.dims2()?;
    if n != m {
        return Err(GraphLearningError::NotSquare { rows: n, cols: m });
    }
    let data: Vec<f64> = phi
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i / n != i % n && v > eps { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::matrix(n, n, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_from(n: usize, data: Vec<f64>) -> ScoreMatrix {
        ScoreMatrix::new(Parameter::new("phi", Tensor::matrix(n, n, data).unwrap())).unwrap()
    }

    #[test]
    fn all_negative_scores_threshold_to_empty() {
        let s = dense_from(3, vec![-1.0; 9]);
        let adj = threshold_adjacency(&s.phi.tensor, 0.0).unwrap();
        assert!(adj.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_keeps_only_scores_above_eps_off_diagonal() {
        let s = dense_from(2, vec![5.0, 0.2, 0.7, 5.0]);
        let adj = threshold_adjacency(&s.phi.tensor, 0.5).unwrap();
        assert_eq!(adj.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_are_stochastic_with_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ScoreMatrix::init("g", 5, &mut rng);
        let g = LearnedGraph::Dense(s);
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &vars).unwrap();
        let a = tape.value(adj);
        for i in 0..5 {
            let row = &a.data()[i * 5..(i + 1) * 5];
            assert!(row[i] == 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn single_positive_entry_matches_scalar_softmax() {
        // Row 0: logits (after relu, diagonal dropped) are [0.8, 0.0].
        let s = dense_from(3, vec![0.0, 0.8, -0.3, -0.2, 0.0, -0.6, 0.4, -0.1, 0.0]);
        let g = LearnedGraph::Dense(s);
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &vars).unwrap();
        let a = tape.value(adj).data();
        let e = 0.8_f64.exp();
        assert!((a[1] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a[2] - 1.0 / (e + 1.0)).abs() < 1e-12);
        // Row 1 relus to all-zero logits: uniform over the two neighbors.
        assert!((a[3] - 0.5).abs() < 1e-12);
        assert!((a[5] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_factors_give_uniform_off_diagonal() {
        let n = 4;
        let f = FactorizedScores::new(
            Parameter::zeros("z_src", vec![n, 2]),
            Parameter::zeros("z_tgt", vec![n, 2]),
        )
        .unwrap();
        let g = LearnedGraph::Factorized(f);
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &vars).unwrap();
        let a = tape.value(adj).data();
        let want = 1.0 / (n as f64 - 1.0);
        for i in 0..n {
            for j in 0..n {
                let v = a[i * n + j];
                if i == j {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn factorized_adjacency_equals_dense_on_expanded_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FactorizedScores::init("g", 5, 3, &mut rng);
        let n = 5;
        let (zs, zt) = (f.z_src.tensor.data(), f.z_tgt.tensor.data());
        let mut phi = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                phi[i * n + j] = (0..3).map(|k| zs[i * 3 + k] * zt[j * 3 + k]).sum();
            }
        }
        let fact = LearnedGraph::Factorized(f);
        let mut tf = Tape::new();
        let vf = fact.bind(&mut tf);
        let af = fact.adjacency(&mut tf, &vf).unwrap();

        let dense = LearnedGraph::Dense(dense_from(n, phi));
        let mut td = Tape::new();
        let vd = dense.bind(&mut td);
        let ad = dense.adjacency(&mut td, &vd).unwrap();

        for (x, y) in tf.value(af).data().iter().zip(td.value(ad).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_product_rank_is_bounded_by_factor_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d_z) = (8, 3);
        let f = FactorizedScores::init("g", n, d_z, &mut rng);
        let g = LearnedGraph::Factorized(f);
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let phi = g.scores(&mut tape, &vars).unwrap();
        let mut m = tape.value(phi).data().to_vec();
        // Row-echelon elimination with partial pivoting; rank = surviving pivots.
        let mut rank = 0;
        for col in 0..n {
            let pivot = (rank..n).max_by(|&a, &b| {
                m[a * n + col].abs().partial_cmp(&m[b * n + col].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if m[p * n + col].abs() < 1e-9 {
                continue;
            }
            for c in 0..n {
                m.swap(rank * n + c, p * n + c);
            }
            for r in rank + 1..n {
                let f = m[r * n + col] / m[rank * n + col];
                for c in 0..n {
                    m[r * n + c] -= f * m[rank * n + c];
                }
            }
            rank += 1;
            if rank == n {
                break;
            }
        }
        assert!(rank <= d_z);
    }

    #[test]
    fn gradients_reach_both_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = LearnedGraph::Factorized(FactorizedScores::init("g", 4, 2, &mut rng));
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &vars).unwrap();
        let sq = tape.mul(adj, adj).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.take_param_grads();
        assert_eq!(grads.len(), 2);
        for (name, grad) in grads {
            assert!(grad.iter().any(|&v| v != 0.0), "no gradient reached {name}");
        }
    }

    #[test]
    fn adjacency_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{central_diff, max_rel_err, FD_STEP, FD_TOL};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = FactorizedScores::init("g", 4, 2, &mut rng);
        // Keep logits away from the relu kink so central differences are clean.
        let eval = |flat: &[f64]| -> f64 {
            let (a, b) = flat.split_at(8);
            let f = FactorizedScores::new(
                Parameter::new("z_src", Tensor::matrix(4, 2, a.to_vec()).unwrap()),
                Parameter::new("z_tgt", Tensor::matrix(4, 2, b.to_vec()).unwrap()),
            )
            .unwrap();
            let g = LearnedGraph::Factorized(f);
            let mut tape = Tape::new();
            let vars = g.bind(&mut tape);
            let adj = g.adjacency(&mut tape, &vars).unwrap();
            let sq = tape.mul(adj, adj).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.value(loss).item()
        };
        let mut flat: Vec<f64> = base
            .z_src
            .tensor
            .data()
            .iter()
            .chain(base.z_tgt.tensor.data())
            .copied()
            .collect();
        for v in &mut flat {
            if v.abs() < 0.1 {
                *v += 0.25;
            }
        }
        let numeric = central_diff(eval, &flat, FD_STEP);

        let f = FactorizedScores::new(
            Parameter::new("z_src", Tensor::matrix(4, 2, flat[..8].to_vec()).unwrap()),
            Parameter::new("z_tgt", Tensor::matrix(4, 2, flat[8..].to_vec()).unwrap()),
        )
        .unwrap();
        let g = LearnedGraph::Factorized(f);
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &vars).unwrap();
        let sq = tape.mul(adj, adj).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let grads: std::collections::HashMap<_, _> = tape.take_param_grads().into_iter().collect();
        let analytic: Vec<f64> = grads["z_src"].iter().chain(&grads["z_tgt"]).copied().collect();
        assert!(max_rel_err(&analytic, &numeric) < FD_TOL);
    }
}
