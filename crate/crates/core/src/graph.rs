//! Static graphs over the node set of a time series collection: construction
//! from community structure or pairwise distances, sparse multiplication, and
//! k-hop neighborhoods.

use crate::tensor::{Tape, TensorError, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({src}, {dst}) references a node outside 0..{n}")]
    NodeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("edge ({src}, {dst}) appears more than once")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("edge ({src}, {dst}) has non-finite weight")]
    NonFiniteWeight { src: usize, dst: usize },
    #[error("{n_nodes} nodes cannot be split into {n_communities} equal communities")]
    BadCommunitySplit { n_nodes: usize, n_communities: usize },
    #[error("intra-community probability {p} is outside [0, 1]")]
    BadProbability { p: f64 },
    #[error("distance matrix must be square and symmetric, got {detail}")]
    BadDistanceMatrix { detail: String },
    #[error("graph must have at least one node")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Weighted graph. Undirected graphs store each edge once with `src <= dst`
/// and expand symmetrically on demand; self-loops expand to a single directed
/// edge either way.
#[derive(Debug, Clone)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<Edge>,
    directed: bool,
    self_loops: bool,
}

impl Graph {
    pub fn new(n_nodes: usize, edges: Vec<Edge>, directed: bool) -> Result<Self, GraphError> {
        if n_nodes == 0 {
            return Err(GraphError::Empty);
        }
        let mut canonical = edges;
        let mut seen = HashSet::new();
        let mut self_loops = false;
        for e in canonical.iter_mut() {
            if e.src >= n_nodes || e.dst >= n_nodes {
                return Err(GraphError::NodeOutOfRange { src: e.src, dst: e.dst, n: n_nodes });
            }
            if !e.weight.is_finite() {
                return Err(GraphError::NonFiniteWeight { src: e.src, dst: e.dst });
            }
            if !directed && e.src > e.dst {
                std::mem::swap(&mut e.src, &mut e.dst);
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(GraphError::DuplicateEdge { src: e.src, dst: e.dst });
            }
            self_loops |= e.src == e.dst;
        }
        Ok(Graph { n_nodes, edges: canonical, directed, self_loops })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Stored edges (undirected: one record per pair, src <= dst).
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    /// Stored edges that are not self-loops.
    pub fn n_plain_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.src != e.dst).count()
    }

    /// Directed expansion in stored order: undirected pairs yield src->dst then
    /// dst->src (self-loops yield one edge). Message-passing, spmm and the
    /// whiteness test all consume this order, which keeps accumulation
    /// sequences reproducible.
    pub fn directed_edges(&self) -> Vec<Edge> {
        if self.directed {
            return self.edges.clone();
        }
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for e in &self.edges {
            out.push(*e);
            if e.src != e.dst {
                out.push(Edge { src: e.dst, dst: e.src, weight: e.weight });
            }
        }
        out
    }

    /// Sparse matrix product `A^T x` (messages flow src -> dst), or `A x` when
    /// `transpose` is set. Differentiable w.r.t. `x`; weights are constants.
    pub fn spmm(&self, tape: &mut Tape, x: Var, transpose: bool) -> Result<Var, TensorError> {
        let expanded = self.directed_edges();
        let (take, put): (Vec<usize>, Vec<usize>) = expanded
            .iter()
            .map(|e| if transpose { (e.dst, e.src) } else { (e.src, e.dst) })
            .unzip();
        let w: Vec<f64> = expanded.iter().map(|e| e.weight).collect();
        let gathered = tape.gather_rows(x, &take)?;
        let scaled = tape.scale_rows(gathered, &w)?;
        tape.segment_sum(scaled, &put, self.n_nodes)
    }

    /// Tape-free spmm on a flat [n_nodes × d] buffer; same accumulation order
    /// as [`Graph::spmm`].
    pub fn spmm_data(&self, x: &[f64], d: usize, transpose: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.n_nodes * d, "spmm_data: bad input length");
        let mut out = vec![0.0; self.n_nodes * d];
        for e in self.directed_edges() {
            let (take, put) = if transpose { (e.dst, e.src) } else { (e.src, e.dst) };
            let src = &x[take * d..(take + 1) * d];
            let dst = &mut out[put * d..(put + 1) * d];
            for j in 0..d {
                dst[j] += e.weight * src[j];
            }
        }
        out
    }

    /// Nodes whose information can reach `node` within `hops` edge traversals
    /// (incoming direction), including `node` itself. Sorted ascending.
    pub fn k_hop_neighborhood(&self, node: usize, hops: usize) -> Result<Vec<usize>, GraphError> {
        if node >= self.n_nodes {
            return Err(GraphError::NodeOutOfRange { src: node, dst: node, n: self.n_nodes });
        }
        let expanded = self.directed_edges();
        let mut in_set = vec![false; self.n_nodes];
        in_set[node] = true;
        for _ in 0..hops {
            let snapshot = in_set.clone();
            for e in &expanded {
                if snapshot[e.dst] {
                    in_set[e.src] = true;
                }
            }
        }
        Ok((0..self.n_nodes).filter(|&i| in_set[i]).collect())
    }

    /// Dense adjacency with A[src][dst] = weight, expanded for undirected
    /// graphs. Intended for oracles and small-n consumers.
    pub fn dense_adjacency(&self) -> Vec<f64> {
        let n = self.n_nodes;
        let mut a = vec![0.0; n * n];
        for e in self.directed_edges() {
            a[e.src * n + e.dst] += e.weight;
        }
        a
    }
}

/// Undirected community graph: equal-sized communities with Bernoulli
/// intra-community edges, one bridge between consecutive communities arranged
/// in a ring, and a self-loop of weight 1 on every node.
pub fn community_graph(
    n_nodes: usize,
    n_communities: usize,
    intra_p: f64,
    seed: u64,
) -> Result<Graph, GraphError> {
    if n_communities == 0 || n_nodes % n_communities != 0 {
        return Err(GraphError::BadCommunitySplit { n_nodes, n_communities });
    }
    if !(0.0..=1.0).contains(&intra_p) {
        return Err(GraphError::BadProbability { p: intra_p });
    }
    let size = n_nodes / n_communities;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut present = HashSet::new();
    for c in 0..n_communities {
        let base = c * size;
        for i in 0..size {
            for j in (i + 1)..size {
                if rng.random_range(0.0..1.0) < intra_p {
                    let (s, d) = (base + i, base + j);
                    edges.push(Edge { src: s, dst: d, weight: 1.0 });
                    present.insert((s, d));
                }
            }
        }
    }
    if n_communities > 1 {
        for c in 0..n_communities {
            let next = (c + 1) % n_communities;
            // resample on the rare collision with an existing pair
            for _ in 0..16 {
                let s = c * size + rng.random_range(0..size);
                let d = next * size + rng.random_range(0..size);
                let key = (s.min(d), s.max(d));
                if present.insert(key) {
                    edges.push(Edge { src: key.0, dst: key.1, weight: 1.0 });
                    break;
                }
            }
        }
    }
    for i in 0..n_nodes {
        edges.push(Edge { src: i, dst: i, weight: 1.0 });
    }
    Graph::new(n_nodes, edges, false)
}

/// Undirected graph from a symmetric distance matrix: weight exp(-d²/bw²),
/// keeping pairs at or above `threshold`. No self-loops.
pub fn gaussian_kernel_graph(
    dists: &[f64],
    n: usize,
    bandwidth: f64,
    threshold: f64,
) -> Result<Graph, GraphError> {
    if dists.len() != n * n {
        return Err(GraphError::BadDistanceMatrix {
            detail: format!("{} entries for {n} nodes", dists.len()),
        });
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(GraphError::BadDistanceMatrix {
            detail: format!("bandwidth {bandwidth}"),
        });
    }
    for i in 0..n {
        for j in 0..n {
            if (dists[i * n + j] - dists[j * n + i]).abs() > 1e-9 {
                return Err(GraphError::BadDistanceMatrix {
                    detail: format!("asymmetry at ({i}, {j})"),
                });
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dists[i * n + j];
            let w = (-(d * d) / (bandwidth * bandwidth)).exp();
            if w >= threshold {
                edges.push(Edge { src: i, dst: j, weight: w });
            }
        }
    }
    Graph::new(n, edges, false)
}
