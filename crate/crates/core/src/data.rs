//! Dataset handling: synthetic process generation, CSV ingestion with
//! missing-value masks, windowing into supervised samples, sequential splits,
//! and per-node standardization.
//!
//! Generation and splitting are bitwise deterministic given the seeds recorded
//! in the dataset manifest.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::seed_stream;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad dataset configuration: {detail}")]
    BadConfig { detail: String },
    #[error("series of length {len} cannot produce windows with window {window} and horizon {horizon}")]
    TooShort { len: usize, window: usize, horizon: usize },
    #[error("split fractions sum to {sum}, expected 1")]
    BadFractions { sum: f64 },
    #[error("split produces an empty partition (train {train}, val {val}, test {test})")]
    DegenerateSplit { train: usize, val: usize, test: usize },
    #[error("sample index {index} out of range for {len} windows")]
    SampleOutOfRange { index: usize, len: usize },
    #[error("batch index list is empty")]
    EmptyBatch,
    #[error("shape error: {detail}")]
    Shape { detail: String },
    #[error("malformed wide-format header cell `{cell}` at column {column}")]
    MalformedHeader { cell: String, column: usize },
    #[error("mask file shape {mask_rows}x{mask_cols} does not match values shape {rows}x{cols}")]
    MaskShapeMismatch { mask_rows: usize, mask_cols: usize, rows: usize, cols: usize },
    #[error("mask entries must be 0 or 1, found `{cell}` at row {row}")]
    BadMaskValue { cell: String, row: usize },
    #[error("cannot parse `{cell}` at row {row}, column {column}")]
    BadNumber { cell: String, row: usize, column: usize },
    #[error("timestamps are not strictly increasing at index {index}")]
    BadTimestamps { index: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] toml::de::Error),
    #[error("manifest write error: {0}")]
    ManifestWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// A multivariate series observed at the nodes of an optional graph.
///
/// `x` is `[T, N, d_x]`; `mask` has the same shape with entries in {0, 1} and
/// every masked-out entry of `x` holds the sentinel 0. `u` carries exogenous
/// channels `[T, N, d_u]`, `v` static node attributes `[N, d_v]`.
#[derive(Debug, Clone)]
pub struct TimeSeriesCollection {
    pub x: Tensor,
    pub u: Option<Tensor>,
    pub v: Option<Tensor>,
    pub mask: Tensor,
    pub graph: Option<Graph>,
}

impl TimeSeriesCollection {
    pub fn new(
        x: Tensor,
        u: Option<Tensor>,
        v: Option<Tensor>,
        mask: Tensor,
        graph: Option<Graph>,
    ) -> Result<Self, DataError> {
        if x.rank() != 3 {
            return Err(DataError::Shape { detail: format!("x must be [T, N, d_x], got {:?}", x.shape()) });
        }
        if x.shape()[0] == 0 {
            return Err(DataError::Shape { detail: "series length must be at least 1".into() });
        }
        if mask.shape() != x.shape() {
            return Err(DataError::Shape {
                detail: format!("mask shape {:?} does not match x shape {:?}", mask.shape(), x.shape()),
            });
        }
        for (i, (&m, &v)) in mask.data().iter().zip(x.data()).enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(DataError::Shape { detail: format!("mask entry {i} is {m}, not 0/1") });
            }
            if m == 0.0 && v != 0.0 {
                return Err(DataError::Shape {
                    detail: format!("masked entry {i} holds {v} instead of the 0 sentinel"),
                });
            }
        }
        let (t, n) = (x.shape()[0], x.shape()[1]);
        if let Some(u) = &u {
            if u.rank() != 3 || u.shape()[0] != t || u.shape()[1] != n {
                return Err(DataError::Shape {
                    detail: format!("u must be [{t}, {n}, d_u], got {:?}", u.shape()),
                });
            }
        }
        if let Some(v) = &v {
            if v.rank() != 2 || v.shape()[0] != n {
                return Err(DataError::Shape {
                    detail: format!("v must be [{n}, d_v], got {:?}", v.shape()),
                });
            }
        }
        if let Some(g) = &graph {
            if g.n_nodes() != n {
                return Err(DataError::Shape {
                    detail: format!("graph has {} nodes, series has {n}", g.n_nodes()),
                });
            }
        }
        Ok(Self { x, u, v, mask, graph })
    }

    /// Wraps fully observed values: mask of all ones.
    pub fn fully_observed(x: Tensor, graph: Option<Graph>) -> Result<Self, DataError> {
        let mask = Tensor::new(x.shape().to_vec(), vec![1.0; x.numel()])?;
        Self::new(x, None, None, mask, graph)
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn d_x(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn d_u(&self) -> usize {
        self.u.as_ref().map_or(0, |u| u.shape()[2])
    }
}

/// Autoregressive mixing coefficients, one value shared by every node or one
/// value per node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeCoeffs {
    Shared(f64),
    PerNode(Vec<f64>),
}

impl NodeCoeffs {
    pub fn get(&self, node: usize) -> f64 {
        match self {
            NodeCoeffs::Shared(v) => *v,
            NodeCoeffs::PerNode(v) => v[node],
        }
    }

    pub fn abs_max(&self) -> f64 {
        match self {
            NodeCoeffs::Shared(v) => v.abs(),
            NodeCoeffs::PerNode(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    fn check_len(&self, n: usize, name: &str) -> Result<(), DataError> {
        if let NodeCoeffs::PerNode(v) = self {
            if v.len() != n {
                return Err(DataError::BadConfig {
                    detail: format!("{name} has {} entries for {n} nodes", v.len()),
                });
            }
        }
        Ok(())
    }
}

/// Parameters of the polynomial-graph-filter process: a spatiotemporal filter
/// bank `theta` (lag q, hop l) shared across nodes plus per-node
/// autoregressive mixing `a`, `b` and innovation noise of scale `sigma`.
#[derive(Debug, Clone)]
pub struct GpvarConfig {
    /// `theta[q][l]` weights the l-hop propagation of the (q+1)-lagged state.
    pub theta: Vec<Vec<f64>>,
    pub a: NodeCoeffs,
    pub b: NodeCoeffs,
    pub sigma: f64,
    /// Steps kept after the burn-in prefix is discarded.
    pub len: usize,
    pub burn_in: usize,
    pub graph: Graph,
    pub seed: u64,
}

/// Filter bank used by the shipped GPVAR configurations.
pub fn standard_filter() -> Vec<Vec<f64>> {
    vec![vec![2.5, -2.0, -0.5], vec![1.0, 3.0, 0.0]]
}

impl GpvarConfig {
    /// GPVAR: shared mixing a = b = 0.5, so node dynamics differ only through
    /// the graph.
    pub fn gpvar(graph: Graph, len: usize, seed: u64) -> Self {
        Self {
            theta: standard_filter(),
            a: NodeCoeffs::Shared(0.5),
            b: NodeCoeffs::Shared(0.5),
            sigma: 0.4,
            len,
            burn_in: 100,
            graph,
            seed,
        }
    }

    /// GPVAR-L: per-node mixing a, b drawn uniformly from [-2, 2) with the
    /// dataset seed, injecting node-local effects.
    pub fn gpvar_l(graph: Graph, len: usize, seed: u64) -> Self {
        let n = graph.n_nodes();
        let mut rng = seed_stream(seed, "gpvar.local_coeffs");
        let a = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Self {
            theta: standard_filter(),
            a: NodeCoeffs::PerNode(a),
            b: NodeCoeffs::PerNode(b),
            sigma: 0.4,
            len,
            burn_in: 100,
            graph,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.len == 0 {
            return Err(DataError::BadConfig { detail: "series length must be positive".into() });
        }
        if self.theta.is_empty() || self.theta[0].is_empty() {
            return Err(DataError::BadConfig { detail: "filter bank must be at least 1x1".into() });
        }
        let l = self.theta[0].len();
        if self.theta.iter().any(|row| row.len() != l) {
            return Err(DataError::BadConfig { detail: "filter bank rows must have equal length".into() });
        }
        if self.sigma < 0.0 {
            return Err(DataError::BadConfig { detail: format!("sigma is {}, must be >= 0", self.sigma) });
        }
        let n = self.graph.n_nodes();
        self.a.check_len(n, "a")?;
        self.b.check_len(n, "b")?;
        Ok(())
    }

    fn n_lags(&self) -> usize {
        self.theta.len()
    }
}

/// Runs the recursion from explicitly supplied initial rows. `init` holds
/// `init_count * n` values row-major; the returned buffer covers
/// `burn_in + len` steps including those rows.
fn run_recursion(cfg: &GpvarConfig, init: &[f64], noise: &mut impl Rng) -> Vec<f64> {
    let n = cfg.graph.n_nodes();
    let q = cfg.n_lags();
    let hops = cfg.theta[0].len();
    let total = cfg.burn_in + cfg.len;
    let start = (q + 1).min(total);
    debug_assert_eq!(init.len(), start * n);

    let mut x = vec![0.0; total * n];
    x[..init.len()].copy_from_slice(init);
    let mut h = vec![0.0; n];
    for s in start..total {
        let (past, cur) = x.split_at_mut(s * n);
        let cur = &mut cur[..n];
        h.fill(0.0);
        // New value at s comes from the filter state one step back: lags
        // s-1-1 .. s-1-q feed the graph filter, s-2 the local term.
        for qi in 1..=q {
            let lag = s - 1 - qi;
            let mut z = past[lag * n..(lag + 1) * n].to_vec();
            for li in 0..hops {
                let c = cfg.theta[qi - 1][li];
                if c != 0.0 {
                    for i in 0..n {
                        h[i] += c * z[i];
                    }
                }
                if li + 1 < hops {
                    z = cfg.graph.spmm_data(&z, 1, false);
                }
            }
        }
        let prev = &past[(s - 2) * n..(s - 1) * n];
        for i in 0..n {
            let eta: f64 = noise.sample(StandardNormal);
            cur[i] = cfg.a.get(i) * h[i].tanh() + cfg.b.get(i) * prev[i].tanh() + cfg.sigma * eta;
        }
    }
    x
}

/// Generates a trajectory of the process: the first lag-depth rows are drawn
/// from N(0, sigma^2), the recursion is iterated, and the leading `burn_in`
/// steps are discarded. Bitwise deterministic given `cfg.seed`.
pub fn gpvar_generate(cfg: &GpvarConfig) -> Result<TimeSeriesCollection, DataError> {
    cfg.validate()?;
    let n = cfg.graph.n_nodes();
    let total = cfg.burn_in + cfg.len;
    let start = (cfg.n_lags() + 1).min(total);
    let mut noise = seed_stream(cfg.seed, "gpvar.noise");
    let init: Vec<f64> = (0..start * n)
        .map(|_| cfg.sigma * noise.sample::<f64, _>(StandardNormal))
        .collect();
    let x = run_recursion(cfg, &init, &mut noise);
    let kept = x[cfg.burn_in * n..].to_vec();
    let tensor = Tensor::new(vec![cfg.len, n, 1], kept)?;
    TimeSeriesCollection::fully_observed(tensor, Some(cfg.graph.clone()))
}

/// One-step-ahead conditional mean of the generating process, the best
/// possible predictor in both the squared and absolute sense (the innovation
/// is symmetric around zero). Returns predictions aligned with `x` plus the
/// first index with enough history; earlier rows are zero.
pub fn optimal_forecast(cfg: &GpvarConfig, x: &Tensor) -> Result<(Tensor, usize), DataError> {
    cfg.validate()?;
    let n = cfg.graph.n_nodes();
    if x.rank() != 3 || x.shape()[1] != n || x.shape()[2] != 1 {
        return Err(DataError::Shape {
            detail: format!("expected [T, {n}, 1] series, got {:?}", x.shape()),
        });
    }
    let t_len = x.shape()[0];
    let q = cfg.n_lags();
    let hops = cfg.theta[0].len();
    let first_valid = q + 1;
    let mut preds = vec![0.0; t_len * n];
    let data = x.data();
    let mut h = vec![0.0; n];
    for s in first_valid..t_len {
        h.fill(0.0);
        for qi in 1..=q {
            let lag = s - 1 - qi;
            let mut z = data[lag * n..(lag + 1) * n].to_vec();
            for li in 0..hops {
                let c = cfg.theta[qi - 1][li];
                if c != 0.0 {
                    for i in 0..n {
                        h[i] += c * z[i];
                    }
                }
                if li + 1 < hops {
                    z = cfg.graph.spmm_data(&z, 1, false);
                }
            }
        }
        let prev = &data[(s - 2) * n..(s - 1) * n];
        for i in 0..n {
            preds[s * n + i] = cfg.a.get(i) * h[i].tanh() + cfg.b.get(i) * prev[i].tanh();
        }
    }
    Ok((Tensor::new(vec![t_len, n, 1], preds)?, first_valid))
}

/// Supervised one-window samples over a collection, identified by their
/// origin: the first target index. The window covers `[origin - w, origin)`,
/// the target `[origin, origin + h)`.
#[derive(Debug, Clone)]
pub struct Windows {
    pub w: usize,
    pub h: usize,
    pub origins: Vec<usize>,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn make_windows(c: &TimeSeriesCollection, w: usize, h: usize) -> Result<Windows, DataError> {
    if w == 0 || h == 0 {
        return Err(DataError::BadConfig { detail: "window and horizon must be positive".into() });
    }
    let t = c.len();
    if t < w + h {
        return Err(DataError::TooShort { len: t, window: w, horizon: h });
    }
    Ok(Windows { w, h, origins: (w..=t - h).collect() })
}

/// Contiguous, order-preserving split of window samples by origin time.
pub fn split_sequential(
    wins: &Windows,
    fractions: (f64, f64, f64),
) -> Result<(Windows, Windows, Windows), DataError> {
    let (f_tr, f_va, f_te) = fractions;
    let sum = f_tr + f_va + f_te;
    if (sum - 1.0).abs() > 1e-9 || f_tr < 0.0 || f_va < 0.0 || f_te < 0.0 {
        return Err(DataError::BadFractions { sum });
    }
    let n = wins.len();
    let n_tr = ((f_tr * n as f64) + 1e-9).floor() as usize;
    let n_va = ((f_va * n as f64) + 1e-9).floor() as usize;
    let n_te = n - n_tr.min(n) - n_va.min(n - n_tr.min(n));
    if n_tr == 0 || n_va == 0 || n_te == 0 {
        return Err(DataError::DegenerateSplit { train: n_tr, val: n_va, test: n_te });
    }
    let mk = |o: &[usize]| Windows { w: wins.w, h: wins.h, origins: o.to_vec() };
    Ok((
        mk(&wins.origins[..n_tr]),
        mk(&wins.origins[n_tr..n_tr + n_va]),
        mk(&wins.origins[n_tr + n_va..]),
    ))
}

/// A materialized batch of window samples ready for a model forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, W, N, d_x]`
    pub x: Tensor,
    /// `[B, W, N, d_x]`
    pub x_mask: Tensor,
    /// `[B, W, N, d_u]` when the collection has exogenous channels.
    pub u_past: Option<Tensor>,
    /// `[B, H, N, d_u]`
    pub u_future: Option<Tensor>,
    /// `[B, H, N, d_x]`
    pub target: Tensor,
    /// `[B, H, N, d_x]`
    pub target_mask: Tensor,
}

/// Copies the selected samples into contiguous batch tensors.
pub fn gather_batch(
    c: &TimeSeriesCollection,
    wins: &Windows,
    idx: &[usize],
) -> Result<Batch, DataError> {
    if idx.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    for &i in idx {
        if i >= wins.len() {
            return Err(DataError::SampleOutOfRange { index: i, len: wins.len() });
        }
    }
    let (b, w, h) = (idx.len(), wins.w, wins.h);
    let (n, dx, du) = (c.n_nodes(), c.d_x(), c.d_u());
    let row = n * dx;
    let copy_span = |src: &[f64], from: usize, steps: usize, width: usize| {
        let mut out = Vec::with_capacity(b * steps * width);
        for &i in idx {
            let t0 = wins.origins[i] - w + from;
            out.extend_from_slice(&src[t0 * width..(t0 + steps) * width]);
        }
        out
    };
    let x = Tensor::new(vec![b, w, n, dx], copy_span(c.x.data(), 0, w, row))?;
    let x_mask = Tensor::new(vec![b, w, n, dx], copy_span(c.mask.data(), 0, w, row))?;
    let target = Tensor::new(vec![b, h, n, dx], copy_span(c.x.data(), w, h, row))?;
    let target_mask = Tensor::new(vec![b, h, n, dx], copy_span(c.mask.data(), w, h, row))?;
    let (u_past, u_future) = match &c.u {
        Some(u) => (
            Some(Tensor::new(vec![b, w, n, du], copy_span(u.data(), 0, w, n * du))?),
            Some(Tensor::new(vec![b, h, n, du], copy_span(u.data(), w, h, n * du))?),
        ),
        None => (None, None),
    };
    Ok(Batch { x, x_mask, u_past, u_future, target, target_mask })
}

/// Per-(node, channel) affine standardization fitted on a time prefix, so
/// statistics never leak from evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on steps `[0, t_end)`, skipping masked entries. Channels with no
    /// observations or zero spread get mean 0 / std 1.
    pub fn fit(x: &Tensor, mask: &Tensor, t_end: usize) -> Result<Self, DataError> {
        if x.rank() != 3 || mask.shape() != x.shape() {
            return Err(DataError::Shape { detail: "scaler expects matching [T, N, d] pair".into() });
        }
        let t_end = t_end.min(x.shape()[0]);
        let width = x.shape()[1] * x.shape()[2];
        let (mut sum, mut sumsq, mut count) = (vec![0.0; width], vec![0.0; width], vec![0usize; width]);
        for t in 0..t_end {
            for c in 0..width {
                let i = t * width + c;
                if mask.data()[i] != 0.0 {
                    sum[c] += x.data()[i];
                    sumsq[c] += x.data()[i] * x.data()[i];
                    count[c] += 1;
                }
            }
        }
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for c in 0..width {
            if count[c] > 0 {
                mean[c] = sum[c] / count[c] as f64;
                let var = (sumsq[c] / count[c] as f64 - mean[c] * mean[c]).max(0.0);
                let s = var.sqrt();
                if s > 1e-12 {
                    std[c] = s;
                }
            }
        }
        Ok(Scaler { mean, std })
    }

    fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<(), DataError> {
        if x.numel() % self.width() != 0 {
            return Err(DataError::Shape {
                detail: format!("tensor of {} values is not a multiple of {} channels", x.numel(), self.width()),
            });
        }
        Ok(())
    }

    /// Standardizes in place; masked entries keep the 0 sentinel.
    pub fn transform(&self, x: &mut Tensor, mask: Option<&Tensor>) -> Result<(), DataError> {
        self.check(x)?;
        let w = self.width();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if mask.is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let c = i % w;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(())
    }

    /// Undoes `transform`; used on model outputs, which carry no mask.
    pub fn inverse(&self, x: &mut Tensor, mask: Option<&Tensor>) -> Result<(), DataError> {
        self.check(x)?;
        let w = self.width();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if mask.is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let c = i % w;
            *v = *v * self.std[c] + self.mean[c];
        }
        Ok(())
    }
}

/// Columns encoding time of day and day of week: sin/cos of the in-period
/// phase followed by a 7-slot weekday one-hot (Monday first, Unix epoch
/// reference). Timestamps are Unix seconds and must be strictly increasing;
/// `period` is the sinusoid period in seconds.
pub fn time_encodings(timestamps: &[i64], period: f64) -> Result<Tensor, DataError> {
    if !(period > 0.0) {
        return Err(DataError::BadConfig { detail: format!("period is {period}, must be positive") });
    }
    for (i, pair) in timestamps.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(DataError::BadTimestamps { index: i + 1 });
        }
    }
    const DAY: i64 = 86_400;
    let mut out = Vec::with_capacity(timestamps.len() * 9);
    for &ts in timestamps {
        let phase = (ts as f64).rem_euclid(period) / period;
        let angle = 2.0 * std::f64::consts::PI * phase;
        out.push(angle.sin());
        out.push(angle.cos());
        // Epoch day 0 was a Thursday; shift so Monday occupies slot 0.
        let weekday = (ts.div_euclid(DAY) + 3).rem_euclid(7) as usize;
        for k in 0..7 {
            out.push(if k == weekday { 1.0 } else { 0.0 });
        }
    }
    Ok(Tensor::new(vec![timestamps.len(), 9], out)?)
}

/// Tiles per-step columns `[T, k]` across nodes into exogenous form
/// `[T, N, k]`.
pub fn tile_over_nodes(cols: &Tensor, n: usize) -> Result<Tensor, DataError> {
    let (t, k) = cols.dims2()?;
    let mut out = Vec::with_capacity(t * n * k);
    for step in cols.data().chunks(k) {
        for _ in 0..n {
            out.extend_from_slice(step);
        }
    }
    Ok(Tensor::new(vec![t, n, k], out)?)
}

fn header_cells(n: usize, d: usize) -> Vec<String> {
    let mut cells = Vec::with_capacity(n * d);
    for i in 0..n {
        for k in 0..d {
            cells.push(format!("n{i}_c{k}"));
        }
    }
    cells
}

/// Parses a wide-format header `n<i>_c<k>`, node-major, returning (N, d_x).
fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize), DataError> {
    let bad = |column: usize| DataError::MalformedHeader {
        cell: header.get(column).unwrap_or("").to_string(),
        column,
    };
    if header.is_empty() {
        return Err(DataError::MalformedHeader { cell: String::new(), column: 0 });
    }
    let mut d = 0;
    while d < header.len() && header.get(d).is_some_and(|c| c.starts_with("n0_")) {
        d += 1;
    }
    if d == 0 || header.len() % d != 0 {
        return Err(bad(d.min(header.len().saturating_sub(1))));
    }
    let n = header.len() / d;
    for (j, want) in header_cells(n, d).iter().enumerate() {
        if header.get(j) != Some(want.as_str()) {
            return Err(bad(j));
        }
    }
    Ok((n, d))
}

fn read_wide(path: &Path) -> Result<(usize, usize, Vec<String>), DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let (n, d) = parse_header(reader.headers()?)?;
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record?;
        for j in 0..n * d {
            cells.push(record.get(j).unwrap_or("").trim().to_string());
        }
    }
    Ok((n, d, cells))
}

/// Loads a wide-format value table, one row per step, one column per
/// (node, channel) pair named `n<i>_c<k>`. Empty cells become masked-out
/// zeros. An explicit mask file (0/1 entries, same shape) further restricts
/// observability; an edge-list file attaches a graph.
pub fn load_csv(
    values_path: &Path,
    mask_path: Option<&Path>,
    edges_path: Option<&Path>,
) -> Result<TimeSeriesCollection, DataError> {
    let (n, d, cells) = read_wide(values_path)?;
    let t = cells.len() / (n * d);
    let mut values = vec![0.0; cells.len()];
    let mut mask = vec![1.0; cells.len()];
    for (i, cell) in cells.iter().enumerate() {
        if cell.is_empty() {
            mask[i] = 0.0;
        } else {
            values[i] = cell.parse().map_err(|_| DataError::BadNumber {
                cell: cell.clone(),
                row: i / (n * d),
                column: i % (n * d),
            })?;
        }
    }
    if let Some(mp) = mask_path {
        let (mn, md, mcells) = read_wide(mp)?;
        if mn != n || md != d || mcells.len() != cells.len() {
            return Err(DataError::MaskShapeMismatch {
                mask_rows: mcells.len() / (mn * md).max(1),
                mask_cols: mn * md,
                rows: t,
                cols: n * d,
            });
        }
        for (i, cell) in mcells.iter().enumerate() {
            match cell.as_str() {
                "1" => {}
                "0" => mask[i] = 0.0,
                other => {
                    return Err(DataError::BadMaskValue {
                        cell: other.to_string(),
                        row: i / (n * d),
                    })
                }
            }
        }
    }
    for (v, m) in values.iter_mut().zip(&mask) {
        if *m == 0.0 {
            *v = 0.0;
        }
    }
    let graph = match edges_path {
        Some(p) => Some(load_edge_list(p, false)?),
        None => None,
    };
    let x = Tensor::new(vec![t, n, d], values)?;
    let m = Tensor::new(vec![t, n, d], mask)?;
    TimeSeriesCollection::new(x, None, None, m, graph)
}

/// Writes the collection back to wide CSV form; masked entries become empty
/// cells, so a save/load round trip preserves (values, mask) exactly.
pub fn save_csv(
    c: &TimeSeriesCollection,
    values_path: &Path,
    mask_path: Option<&Path>,
    edges_path: Option<&Path>,
) -> Result<(), DataError> {
    let (n, d) = (c.n_nodes(), c.d_x());
    let header = header_cells(n, d);
    // Always quote so a fully masked single-column row survives as `""`
    // instead of a blank line, which CSV readers skip.
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_path(values_path)?;
    writer.write_record(&header)?;
    for t in 0..c.len() {
        let row: Vec<String> = (0..n * d)
            .map(|j| {
                let i = t * n * d + j;
                if c.mask.data()[i] == 0.0 {
                    String::new()
                } else {
                    format!("{}", c.x.data()[i])
                }
            })
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    if let Some(mp) = mask_path {
        let mut writer = csv::Writer::from_path(mp)?;
        writer.write_record(&header)?;
        for t in 0..c.len() {
            let row: Vec<String> = (0..n * d)
                .map(|j| if c.mask.data()[t * n * d + j] == 0.0 { "0".into() } else { "1".into() })
                .collect();
            writer.write_record(&row)?;
        }
        writer.flush()?;
    }
    if let (Some(ep), Some(g)) = (edges_path, &c.graph) {
        save_edge_list(g, ep)?;
    }
    Ok(())
}

/// Edge-list file: header `src,dst,weight`, one edge per line, 0-based ids.
pub fn load_edge_list(path: &Path, directed: bool) -> Result<Graph, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    if reader.headers()? != vec!["src", "dst", "weight"] {
        return Err(DataError::MalformedHeader {
            cell: reader.headers()?.iter().collect::<Vec<_>>().join(","),
            column: 0,
        });
    }
    let mut edges = Vec::new();
    let mut max_node = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or("").trim().to_string();
        let src: usize = field(0).parse().map_err(|_| DataError::BadNumber { cell: field(0), row: r, column: 0 })?;
        let dst: usize = field(1).parse().map_err(|_| DataError::BadNumber { cell: field(1), row: r, column: 1 })?;
        let weight: f64 = field(2).parse().map_err(|_| DataError::BadNumber { cell: field(2), row: r, column: 2 })?;
        max_node = max_node.max(src).max(dst);
        edges.push(crate::graph::Edge { src, dst, weight });
    }
    Ok(Graph::new(max_node + 1, edges, directed)?)
}

pub fn save_edge_list(g: &Graph, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["src", "dst", "weight"])?;
    for e in g.edges() {
        writer.write_record([e.src.to_string(), e.dst.to_string(), format!("{}", e.weight)])?;
    }
    writer.flush()?;
    Ok(())
}

/// Everything needed to rebuild a prepared dataset deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub window: usize,
    pub horizon: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub len: usize,
    pub n_nodes: usize,
    pub d_x: usize,
    pub scaler: Option<Scaler>,
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    fs::write(path, toml::to_string_pretty(m)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::community_graph;

    fn toy_graph(n: usize) -> Graph {
        let edges = (0..n)
            .map(|i| crate::graph::Edge { src: i, dst: (i + 1) % n, weight: 0.5 })
            .collect();
        Graph::new(n, edges, false).unwrap()
    }

    fn shipped_graph(seed: u64) -> Graph {
        community_graph(120, 20, 0.6, seed).unwrap()
    }

    #[test]
    fn all_zero_parameters_give_an_all_zero_trajectory() {
        let mut cfg = GpvarConfig::gpvar(toy_graph(4), 50, 3);
        cfg.theta = vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]];
        cfg.a = NodeCoeffs::Shared(0.0);
        cfg.b = NodeCoeffs::Shared(0.0);
        cfg.sigma = 0.0;
        let c = gpvar_generate(&cfg).unwrap();
        assert!(c.x.data().iter().all(|&v| v == 0.0));
        assert!(c.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pure_local_feedback_contracts_toward_zero() {
        let mut cfg = GpvarConfig::gpvar(toy_graph(3), 40, 0);
        cfg.theta = vec![vec![0.0], vec![0.0]];
        cfg.a = NodeCoeffs::Shared(0.0);
        cfg.b = NodeCoeffs::Shared(1.0);
        cfg.sigma = 0.0;
        cfg.burn_in = 0;
        let n = 3;
        let init = vec![0.9, -1.4, 0.6, 0.8, -1.2, 0.5, 0.7, -1.0, 0.4];
        let mut rng = seed_stream(0, "unused");
        let x = run_recursion(&cfg, &init, &mut rng);
        // Each value is tanh of the value two steps back, so magnitudes fall
        // strictly along both interleaved chains.
        for s in 2..cfg.len {
            for i in 0..n {
                let (now, before) = (x[s * n + i].abs(), x[(s - 2) * n + i].abs());
                assert!(now < before, "|x| did not shrink at step {s}, node {i}");
                assert!(now > 0.0);
            }
        }
    }

    #[test]
    fn trajectories_are_reproducible_per_seed() {
        let g = toy_graph(6);
        let a = gpvar_generate(&GpvarConfig::gpvar(g.clone(), 80, 42)).unwrap();
        let b = gpvar_generate(&GpvarConfig::gpvar(g.clone(), 80, 42)).unwrap();
        let c = gpvar_generate(&GpvarConfig::gpvar(g, 80, 43)).unwrap();
        assert_eq!(a.x.data(), b.x.data());
        assert_ne!(a.x.data(), c.x.data());
    }

    #[test]
    fn shipped_config_matches_an_independent_long_run_std() {
        let cfg = GpvarConfig::gpvar(shipped_graph(0), 3000, 7);
        let c = gpvar_generate(&cfg).unwrap();
        let reference = gpvar_generate(&GpvarConfig::gpvar(shipped_graph(0), 30_000, 1234)).unwrap();
        let std = |t: &Tensor| {
            let m = t.data().iter().sum::<f64>() / t.numel() as f64;
            (t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.numel() as f64).sqrt()
        };
        let (got, want) = (std(&c.x), std(&reference.x));
        assert!(
            (got - want).abs() / want < 0.05,
            "sample std {got:.4} deviates from long-run reference {want:.4}"
        );
    }

    #[test]
    fn values_respect_the_mixing_plus_noise_bound() {
        let cfg = GpvarConfig::gpvar(shipped_graph(0), 2000, 9);
        let c = gpvar_generate(&cfg).unwrap();
        let bound = cfg.a.abs_max() + cfg.b.abs_max() + 6.0 * cfg.sigma;
        let worst = c.x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= bound, "saw |x| = {worst:.3} above bound {bound:.3}");
    }

    #[test]
    fn local_variant_draws_node_coefficients_in_range() {
        let cfg = GpvarConfig::gpvar_l(toy_graph(8), 10, 5);
        let (NodeCoeffs::PerNode(a), NodeCoeffs::PerNode(b)) = (&cfg.a, &cfg.b) else {
            panic!("local variant must draw per-node coefficients");
        };
        assert_eq!(a.len(), 8);
        assert!(a.iter().chain(b).all(|&v| (-2.0..2.0).contains(&v)));
        assert_ne!(a, b);
        let again = GpvarConfig::gpvar_l(toy_graph(8), 10, 5);
        assert_eq!(cfg.a, again.a);
    }

    #[test]
    fn noiseless_process_is_exactly_predicted_by_the_conditional_mean() {
        let mut cfg = GpvarConfig::gpvar(toy_graph(5), 30, 0);
        cfg.sigma = 0.0;
        cfg.burn_in = 0;
        let n = 5;
        let init: Vec<f64> = (0..3 * n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect();
        let mut rng = seed_stream(0, "unused");
        let x = run_recursion(&cfg, &init, &mut rng);
        let tensor = Tensor::new(vec![cfg.len, n, 1], x).unwrap();
        let (preds, first) = optimal_forecast(&cfg, &tensor).unwrap();
        assert_eq!(first, 3);
        for i in first * n..cfg.len * n {
            assert!(
                (preds.data()[i] - tensor.data()[i]).abs() < 1e-14,
                "conditional mean missed a noiseless value at {i}"
            );
        }
    }

    #[test]
    fn node_count_mismatch_is_rejected() {
        let mut cfg = GpvarConfig::gpvar(toy_graph(4), 50, 3);
        cfg.a = NodeCoeffs::PerNode(vec![0.5; 3]);
        assert!(matches!(gpvar_generate(&cfg), Err(DataError::BadConfig { .. })));
        let mut cfg = GpvarConfig::gpvar(toy_graph(4), 0, 3);
        cfg.len = 0;
        assert!(matches!(gpvar_generate(&cfg), Err(DataError::BadConfig { .. })));
    }

    fn small_collection(t: usize, n: usize) -> TimeSeriesCollection {
        let x = Tensor::new(
            vec![t, n, 1],
            (0..t * n).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();
        TimeSeriesCollection::fully_observed(x, None).unwrap()
    }

    #[test]
    fn window_count_and_first_target_match_arithmetic() {
        let c = small_collection(100, 2);
        let wins = make_windows(&c, 12, 1).unwrap();
        assert_eq!(wins.len(), 88);
        assert_eq!(wins.origins[0], 12);
        let batch = gather_batch(&c, &wins, &[0]).unwrap();
        assert_eq!(batch.target.data()[0], c.x.data()[12 * 2]);
        assert!(batch.x_mask.data().iter().all(|&m| m == 1.0));
        assert!(matches!(
            make_windows(&small_collection(5, 2), 12, 1),
            Err(DataError::TooShort { .. })
        ));
    }

    #[test]
    fn one_step_targets_reconcatenate_to_the_series() {
        let c = small_collection(40, 3);
        let wins = make_windows(&c, 7, 1).unwrap();
        let batch = gather_batch(&c, &wins, &(0..wins.len()).collect::<Vec<_>>()).unwrap();
        assert_eq!(batch.target.data(), &c.x.data()[7 * 3..]);
    }

    #[test]
    fn masks_are_carried_through_windowing_unchanged() {
        let t = 20;
        let mut x = vec![0.5; t * 2];
        let mut mask = vec![1.0; t * 2];
        mask[9] = 0.0;
        x[9] = 0.0;
        let c = TimeSeriesCollection::new(
            Tensor::new(vec![t, 2, 1], x).unwrap(),
            None,
            None,
            Tensor::new(vec![t, 2, 1], mask).unwrap(),
            None,
        )
        .unwrap();
        let wins = make_windows(&c, 4, 2).unwrap();
        let batch = gather_batch(&c, &wins, &[0, 1]).unwrap();
        // Entry 9 sits at step 4, node 1. Sample 0 (origin 4) has it in the
        // target, sample 1 (origin 5) in the input window; nowhere else.
        assert_eq!(batch.target_mask.data()[1], 0.0);
        assert_eq!(batch.target_mask.data().iter().filter(|&&m| m == 0.0).count(), 1);
        let in_window = ((1 * 4 + 3) * 2 + 1) * 1;
        assert_eq!(batch.x_mask.data()[in_window], 0.0);
        assert_eq!(batch.x_mask.data().iter().filter(|&&m| m == 0.0).count(), 1);
    }

    #[test]
    fn sequential_split_sizes_and_order() {
        let c = small_collection(102, 1);
        let wins = make_windows(&c, 2, 1).unwrap();
        assert_eq!(wins.len(), 100);
        let (tr, va, te) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 10, 20));
        assert!(tr.origins.last().unwrap() < va.origins.first().unwrap());
        assert!(va.origins.last().unwrap() < te.origins.first().unwrap());

        let c = small_collection(12, 1);
        let wins = make_windows(&c, 2, 1).unwrap();
        let (tr, va, te) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn degenerate_and_invalid_fractions_are_rejected() {
        let c = small_collection(6, 1);
        let wins = make_windows(&c, 2, 1).unwrap();
        assert!(matches!(
            split_sequential(&wins, (0.7, 0.1, 0.2)),
            Err(DataError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            split_sequential(&wins, (0.5, 0.2, 0.2)),
            Err(DataError::BadFractions { .. })
        ));
    }

    #[test]
    fn csv_round_trip_preserves_values_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("values.csv");
        let mp = dir.path().join("mask.csv");
        let (t, n, d) = (9, 3, 2);
        let mut rng = seed_stream(5, "csv");
        let mut x = vec![0.0; t * n * d];
        let mut m = vec![1.0; t * n * d];
        for i in 0..t * n * d {
            if rng.random_range(0.0..1.0) < 0.25 {
                m[i] = 0.0;
            } else {
                x[i] = rng.random_range(-3.0..3.0);
            }
        }
        let c = TimeSeriesCollection::new(
            Tensor::new(vec![t, n, d], x).unwrap(),
            None,
            None,
            Tensor::new(vec![t, n, d], m).unwrap(),
            Some(toy_graph(n)),
        )
        .unwrap();
        let ep = dir.path().join("edges.csv");
        save_csv(&c, &vp, Some(&mp), Some(&ep)).unwrap();
        let back = load_csv(&vp, Some(&mp), Some(&ep)).unwrap();
        assert_eq!(back.x.data(), c.x.data());
        assert_eq!(back.mask.data(), c.mask.data());
        let g = back.graph.unwrap();
        assert_eq!(g.n_nodes(), n);
        assert_eq!(g.edges(), c.graph.as_ref().unwrap().edges());
    }

    #[test]
    fn blank_cells_become_masked_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("values.csv");
        fs::write(&vp, "n0_c0,n1_c0\n1.5,2.5\n,3.5\n").unwrap();
        let c = load_csv(&vp, None, None).unwrap();
        assert_eq!(c.x.data(), &[1.5, 2.5, 0.0, 3.5]);
        assert_eq!(c.mask.data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn single_column_round_trip_survives_fully_masked_rows() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("values.csv");
        let c = TimeSeriesCollection::new(
            Tensor::new(vec![3, 1, 1], vec![1.5, 0.0, -2.5]).unwrap(),
            None,
            None,
            Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 1.0]).unwrap(),
            None,
        )
        .unwrap();
        save_csv(&c, &vp, None, None).unwrap();
        let back = load_csv(&vp, None, None).unwrap();
        assert_eq!(back.x.data(), c.x.data());
        assert_eq!(back.mask.data(), c.mask.data());
    }

    #[test]
    fn header_and_shape_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("values.csv");
        fs::write(&vp, "n0_c0,node1\n1.0,2.0\n").unwrap();
        assert!(matches!(load_csv(&vp, None, None), Err(DataError::MalformedHeader { .. })));

        fs::write(&vp, "n0_c0,n1_c0\n1.0,2.0\n3.0\n").unwrap();
        assert!(matches!(load_csv(&vp, None, None), Err(DataError::Csv(_))));

        fs::write(&vp, "n0_c0,n1_c0\n1.0,2.0\n").unwrap();
        let mp = dir.path().join("mask.csv");
        fs::write(&mp, "n0_c0\n1\n").unwrap();
        assert!(matches!(
            load_csv(&vp, Some(&mp), None),
            Err(DataError::MaskShapeMismatch { .. })
        ));
        fs::write(&mp, "n0_c0,n1_c0\n1,2\n").unwrap();
        assert!(matches!(load_csv(&vp, Some(&mp), None), Err(DataError::BadMaskValue { .. })));
    }

    #[test]
    fn scaler_standardizes_and_inverts_without_touching_masked_entries() {
        let (t, n) = (50, 2);
        let mut x = vec![0.0; t * n];
        let mut m = vec![1.0; t * n];
        for step in 0..t {
            x[step * n] = 3.0 + 2.0 * ((step as f64 * 0.7).sin());
            x[step * n + 1] = -1.0;
        }
        m[4] = 0.0;
        x[4] = 0.0;
        let xt = Tensor::new(vec![t, n, 1], x.clone()).unwrap();
        let mt = Tensor::new(vec![t, n, 1], m).unwrap();
        let scaler = Scaler::fit(&xt, &mt, 40).unwrap();
        // Constant channel: spread collapses, std floors to 1.
        assert_eq!(scaler.std[1], 1.0);
        assert!((scaler.mean[1] + 1.0).abs() < 1e-12);

        let mut z = xt.clone();
        scaler.transform(&mut z, Some(&mt)).unwrap();
        assert_eq!(z.data()[4], 0.0);
        let mean0: f64 =
            (0..40).filter(|&s| s * n != 4).map(|s| z.data()[s * n]).sum::<f64>() / 39.0;
        assert!(mean0.abs() < 0.15, "fitted channel not centered: {mean0}");
        scaler.inverse(&mut z, Some(&mt)).unwrap();
        for (a, b) in z.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_encoding_landmarks() {
        // 2024-01-01 00:00 UTC was a Monday; add noon the same day.
        let monday_midnight = 1_704_067_200;
        let ts = [monday_midnight, monday_midnight + 43_200];
        let enc = time_encodings(&ts, 86_400.0).unwrap();
        assert_eq!(enc.shape(), &[2, 9]);
        let row0 = &enc.data()[..9];
        let row1 = &enc.data()[9..];
        assert!((row0[0]).abs() < 1e-9 && (row0[1] - 1.0).abs() < 1e-9);
        assert!((row1[0]).abs() < 1e-9 && (row1[1] + 1.0).abs() < 1e-9);
        // Monday occupies the first one-hot slot, and exactly one slot fires.
        assert_eq!(row0[2], 1.0);
        assert_eq!(row0[2..].iter().sum::<f64>(), 1.0);
        assert_eq!(row1[2], 1.0);

        assert!(matches!(
            time_encodings(&[5, 5], 86_400.0),
            Err(DataError::BadTimestamps { index: 1 })
        ));
    }

    #[test]
    fn tiled_columns_repeat_per_node() {
        let cols = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tiled = tile_over_nodes(&cols, 3).unwrap();
        assert_eq!(tiled.shape(), &[2, 3, 2]);
        assert_eq!(&tiled.data()[..6], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.toml");
        let m = DatasetManifest {
            window: 12,
            horizon: 1,
            fractions: [0.7, 0.1, 0.2],
            seed: 99,
            len: 3000,
            n_nodes: 120,
            d_x: 1,
            scaler: Some(Scaler { mean: vec![0.5, -0.25], std: vec![1.5, 2.0] }),
        };
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}
