//! Forecast evaluation: point metrics over masked residuals and a
//! sign-kernel statistic that detects leftover correlation between residuals
//! adjacent in space (graph edges) or time (consecutive steps).
//!
//! The statistic is distribution-free: only the sign of residual inner
//! products enters, so it is exactly invariant to positive rescaling and to
//! orthogonal maps applied to every residual vector.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("no valid residual entries to evaluate")]
    NoValidResiduals,
    #[error("spatial statistic requested but the residual set has no graph")]
    MissingGraph,
    #[error("no valid residual pairs for this mode")]
    NoPairs,
    #[error("all pair weights are zero")]
    ZeroWeightNorm,
    #[error("significance level {level} outside (0, 1)")]
    BadLevel { level: f64 },
    #[error("weights must be finite and nonnegative, found {value}")]
    BadWeight { value: f64 },
}

/// Residual vectors per (forecast origin, node): `r[t, i]` has one entry per
/// (horizon step, channel), with a matching 0/1 observability mask.
///
/// A residual vector takes part in pair statistics only when all of its
/// entries are observed; point metrics instead mask entry-wise.
#[derive(Debug, Clone)]
pub struct ResidualSet {
    /// `[T, N, K]` with `K = H * d_x`.
    pub r: Tensor,
    /// `[T, N, K]`, entries in {0, 1}.
    pub mask: Tensor,
    pub graph: Option<Graph>,
    /// Spatial pair weights `[T, E]`, rows following the graph's stored
    /// non-self-loop edge order; `None` means unit weights.
    pub alpha: Option<Tensor>,
    /// Temporal pair weights `[T-1, N]`; `None` means unit weights.
    pub beta: Option<Tensor>,
}

fn arrange(x: &Tensor, what: &str) -> Result<Tensor, EvalError> {
    match x.rank() {
        3 => Ok(x.clone()),
        // [T, H, N, d] -> [T, N, H*d]: group per-node entries together.
        4 => {
            let (t, h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut out = vec![0.0; x.numel()];
            for ti in 0..t {
                for hi in 0..h {
                    for ni in 0..n {
                        for di in 0..d {
                            let src = ((ti * h + hi) * n + ni) * d + di;
                            let dst = (ti * n + ni) * (h * d) + hi * d + di;
                            out[dst] = x.data()[src];
                        }
                    }
                }
            }
            Tensor::new(vec![t, n, h * d], out)
                .map_err(|e| EvalError::ShapeMismatch { detail: e.to_string() })
        }
        _ => Err(EvalError::ShapeMismatch {
            detail: format!("{what} must be [T, N, K] or [T, H, N, d], got {:?}", x.shape()),
        }),
    }
}

/// Builds residuals target − prediction. Inputs are `[T, H, N, d_x]` forecast
/// stacks or pre-arranged `[T, N, K]`; all three must share one shape.
pub fn compute_residuals(
    preds: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
    graph: Option<Graph>,
) -> Result<ResidualSet, EvalError> {
    if preds.shape() != targets.shape() || preds.shape() != mask.shape() {
        return Err(EvalError::ShapeMismatch {
            detail: format!(
                "preds {:?}, targets {:?}, mask {:?} must match",
                preds.shape(),
                targets.shape(),
                mask.shape()
            ),
        });
    }
    let p = arrange(preds, "preds")?;
    let t = arrange(targets, "targets")?;
    let m = arrange(mask, "mask")?;
    let mut r = vec![0.0; p.numel()];
    for i in 0..r.len() {
        if m.data()[i] != 0.0 {
            r[i] = t.data()[i] - p.data()[i];
        }
    }
    let shape = p.shape().to_vec();
    Ok(ResidualSet {
        r: Tensor::new(shape, r).map_err(|e| EvalError::ShapeMismatch { detail: e.to_string() })?,
        mask: m,
        graph,
        alpha: None,
        beta: None,
    })
}

fn check_weights(w: &Tensor, want: &[usize], what: &str) -> Result<(), EvalError> {
    if w.shape() != want {
        return Err(EvalError::ShapeMismatch {
            detail: format!("{what} weights must be {:?}, got {:?}", want, w.shape()),
        });
    }
    for &v in w.data() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(EvalError::BadWeight { value: v });
        }
    }
    Ok(())
}

impl ResidualSet {
    pub fn n_origins(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.r.shape()[1]
    }

    /// Non-self-loop edges define the spatial pairs: one per stored edge.
    pub fn spatial_pairs(&self) -> Vec<(usize, usize)> {
        self.graph.as_ref().map_or_else(Vec::new, |g| {
            g.edges().iter().filter(|e| e.src != e.dst).map(|e| (e.src, e.dst)).collect()
        })
    }

    pub fn with_alpha(mut self, alpha: Tensor) -> Result<Self, EvalError> {
        let e = self.spatial_pairs().len();
        check_weights(&alpha, &[self.n_origins(), e], "spatial")?;
        self.alpha = Some(alpha);
        Ok(self)
    }

    pub fn with_beta(mut self, beta: Tensor) -> Result<Self, EvalError> {
        let t = self.n_origins();
        check_weights(&beta, &[t.saturating_sub(1), self.n_nodes()], "temporal")?;
        self.beta = Some(beta);
        Ok(self)
    }

    fn k(&self) -> usize {
        self.r.shape()[2]
    }

    /// A vector participates in pair statistics only when fully observed.
    fn vector_valid(&self, t: usize, i: usize) -> bool {
        let k = self.k();
        let base = (t * self.n_nodes() + i) * k;
        self.mask.data()[base..base + k].iter().all(|&m| m != 0.0)
    }

    fn dot(&self, t1: usize, i1: usize, t2: usize, i2: usize) -> f64 {
        let k = self.k();
        let a = (t1 * self.n_nodes() + i1) * k;
        let b = (t2 * self.n_nodes() + i2) * k;
        let (ra, rb) = (&self.r.data()[a..a + k], &self.r.data()[b..b + k]);
        ra.iter().zip(rb).map(|(x, y)| x * y).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AzMode {
    /// Temporal pairs only: every spatial weight is zero.
    Time,
    /// Spatial pairs only: every temporal weight is zero.
    Space,
    /// Both pair families, by default with unit weights.
    Spacetime,
}

impl std::fmt::Display for AzMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AzMode::Time => "time",
            AzMode::Space => "space",
            AzMode::Spacetime => "spacetime",
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct AzSums {
    num: f64,
    sq: f64,
    spatial_pairs: usize,
    temporal_pairs: usize,
}

fn az_accumulate(rs: &ResidualSet, mode: AzMode) -> Result<AzSums, EvalError> {
    let t_len = rs.n_origins();
    let n = rs.n_nodes();
    let mut sums = AzSums { num: 0.0, sq: 0.0, spatial_pairs: 0, temporal_pairs: 0 };

    if mode != AzMode::Time {
        if rs.graph.is_none() {
            return Err(EvalError::MissingGraph);
        }
        let pairs = rs.spatial_pairs();
        for t in 0..t_len {
            for (e, &(i, j)) in pairs.iter().enumerate() {
                if !rs.vector_valid(t, i) || !rs.vector_valid(t, j) {
                    continue;
                }
                let w = rs.alpha.as_ref().map_or(1.0, |a| a.data()[t * pairs.len() + e]);
                sums.num += w * sign(rs.dot(t, i, t, j));
                sums.sq += w * w;
                sums.spatial_pairs += 1;
            }
        }
    }
    if mode != AzMode::Space {
        for t in 0..t_len.saturating_sub(1) {
            for i in 0..n {
                if !rs.vector_valid(t, i) || !rs.vector_valid(t + 1, i) {
                    continue;
                }
                let w = rs.beta.as_ref().map_or(1.0, |b| b.data()[t * n + i]);
                sums.num += w * sign(rs.dot(t, i, t + 1, i));
                sums.sq += w * w;
                sums.temporal_pairs += 1;
            }
        }
    }
    if sums.spatial_pairs + sums.temporal_pairs == 0 {
        return Err(EvalError::NoPairs);
    }
    if sums.sq == 0.0 {
        return Err(EvalError::ZeroWeightNorm);
    }
    Ok(sums)
}

/// Pair-sign statistic C = Σ w·sign⟨r, r'⟩ / √(Σ w²). Under independent,
/// sign-symmetric residuals it is asymptotically standard normal.
pub fn az_statistic(rs: &ResidualSet, mode: AzMode) -> Result<f64, EvalError> {
    let sums = az_accumulate(rs, mode)?;
    Ok(sums.num / sums.sq.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitenessReport {
    pub mode: AzMode,
    pub c: f64,
    pub spatial_pairs: usize,
    pub temporal_pairs: usize,
    pub p_value: f64,
    pub level: f64,
    /// Two-sided standard-normal quantile for `level`.
    pub threshold: f64,
    pub reject: bool,
}

/// Two-sided test of the no-correlation hypothesis: p = 2(1 − Φ(|C|)),
/// rejected when |C| exceeds the standard-normal quantile for `level`.
pub fn whiteness_test(rs: &ResidualSet, mode: AzMode, level: f64) -> Result<WhitenessReport, EvalError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::BadLevel { level });
    }
    let sums = az_accumulate(rs, mode)?;
    let c = sums.num / sums.sq.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = 2.0 * (1.0 - normal.cdf(c.abs()));
    let threshold = normal.inverse_cdf(1.0 - level / 2.0);
    Ok(WhitenessReport {
        mode,
        c,
        spatial_pairs: sums.spatial_pairs,
        temporal_pairs: sums.temporal_pairs,
        p_value,
        level,
        threshold,
        reject: c.abs() > threshold,
    })
}

/// Entry-wise point metrics over observed residuals.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Mean of |r|/|target| over entries with nonzero target; `None` when no
    /// such entry exists.
    pub mape: Option<f64>,
    /// Σ|r| / Σ|target|; `None` when the observed targets sum to zero.
    pub mre: Option<f64>,
    pub n_entries: usize,
}

pub fn point_metrics(rs: &ResidualSet, targets: &Tensor) -> Result<MetricReport, EvalError> {
    let t = arrange(targets, "targets")?;
    if t.shape() != rs.r.shape() {
        return Err(EvalError::ShapeMismatch {
            detail: format!("targets {:?} vs residuals {:?}", t.shape(), rs.r.shape()),
        });
    }
    let (mut abs_sum, mut sq_sum, mut n) = (0.0, 0.0, 0usize);
    let (mut ape_sum, mut n_ape) = (0.0, 0usize);
    let mut target_abs_sum = 0.0;
    for i in 0..rs.r.numel() {
        if rs.mask.data()[i] == 0.0 {
            continue;
        }
        let (r, y) = (rs.r.data()[i], t.data()[i]);
        abs_sum += r.abs();
        sq_sum += r * r;
        n += 1;
        target_abs_sum += y.abs();
        if y.abs() > 0.0 {
            ape_sum += r.abs() / y.abs();
            n_ape += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoValidResiduals);
    }
    let mse = sq_sum / n as f64;
    Ok(MetricReport {
        mae: abs_sum / n as f64,
        mse,
        rmse: mse.sqrt(),
        mape: (n_ape > 0).then(|| ape_sum / n_ape as f64),
        mre: (target_abs_sum > 0.0).then(|| abs_sum / target_abs_sum),
        n_entries: n,
    })
}

/// Plain-text rendering: one `name value` line per metric and statistic.
pub fn format_report(metrics: &MetricReport, whiteness: &[WhitenessReport]) -> String {
    let mut out = String::new();
    let mut line = |name: &str, v: f64| out.push_str(&format!("{name:12} {v:.6}\n"));
    line("mae", metrics.mae);
    line("mse", metrics.mse);
    line("rmse", metrics.rmse);
    if let Some(m) = metrics.mape {
        line("mape", m);
    }
    if let Some(m) = metrics.mre {
        line("mre", m);
    }
    for w in whiteness {
        line(&format!("az_{}", w.mode), w.c);
        line(&format!("p_{}", w.mode), w.p_value);
    }
    out
}
