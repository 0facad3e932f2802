//! Training loop: masked losses, Adam with optional global-norm clipping, a
//! halving learning-rate schedule, seeded shuffling, and early stopping with
//! best-parameter restore. Identical config and seed reproduce identical
//! parameters bit for bit.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gather_batch, DataError, TimeSeriesCollection, Windows};
use crate::model::{ForecastModel, ModelError};
use crate::seed_stream;
use crate::tensor::{Parameter, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training configuration: {detail}")]
    BadConfig { detail: String },
    #[error("{which} split has no samples")]
    EmptySplit { which: &'static str },
    #[error("every target entry in the batch is masked out")]
    AllMasked,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("gradient for parameter `{name}` is missing or misshapen")]
    BadGradient { name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    /// Epoch interval for halving the learning rate; 0 disables the schedule.
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without val-MAE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L1,
            lr: 0.01,
            lr_halve_every: 50,
            batch_size: 128,
            max_epochs: 200,
            patience: 30,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig { detail: format!("lr is {}, must be positive", self.lr) });
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig { detail: "batch_size must be at least 1".into() });
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::BadConfig {
                detail: format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs),
            });
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::BadConfig {
                    detail: format!("grad_clip is {c}, must be positive or absent"),
                });
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halve_every == 0 {
            self.lr
        } else {
            self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
        }
    }
}

/// Masked forecast loss on the tape: per-sample mean of |r| or r² over
/// observed entries, then mean over the samples that have any.
pub fn masked_loss(
    tape: &mut Tape,
    preds: Var,
    targets: &Tensor,
    mask: &Tensor,
    kind: LossKind,
) -> Result<Var, TrainError> {
    let shape = tape.value(preds).shape().to_vec();
    if targets.shape() != shape.as_slice() || mask.shape() != shape.as_slice() {
        return Err(TrainError::BadConfig {
            detail: format!(
                "loss shapes disagree: preds {:?}, targets {:?}, mask {:?}",
                shape,
                targets.shape(),
                mask.shape()
            ),
        });
    }
    let b = shape[0];
    let per_sample = targets.numel() / b;
    let mut factors = vec![0.0; b];
    let mut contributing = 0usize;
    for (s, chunk) in mask.data().chunks(per_sample).enumerate() {
        let valid = chunk.iter().filter(|&&m| m != 0.0).count();
        if valid > 0 {
            factors[s] = 1.0 / valid as f64;
            contributing += 1;
        }
    }
    if contributing == 0 {
        return Err(TrainError::AllMasked);
    }
    for f in &mut factors {
        *f /= contributing as f64;
    }

    let flat = tape.reshape(preds, vec![b, per_sample])?;
    let tgt = tape.input(Tensor::new(vec![b, per_sample], targets.data().to_vec())?);
    let msk = tape.input(Tensor::new(vec![b, per_sample], mask.data().to_vec())?);
    let diff = tape.sub(flat, tgt)?;
    let masked = tape.mul(diff, msk)?;
    let elem = match kind {
        LossKind::L1 => tape.abs(masked)?,
        LossKind::L2 => tape.mul(masked, masked)?,
    };
    let scaled = tape.scale_rows(elem, &factors)?;
    Ok(tape.sum_all(scaled)?)
}

/// Adam moment buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Scales all gradients by a common factor so their global norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut HashMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update over the full parameter list.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Parameter],
    grads: &HashMap<String, Vec<f64>>,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for p in params.iter_mut() {
        let g = grads
            .get(&p.name)
            .filter(|g| g.len() == p.tensor.numel())
            .ok_or_else(|| TrainError::BadGradient { name: p.name.clone() })?;
        let m = state.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        if m.len() != g.len() {
            return Err(TrainError::BadGradient { name: p.name.clone() });
        }
        let data = p.tensor.data_mut();
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Stacked forecasts over a window set, in origin order.
#[derive(Debug, Clone)]
pub struct ForecastStack {
    /// `[S, H, N, d_x]`
    pub preds: Tensor,
    pub targets: Tensor,
    pub mask: Tensor,
}

/// Runs the model over every window, batch by batch, and stacks the results.
pub fn forecast_windows(
    model: &ForecastModel,
    data: &TimeSeriesCollection,
    wins: &Windows,
    batch_size: usize,
) -> Result<ForecastStack, TrainError> {
    if wins.is_empty() {
        return Err(TrainError::EmptySplit { which: "forecast" });
    }
    let idx: Vec<usize> = (0..wins.len()).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut shape_tail = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = gather_batch(data, wins, chunk)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape)?;
        let out = model.forward(
            &mut tape,
            &vars,
            &batch.x,
            batch.u_past.as_ref(),
            batch.u_future.as_ref(),
        )?;
        let value = tape.value(out);
        shape_tail = value.shape()[1..].to_vec();
        preds.extend_from_slice(value.data());
        targets.extend_from_slice(batch.target.data());
        mask.extend_from_slice(batch.target_mask.data());
    }
    let mut shape = vec![wins.len()];
    shape.extend_from_slice(&shape_tail);
    Ok(ForecastStack {
        preds: Tensor::new(shape.clone(), preds)?,
        targets: Tensor::new(shape.clone(), targets)?,
        mask: Tensor::new(shape, mask)?,
    })
}

/// Masked mean absolute error of stacked forecasts.
pub fn stack_mae(stack: &ForecastStack) -> Result<f64, TrainError> {
    let (mut abs, mut n) = (0.0, 0usize);
    for i in 0..stack.preds.numel() {
        if stack.mask.data()[i] != 0.0 {
            abs += (stack.targets.data()[i] - stack.preds.data()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(abs / n as f64)
}

fn is_non_finite_tensor_error(e: &TrainError) -> Option<String> {
    match e {
        TrainError::Tensor(TensorError::NonFinite { op }) => {
            Some(format!("non-finite values in op {op}"))
        }
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
            Some(format!("non-finite values in op {op}"))
        }
        _ => None,
    }
}

/// Full training loop. Shuffles seeded mini-batches, follows the halving
/// schedule, tracks validation MAE after each epoch, stops after `patience`
/// epochs without improvement, and restores the best parameters seen.
pub fn train(
    model: &mut ForecastModel,
    data: &TimeSeriesCollection,
    train_wins: &Windows,
    val_wins: &Windows,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_wins.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if val_wins.is_empty() {
        return Err(TrainError::EmptySplit { which: "val" });
    }

    let mut rng = seed_stream(cfg.seed, "train.shuffle");
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut best_params = model.flat_params();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_wins.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut sample_sum) = (0.0, 0usize);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut step = || -> Result<f64, TrainError> {
                let batch = gather_batch(data, train_wins, chunk)?;
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape)?;
                let out = model.forward(
                    &mut tape,
                    &vars,
                    &batch.x,
                    batch.u_past.as_ref(),
                    batch.u_future.as_ref(),
                )?;
                let loss = masked_loss(&mut tape, out, &batch.target, &batch.target_mask, cfg.loss)?;
                let loss_value = tape.value(loss).item();
                tape.backward(loss)?;
                let mut grads: HashMap<String, Vec<f64>> =
                    tape.take_param_grads().into_iter().collect();
                if let Some(bound) = cfg.grad_clip {
                    clip_global_norm(&mut grads, bound);
                }
                let mut params = model.params_mut();
                adam_step(&mut adam, &mut params, &grads, lr)?;
                Ok(loss_value)
            };
            let loss_value = match step() {
                Ok(v) => v,
                Err(e) => {
                    if let Some(detail) = is_non_finite_tensor_error(&e) {
                        return Err(TrainError::NonFinite { epoch, batch: batch_no, detail });
                    }
                    return Err(e);
                }
            };
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    detail: format!("loss evaluated to {loss_value}"),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            sample_sum += chunk.len();
        }
        let train_loss = loss_sum / sample_sum as f64;
        let val_stack = forecast_windows(model, data, val_wins, cfg.batch_size)?;
        let val_mae = stack_mae(&val_stack)?;
        if !val_mae.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: 0,
                detail: format!("validation MAE evaluated to {val_mae}"),
            });
        }
        history.push(EpochRecord { epoch, train_loss, val_mae, lr });

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_params = model.flat_params();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.set_flat_params(&best_params)?;
    if best_val.is_infinite() {
        // max_epochs = 0: the initial parameters stand, nothing was measured.
        best_val = f64::NAN;
    }
    Ok(TrainOutcome { history, best_val_mae: best_val, best_epoch, stopped_early })
}

/// Writes one JSON object per epoch, newline separated.
pub fn save_history(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TrainError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, split_sequential, GpvarConfig, NodeCoeffs};
    use crate::graph::{Edge, Graph};
    use crate::model::{build_model, Family, GraphSpec, ModelConfig};
    use crate::nn::{Linear, LocalLinear};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_series(t: usize, n: usize, seed: u64) -> TimeSeriesCollection {
        let ring = Graph::new(
            n,
            (0..n).map(|i| Edge { src: i, dst: (i + 1) % n, weight: 0.7 }).collect(),
            false,
        )
        .unwrap();
        let mut cfg = GpvarConfig::gpvar(ring, t, seed);
        cfg.burn_in = 50;
        crate::data::gpvar_generate(&cfg).unwrap()
    }

    fn tiny_model(family: Family, n: usize, seed: u64) -> ForecastModel {
        let mut mc = ModelConfig::new(family);
        mc.hidden = 4;
        mc.window = 3;
        mc.horizon = 1;
        build_model(&mc, n, 1, 0, GraphSpec::None, seed).unwrap()
    }

    #[test]
    fn loss_examples_hold_on_the_tape() {
        let shape = vec![2, 1, 2, 1];
        let mut tape = Tape::new();
        let preds = tape.input(Tensor::new(shape.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let targets = Tensor::new(shape.clone(), vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = Tensor::new(shape.clone(), vec![1.0; 4]).unwrap();
        let l1 = masked_loss(&mut tape, preds, &targets, &mask, LossKind::L1).unwrap();
        assert!((tape.value(l1).item() - 2.0).abs() < 1e-15);
        let l2 = masked_loss(&mut tape, preds, &targets, &mask, LossKind::L2).unwrap();
        assert!((tape.value(l2).item() - 4.0).abs() < 1e-15);

        let same = tape.value(preds).clone();
        let equal = masked_loss(&mut tape, preds, &same, &mask, LossKind::L1).unwrap();
        assert_eq!(tape.value(equal).item(), 0.0);
    }

    #[test]
    fn masked_entries_leave_the_loss_to_the_rest() {
        let shape = vec![1, 1, 4, 1];
        let mut tape = Tape::new();
        let preds = tape.input(Tensor::new(shape.clone(), vec![0.0; 4]).unwrap());
        let targets = Tensor::new(shape.clone(), vec![2.0, 2.0, 100.0, 100.0]).unwrap();
        let mask = Tensor::new(shape.clone(), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l1 = masked_loss(&mut tape, preds, &targets, &mask, LossKind::L1).unwrap();
        assert!((tape.value(l1).item() - 2.0).abs() < 1e-15);

        let none = Tensor::new(shape, vec![0.0; 4]).unwrap();
        assert!(matches!(
            masked_loss(&mut tape, preds, &targets, &none, LossKind::L1),
            Err(TrainError::AllMasked)
        ));
    }

    #[test]
    fn adam_first_step_is_a_signed_learning_rate_move() {
        let mut p = Parameter::new("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.tensor.data().to_vec();
        let grads: HashMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.3, -4.0, 0.0])].into_iter().collect();
        let mut state = AdamState::new();
        let mut params = vec![&mut p];
        adam_step(&mut state, &mut params, &grads, 0.01).unwrap();
        let after = p.tensor.data();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-6);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-6);
        assert_eq!(after[2], before[2]);

        // Zero lr leaves parameters alone even with accumulated momentum.
        let snapshot = p.tensor.data().to_vec();
        let mut params = vec![&mut p];
        adam_step(&mut state, &mut params, &grads, 0.0).unwrap();
        assert_eq!(p.tensor.data(), snapshot.as_slice());
        // A fresh state with zero gradients has nothing to apply.
        let zeros: HashMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.0; 3])].into_iter().collect();
        let mut fresh = AdamState::new();
        let mut params = vec![&mut p];
        adam_step(&mut fresh, &mut params, &zeros, 0.01).unwrap();
        assert_eq!(p.tensor.data(), snapshot.as_slice());
    }

    #[test]
    fn global_norm_clip_rescales_once_at_the_bound() {
        let mut grads: HashMap<String, Vec<f64>> =
            [("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])].into_iter().collect();
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads["a"][0] - 0.6).abs() < 1e-12);
        assert!((grads["b"][0] - 0.8).abs() < 1e-12);
        let unchanged = clip_global_norm(&mut grads, 10.0);
        assert!((unchanged - 1.0).abs() < 1e-12);
        assert!((grads["a"][0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn training_is_bitwise_deterministic_per_seed() {
        let data = toy_series(160, 5, 21);
        let wins = make_windows(&data, 3, 1).unwrap();
        let (tr, va, _) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            patience: 3,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(Family::Rnn, 5, 9);
            let outcome = train(&mut model, &data, &tr, &va, &cfg).unwrap();
            (model.flat_params(), outcome)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        assert_eq!(p1, p2);
        let key = |o: &TrainOutcome| {
            o.history.iter().map(|r| (r.train_loss.to_bits(), r.val_mae.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(key(&o1), key(&o2));

        let mut other = tiny_model(Family::Rnn, 5, 9);
        let cfg2 = TrainConfig { seed: 1, ..cfg };
        train(&mut other, &data, &tr, &va, &cfg2).unwrap();
        assert_ne!(p1, other.flat_params());
    }

    #[test]
    fn zero_epochs_return_the_initial_parameters() {
        let data = toy_series(60, 4, 3);
        let wins = make_windows(&data, 3, 1).unwrap();
        let (tr, va, _) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        let mut model = tiny_model(Family::Rnn, 4, 2);
        let before = model.flat_params();
        let cfg = TrainConfig { max_epochs: 0, patience: 0, ..TrainConfig::default() };
        let outcome = train(&mut model, &data, &tr, &va, &cfg).unwrap();
        assert_eq!(model.flat_params(), before);
        assert!(outcome.history.is_empty());
        assert!(!outcome.stopped_early);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad_lr = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad_lr.validate(), Err(TrainError::BadConfig { .. })));
        let bad_patience = TrainConfig { patience: 10, max_epochs: 5, ..TrainConfig::default() };
        assert!(matches!(bad_patience.validate(), Err(TrainError::BadConfig { .. })));
        let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(bad_batch.validate(), Err(TrainError::BadConfig { .. })));
    }

    #[test]
    fn learning_rate_schedule_halves_on_the_interval() {
        let cfg = TrainConfig { lr: 0.8, lr_halve_every: 2, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.8);
        assert_eq!(cfg.lr_at(1), 0.8);
        assert_eq!(cfg.lr_at(2), 0.4);
        assert_eq!(cfg.lr_at(5), 0.2);
        let flat = TrainConfig { lr: 0.8, lr_halve_every: 0, ..TrainConfig::default() };
        assert_eq!(flat.lr_at(199), 0.8);
    }

    #[test]
    fn early_stopping_restores_the_best_validation_parameters() {
        let data = toy_series(140, 4, 8);
        let wins = make_windows(&data, 3, 1).unwrap();
        let (tr, va, _) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        let mut model = tiny_model(Family::Rnn, 4, 5);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 12,
            patience: 3,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, &tr, &va, &cfg).unwrap();
        let min_val = outcome.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_mae, min_val);
        // The restored model reproduces the best recorded validation MAE.
        let stack = forecast_windows(&model, &data, &va, cfg.batch_size).unwrap();
        let mae = stack_mae(&stack).unwrap();
        assert!((mae - outcome.best_val_mae).abs() < 1e-12);
    }

    #[test]
    fn poisoned_parameters_abort_with_a_diagnostic() {
        let data = toy_series(100, 4, 13);
        let wins = make_windows(&data, 3, 1).unwrap();
        let (tr, va, _) = split_sequential(&wins, (0.7, 0.1, 0.2)).unwrap();
        let mut model = tiny_model(Family::Rnn, 4, 1);
        model.params_mut()[0].tensor.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { batch_size: 32, max_epochs: 5, patience: 5, ..TrainConfig::default() };
        match train(&mut model, &data, &tr, &va, &cfg) {
            Err(TrainError::NonFinite { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn local_linear_recovers_ar_coefficients_against_least_squares() {
        // Per-node AR(1): x_{t+1} = phi_i x_t + noise.
        let phi = [0.8, -0.5, 0.3];
        let (t_len, n) = (400, 3);
        let mut rng = seed_stream(17, "ar1");
        let mut x = vec![0.0; t_len * n];
        for i in 0..n {
            x[i] = rng.sample::<f64, _>(StandardNormal);
        }
        for t in 1..t_len {
            for i in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                x[t * n + i] = phi[i] * x[(t - 1) * n + i] + 0.2 * noise;
            }
        }
        // Closed-form per-node least squares on the same data.
        let mut ls = [0.0; 3];
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for t in 0..t_len - 1 {
                num += x[t * n + i] * x[(t + 1) * n + i];
                den += x[t * n + i] * x[t * n + i];
            }
            ls[i] = num / den;
        }

        // One weight and bias per node, window of one step.
        let mut rng_init = seed_stream(3, "ar1.model");
        let mut local = LocalLinear::init("ar", n, 1, 1, &mut rng_init);
        let mut adam = AdamState::new();
        for _ in 0..300 {
            let mut tape = Tape::new();
            let vars = local.bind(&mut tape).unwrap();
            // Node-major rows: all steps of node 0, then node 1, ...
            let steps = t_len - 1;
            let mut inp = vec![0.0; n * steps];
            let mut tgt = vec![0.0; n * steps];
            for i in 0..n {
                for t in 0..steps {
                    inp[i * steps + t] = x[t * n + i];
                    tgt[i * steps + t] = x[(t + 1) * n + i];
                }
            }
            let xin = tape.input(Tensor::matrix(n * steps, 1, inp).unwrap());
            let out = local.forward(&mut tape, &vars, xin, steps).unwrap();
            let loss = masked_loss(
                &mut tape,
                out,
                &Tensor::new(vec![n * steps, 1], tgt).unwrap(),
                &Tensor::new(vec![n * steps, 1], vec![1.0; n * steps]).unwrap(),
                LossKind::L2,
            )
            .unwrap();
            tape.backward(loss).unwrap();
            let grads: HashMap<String, Vec<f64>> = tape.take_param_grads().into_iter().collect();
            let mut params = local.params_mut();
            adam_step(&mut adam, &mut params, &grads, 0.05).unwrap();
        }
        for (i, &oracle) in ls.iter().enumerate() {
            let learned = local.params()[i].tensor.data()[0];
            assert!(
                (learned - oracle).abs() < 0.05,
                "node {i}: learned {learned:.3} vs least squares {oracle:.3}"
            );
            assert!((learned - phi[i]).abs() < 0.1);
        }
    }

    #[test]
    fn full_batch_descent_on_a_convex_probe_never_increases_the_loss() {
        // Linear regression, l2, one full-dataset batch per step.
        let (rows, d) = (64, 2);
        let mut rng = seed_stream(29, "convex");
        let mut xs = vec![0.0; rows * d];
        let mut ys = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..d {
                xs[r * d + c] = rng.random_range(-1.0..1.0);
            }
            ys[r] = 1.5 * xs[r * d] - 2.0 * xs[r * d + 1] + 0.5;
        }
        let mut rng_init = seed_stream(31, "convex.model");
        let mut lin = Linear::init("probe", d, 1, &mut rng_init);
        let mut adam = AdamState::new();
        let mut last = f64::INFINITY;
        for _ in 0..40 {
            let mut tape = Tape::new();
            let vars = lin.bind(&mut tape);
            let xin = tape.input(Tensor::matrix(rows, d, xs.clone()).unwrap());
            let out = lin.forward(&mut tape, &vars, xin).unwrap();
            let loss = masked_loss(
                &mut tape,
                out,
                &Tensor::new(vec![rows, 1], ys.clone()).unwrap(),
                &Tensor::new(vec![rows, 1], vec![1.0; rows]).unwrap(),
                LossKind::L2,
            )
            .unwrap();
            let value = tape.value(loss).item();
            assert!(value <= last + 1e-9, "loss rose from {last} to {value}");
            last = value;
            tape.backward(loss).unwrap();
            let grads: HashMap<String, Vec<f64>> = tape.take_param_grads().into_iter().collect();
            let mut params = lin.params_mut();
            adam_step(&mut adam, &mut params, &grads, 1e-3).unwrap();
        }
    }

    #[test]
    fn history_round_trips_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let history = vec![
            EpochRecord { epoch: 0, train_loss: 0.9, val_mae: 0.8, lr: 0.01 },
            EpochRecord { epoch: 1, train_loss: 0.7, val_mae: 0.75, lr: 0.01 },
        ];
        save_history(&history, &path).unwrap();
        let back = load_history(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].epoch, 1);
        assert_eq!(back[1].val_mae, 0.75);
    }

    #[test]
    fn per_node_coefficients_change_the_loss_landscape() {
        // Guard: the toy generator honors per-node coefficients, which the
        // local-effects experiments depend on.
        let g = Graph::new(3, vec![Edge { src: 0, dst: 1, weight: 1.0 }], false).unwrap();
        let mut cfg = GpvarConfig::gpvar(g, 50, 4);
        cfg.a = NodeCoeffs::PerNode(vec![0.1, 0.5, 1.5]);
        let c1 = crate::data::gpvar_generate(&cfg).unwrap();
        cfg.a = NodeCoeffs::Shared(0.5);
        let c2 = crate::data::gpvar_generate(&cfg).unwrap();
        assert_ne!(c1.x.data(), c2.x.data());
    }
}
