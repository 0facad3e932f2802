//! Experiment configuration: one TOML file with dataset, model, and training
//! sections plus the output directory and run seeds. Unknown keys anywhere
//! are hard errors so a misspelled hyperparameter cannot slip through.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crosscast_core::model::{Family, ModelConfig, MpKind};
use crosscast_core::train::{LossKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gpvar,
    GpvarL,
    Csv,
}

impl DatasetKind {
    pub fn is_synthetic(self) -> bool {
        matches!(self, DatasetKind::Gpvar | DatasetKind::GpvarL)
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Gpvar => write!(f, "gpvar"),
            DatasetKind::GpvarL => write!(f, "gpvar_l"),
            DatasetKind::Csv => write!(f, "csv"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub window: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    /// Steps kept after burn-in (synthetic kinds).
    #[serde(default = "default_len")]
    pub len: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_communities")]
    pub communities: usize,
    #[serde(default = "default_intra_p")]
    pub intra_p: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Wide-format value table (csv kind only).
    #[serde(default)]
    pub values: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub edges: Option<PathBuf>,
    /// Standardize per channel on the training span; metrics are reported in
    /// original units (csv kind only).
    #[serde(default)]
    pub normalize: bool,
}

fn default_horizon() -> usize {
    1
}
fn default_fractions() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn default_len() -> usize {
    30000
}
fn default_nodes() -> usize {
    120
}
fn default_communities() -> usize {
    20
}
fn default_intra_p() -> f64 {
    0.6
}
fn default_sigma() -> f64 {
    0.4
}
fn default_burn_in() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnedGraphChoice {
    #[default]
    None,
    Dense,
    Factorized,
}

/// Model hyperparameters. Window and horizon live in the dataset section so
/// they cannot disagree with the windowing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default = "default_mp_kind")]
    pub mp_kind: MpKind,
    #[serde(default = "default_mp_layers")]
    pub mp_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub use_embeddings: bool,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    #[serde(default)]
    pub additive_local: bool,
    /// Replace the dataset graph with a learned adjacency.
    #[serde(default)]
    pub learned_graph: LearnedGraphChoice,
    #[serde(default = "default_d_z")]
    pub d_z: usize,
}

fn default_mp_kind() -> MpKind {
    MpKind::Iso
}
fn default_mp_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    16
}
fn default_emb_dim() -> usize {
    8
}
fn default_d_z() -> usize {
    8
}

impl ModelSection {
    pub fn to_model_config(&self, window: usize, horizon: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(self.family);
        mc.mp_kind = self.mp_kind;
        mc.mp_layers = self.mp_layers;
        mc.hidden = self.hidden;
        mc.window = window;
        mc.horizon = horizon;
        mc.use_embeddings = self.use_embeddings;
        mc.emb_dim = self.emb_dim;
        mc.additive_local = self.additive_local;
        mc
    }

    /// Short human label for tables, e.g. `tts+emb`.
    pub fn label(&self) -> String {
        let mut s = self.family.to_string();
        if self.learned_graph != LearnedGraphChoice::None {
            s.push_str("+learned");
        }
        if self.use_embeddings {
            s.push_str("+emb");
        }
        if self.additive_local {
            s.push_str("+local");
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_halve_every")]
    pub lr_halve_every: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_loss() -> LossKind {
    LossKind::L1
}
fn default_lr() -> f64 {
    0.01
}
fn default_lr_halve_every() -> usize {
    50
}
fn default_batch_size() -> usize {
    128
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    30
}
fn default_grad_clip() -> f64 {
    5.0
}

impl TrainingSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            lr: self.lr,
            lr_halve_every: self.lr_halve_every,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            grad_clip: if self.grad_clip == 0.0 { None } else { Some(self.grad_clip) },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            detail: format!("{}: {}", path.display(), e.message()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config { detail: "seeds list is empty".into() });
        }
        let d = &self.dataset;
        if d.window == 0 || d.horizon == 0 {
            return Err(CliError::Config {
                detail: format!("window {} and horizon {} must be positive", d.window, d.horizon),
            });
        }
        let frac_sum: f64 = d.fractions.iter().sum();
        if (frac_sum - 1.0).abs() > 1e-9 || d.fractions.iter().any(|&f| f <= 0.0) {
            return Err(CliError::Config {
                detail: format!("fractions {:?} must be positive and sum to 1", d.fractions),
            });
        }
        match d.kind {
            DatasetKind::Csv => {
                let values = d.values.as_ref().ok_or_else(|| CliError::Config {
                    detail: "csv dataset requires a `values` path".into(),
                })?;
                for p in [Some(values), d.mask.as_ref(), d.edges.as_ref()].into_iter().flatten() {
                    if !p.exists() {
                        return Err(CliError::Config {
                            detail: format!("referenced file {} does not exist", p.display()),
                        });
                    }
                }
            }
            DatasetKind::Gpvar | DatasetKind::GpvarL => {
                if d.values.is_some() || d.mask.is_some() || d.edges.is_some() {
                    return Err(CliError::Config {
                        detail: "values/mask/edges paths are only valid for kind = \"csv\"".into(),
                    });
                }
                if d.normalize {
                    return Err(CliError::Config {
                        detail: "normalize is only valid for kind = \"csv\"".into(),
                    });
                }
                if d.len == 0 || d.nodes == 0 {
                    return Err(CliError::Config {
                        detail: "synthetic dataset needs positive len and nodes".into(),
                    });
                }
            }
        }
        let m = &self.model;
        if m.learned_graph != LearnedGraphChoice::None
            && !matches!(m.family, Family::Tts | Family::Stt)
        {
            return Err(CliError::Config {
                detail: format!("learned_graph is not supported for family {}", m.family),
            });
        }
        self.model.to_model_config(d.window, d.horizon).validate().map_err(|e| {
            CliError::Config { detail: format!("model section: {e}") }
        })?;
        self.training.to_train_config(0).validate().map_err(|e| CliError::Config {
            detail: format!("training section: {e}"),
        })?;
        Ok(())
    }
}

pub fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim().to_string()
}
