use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, BoundaryConfig, LossKind, NesConfig, Norm, TargetMode};
use crate::error::{Error, Result};
use crate::training::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Directory holding the four IDX files (mnist only).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Training examples drawn from the training file (mnist only).
    #[serde(default)]
    pub train_size: Option<usize>,
    /// Held-out benign examples used to set evaluation thresholds.
    #[serde(default)]
    pub eval_calib_size: Option<usize>,
    /// Test examples drawn from the test file (mnist only).
    #[serde(default)]
    pub test_size: Option<usize>,
    /// Share of the training examples kept aside for per-epoch thresholds.
    #[serde(default = "default_train_calib")]
    pub train_calib_fraction: f64,
    // synth parameters
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_train_calib() -> f64 {
    0.1
}
fn default_classes() -> usize {
    3
}
fn default_per_class() -> usize {
    200
}
fn default_dim() -> usize {
    4
}
fn default_spread() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub block_width: usize,
    pub magnitude: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![256, 128], block_width: 8, magnitude: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fpr_percent: f64,
    pub attack: PgdSpec,
    /// Epochs for the benign-only surrogate used by transfer attacks.
    pub surrogate_epochs: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ours,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            fpr_percent: 1.0,
            attack: PgdSpec::default(),
            surrogate_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
}

impl Default for PgdSpec {
    fn default() -> Self {
        Self { norm: Norm::Linf, epsilon: 0.3, step: 0.01, iterations: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    /// PGD with momentum; `decay` defaults to 0.9.
    Mim,
    Nes,
    Boundary,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub kind: AttackKind,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_mode")]
    pub mode: TargetMode,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub decay: f64,
    /// NES: directions per estimate; boundary: start trials.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Attack only the first `limit` test examples.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_norm() -> Norm {
    Norm::Linf
}
fn default_step() -> f64 {
    0.01
}
fn default_iterations() -> usize {
    100
}
fn default_mode() -> TargetMode {
    TargetMode::Untargeted
}
fn default_loss() -> LossKind {
    LossKind::Distance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub fpr_levels: Vec<f64>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self { fpr_levels: vec![1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl AttackSpec {
    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            norm: self.norm,
            epsilon: self.epsilon,
            step: self.step,
            iterations: self.iterations,
            mode: self.mode,
            loss: self.loss,
            kappa: self.kappa,
            decay: if self.kind == AttackKind::Mim && self.decay == 0.0 { 0.9 } else { self.decay },
            seed,
        }
    }

    pub fn nes_config(&self, seed: u64) -> NesConfig {
        let d = NesConfig::default();
        NesConfig { sigma: self.sigma.unwrap_or(d.sigma), samples: self.samples.unwrap_or(d.samples), seed }
    }

    pub fn boundary_config(&self, seed: u64) -> BoundaryConfig {
        let d = BoundaryConfig::default();
        BoundaryConfig {
            iterations: self.iterations,
            init_trials: self.samples.unwrap_or(d.init_trials),
            seed,
            ..d
        }
    }

    pub fn targeted(&self) -> bool {
        matches!(self.mode, TargetMode::Targeted(_))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            attack: AttackConfig {
                norm: t.attack.norm,
                epsilon: t.attack.epsilon,
                step: t.attack.step,
                iterations: t.attack.iterations,
                mode: TargetMode::AdaptiveNearest,
                loss: LossKind::Distance,
                ..AttackConfig::default()
            },
            fpr_percent: t.fpr_percent,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.dataset;
        match d.source {
            DataSource::Mnist if d.dir.is_none() => return bad("dataset.dir is required for mnist".into()),
            DataSource::Synth if d.classes < 2 || d.per_class == 0 || d.dim < d.classes => {
                return bad("synth dataset needs classes >= 2, per_class >= 1, dim >= classes".into())
            }
            _ => {}
        }
        if !(d.spread >= 0.0) {
            return bad(format!("dataset.spread {} must be >= 0", d.spread));
        }
        if !(d.train_calib_fraction > 0.0 && d.train_calib_fraction < 1.0) {
            return bad(format!("dataset.train_calib_fraction {} outside (0, 1)", d.train_calib_fraction));
        }
        for (key, v) in [("train_size", d.train_size), ("eval_calib_size", d.eval_calib_size), ("test_size", d.test_size)] {
            if v == Some(0) {
                return bad(format!("dataset.{key} must be positive"));
            }
        }
        let m = &self.model;
        if m.hidden.contains(&0) || m.block_width == 0 || !(m.magnitude > 0.0 && m.magnitude.is_finite()) {
            return bad("model needs positive hidden widths, block_width and magnitude".into());
        }
        self.train_config().validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if self.train.surrogate_epochs == 0 {
            return bad("train.surrogate_epochs must be positive".into());
        }
        let mut names = HashSet::new();
        for a in &self.attacks {
            if a.name.is_empty() || a.name.contains([',', '\n', '/']) {
                return bad(format!("attack name {:?} must be non-empty without ',' '/' or newlines", a.name));
            }
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate attack name {:?}", a.name));
            }
            a.attack_config(0).validate().map_err(|e| Error::Config(format!("attack {}: {e}", a.name)))?;
            if a.kind == AttackKind::Nes {
                a.nes_config(0).validate().map_err(|e| Error::Config(format!("attack {}: {e}", a.name)))?;
            }
            if a.limit == Some(0) {
                return bad(format!("attack {}: limit must be positive", a.name));
            }
            if let TargetMode::Targeted(t) = a.mode {
                let k = if d.source == DataSource::Mnist { 10 } else { d.classes };
                if t >= k {
                    return bad(format!("attack {}: target {t} not below {k}", a.name));
                }
            }
        }
        let levels = &self.metrics.fpr_levels;
        if levels.is_empty() || levels.iter().any(|p| !(*p > 0.0 && *p < 100.0)) {
            return bad("metrics.fpr_levels must be non-empty percentages in (0, 100)".into());
        }
        Ok(())
    }
}

/// Reads, parses and range-checks a config file. Relative dataset and output
/// paths stay relative to the working directory.
pub fn validate_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}
