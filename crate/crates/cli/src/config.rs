//! Run configuration: one TOML file drives every subcommand. Unknown keys are
//! rejected, CLI flags override fields, and the resolved copy is written next
//! to the outputs so a run can be reproduced from its artifacts alone.

use nae_core::catch_sim::CatchConfig;
use nae_core::flight::{ObjectParams, ThrowConfig};
use nae_core::nae::{ModelArch, TrainConfig};
use nae_core::naedf::NaedfConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed shared by data generation, splitting, and training.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub object: ObjectParams,
    pub throws: ThrowConfig,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    /// Filter settings used by naedf training, prediction, and evaluation.
    pub filter: NaedfConfig,
    pub predict: PredictSection,
    pub eval: EvalSection,
    /// Required by `catch-sim` only.
    pub catch: Option<CatchConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            object: ObjectParams::default(),
            throws: ThrowConfig::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            filter: NaedfConfig::default(),
            predict: PredictSection::default(),
            eval: EvalSection::default(),
            catch: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub count: usize,
    pub object_id: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            count: 200,
            object_id: "object".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum TrainMode {
    Nae,
    Naedf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub prefix_len: usize,
    pub free_run_len: usize,
    pub loss_weights: [f64; 3],
    pub windows_per_trajectory: usize,
    /// Checkpoint to fine-tune from; required when mode = "naedf".
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        let arch = ModelArch::default();
        TrainSection {
            mode: TrainMode::Nae,
            embed_dim: arch.embed_dim,
            hidden_dim: arch.hidden_dim,
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            lr_decay: base.lr_decay,
            clip_norm: base.clip_norm,
            prefix_len: base.prefix_len,
            free_run_len: base.free_run_len,
            loss_weights: base.loss_weights,
            windows_per_trajectory: base.windows_per_trajectory,
            warm_start: None,
        }
    }
}

impl TrainSection {
    pub fn arch(&self) -> ModelArch {
        ModelArch {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            clip_norm: self.clip_norm,
            seed,
            prefix_len: self.prefix_len,
            free_run_len: self.free_run_len,
            loss_weights: self.loss_weights,
            windows_per_trajectory: self.windows_per_trajectory,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub prefix_frames: usize,
    pub horizon: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            prefix_frames: 30,
            horizon: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Metric {
    LeadingTime,
    ErrorCurve,
    Generalization,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::LeadingTime => "leading_time",
            Metric::ErrorCurve => "error_curve",
            Metric::Generalization => "generalization",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out fraction evaluated; omit to evaluate the whole dataset.
    pub test_fraction: Option<f64>,
    /// Goal-position accuracy band for leading time, meters.
    pub threshold: f64,
    pub metrics: Vec<Metric>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_fraction: Some(0.1),
            threshold: 0.01,
            metrics: vec![Metric::LeadingTime],
        }
    }
}

/// Loads and parses the TOML run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// The resolved configuration rendered back to TOML, and its hash. Artifacts
/// embed the hash; the rendered copy is written next to them.
pub fn render_resolved(config: &RunConfig) -> Result<(String, String), CliError> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Schema(format!("serializing resolved config: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let hash = format!("{:x}", hasher.finalize());
    Ok((text, hash))
}
