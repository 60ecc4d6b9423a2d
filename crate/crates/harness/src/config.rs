//! Experiment configuration: a TOML file with one section per module,
//! overridable from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ttfs_core::constraints::QuantSpec;
use ttfs_core::dynamics::AlphaPolicy;
use ttfs_core::grad::OptimizerKind;
use ttfs_core::scheduler::SchedulerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Finetune,
    Convert,
    Diagnose,
}

/// `linear` or `constant:VALUE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum AlphaSetting {
    #[default]
    Linear,
    Constant(f64),
}

impl AlphaSetting {
    pub fn policy(&self, neurons: usize) -> AlphaPolicy {
        match *self {
            AlphaSetting::Linear => AlphaPolicy::LinearlyMappable,
            AlphaSetting::Constant(a) => AlphaPolicy::constant(a, neurons),
        }
    }
}

impl FromStr for AlphaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "linear" {
            return Ok(AlphaSetting::Linear);
        }
        let value = s
            .strip_prefix("constant:")
            .ok_or_else(|| format!("alpha policy `{s}`: expected `linear` or `constant:VALUE`"))?;
        let a: f64 = value
            .parse()
            .map_err(|_| format!("alpha policy `{s}`: `{value}` is not a number"))?;
        if !(a > 0.0 && a.is_finite()) {
            return Err(format!("alpha policy `{s}`: α must be positive"));
        }
        Ok(AlphaSetting::Constant(a))
    }
}

impl TryFrom<String> for AlphaSetting {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<AlphaSetting> for String {
    fn from(a: AlphaSetting) -> String {
        a.to_string()
    }
}

impl fmt::Display for AlphaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaSetting::Linear => write!(f, "linear"),
            AlphaSetting::Constant(a) => write!(f, "constant:{a}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub tau_c: f64,
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    pub alpha_policy: AlphaSetting,
    /// Shift every initial hidden row to zero sum, so that both α policies
    /// start from the same ReLU network.
    pub center_rows: bool,
    /// Half-width of the uniform initial hidden biases.
    pub init_bias: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            tau_c: 1.0,
            hidden: vec![340],
            alpha_policy: AlphaSetting::Linear,
            center_rows: false,
            init_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub zeta: f64,
    pub gamma: f64,
    pub b0: f64,
    pub min_width: f64,
    pub width_margin: f64,
    pub trigger_tolerance: f64,
    pub adaptive: bool,
    /// Training samples used to initialise the windows.
    pub calibration_samples: usize,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SchedulerConfig::default();
        Self {
            zeta: d.zeta,
            gamma: d.gamma,
            b0: d.b0,
            min_width: d.min_width,
            width_margin: d.width_margin,
            trigger_tolerance: d.trigger_tolerance,
            adaptive: d.adaptive,
            calibration_samples: 256,
        }
    }
}

impl SchedulerSection {
    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            zeta: self.zeta,
            gamma: self.gamma,
            b0: self.b0,
            min_width: self.min_width,
            width_margin: self.width_margin,
            trigger_tolerance: self.trigger_tolerance,
            adaptive: self.adaptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    /// Adam for train and finetune, SGD for diagnose when unset.
    pub optimizer: Option<OptimizerChoice>,
    pub lr0: f64,
    /// `lr = lr0 · lr_decay_rate^(step / lr_decay_every)`.
    pub lr_decay_rate: f64,
    pub lr_decay_every: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Train a ReLU network next to the SNN on the same batches and log the
    /// loss gap and weight cosine per step.
    pub reference_ann: bool,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    pub trials: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            optimizer: None,
            lr0: 5e-4,
            lr_decay_rate: 0.9,
            lr_decay_every: 5000.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            seed: 0,
            shuffle: true,
            reference_ann: false,
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the four MNIST-named IDX files.
    pub dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_features: usize,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Idx,
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            synthetic_features: 16,
            synthetic_classes: 4,
            synthetic_train: 512,
            synthetic_test: 256,
            synthetic_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    pub time_steps_per_layer: Option<usize>,
    pub weight_bits: Option<u32>,
    pub percentile_clip: Option<[f64; 2]>,
    pub jitter_sd: f64,
    pub latency_percentile: Option<f64>,
}

impl ConstraintSection {
    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            time_steps_per_layer: self.time_steps_per_layer,
            weight_bits: self.weight_bits,
            percentile_clip: self.percentile_clip.map(|[lo, hi]| (lo, hi)),
            jitter_sd: self.jitter_sd,
            latency_percentile: self.latency_percentile,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadSection {
    /// SNN checkpoint to start from (finetune, diagnose).
    pub checkpoint: Option<PathBuf>,
    /// ReLU checkpoint to convert (finetune, convert).
    pub ann: Option<PathBuf>,
    /// Fine-tuning runs at `lr0 · finetune_lr_scale`.
    pub finetune_lr_scale: f64,
}

impl Default for LoadSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            ann: None,
            finetune_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Lock-step steps of the trajectory report.
    pub trajectory_steps: usize,
    /// Samples whose masked Jacobian spectra are reported.
    pub masked_samples: usize,
    /// Samples averaged in the gradient-norm profile.
    pub gradient_samples: usize,
    /// Maximum tolerated SNN/ReLU difference in convert mode.
    pub equivalence_tolerance: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            trajectory_steps: 100,
            masked_samples: 1,
            gradient_samples: 64,
            equivalence_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub network: NetworkSection,
    pub scheduler: SchedulerSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub constraints: ConstraintSection,
    pub load: LoadSection,
    pub diagnose: DiagnoseSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn optimizer(&self) -> OptimizerKind {
        let choice = self.training.optimizer.unwrap_or(match self.mode {
            Mode::Diagnose => OptimizerChoice::Sgd,
            _ => OptimizerChoice::Adam,
        });
        match choice {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: self.training.adam_beta1,
                beta2: self.training.adam_beta2,
                eps: self.training.adam_eps,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let n = &self.network;
        if !(n.tau_c > 0.0 && n.tau_c.is_finite()) {
            return bad(format!("network.tau_c = {}", n.tau_c));
        }
        if n.hidden.contains(&0) {
            return bad("network.hidden contains a zero width".into());
        }
        if !(n.init_bias >= 0.0) {
            return bad(format!("network.init_bias = {}", n.init_bias));
        }
        self.scheduler
            .scheduler_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.scheduler.calibration_samples == 0 {
            return bad("scheduler.calibration_samples = 0".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || t.trials == 0 {
            return bad("training.batch_size and training.trials must be positive".into());
        }
        if !(t.lr0 > 0.0 && t.lr_decay_rate > 0.0 && t.lr_decay_every > 0.0) {
            return bad("training learning-rate settings must be positive".into());
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) || !(t.adam_eps > 0.0) {
            return bad("training Adam settings out of range".into());
        }
        let d = &self.data;
        if d.source == DataSource::Synthetic
            && (d.synthetic_features == 0 || d.synthetic_classes < 2 || d.synthetic_train == 0 || d.synthetic_test == 0)
        {
            return bad("synthetic data needs features, ≥ 2 classes and samples".into());
        }
        self.constraints
            .quant_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.load.finetune_lr_scale > 0.0) {
            return bad("load.finetune_lr_scale must be positive".into());
        }
        if self.mode == Mode::Finetune && self.load.checkpoint.is_none() && self.load.ann.is_none() {
            return bad("finetune needs load.checkpoint or load.ann".into());
        }
        if !(self.diagnose.equivalence_tolerance > 0.0) {
            return bad("diagnose.equivalence_tolerance must be positive".into());
        }
        Ok(())
    }
}
