//! Experiment configuration files.
//!
//! A configuration is a TOML document with a few top-level keys and one
//! section per module:
//!
//! ```toml
//! experiment = "convergence"
//! seeds = [0]
//! out = "out/convergence"
//!
//! [data]
//! source = "mnist"
//! classes = [0, 7]
//! n_train = 100
//!
//! [network]
//! depth = 3
//! width = 4096
//! activation = "relu"
//! sigma_w2 = 2.0
//! sigma_b2 = 0.0
//!
//! [train]
//! metrics = ["gd", "block_diagonal"]
//! steps = 20
//! lr = "optimal"
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ngd_core::data::{data_root, mnist_train_paths};
use ngd_core::fim::{build_sigma, MetricKind, SigmaKind};
use ngd_core::network::{Activation, NetworkConfig};
use ngd_core::trainer::{Damping, LearningRate, Loss, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Convergence,
    TridiagDamping,
    Prediction,
    IsotropyVsWidth,
    UnitwiseAlpha,
    LinearizationGap,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Convergence => "convergence",
            ExperimentId::TridiagDamping => "tridiag_damping",
            ExperimentId::Prediction => "prediction",
            ExperimentId::IsotropyVsWidth => "isotropy_vs_width",
            ExperimentId::UnitwiseAlpha => "unitwise_alpha",
            ExperimentId::LinearizationGap => "linearization_gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset root for MNIST; `$NGD_DATA_ROOT` takes precedence.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// CSV file for `source = "csv"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: Vec<u8>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    /// Input dimension of synthetic Gaussian data.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Apply the Forster transform to the training inputs.
    #[serde(default)]
    pub forster: bool,
}

fn default_classes() -> Vec<u8> {
    vec![0, 7]
}
fn default_n_train() -> usize {
    100
}
fn default_input_dim() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Width sweep; overrides `width`.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    /// Depth sweep (tri-diagonal damping only); overrides `depth`.
    #[serde(default)]
    pub depths: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: String,
    /// Shifts of the shifted ReLU (unit-wise α only).
    #[serde(default)]
    pub shifts: Option<Vec<f64>>,
    #[serde(default = "default_sigma_w2")]
    pub sigma_w2: f64,
    #[serde(default)]
    pub sigma_b2: f64,
}

fn default_depth() -> usize {
    3
}
fn default_width() -> usize {
    512
}
fn default_activation() -> String {
    "relu".into()
}
fn default_sigma_w2() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LrSetting {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// A number, or `"optimal"` for `η = lr_scale/α`.
    #[serde(default = "default_lr")]
    pub lr: LrSetting,
    #[serde(default = "default_lr_scale")]
    pub lr_scale: f64,
    #[serde(default)]
    pub damping: f64,
    /// `ρ = M^{-ε}`; overrides `damping`.
    #[serde(default)]
    pub damping_epsilon: Option<f64>,
    /// Damping sweep (tri-diagonal damping only).
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_rho_tilde")]
    pub rho_tilde: f64,
    /// Train the linearized model instead of the network.
    #[serde(default)]
    pub linearized: bool,
}

fn default_metrics() -> Vec<String> {
    vec!["block_diagonal".into()]
}
fn default_steps() -> usize {
    20
}
fn default_lr() -> LrSetting {
    LrSetting::Named("optimal".into())
}
fn default_lr_scale() -> f64 {
    1.0
}
fn default_loss() -> String {
    "mse".into()
}
fn default_rho_tilde() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentId,
    seeds: Vec<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default = "default_plots")]
    plots: bool,
    data: DataSection,
    #[serde(default = "default_network")]
    network: NetworkSection,
    #[serde(default = "default_train")]
    train: TrainSection,
}

fn default_plots() -> bool {
    true
}
fn default_network() -> NetworkSection {
    toml::from_str("").expect("network defaults")
}
fn default_train() -> TrainSection {
    toml::from_str("").expect("train defaults")
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub plots: bool,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    /// Directory holding relative paths of the configuration file.
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let out = raw.out.unwrap_or_else(|| PathBuf::from("out").join(raw.experiment.name()));
        let cfg = ExperimentConfig {
            experiment: raw.experiment,
            seeds: raw.seeds,
            out: base_dir.join(out),
            plots: raw.plots,
            data: raw.data,
            network: raw.network,
            train: raw.train,
            base_dir: base_dir.to_path_buf(),
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    /// Checks everything that can be checked without touching the data:
    /// seeds, metric names, shapes and referenced paths.
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be a non-empty list".into()));
        }
        if self.data.n_train == 0 {
            return Err(CliError::Config("data.n_train must be positive".into()));
        }
        if self.widths().iter().any(|&w| w == 0) || self.depths().iter().any(|&d| d == 0) {
            return Err(CliError::Config("widths and depths must be positive".into()));
        }
        if self.train.metrics.is_empty() {
            return Err(CliError::Config("train.metrics must be non-empty".into()));
        }
        for &depth in &self.depths() {
            for name in &self.train.metrics {
                parse_metric(name, depth)?;
            }
            for act in self.activations()? {
                NetworkConfig::uniform(self.input_dim_hint(), 1, depth, 1, self.network.sigma_w2, self.network.sigma_b2, act)?;
            }
        }
        if self.experiment == ExperimentId::TridiagDamping && self.train.rho.as_ref().is_none_or(|r| r.is_empty()) {
            return Err(CliError::Config("tridiag_damping needs a non-empty train.rho list".into()));
        }
        self.loss()?;
        for tc in self.base_train_configs(self.depths()[0])? {
            tc.validate()?;
        }
        for path in self.referenced_paths() {
            if !path.exists() {
                return Err(CliError::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.network.widths.clone().unwrap_or_else(|| vec![self.network.width])
    }

    pub fn depths(&self) -> Vec<usize> {
        match (self.experiment, &self.network.depths) {
            (ExperimentId::TridiagDamping, Some(d)) => d.clone(),
            _ => vec![self.network.depth],
        }
    }

    /// Activations to sweep: the shifts of `network.shifts` for the unit-wise
    /// experiment, otherwise the configured activation.
    pub fn activations(&self) -> CliResult<Vec<Activation>> {
        match (self.experiment, &self.network.shifts) {
            (ExperimentId::UnitwiseAlpha, Some(shifts)) => Ok(shifts
                .iter()
                .map(|&s| if s == 0.0 { Activation::Relu } else { Activation::ShiftedRelu(s) })
                .collect()),
            _ => Ok(vec![Activation::from_str(&self.network.activation)?]),
        }
    }

    pub fn loss(&self) -> CliResult<Loss> {
        match self.train.loss.as_str() {
            "mse" => Ok(Loss::Mse),
            "cross_entropy" | "ce" => Ok(Loss::CrossEntropy),
            other => Err(CliError::Config(format!("unknown loss {other:?}"))),
        }
    }

    /// Dataset root, honouring `$NGD_DATA_ROOT`.
    pub fn data_root(&self) -> PathBuf {
        let fallback = self.base_dir.join(self.data.root.clone().unwrap_or_else(|| PathBuf::from("data")));
        data_root(&fallback)
    }

    pub fn referenced_paths(&self) -> Vec<PathBuf> {
        match self.data.source {
            DataSource::Mnist => {
                let (images, labels) = mnist_train_paths(&self.data_root());
                vec![images, labels]
            }
            DataSource::Csv => self.data.path.iter().map(|p| self.base_dir.join(p)).collect(),
            DataSource::Synthetic => Vec::new(),
        }
    }

    fn input_dim_hint(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic => self.data.input_dim,
            _ => 1,
        }
    }

    /// One training configuration per metric at the given depth.
    pub fn base_train_configs(&self, depth: usize) -> CliResult<Vec<TrainConfig>> {
        let lr = match &self.train.lr {
            LrSetting::Fixed(eta) => LearningRate::Fixed(*eta),
            LrSetting::Named(s) if s == "optimal" => LearningRate::Scaled(self.train.lr_scale),
            LrSetting::Named(s) => return Err(CliError::Config(format!("unknown learning rate {s:?}"))),
        };
        let damping = match self.train.damping_epsilon {
            Some(e) => Damping::WidthPower(e),
            None => Damping::Fixed(self.train.damping),
        };
        let loss = self.loss()?;
        self.train
            .metrics
            .iter()
            .map(|name| {
                let mut tc = TrainConfig::new(parse_metric(name, depth)?, self.train.steps)
                    .with_lr(lr.clone())
                    .with_damping(damping.clone())
                    .with_loss(loss);
                tc.rho_tilde = self.train.rho_tilde;
                tc.track_test = self.data.n_test > 0;
                Ok(tc)
            })
            .collect()
    }
}

/// Metric names accepted in configuration files.
pub fn parse_metric(name: &str, depth: usize) -> CliResult<MetricKind> {
    let kind = match name {
        "gd" | "ntk" => MetricKind::Euclidean,
        "exact" => MetricKind::Exact,
        "block_diagonal" | "bd" => MetricKind::LayerWise(build_sigma(SigmaKind::Identity, depth)?),
        "tridiagonal" => MetricKind::LayerWise(build_sigma(SigmaKind::TriDiagonal, depth)?),
        "kfac" => MetricKind::KFac { bias: false },
        "kfac_bias" => MetricKind::KFac { bias: true },
        "unitwise" => MetricKind::UnitWise,
        "entry_diag" => MetricKind::EntryDiag,
        "quasi_diag" => MetricKind::QuasiDiag,
        other => return Err(CliError::Config(format!("unknown metric {other:?}"))),
    };
    Ok(kind)
}
