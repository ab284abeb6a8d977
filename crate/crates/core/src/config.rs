//! TOML experiment configuration with defaults and key-naming validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionScheme, PartitionSpec, DEFAULT_MIN_SAMPLES, DEFAULT_SPLIT_RATIO};
use crate::error::{Error, Result};
use crate::meanest::DEFAULT_GRID_STEP;
use crate::models::ModelSpec;
use crate::server::{AggregatorSpec, ByzantineSpec, ParticipationMode, ParticipationPolicy};

pub const DEFAULT_WARMUP_STEPS: usize = 100;

/// Where the labelled pool comes from. Mean-estimation data ignores this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_n_samples")]
        n_samples: usize,
        #[serde(default = "default_n_features")]
        n_features: usize,
        #[serde(default = "default_n_labels")]
        n_labels: usize,
        #[serde(default = "default_cluster_sep")]
        cluster_sep: f64,
    },
    /// IDX image/label pair; a slice is held back for the unseen clients.
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_n_samples() -> usize {
    20_000
}

fn default_n_features() -> usize {
    20
}

fn default_n_labels() -> usize {
    10
}

fn default_cluster_sep() -> f64 {
    3.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_samples: default_n_samples(),
            n_features: default_n_features(),
            n_labels: default_n_labels(),
            cluster_sep: default_cluster_sep(),
        }
    }
}

fn default_split_ratio() -> f64 {
    DEFAULT_SPLIT_RATIO
}

fn default_min_samples() -> usize {
    DEFAULT_MIN_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    pub partition: PartitionScheme,
    /// Number of seen clients `M`.
    pub n_clients: usize,
    #[serde(default)]
    pub flip_fraction: f64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
}

impl DataConfig {
    pub fn partition_spec(&self, n_clients: usize) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.clone(),
            n_clients,
            flip_fraction: self.flip_fraction,
            split_ratio: self.split_ratio,
            min_samples: self.min_samples,
        }
    }

    pub fn is_mean_estimation(&self) -> bool {
        matches!(self.partition, PartitionScheme::MeanEstimation { .. })
    }
}

/// Model family; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelChoice {
    SoftmaxRegression,
    /// ReLU hidden layers of the given widths.
    Mlp { hidden: Vec<usize> },
    ScalarQuadratic,
}

impl ModelChoice {
    pub fn resolve(&self, input_dim: usize, classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelChoice::SoftmaxRegression => ModelSpec::SoftmaxRegression { input_dim, classes },
            ModelChoice::Mlp { hidden } => {
                let mut layer_sizes = vec![input_dim];
                layer_sizes.extend(hidden);
                layer_sizes.push(classes);
                ModelSpec::Mlp { layer_sizes }
            }
            ModelChoice::ScalarQuadratic => ModelSpec::ScalarQuadratic,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationConfig {
    #[serde(default)]
    pub mode: ParticipationMode,
    /// Defaults to `⌈0.05 T⌉`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mandatory_rounds: Option<usize>,
}

impl Default for ParticipationConfig {
    fn default() -> Self {
        ParticipationConfig {
            mode: ParticipationMode::AlwaysAvailable,
            mandatory_rounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnseenConfig {
    #[serde(default)]
    pub n_clients: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_rounds() -> usize {
    100
}
fn default_clients_per_round() -> usize {
    5
}
fn default_tau() -> usize {
    10
}
fn default_eta_l() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    32
}
fn default_warmup() -> usize {
    DEFAULT_WARMUP_STEPS
}
fn default_eval_interval() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AggregatorSpec,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelChoice>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `T`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// `m`.
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_eta_l")]
    pub eta_l: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub fine_tune_steps: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub participation: ParticipationConfig,
    #[serde(default)]
    pub byzantine: ByzantineSpec,
    #[serde(default)]
    pub unseen: UnseenConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.resolve_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills the defaults that depend on other keys so the stored config is
    /// the effective one.
    pub fn resolve_defaults(&mut self) {
        if self.model.is_none() {
            self.model = Some(if self.data.is_mean_estimation() {
                ModelChoice::ScalarQuadratic
            } else {
                ModelChoice::SoftmaxRegression
            });
        }
        if self.participation.mandatory_rounds.is_none() {
            self.participation.mandatory_rounds = Some(ParticipationPolicy::default_mandatory_rounds(self.rounds));
        }
    }

    pub fn model_choice(&self) -> ModelChoice {
        self.model.clone().unwrap_or(if self.data.is_mean_estimation() {
            ModelChoice::ScalarQuadratic
        } else {
            ModelChoice::SoftmaxRegression
        })
    }

    pub fn policy(&self) -> ParticipationPolicy {
        ParticipationPolicy {
            mandatory_rounds: self
                .participation
                .mandatory_rounds
                .unwrap_or_else(|| ParticipationPolicy::default_mandatory_rounds(self.rounds)),
            mode: self.participation.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        let m = self.data.n_clients;
        if m == 0 {
            return Err(Error::config_key("data.n_clients", "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > m {
            return Err(Error::config_key(
                "clients_per_round",
                format!("must satisfy 1 <= m <= M = {m}, got {}", self.clients_per_round),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config_key("rounds", "must be at least 1"));
        }
        if self.tau == 0 {
            return Err(Error::config_key("tau", "must be at least 1"));
        }
        if !(self.eta_l.is_finite() && self.eta_l > 0.0) {
            return Err(Error::config_key("eta_l", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config_key("batch_size", "must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config_key("warmup_steps", "must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config_key("eval_interval", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config_key("seeds", "must list at least one seed"));
        }
        if let Some(r) = self.participation.mandatory_rounds {
            if r > self.rounds {
                return Err(Error::config_key("participation.mandatory_rounds", "must not exceed rounds"));
            }
        }
        let b = &self.byzantine;
        if !(0.0..=1.0).contains(&b.fraction) {
            return Err(Error::config_key("byzantine.fraction", "must lie in [0, 1]"));
        }
        if !b.loss_inflation.is_finite() {
            return Err(Error::config_key("byzantine.loss_inflation", "must be finite"));
        }
        if !(b.noise_sigma.is_finite() && b.noise_sigma >= 0.0) {
            return Err(Error::config_key("byzantine.noise_sigma", "must be >= 0"));
        }
        self.data.partition_spec(m).validate()?;
        match (&self.data.partition, self.model_choice()) {
            (PartitionScheme::MeanEstimation { theta, .. }, choice) => {
                if choice != ModelChoice::ScalarQuadratic {
                    return Err(Error::config_key("model.kind", "mean estimation data needs scalar_quadratic"));
                }
                if theta.len() != m {
                    return Err(Error::config_key(
                        "data.n_clients",
                        format!("must equal the length of data.partition.theta ({})", theta.len()),
                    ));
                }
                if self.data.flip_fraction != 0.0 {
                    return Err(Error::config_key("data.flip_fraction", "has no meaning for mean estimation"));
                }
            }
            (_, ModelChoice::ScalarQuadratic) => {
                return Err(Error::config_key("model.kind", "scalar_quadratic needs mean estimation data"));
            }
            (_, ModelChoice::Mlp { hidden }) if hidden.contains(&0) => {
                return Err(Error::config_key("model.hidden", "layer widths must be positive"));
            }
            _ => {}
        }
        if let DataSource::Synthetic {
            n_samples,
            n_features,
            n_labels,
            cluster_sep,
        } = self.data.source
        {
            if n_samples == 0 || n_features == 0 || n_labels == 0 {
                return Err(Error::config_key("data.source", "counts must be at least 1"));
            }
            if !(cluster_sep.is_finite() && cluster_sep >= 0.0) {
                return Err(Error::config_key("data.source.cluster_sep", "must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::config(e.to_string().trim_end().to_string())
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

fn default_gamma2() -> f64 {
    1.0
}
fn default_points() -> usize {
    21
}
fn default_gamma_g_max() -> f64 {
    20f64.sqrt()
}
fn default_trials() -> usize {
    10_000
}
fn default_grid_step() -> f64 {
    DEFAULT_GRID_STEP
}

/// Settings for the two-client mean-estimation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanEstConfig {
    #[serde(default = "default_gamma2")]
    pub gamma2: f64,
    /// Evenly spaced `γ_G` values from 0 to `gamma_g_max`, both included.
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_gamma_g_max")]
    pub gamma_g_max: f64,
    /// Overrides `points`/`gamma_g_max` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_g: Option<Vec<f64>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for MeanEstConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl MeanEstConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MeanEstConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma2.is_finite() && self.gamma2 > 0.0) {
            return Err(Error::config_key("gamma2", "must be > 0"));
        }
        if self.trials == 0 {
            return Err(Error::config_key("trials", "must be at least 1"));
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 0.1) {
            return Err(Error::config_key("grid_step", "must lie in (0, 0.1]"));
        }
        match &self.gamma_g {
            Some(v) if v.is_empty() || v.iter().any(|g| !(g.is_finite() && *g >= 0.0)) => {
                Err(Error::config_key("gamma_g", "must be a nonempty list of values >= 0"))
            }
            Some(_) => Ok(()),
            None if self.points < 2 => Err(Error::config_key("points", "must be at least 2")),
            None if !(self.gamma_g_max.is_finite() && self.gamma_g_max > 0.0) => {
                Err(Error::config_key("gamma_g_max", "must be > 0"))
            }
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        if let Some(v) = &self.gamma_g {
            return v.clone();
        }
        let n = self.points;
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    self.gamma_g_max
                } else {
                    self.gamma_g_max * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }
}

pub fn parse_meanest_config(path: impl AsRef<Path>) -> Result<MeanEstConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MeanEstConfig::from_toml_str(&text)
}
