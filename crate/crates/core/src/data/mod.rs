//! Client datasets: synthetic generation, non-IID partitioning, label
//! flipping, per-client train/test splits and IDX ingestion.

mod idx;
mod partition;
mod synthetic;

pub use idx::load_idx;
pub use partition::{flip_labels, make_mean_estimation, mean_estimation_datasets, partition, split_client};
pub use synthetic::{make_synthetic_classification, SyntheticTask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, Targets};

/// Labelled samples before they are handed out to clients. A sample's id is
/// its index in the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub n_labels: usize,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_labels];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn store(&self, idx: &[usize]) -> SampleStore {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        SampleStore {
            batch: Batch {
                inputs,
                dim: self.dim,
                targets: Targets::Labels(idx.iter().map(|&i| self.labels[i]).collect()),
            },
            ids: idx.iter().map(|&i| i as u64).collect(),
        }
    }
}

/// Samples held by one client split, tagged with their pool ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub batch: Batch,
    pub ids: Vec<u64>,
}

impl SampleStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.batch.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: SampleStore,
    pub test: SampleStore,
    pub split_ratio: f64,
    /// Samples added by the uniform top-up pass (Dirichlet only).
    pub topped_up: usize,
    /// Size of the label universe; `None` for regression data.
    pub n_labels: Option<usize>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    /// Distinct labels present in either split.
    pub fn label_support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .train
            .labels()
            .into_iter()
            .chain(self.test.labels())
            .flatten()
            .copied()
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    /// Clients are assigned round-robin to clusters; cluster `c` owns labels
    /// `c*labels_per_cluster .. (c+1)*labels_per_cluster`.
    ClusterLabels {
        clusters: usize,
        labels_per_cluster: usize,
    },
    /// Per-client label proportions drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
    /// Scalar Gaussian samples around per-client true means.
    MeanEstimation {
        theta: Vec<f64>,
        nu2: f64,
        n_per_client: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub flip_fraction: f64,
    pub split_ratio: f64,
    pub min_samples: usize,
}

pub const DEFAULT_SPLIT_RATIO: f64 = 0.6;
pub const DEFAULT_MIN_SAMPLES: usize = 50;

impl PartitionSpec {
    pub fn new(scheme: PartitionScheme, n_clients: usize) -> Self {
        PartitionSpec {
            scheme,
            n_clients,
            flip_fraction: 0.0,
            split_ratio: DEFAULT_SPLIT_RATIO,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config_key("clients", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(Error::config_key("data.flip_fraction", "must lie in [0, 1]"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config_key("data.split_ratio", "must lie in (0, 1)"));
        }
        match &self.scheme {
            PartitionScheme::ClusterLabels {
                clusters,
                labels_per_cluster,
            } => {
                if *clusters == 0 || *labels_per_cluster == 0 {
                    return Err(Error::config_key(
                        "data.clusters",
                        "clusters and labels_per_cluster must be positive",
                    ));
                }
            }
            PartitionScheme::Dirichlet { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config_key("data.alpha", "must be positive"));
                }
            }
            PartitionScheme::MeanEstimation {
                theta,
                nu2,
                n_per_client,
            } => {
                if theta.is_empty() {
                    return Err(Error::config_key("data.theta", "must be nonempty"));
                }
                if !(*nu2 > 0.0) {
                    return Err(Error::config_key("data.nu2", "must be positive"));
                }
                if *n_per_client == 0 {
                    return Err(Error::config_key("data.n_per_client", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}
