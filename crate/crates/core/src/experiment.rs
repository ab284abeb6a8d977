//! Runs configured experiments end to end and writes `rounds.csv`,
//! `summary.json` and the mean-estimation sweep CSV.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::appeal::WeightMode;
use crate::client::{warmup, ClientProfile, LocalConfig, LossBasis, Participation};
use crate::config::{DataSource, ExperimentConfig, MeanEstConfig};
use crate::data::{
    flip_labels, load_idx, mean_estimation_datasets, partition, ClientDataset, LabeledPool, PartitionScheme,
    SyntheticTask,
};
use crate::error::{Error, Result};
use crate::meanest::{appeal_sweep, SweepRow};
use crate::metrics::{self, RoundRecord};
use crate::models::{init_params, ModelSpec};
use crate::rng::{Purpose, RngStream};
use crate::server::{refresh_appeals, run_round, ParticipationMode, RoundOutcome, RoundPlan, ServerState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stream ids of unseen clients start here so they never collide with seen ones.
const UNSEEN_CLIENT_OFFSET: u64 = 1 << 32;

/// Runs `f` inside a rayon pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config_key("threads", e.to_string()))?;
    Ok(pool.install(f))
}

fn subset(pool: &LabeledPool, idx: &[usize]) -> LabeledPool {
    let mut features = Vec::with_capacity(idx.len() * pool.dim);
    for &i in idx {
        features.extend_from_slice(pool.row(i));
    }
    LabeledPool {
        features,
        dim: pool.dim,
        labels: idx.iter().map(|&i| pool.labels[i]).collect(),
        n_labels: pool.n_labels,
    }
}

struct Populations {
    seen: Vec<ClientDataset>,
    unseen: Vec<ClientDataset>,
    input_dim: usize,
    classes: usize,
}

fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<Populations> {
    let d = &cfg.data;
    let m = d.n_clients;
    let mu = cfg.unseen.n_clients;
    let s = |p: Purpose| RngStream::server(seed, 0, p);

    if let PartitionScheme::MeanEstimation {
        theta,
        nu2,
        n_per_client,
    } = &d.partition
    {
        let (seen, _) = mean_estimation_datasets(theta, *nu2, *n_per_client, s(Purpose::MeanEstimation))?;
        let unseen = if mu > 0 {
            let theta_u: Vec<f64> = (0..mu).map(|k| theta[k % theta.len()]).collect();
            mean_estimation_datasets(&theta_u, *nu2, *n_per_client, s(Purpose::UnseenPool))?.0
        } else {
            Vec::new()
        };
        return Ok(Populations {
            seen,
            unseen,
            input_dim: 0,
            classes: 0,
        });
    }

    let (seen_pool, unseen_pool) = match &d.source {
        DataSource::Synthetic {
            n_samples,
            n_features,
            n_labels,
            cluster_sep,
        } => {
            let task = SyntheticTask::new(*n_features, *n_labels, *cluster_sep, s(Purpose::DataTask));
            let seen = task.sample(*n_samples, s(Purpose::DataPool));
            let unseen = (mu > 0).then(|| {
                let n = (n_samples * mu).div_ceil(m).max(mu * d.min_samples.max(1));
                task.sample(n, s(Purpose::UnseenPool))
            });
            (seen, unseen)
        }
        DataSource::Idx { images, labels } => {
            let pool = load_idx(images, labels)?;
            if mu == 0 {
                (pool, None)
            } else {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut s(Purpose::UnseenPool).rng());
                let cut = pool.len() * m / (m + mu);
                let (a, b) = order.split_at(cut);
                (subset(&pool, a), Some(subset(&pool, b)))
            }
        }
    };
    let mut seen = partition(&seen_pool, &d.partition_spec(m), s(Purpose::Partition))?;
    flip_labels(&mut seen, d.flip_fraction, s(Purpose::Flip))?;
    let unseen = match unseen_pool {
        Some(pool) => {
            let mut u = partition(&pool, &d.partition_spec(mu), s(Purpose::UnseenPartition))?;
            flip_labels(&mut u, d.flip_fraction, s(Purpose::UnseenFlip))?;
            u
        }
        None => Vec::new(),
    };
    Ok(Populations {
        seen,
        unseen,
        input_dim: seen_pool.dim,
        classes: seen_pool.n_labels,
    })
}

fn warm_all(profiles: &mut [ClientProfile], cfg: &ExperimentConfig, spec: &ModelSpec, seed: u64, offset: u64) -> Result<()> {
    profiles.par_iter_mut().try_for_each(|p| {
        let stream = RngStream::new(seed, offset + p.id as u64, 0, Purpose::Warmup);
        warmup(p, spec, cfg.warmup_steps, cfg.eta_l, cfg.batch_size, stream)
    })
}

/// One seed of an experiment: data, warmed-up clients and the server state.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub spec: ModelSpec,
    pub seen: Vec<ClientProfile>,
    pub unseen: Vec<ClientProfile>,
    pub server: ServerState,
    pub byzantine: Vec<usize>,
    t: usize,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.resolve_defaults();
        config.validate()?;
        let data = build_data(&config, seed)?;
        let spec = config.model_choice().resolve(data.input_dim, data.classes)?;
        let participation = match config.participation.mode {
            ParticipationMode::AlwaysAvailable => Participation::Mandatory,
            ParticipationMode::AppealBased => Participation::AppealBased,
        };
        let mut seen: Vec<ClientProfile> = data
            .seen
            .into_iter()
            .enumerate()
            .map(|(k, ds)| {
                let mut p = ClientProfile::new(k, ds);
                p.participation = participation;
                p
            })
            .collect();
        let mut unseen: Vec<ClientProfile> = data
            .unseen
            .into_iter()
            .enumerate()
            .map(|(k, ds)| ClientProfile::new(k, ds))
            .collect();

        let m = seen.len();
        let n_byz = ((config.byzantine.fraction * m as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut byzantine = index::sample(
            &mut RngStream::server(seed, 0, Purpose::ByzantineSelect).rng(),
            m,
            n_byz.min(m),
        )
        .into_vec();
        byzantine.sort_unstable();
        for &k in &byzantine {
            seen[k].byzantine = true;
        }

        warm_all(&mut seen, &config, &spec, seed, 0)?;
        warm_all(&mut unseen, &config, &spec, seed, UNSEEN_CLIENT_OFFSET)?;
        let w = init_params(&spec, RngStream::server(seed, 0, Purpose::Init));
        refresh_appeals(&mut seen, &spec, &w)?;
        let server = ServerState::new(w, &config.algorithm, m);
        Ok(Simulation {
            config,
            seed,
            spec,
            seen,
            unseen,
            server,
            byzantine,
            t: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.rounds
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            tau: self.config.tau,
            eta_l: self.config.eta_l,
            batch_size: self.config.batch_size,
            mode: self.config.algorithm.weight_mode(),
        }
    }

    /// Runs the next round and returns its outcome, including the per-client
    /// aggregation weights.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let plan = RoundPlan {
            spec: &self.spec,
            aggregator: &self.config.algorithm,
            local: self.local_config(),
            policy: self.config.policy(),
            clients_per_round: self.config.clients_per_round,
            byzantine: self.config.byzantine,
            seed: self.seed,
        };
        let out = run_round(&mut self.server, &mut self.seen, &plan, self.t)?;
        self.t += 1;
        Ok(out)
    }

    fn accuracy_or_nan(&self, f: impl FnOnce() -> Result<f64>) -> Result<f64> {
        if self.spec.is_classifier() {
            f()
        } else {
            Ok(f64::NAN)
        }
    }

    /// Metrics row for `outcome`. Evaluation columns are NaN on rounds that
    /// fall between evaluation points; the last round is always evaluated.
    pub fn record(&self, outcome: &RoundOutcome) -> Result<RoundRecord> {
        let t = outcome.t;
        let evaluate = t.is_multiple_of(self.config.eval_interval) || t + 1 == self.config.rounds;
        let w = &self.server.w;
        let spec = &self.spec;
        let mut rec = RoundRecord {
            seed: self.seed,
            t,
            algorithm: self.config.algorithm.name().to_string(),
            gm_appeal_seen: f64::NAN,
            gm_appeal_unseen: f64::NAN,
            avg_acc_seen: f64::NAN,
            avg_acc_unseen: f64::NAN,
            pref_acc_seen: f64::NAN,
            pref_acc_unseen: f64::NAN,
            n_participating: outcome.n_participating(),
            n_eligible: outcome.n_eligible,
            skipped: outcome.skipped,
            grad_norm: f64::NAN,
            loss_gap: f64::NAN,
        };
        if !evaluate {
            return Ok(rec);
        }
        let ft = RngStream::server(self.seed, t as u64, Purpose::FineTune);
        let (steps, eta, b) = (self.config.fine_tune_steps, self.config.eta_l, self.config.batch_size);
        rec.gm_appeal_seen = metrics::gm_appeal(w, &self.seen, spec, LossBasis::TestLoss)?;
        rec.avg_acc_seen = self.accuracy_or_nan(|| metrics::average_accuracy(w, &self.seen, spec))?;
        rec.pref_acc_seen =
            self.accuracy_or_nan(|| metrics::preferred_model_accuracy(w, &self.seen, spec, steps, eta, b, ft))?;
        if !self.unseen.is_empty() {
            let ft_u = ft.with_purpose(Purpose::UnseenPool);
            rec.gm_appeal_unseen = metrics::gm_appeal(w, &self.unseen, spec, LossBasis::TestLoss)?;
            rec.avg_acc_unseen = self.accuracy_or_nan(|| metrics::average_accuracy(w, &self.unseen, spec))?;
            rec.pref_acc_unseen = self
                .accuracy_or_nan(|| metrics::preferred_model_accuracy(w, &self.unseen, spec, steps, eta, b, ft_u))?;
        }
        rec.grad_norm = metrics::maxfl_grad_norm(w, &self.seen, spec, WeightMode::SigmoidDerivative)?;
        rec.loss_gap = metrics::loss_gap_diagnostic(w, &self.seen, spec)?;
        Ok(rec)
    }

    /// Runs the remaining rounds and returns one record per round.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let mut out = Vec::with_capacity(self.config.rounds);
        while !self.is_done() {
            let o = self.step()?;
            out.push(self.record(&o)?);
        }
        Ok(out)
    }
}

/// Final-round metrics of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub gm_appeal_seen: f64,
    pub gm_appeal_unseen: f64,
    pub avg_acc_seen: f64,
    pub avg_acc_unseen: f64,
    pub pref_acc_seen: f64,
    pub pref_acc_unseen: f64,
}

impl FinalMetrics {
    fn from_record(r: &RoundRecord) -> Self {
        FinalMetrics {
            gm_appeal_seen: r.gm_appeal_seen,
            gm_appeal_unseen: r.gm_appeal_unseen,
            avg_acc_seen: r.avg_acc_seen,
            avg_acc_unseen: r.avg_acc_unseen,
            pref_acc_seen: r.pref_acc_seen,
            pref_acc_unseen: r.pref_acc_unseen,
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [
            self.gm_appeal_seen,
            self.gm_appeal_unseen,
            self.avg_acc_seen,
            self.avg_acc_unseen,
            self.pref_acc_seen,
            self.pref_acc_unseen,
        ]
    }

    fn from_array(a: [f64; 6]) -> Self {
        FinalMetrics {
            gm_appeal_seen: a[0],
            gm_appeal_unseen: a[1],
            avg_acc_seen: a[2],
            avg_acc_unseen: a[3],
            pref_acc_seen: a[4],
            pref_acc_unseen: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedFinal {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub version: String,
    /// SHA-256 of the crate version and the effective config as JSON.
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rounds_csv: PathBuf,
    pub per_seed: Vec<SeedFinal>,
    pub mean: FinalMetrics,
    /// Population standard deviation over seeds.
    pub std: FinalMetrics,
    pub notes: Vec<String>,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(format!("{VERSION}\n{json}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn mean_std(per_seed: &[SeedFinal]) -> (FinalMetrics, FinalMetrics) {
    let n = per_seed.len() as f64;
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for i in 0..6 {
        let v: Vec<f64> = per_seed.iter().map(|s| s.metrics.as_array()[i]).collect();
        let m = v.iter().sum::<f64>() / n;
        mean[i] = m;
        std[i] = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    }
    (FinalMetrics::from_array(mean), FinalMetrics::from_array(std))
}

/// Effective config with every default resolved.
fn effective(config: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    c.resolve_defaults();
    c.validate()?;
    Ok(c)
}

/// All seeds in order, in memory.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<Vec<RoundRecord>>> {
    let config = effective(config)?;
    config
        .seeds
        .iter()
        .map(|&seed| Simulation::new(&config, seed)?.run())
        .collect()
}

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if records.is_empty() {
        w.write_record(metrics::ROUNDS_CSV_HEADER.split(','))
            .map_err(|e| csv_error(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs every seed, writes `rounds.csv` and `summary.json` into `out_dir`
/// (the config's `output_dir` when `None`).
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let config = effective(config)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let runs = run_seeds(&config)?;
    let rounds_csv = dir.join("rounds.csv");
    let all: Vec<RoundRecord> = runs.iter().flatten().cloned().collect();
    write_rounds_csv(&rounds_csv, &all)?;

    let per_seed: Vec<SeedFinal> = config
        .seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, recs)| SeedFinal {
            seed,
            metrics: FinalMetrics::from_record(recs.last().expect("rounds >= 1")),
        })
        .collect();
    let (mean, std) = mean_std(&per_seed);
    let mut notes = vec![
        "hidden activation: relu".to_string(),
        "gm_appeal columns use held-out (test) loss; participation uses train loss".to_string(),
    ];
    if matches!(config.data.partition, PartitionScheme::Dirichlet { .. }) {
        notes.push("dirichlet counts: largest-remainder rounding, uniform top-up to the floor".to_string());
    }
    let summary = RunSummary {
        version: VERSION.to_string(),
        config_hash: config_hash(&config),
        config,
        rounds_csv,
        per_seed,
        mean,
        std,
        notes,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub const MEANEST_CSV_HEADER: [&str; 7] = [
    "gamma_G",
    "gamma_G2",
    "estimator",
    "appeal_mean",
    "appeal_stderr",
    "bound",
    "bound_kind",
];

/// Two-client appeal sweep; writes `meanest.csv` into `out_dir` (the config's
/// `output_dir` when `None`).
pub fn run_meanest(config: &MeanEstConfig, out_dir: Option<&Path>) -> Result<(PathBuf, Vec<SweepRow>)> {
    config.validate()?;
    let rows = appeal_sweep(
        &config.grid(),
        config.gamma2,
        config.trials,
        RngStream::server(config.seed, 0, Purpose::MeanEstimation),
        config.grid_step,
    )?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("meanest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(MEANEST_CSV_HEADER).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.write_record([
            r.gamma_g.to_string(),
            r.gamma_g2.to_string(),
            r.estimator.as_str().to_string(),
            r.appeal_mean.to_string(),
            r.appeal_stderr.to_string(),
            r.bound.to_string(),
            r.bound_kind.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((path, rows))
}
