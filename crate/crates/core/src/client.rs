//! Everything a single client does: warm-up solo training, local SGD,
//! weight reporting, fine-tuning, appeal checks and Byzantine corruption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appeal::{appeals, weight_from_gap, AppealGap, WeightMode};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::params::ModelParams;
use crate::rng::{std_normal, Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Mandatory,
    AppealBased,
}

/// Which split a loss is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBasis {
    TrainLoss,
    TestLoss,
}

#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub id: usize,
    pub dataset: ClientDataset,
    pub byzantine: bool,
    pub participation: Participation,
    /// Appeal of the current global model, refreshed by the coordinator.
    pub last_appeal: bool,
    rho: Option<f64>,
    solo_model: Option<ModelParams>,
    solo_test_accuracy: Option<f64>,
}

impl ClientProfile {
    pub fn new(id: usize, dataset: ClientDataset) -> Self {
        ClientProfile {
            id,
            dataset,
            byzantine: false,
            participation: Participation::Mandatory,
            last_appeal: false,
            rho: None,
            solo_model: None,
            solo_test_accuracy: None,
        }
    }

    /// Requirement `ρ_k`; `None` before warm-up.
    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn solo_model(&self) -> Option<&ModelParams> {
        self.solo_model.as_ref()
    }

    /// Test accuracy of the solo model, cached at warm-up (classifiers only).
    pub fn solo_test_accuracy(&self) -> Option<f64> {
        self.solo_test_accuracy
    }

    pub(crate) fn require_rho(&self) -> Result<f64> {
        self.rho
            .ok_or_else(|| Error::config(format!("client {} has not been warmed up", self.id)))
    }

    pub fn train_batch(&self) -> &Batch {
        &self.dataset.train.batch
    }

    pub fn test_batch(&self) -> &Batch {
        &self.dataset.test.batch
    }

    pub fn loss_on(&self, spec: &ModelSpec, w: &ModelParams, basis: LossBasis) -> Result<f64> {
        match basis {
            LossBasis::TrainLoss => models::loss(spec, w, self.train_batch()),
            LossBasis::TestLoss => models::loss(spec, w, self.test_batch()),
        }
    }
}

/// Shared local-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub tau: usize,
    pub eta_l: f64,
    pub batch_size: usize,
    pub mode: WeightMode,
}

/// Per-step modification of the local gradient, used by the baselines.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalObjective {
    Plain,
    /// Adds `mu (w − w0)` to each stochastic gradient.
    Proximal { mu: f64 },
    /// Adds a fixed correction (`c − c_k` for SCAFFOLD) to each gradient.
    ControlVariate { correction: ModelParams },
    /// First-order Per-FedAvg: gradient evaluated after one inner step of
    /// size `alpha` on an independent batch.
    PerFedAvgFirstOrder { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// `w^{(t,0)} − w^{(t,τ)}`.
    pub delta: ModelParams,
    pub reported_weight: f64,
    pub participated: bool,
    /// Non-finite parameters or loss during local training; never aggregated.
    pub diverged: bool,
    pub n_train: usize,
    /// Training loss at `w^{(t,0)}` over the full train split.
    pub start_loss: f64,
    /// Honest appeal gap at `w^{(t,0)}`.
    pub gap: AppealGap,
}

fn sample_batch(data: &Batch, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let n = data.len();
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    data.gather(&idx)
}

/// Plain SGD with batches drawn uniformly with replacement.
fn sgd(
    spec: &ModelSpec,
    data: &Batch,
    w: &mut ModelParams,
    steps: usize,
    eta: f64,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..steps {
        let batch = sample_batch(data, b, rng);
        let g = models::grad(spec, w, &batch)?;
        w.axpy(-eta, &g);
    }
    Ok(())
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::config_key("batch_size", "must be at least 1"));
    }
    Ok(())
}

/// Solo-trains `ŵ_k` for `tau_warm` steps from a fresh initialisation and
/// freezes `ρ_k = F_k(ŵ_k)` on the full train split.
///
/// The initialisation uses `stream` re-tagged as [`Purpose::Init`].
pub fn warmup(
    profile: &mut ClientProfile,
    spec: &ModelSpec,
    tau_warm: usize,
    eta_l: f64,
    b: usize,
    stream: RngStream,
) -> Result<()> {
    if tau_warm == 0 {
        return Err(Error::config_key(
            "warmup_steps",
            "must be at least 1; a requirement from an untrained model is meaningless",
        ));
    }
    check_batch(b)?;
    if profile.solo_model.is_some() {
        return Err(Error::config(format!(
            "client {} is already warmed up; its requirement is frozen",
            profile.id
        )));
    }
    let mut w = models::init_params(spec, stream.with_purpose(Purpose::Init));
    let mut rng = stream.rng();
    sgd(spec, profile.train_batch(), &mut w, tau_warm, eta_l, b, &mut rng)?;
    let rho = models::loss(spec, &w, profile.train_batch())?;
    if spec.is_classifier() && !profile.test_batch().is_empty() {
        profile.solo_test_accuracy = Some(models::accuracy(spec, &w, profile.test_batch())?);
    }
    profile.rho = Some(rho);
    profile.solo_model = Some(w);
    Ok(())
}

/// Runs `tau` local SGD steps from `w0` and reports the update together with
/// the aggregation weight computed at `w0` before any local step.
pub fn local_train(
    profile: &ClientProfile,
    spec: &ModelSpec,
    w0: &ModelParams,
    cfg: &LocalConfig,
    objective: &LocalObjective,
    stream: RngStream,
) -> Result<ClientUpdate> {
    check_batch(cfg.batch_size)?;
    let rho = profile.require_rho()?;
    let data = profile.train_batch();
    let start_loss = models::loss(spec, w0, data)?;
    let gap = AppealGap::new(start_loss, rho);
    let reported_weight = weight_from_gap(gap, cfg.mode);

    let mut rng = stream.rng();
    let mut w = w0.clone();
    let mut diverged = !w0.is_finite() || !start_loss.is_finite();
    for _ in 0..cfg.tau {
        if diverged {
            break;
        }
        let batch = sample_batch(data, cfg.batch_size, &mut rng);
        let g = match objective {
            LocalObjective::Plain => models::grad(spec, &w, &batch)?,
            LocalObjective::Proximal { mu } => {
                let mut g = models::grad(spec, &w, &batch)?;
                if *mu != 0.0 {
                    g.axpy(*mu, &w.sub(w0));
                }
                g
            }
            LocalObjective::ControlVariate { correction } => {
                let mut g = models::grad(spec, &w, &batch)?;
                g.axpy(1.0, correction);
                g
            }
            LocalObjective::PerFedAvgFirstOrder { alpha } => {
                let inner = models::grad(spec, &w, &batch)?;
                let mut adapted = w.clone();
                adapted.axpy(-alpha, &inner);
                let outer_batch = sample_batch(data, cfg.batch_size, &mut rng);
                models::grad(spec, &adapted, &outer_batch)?
            }
        };
        w.axpy(-cfg.eta_l, &g);
        diverged = !w.is_finite();
    }
    let delta = w0.sub(&w);
    let diverged = diverged || !delta.is_finite();
    Ok(ClientUpdate {
        client: profile.id,
        delta,
        reported_weight,
        participated: true,
        diverged,
        n_train: data.len(),
        start_loss,
        gap,
    })
}

/// Byzantine behaviour: report an inflated appeal gap and add Gaussian noise
/// to the update.
pub fn byzantine_corrupt(
    mut update: ClientUpdate,
    loss_inflation: f64,
    noise_sigma: f64,
    mode: WeightMode,
    stream: RngStream,
) -> ClientUpdate {
    update.reported_weight = weight_from_gap(AppealGap(update.gap.0 + loss_inflation), mode);
    if noise_sigma != 0.0 {
        let mut rng = stream.rng();
        for v in update.delta.as_mut_slice() {
            *v += noise_sigma * std_normal(&mut rng);
        }
    }
    update
}

/// Whether `w` meets the client's requirement on the chosen split. The
/// requirement itself always comes from warm-up.
pub fn evaluate_appeal(
    profile: &ClientProfile,
    spec: &ModelSpec,
    w: &ModelParams,
    basis: LossBasis,
) -> Result<bool> {
    let rho = profile.require_rho()?;
    Ok(appeals(profile.loss_on(spec, w, basis)?, rho))
}

/// `k_steps` SGD steps from `w` on the client's train split. Used only for
/// evaluation; the result never reaches the server.
pub fn fine_tune(
    profile: &ClientProfile,
    spec: &ModelSpec,
    w: &ModelParams,
    k_steps: usize,
    eta_l: f64,
    b: usize,
    stream: RngStream,
) -> Result<ModelParams> {
    let mut out = w.clone();
    if k_steps == 0 {
        return Ok(out);
    }
    check_batch(b)?;
    sgd(spec, profile.train_batch(), &mut out, k_steps, eta_l, b, &mut stream.rng())?;
    Ok(out)
}
