//! Round orchestration: sampling, participation gating, aggregation and the
//! global update.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appeal::WeightMode;
use crate::client::{
    byzantine_corrupt, evaluate_appeal, local_train, ClientProfile, ClientUpdate, LocalConfig,
    LocalObjective, LossBasis,
};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::params::{compensated_sum, CompensatedSum, ModelParams};
use crate::rng::{Purpose, RngStream};

pub const DEFAULT_EPSILON: f64 = 0.01;

fn default_eta_g() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Aggregation rule. The baselines follow their usual published update rules:
///
/// * `fedavg`: `w ← w − η_g Σ_k p_k Δ_k` with `p_k = n_k / Σ n`.
/// * `fedprox`: clients add `μ (w − w0)` to each local gradient; server as FedAvg.
/// * `scaffold`: local gradients corrected by `c − c_k`; option-II variate
///   refresh `c_k ← c_k − c + Δ_k / (τ η_l)`, `c ← c + (1/M) Σ_S (c_k⁺ − c_k)`;
///   server step `w ← w − η_g · mean_S Δ_k`.
/// * `qffl`: `w ← w − Σ a_k Δ_k / Σ (a_k + n_k q F_k^{q−1} L ‖Δ_k‖²)` with
///   `a_k = n_k F_k^q` and `L = 1/lr`.
/// * `perfedavg_fo`: first-order Per-FedAvg local steps; server as FedAvg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    Maxfl {
        #[serde(default)]
        mode: WeightMode,
        #[serde(default = "default_eta_g")]
        eta_g: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Fedavg {
        #[serde(default = "default_eta_g")]
        eta_g: f64,
    },
    Fedprox {
        #[serde(default = "default_eta_g")]
        eta_g: f64,
        mu: f64,
    },
    Scaffold {
        #[serde(default = "default_eta_g")]
        eta_g: f64,
    },
    Qffl {
        q: f64,
        lr: f64,
    },
    PerfedavgFo {
        #[serde(default = "default_eta_g")]
        eta_g: f64,
        alpha: f64,
    },
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::Maxfl { .. } => "maxfl",
            AggregatorSpec::Fedavg { .. } => "fedavg",
            AggregatorSpec::Fedprox { .. } => "fedprox",
            AggregatorSpec::Scaffold { .. } => "scaffold",
            AggregatorSpec::Qffl { .. } => "qffl",
            AggregatorSpec::PerfedavgFo { .. } => "perfedavg_fo",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config_key(format!("algorithm.{key}"), format!("must be > 0, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config_key(format!("algorithm.{key}"), format!("must be >= 0, got {v}")))
            }
        };
        match *self {
            AggregatorSpec::Maxfl { eta_g, epsilon, .. } => {
                positive("eta_g", eta_g)?;
                positive("epsilon", epsilon)
            }
            AggregatorSpec::Fedavg { eta_g } | AggregatorSpec::Scaffold { eta_g } => positive("eta_g", eta_g),
            AggregatorSpec::Fedprox { eta_g, mu } => {
                positive("eta_g", eta_g)?;
                non_negative("mu", mu)
            }
            AggregatorSpec::Qffl { q, lr } => {
                non_negative("q", q)?;
                positive("lr", lr)
            }
            AggregatorSpec::PerfedavgFo { eta_g, alpha } => {
                positive("eta_g", eta_g)?;
                non_negative("alpha", alpha)
            }
        }
    }

    /// Weight formula for MaxFL; baselines report the default but never use it.
    pub fn weight_mode(&self) -> WeightMode {
        match self {
            AggregatorSpec::Maxfl { mode, .. } => *mode,
            _ => WeightMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipationMode {
    #[default]
    AlwaysAvailable,
    AppealBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationPolicy {
    pub mandatory_rounds: usize,
    pub mode: ParticipationMode,
}

impl ParticipationPolicy {
    /// `⌈0.05 T⌉` mandatory rounds.
    pub fn default_mandatory_rounds(rounds: usize) -> usize {
        (rounds * 5).div_ceil(100)
    }

    pub fn appeal_based(rounds: usize) -> Self {
        ParticipationPolicy {
            mandatory_rounds: Self::default_mandatory_rounds(rounds),
            mode: ParticipationMode::AppealBased,
        }
    }

    pub fn always() -> Self {
        ParticipationPolicy {
            mandatory_rounds: 0,
            mode: ParticipationMode::AlwaysAvailable,
        }
    }
}

/// Control variates for SCAFFOLD; the only state the server keeps across rounds
/// besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub c: ModelParams,
    pub c_k: Vec<ModelParams>,
}

impl ScaffoldState {
    pub fn new(dim: usize, n_clients: usize) -> Self {
        ScaffoldState {
            c: ModelParams::zeros(dim),
            c_k: vec![ModelParams::zeros(dim); n_clients],
        }
    }
}

/// Uniform sample of `min(m, |pool|)` ids without replacement, returned in
/// ascending order. An empty pool gives an empty selection.
pub fn sample_clients(pool: &[usize], m: usize, stream: RngStream) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::config_key("clients_per_round", "must be at least 1"));
    }
    if pool.len() <= m {
        let mut all = pool.to_vec();
        all.sort_unstable();
        return Ok(all);
    }
    let mut rng = stream.rng();
    let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Ids that may be sampled in round `t`.
pub fn eligible_pool(profiles: &[ClientProfile], policy: &ParticipationPolicy, t: usize) -> Vec<usize> {
    if policy.mode == ParticipationMode::AlwaysAvailable || t < policy.mandatory_rounds {
        return profiles.iter().map(|p| p.id).collect();
    }
    profiles.iter().filter(|p| p.last_appeal).map(|p| p.id).collect()
}

/// Refreshes `last_appeal` of every client against `w` on the train split.
pub fn refresh_appeals(profiles: &mut [ClientProfile], spec: &ModelSpec, w: &ModelParams) -> Result<()> {
    let flags: Vec<bool> = profiles
        .par_iter()
        .map(|p| evaluate_appeal(p, spec, w, LossBasis::TrainLoss))
        .collect::<Result<_>>()?;
    for (p, f) in profiles.iter_mut().zip(flags) {
        p.last_appeal = f;
    }
    Ok(())
}

/// A client's share of one aggregation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientWeight {
    pub client: usize,
    pub raw: f64,
    /// Effective coefficient on `Δ_k` relative to the server learning rate;
    /// for MaxFL `q_k / (Σ_S q + ε)`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub params: ModelParams,
    pub weights: Vec<ClientWeight>,
    /// False when every update was invalid and the model was left unchanged.
    pub applied: bool,
}

fn valid_sorted(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().filter(|u| !u.diverged).collect();
    v.sort_by_key(|u| u.client);
    v
}

fn unchanged(w: &ModelParams) -> Aggregate {
    Aggregate {
        params: w.clone(),
        weights: Vec::new(),
        applied: false,
    }
}

/// `w − scale / denom · Σ raw_k Δ_k`, summed in ascending client order.
fn weighted_step(w: &ModelParams, updates: &[&ClientUpdate], raw: &[f64], denom: f64, scale: f64) -> Aggregate {
    let mut acc = CompensatedSum::new(w.dim());
    for (u, &r) in updates.iter().zip(raw) {
        acc.add_scaled(r, &u.delta);
    }
    let sum = acc.finish();
    let coef = scale / denom;
    let mut params = w.clone();
    params.axpy(-coef, &sum);
    let weights = updates
        .iter()
        .zip(raw)
        .map(|(u, &r)| ClientWeight {
            client: u.client,
            raw: r,
            normalized: r / denom,
        })
        .collect();
    Aggregate {
        params,
        weights,
        applied: true,
    }
}

/// `w − η_g / (Σ_S q_k + ε) · Σ_S q_k Δ_k` with `q_k` the reported weights.
pub fn aggregate_maxfl(w: &ModelParams, updates: &[ClientUpdate], eta_g: f64, epsilon: f64) -> Aggregate {
    let valid = valid_sorted(updates);
    if valid.is_empty() {
        return unchanged(w);
    }
    let q: Vec<f64> = valid.iter().map(|u| u.reported_weight).collect();
    let denom = compensated_sum(q.iter().copied()) + epsilon;
    weighted_step(w, &valid, &q, denom, eta_g)
}

/// Server side of the baselines. `local` supplies τ and η_l for the SCAFFOLD
/// variate refresh; `scaffold` must be present for that baseline.
pub fn aggregate_baseline(
    kind: &AggregatorSpec,
    w: &ModelParams,
    updates: &[ClientUpdate],
    scaffold: Option<&mut ScaffoldState>,
    local: &LocalConfig,
) -> Result<Aggregate> {
    let valid = valid_sorted(updates);
    if valid.is_empty() {
        return Ok(unchanged(w));
    }
    let n_weights = || -> Vec<f64> { valid.iter().map(|u| u.n_train as f64).collect() };
    match *kind {
        AggregatorSpec::Maxfl { .. } => Err(Error::config("aggregate_baseline called with the maxfl aggregator")),
        AggregatorSpec::Fedavg { eta_g }
        | AggregatorSpec::Fedprox { eta_g, .. }
        | AggregatorSpec::PerfedavgFo { eta_g, .. } => {
            let n = n_weights();
            let denom = compensated_sum(n.iter().copied());
            Ok(weighted_step(w, &valid, &n, denom, eta_g))
        }
        AggregatorSpec::Qffl { q, lr } => {
            let lipschitz = 1.0 / lr;
            let a: Vec<f64> = valid
                .iter()
                .map(|u| u.n_train as f64 * u.start_loss.powf(q))
                .collect();
            let denom = compensated_sum(valid.iter().zip(&a).map(|(u, &a_k)| {
                let extra = if q == 0.0 {
                    0.0
                } else {
                    u.n_train as f64 * q * u.start_loss.powf(q - 1.0) * lipschitz * u.delta.norm_sq()
                };
                a_k + extra
            }));
            Ok(weighted_step(w, &valid, &a, denom, 1.0))
        }
        AggregatorSpec::Scaffold { eta_g } => {
            let state = scaffold.ok_or_else(|| Error::config("scaffold aggregator without control variates"))?;
            let ones = vec![1.0; valid.len()];
            let out = weighted_step(w, &valid, &ones, valid.len() as f64, eta_g);
            let n_clients = state.c_k.len() as f64;
            let inv = 1.0 / (local.tau as f64 * local.eta_l);
            let mut dc = CompensatedSum::new(w.dim());
            for u in &valid {
                let old = &state.c_k[u.client];
                let mut new = old.sub(&state.c);
                new.axpy(inv, &u.delta);
                dc.add_scaled(1.0, &new.sub(old));
                state.c_k[u.client] = new;
            }
            state.c.axpy(1.0 / n_clients, &dc.finish());
            Ok(out)
        }
    }
}

/// What the Byzantine clients do; selection of who is Byzantine happens at setup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    #[serde(default)]
    pub fraction: f64,
    #[serde(default)]
    pub loss_inflation: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

/// Everything a round needs besides the mutable model state.
#[derive(Debug, Clone)]
pub struct RoundPlan<'a> {
    pub spec: &'a ModelSpec,
    pub aggregator: &'a AggregatorSpec,
    pub local: LocalConfig,
    pub policy: ParticipationPolicy,
    pub clients_per_round: usize,
    pub byzantine: ByzantineSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: ModelParams,
    pub scaffold: Option<ScaffoldState>,
}

impl ServerState {
    pub fn new(w: ModelParams, aggregator: &AggregatorSpec, n_clients: usize) -> Self {
        let scaffold = matches!(aggregator, AggregatorSpec::Scaffold { .. })
            .then(|| ScaffoldState::new(w.dim(), n_clients));
        ServerState { w, scaffold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub t: usize,
    pub n_eligible: usize,
    pub selected: Vec<usize>,
    pub n_diverged: usize,
    pub skipped: bool,
    pub weights: Vec<ClientWeight>,
}

impl RoundOutcome {
    pub fn n_participating(&self) -> usize {
        self.selected.len() - self.n_diverged
    }
}

/// One communication round. Client work fans out over the current rayon
/// pool; aggregation is a fixed-order reduce, so the thread count never
/// changes the result. `last_appeal` flags are refreshed against the new
/// model before returning.
pub fn run_round(
    state: &mut ServerState,
    profiles: &mut [ClientProfile],
    plan: &RoundPlan<'_>,
    t: usize,
) -> Result<RoundOutcome> {
    let eligible = eligible_pool(profiles, &plan.policy, t);
    let selected = sample_clients(
        &eligible,
        plan.clients_per_round,
        RngStream::server(plan.seed, t as u64, Purpose::Sampling),
    )?;
    if selected.is_empty() {
        refresh_appeals(profiles, plan.spec, &state.w)?;
        return Ok(RoundOutcome {
            t,
            n_eligible: eligible.len(),
            selected,
            n_diverged: 0,
            skipped: true,
            weights: Vec::new(),
        });
    }

    let objective_for = |k: usize| -> LocalObjective {
        match *plan.aggregator {
            AggregatorSpec::Fedprox { mu, .. } => LocalObjective::Proximal { mu },
            AggregatorSpec::PerfedavgFo { alpha, .. } => LocalObjective::PerFedAvgFirstOrder { alpha },
            AggregatorSpec::Scaffold { .. } => {
                let sc = state.scaffold.as_ref().expect("scaffold state");
                LocalObjective::ControlVariate {
                    correction: sc.c.sub(&sc.c_k[k]),
                }
            }
            _ => LocalObjective::Plain,
        }
    };
    let w0 = &state.w;
    let updates: Vec<ClientUpdate> = selected
        .par_iter()
        .map(|&k| {
            let p = &profiles[k];
            let stream = RngStream::new(plan.seed, k as u64, t as u64, Purpose::LocalTrain);
            let u = local_train(p, plan.spec, w0, &plan.local, &objective_for(k), stream)?;
            Ok(if p.byzantine {
                byzantine_corrupt(
                    u,
                    plan.byzantine.loss_inflation,
                    plan.byzantine.noise_sigma,
                    plan.local.mode,
                    stream.with_purpose(Purpose::Byzantine),
                )
            } else {
                u
            })
        })
        .collect::<Result<_>>()?;
    let n_diverged = updates.iter().filter(|u| u.diverged).count();

    let agg = match *plan.aggregator {
        AggregatorSpec::Maxfl { eta_g, epsilon, .. } => aggregate_maxfl(&state.w, &updates, eta_g, epsilon),
        ref other => aggregate_baseline(other, &state.w, &updates, state.scaffold.as_mut(), &plan.local)?,
    };
    let skipped = !agg.applied;
    state.w = agg.params;
    refresh_appeals(profiles, plan.spec, &state.w)?;
    Ok(RoundOutcome {
        t,
        n_eligible: eligible.len(),
        selected,
        n_diverged,
        skipped,
        weights: agg.weights,
    })
}
