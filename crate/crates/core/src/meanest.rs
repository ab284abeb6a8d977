//! One-dimensional mean-estimation toolkit for two or three clients.
//!
//! Client `k` holds `N` samples `~ N(θ_k, ν²)`; its loss is `(w − θ̂_k)² + c_k`
//! and its requirement `ρ_k` is the loss of its own empirical mean, so the
//! appeal gap is exactly `(w − θ̂_k)²`. The relaxed objective is
//! `v(w) = (1/K) Σ_k h((w − θ̂_k)²)` for a surrogate `h`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appeal::{sigmoid, sigmoid_derivative};
use crate::error::{Error, Result};
use crate::rng::{std_normal, RngStream};

pub const DEFAULT_GRID_STEP: f64 = 1e-3;
const GRID_MARGIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstProblem {
    pub theta: Vec<f64>,
    pub theta_hat: Vec<f64>,
    /// `γ² = ν²/N`, the variance of each empirical mean.
    pub gamma2: f64,
    /// `((θ_max − θ_min)/2)²`; for two clients this is `((θ₂ − θ₁)/2)²`.
    pub gamma_g2: f64,
    /// `(θ̂_j − θ̂_i)/2` with `i = argmin θ̂`, `j = argmax θ̂`.
    pub gamma_hat_g: f64,
}

fn half_range(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo) / 2.0
}

impl MeanEstProblem {
    pub fn new(theta: Vec<f64>, theta_hat: Vec<f64>, gamma2: f64) -> Result<Self> {
        if !(2..=3).contains(&theta.len()) || theta.len() != theta_hat.len() {
            return Err(Error::config_key(
                "theta",
                "mean estimation supports two or three clients",
            ));
        }
        if !(gamma2 > 0.0) {
            return Err(Error::config_key("gamma2", "must be positive"));
        }
        let g = half_range(&theta);
        Ok(MeanEstProblem {
            gamma_g2: g * g,
            gamma_hat_g: half_range(&theta_hat),
            theta,
            theta_hat,
            gamma2,
        })
    }

    /// Problem whose empirical means are known exactly (no sampling).
    pub fn from_estimates(theta_hat: Vec<f64>) -> Result<Self> {
        MeanEstProblem::new(theta_hat.clone(), theta_hat, 1.0)
    }

    pub fn midpoint(&self) -> f64 {
        let lo = self.theta_hat.iter().cloned().fold(f64::INFINITY, f64::min);
        lo + self.gamma_hat_g
    }

    pub fn objective_v(&self, w: f64, surrogate: SurrogateKind) -> f64 {
        objective_v(&self.theta_hat, w, surrogate)
    }

    pub fn grad_v(&self, w: f64, surrogate: SurrogateKind) -> f64 {
        grad_v(&self.theta_hat, w, surrogate)
    }

    pub fn hessian_v(&self, w: f64) -> f64 {
        hessian_v(&self.theta_hat, w)
    }

    pub fn find_local_minima(&self, surrogate: SurrogateKind) -> Vec<Stationary> {
        find_local_minima(&self.theta_hat, surrogate, DEFAULT_GRID_STEP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Sigmoid,
    Softplus,
    Relu,
}

impl SurrogateKind {
    #[inline]
    fn h(self, x: f64) -> f64 {
        match self {
            SurrogateKind::Sigmoid => sigmoid(x),
            SurrogateKind::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            SurrogateKind::Relu => x.max(0.0),
        }
    }

    /// `h'(x)`; the ReLU surrogate uses the right derivative at 0.
    #[inline]
    fn dh(self, x: f64) -> f64 {
        match self {
            SurrogateKind::Sigmoid => sigmoid_derivative(x),
            SurrogateKind::Softplus => sigmoid(x),
            SurrogateKind::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn objective_v(theta_hat: &[f64], w: f64, surrogate: SurrogateKind) -> f64 {
    let k = theta_hat.len() as f64;
    theta_hat
        .iter()
        .map(|t| surrogate.h((w - t) * (w - t)))
        .sum::<f64>()
        / k
}

/// `v'(w) = (2/K) Σ h'((w − θ̂_k)²)(w − θ̂_k)`.
#[inline]
pub fn grad_v(theta_hat: &[f64], w: f64, surrogate: SurrogateKind) -> f64 {
    let k = theta_hat.len() as f64;
    let mut s = 0.0;
    for t in theta_hat {
        let d = w - t;
        s += surrogate.dh(d * d) * d;
    }
    2.0 * s / k
}

/// Second derivative of the sigmoid objective:
/// `(2/K) Σ q(d²)(2(1 − 2σ(d²))d² + 1)` with `d = w − θ̂_k`, `q = σ(1 − σ)`.
pub fn hessian_v(theta_hat: &[f64], w: f64) -> f64 {
    let k = theta_hat.len() as f64;
    let mut s = 0.0;
    for t in theta_hat {
        let d2 = (w - t) * (w - t);
        s += sigmoid_derivative(d2) * (2.0 * (1.0 - 2.0 * sigmoid(d2)) * d2 + 1.0);
    }
    2.0 * s / k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationaryKind {
    Minimum,
    Maximum,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stationary {
    pub w: f64,
    pub kind: StationaryKind,
}

fn classify(theta_hat: &[f64], w: f64, surrogate: SurrogateKind) -> StationaryKind {
    let curv = match surrogate {
        SurrogateKind::Sigmoid => hessian_v(theta_hat, w),
        _ => {
            let d = 1e-4;
            (objective_v(theta_hat, w + d, surrogate) - 2.0 * objective_v(theta_hat, w, surrogate)
                + objective_v(theta_hat, w - d, surrogate))
                / (d * d)
        }
    };
    if curv > 0.0 {
        StationaryKind::Minimum
    } else if curv < 0.0 {
        StationaryKind::Maximum
    } else {
        StationaryKind::Degenerate
    }
}

/// Bisects a sign change of `v'` down to adjacent floats and returns the
/// endpoint with the smaller `|v'|`.
fn bisect(theta_hat: &[f64], surrogate: SurrogateKind, mut lo: f64, mut hi: f64) -> f64 {
    let mut g_lo = grad_v(theta_hat, lo, surrogate);
    let mut g_hi = grad_v(theta_hat, hi, surrogate);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return if g_lo.abs() <= g_hi.abs() { lo } else { hi };
        }
        let g = grad_v(theta_hat, mid, surrogate);
        if g == 0.0 {
            return mid;
        }
        if g.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
            g_hi = g;
        }
    }
}

/// Golden-section minimiser of `v` on `[lo, hi]`.
fn golden_min(theta_hat: &[f64], surrogate: SurrogateKind, mut lo: f64, mut hi: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let f = |w: f64| objective_v(theta_hat, w, surrogate);
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-14 * (1.0 + lo.abs()) {
            break;
        }
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// All stationary points of `v` on `[min θ̂ − 3, max θ̂ + 3]`, located by
/// scanning the sign of `v'` on a grid of step `grid_step`, refined by
/// bisection to adjacent floats, and classified by curvature. Sorted by `w`.
pub fn find_local_minima(theta_hat: &[f64], surrogate: SurrogateKind, grid_step: f64) -> Vec<Stationary> {
    let lo = theta_hat.iter().cloned().fold(f64::INFINITY, f64::min) - GRID_MARGIN;
    let hi = theta_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + GRID_MARGIN;
    let n = ((hi - lo) / grid_step).ceil() as usize;
    let mut out = Vec::new();
    // last grid point with a nonzero gradient, and its sign
    let mut last: Option<(f64, f64)> = None;
    for i in 0..=n {
        let x = if i == n { hi } else { lo + i as f64 * grid_step };
        let g = grad_v(theta_hat, x, surrogate);
        if g == 0.0 {
            continue;
        }
        if let Some((x0, s0)) = last {
            if g.signum() != s0 {
                let w = bisect(theta_hat, surrogate, x0, x);
                let kind = classify(theta_hat, w, surrogate);
                if s0 < 0.0 && kind != StationaryKind::Minimum {
                    // several roots share one grid cell; the bracket still
                    // contains a minimum because v' goes from - to +
                    out.push(Stationary {
                        w: golden_min(theta_hat, surrogate, x0, x),
                        kind: StationaryKind::Minimum,
                    });
                } else {
                    out.push(Stationary { w, kind });
                }
            }
        }
        last = Some((x, g.signum()));
    }
    out
}

/// Local minima only, as returned by [`find_local_minima`].
pub fn local_minima(theta_hat: &[f64], surrogate: SurrogateKind, grid_step: f64) -> Vec<f64> {
    find_local_minima(theta_hat, surrogate, grid_step)
        .into_iter()
        .filter(|s| s.kind == StationaryKind::Minimum)
        .map(|s| s.w)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Average of the empirical means (standard FL).
    FedAvgMean,
    /// A local minimum of the sigmoid objective: lowest objective value,
    /// then lowest `w`.
    MaxFlMinimum,
    /// Minimum of the ReLU-relaxed objective.
    ReluSurrogate,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [
        Estimator::FedAvgMean,
        Estimator::MaxFlMinimum,
        Estimator::ReluSurrogate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::FedAvgMean => "fedavg_mean",
            Estimator::MaxFlMinimum => "maxfl_minimum",
            Estimator::ReluSurrogate => "relu_surrogate",
        }
    }

    pub fn estimate(self, theta_hat: &[f64], grid_step: f64) -> f64 {
        self.locate(theta_hat, grid_step).w
    }

    /// Like [`Estimator::estimate`], but a sigmoid minimum lying on top of an
    /// empirical mean keeps its offset from that mean at full precision.
    pub fn locate(self, theta_hat: &[f64], grid_step: f64) -> Located {
        let select = |s: SurrogateKind| {
            let mins = local_minima(theta_hat, s, grid_step);
            let best = mins.into_iter().min_by(|a, b| {
                let (va, vb) = (objective_v(theta_hat, *a, s), objective_v(theta_hat, *b, s));
                va.partial_cmp(&vb).unwrap().then(a.partial_cmp(b).unwrap())
            });
            // v' < 0 left of every θ̂ and > 0 right of them, so a minimum exists
            best.unwrap_or_else(|| theta_hat.iter().sum::<f64>() / theta_hat.len() as f64)
        };
        match self {
            Estimator::FedAvgMean => Located::plain(theta_hat.iter().sum::<f64>() / theta_hat.len() as f64),
            Estimator::MaxFlMinimum => anchored(theta_hat, select(SurrogateKind::Sigmoid), SurrogateKind::Sigmoid),
            Estimator::ReluSurrogate => Located::plain(select(SurrogateKind::Relu)),
        }
    }
}

/// Within this distance of some `θ̂_i` a minimizer is re-solved as `θ̂_i + δ`.
const ANCHOR_RADIUS: f64 = 1e-6;

/// An estimate `w`. When `anchor` is `Some((i, δ))` the exact point is
/// `θ̂_i + δ`, with `δ` possibly far below the float spacing at `θ̂_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub w: f64,
    pub anchor: Option<(usize, f64)>,
}

impl Located {
    pub fn plain(w: f64) -> Self {
        Located { w, anchor: None }
    }
}

/// Sign-exact `v'(θ̂_i + δ)` up to the positive factor `2/K`.
fn grad_at_offset(theta_hat: &[f64], i: usize, delta: f64, surrogate: SurrogateKind) -> f64 {
    let mut s = 0.0;
    for (j, t) in theta_hat.iter().enumerate() {
        let d = if j == i { delta } else { (theta_hat[i] - t) + delta };
        s += surrogate.dh(d * d) * d;
    }
    s
}

fn anchored(theta_hat: &[f64], w: f64, surrogate: SurrogateKind) -> Located {
    let Some((i, t)) = theta_hat
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| (a.1 - w).abs().total_cmp(&(b.1 - w).abs()))
    else {
        return Located::plain(w);
    };
    if (w - t).abs() > ANCHOR_RADIUS {
        return Located::plain(w);
    }
    let g = |d: f64| grad_at_offset(theta_hat, i, d, surrogate);
    let (mut lo, mut hi) = (-2.0 * ANCHOR_RADIUS, 2.0 * ANCHOR_RADIUS);
    let (mut g_lo, mut g_hi) = (g(lo), g(hi));
    if !(g_lo < 0.0 && g_hi > 0.0) {
        return Located::plain(w);
    }
    // floats are dense near zero, so this resolves δ down to subnormals
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            (lo, hi, g_lo, g_hi) = (mid, mid, gm, gm);
            break;
        }
        if gm < 0.0 {
            (lo, g_lo) = (mid, gm);
        } else {
            (hi, g_hi) = (mid, gm);
        }
    }
    let delta = if g_lo.abs() <= g_hi.abs() { lo } else { hi };
    Located {
        w: t + delta,
        anchor: Some((i, delta)),
    }
}

/// Per-client appeal of `w`: the global model beats the client's own
/// empirical mean on the client's true distribution.
pub fn appeal_flags(theta: &[f64], theta_hat: &[f64], w: f64) -> Vec<bool> {
    theta
        .iter()
        .zip(theta_hat)
        .map(|(t, th)| (w - t).powi(2) < (th - t).powi(2))
        .collect()
}

/// [`appeal_flags`] for a [`Located`] estimate. The anchor client compares
/// `(θ̂_i − θ_i + δ)²` with `(θ̂_i − θ_i)²` through the sign of `δ(2(θ̂_i − θ_i) + δ)`.
pub fn appeal_flags_located(theta: &[f64], theta_hat: &[f64], est: &Located) -> Vec<bool> {
    let Some((i, delta)) = est.anchor else {
        return appeal_flags(theta, theta_hat, est.w);
    };
    theta
        .iter()
        .zip(theta_hat)
        .enumerate()
        .map(|(k, (t, th))| {
            if k == i {
                delta * (2.0 * (th - t) + delta) < 0.0
            } else {
                let d = (theta_hat[i] - t) + delta;
                d * d < (th - t).powi(2)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppealEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Mean appeal of each client separately.
    pub per_client: Vec<f64>,
    pub trials: usize,
}

fn sample_theta_hat(theta: &[f64], gamma: f64, stream: RngStream, trial: usize) -> Vec<f64> {
    let mut rng = stream.with_round(trial as u64).rng();
    theta.iter().map(|t| t + gamma * std_normal(&mut rng)).collect()
}

struct TrialOutcome {
    flags: Vec<bool>,
    w: f64,
    theta_hat: Vec<f64>,
}

fn run_trials(
    estimators: &[Estimator],
    theta: &[f64],
    gamma2: f64,
    trials: usize,
    stream: RngStream,
    grid_step: f64,
) -> Vec<Vec<TrialOutcome>> {
    let gamma = gamma2.sqrt();
    let per_trial: Vec<Vec<TrialOutcome>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let theta_hat = sample_theta_hat(theta, gamma, stream, t);
            estimators
                .iter()
                .map(|e| {
                    let est = e.locate(&theta_hat, grid_step);
                    TrialOutcome {
                        flags: appeal_flags_located(theta, &theta_hat, &est),
                        w: est.w,
                        theta_hat: theta_hat.clone(),
                    }
                })
                .collect()
        })
        .collect();
    // transpose to [estimator][trial]
    let mut out: Vec<Vec<TrialOutcome>> = estimators.iter().map(|_| Vec::with_capacity(trials)).collect();
    for row in per_trial {
        for (e, o) in row.into_iter().enumerate() {
            out[e].push(o);
        }
    }
    out
}

fn summarize(outcomes: &[TrialOutcome], k: usize) -> AppealEstimate {
    let n = outcomes.len();
    let values: Vec<f64> = outcomes
        .iter()
        .map(|o| o.flags.iter().filter(|&&f| f).count() as f64 / k as f64)
        .collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let per_client = (0..k)
        .map(|c| outcomes.iter().filter(|o| o.flags[c]).count() as f64 / n as f64)
        .collect();
    AppealEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        per_client,
        trials: n,
    }
}

/// Monte-Carlo expected GM-Appeal of an estimator. Trial `t` draws
/// `θ̂_k ~ N(θ_k, γ²)` from `stream.with_round(t)`, so results do not depend
/// on how trials are scheduled.
pub fn expected_appeal(
    estimator: Estimator,
    theta: &[f64],
    gamma2: f64,
    trials: usize,
    stream: RngStream,
) -> Result<AppealEstimate> {
    expected_appeal_with_grid(estimator, theta, gamma2, trials, stream, DEFAULT_GRID_STEP)
}

pub fn expected_appeal_with_grid(
    estimator: Estimator,
    theta: &[f64],
    gamma2: f64,
    trials: usize,
    stream: RngStream,
    grid_step: f64,
) -> Result<AppealEstimate> {
    check_inputs(theta, gamma2, trials)?;
    let out = run_trials(&[estimator], theta, gamma2, trials, stream, grid_step);
    Ok(summarize(&out[0], theta.len()))
}

fn check_inputs(theta: &[f64], gamma2: f64, trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::config_key("trials", "must be at least 1"));
    }
    if !(2..=3).contains(&theta.len()) {
        return Err(Error::config_key("theta", "two or three clients"));
    }
    if !(gamma2 > 0.0) {
        return Err(Error::config_key("gamma2", "must be positive"));
    }
    Ok(())
}

/// Upper bound on FedAvg's expected appeal for two clients.
pub fn fedavg_upper_bound(gamma_g2: f64, gamma2: f64) -> f64 {
    2.0 * (-gamma_g2 / (5.0 * gamma2)).exp()
}

/// Lower bound on the expected appeal of any local minimum of the sigmoid
/// objective for two clients.
pub fn maxfl_lower_bound(gamma2: f64) -> f64 {
    (-1.0 / gamma2).exp() / 16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma_g: f64,
    pub gamma_g2: f64,
    pub estimator: Estimator,
    pub appeal_mean: f64,
    pub appeal_stderr: f64,
    pub bound: f64,
    /// `upper` for the FedAvg-type estimators, `lower` for the MaxFL minimum.
    pub bound_kind: &'static str,
}

/// Two-client sweep with `θ₁ = 0`, `θ₂ = 2γ_G` for each `γ_G` in `gamma_gs`.
/// Each grid point uses its own stream (`round` high bits = grid index).
pub fn appeal_sweep(
    gamma_gs: &[f64],
    gamma2: f64,
    trials: usize,
    stream: RngStream,
    grid_step: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, &g) in gamma_gs.iter().enumerate() {
        let theta = [0.0, 2.0 * g];
        check_inputs(&theta, gamma2, trials)?;
        let point_stream = stream.with_client(i as u64);
        let out = run_trials(&Estimator::ALL, &theta, gamma2, trials, point_stream, grid_step);
        for (e, outcomes) in Estimator::ALL.iter().zip(&out) {
            let est = summarize(outcomes, 2);
            let (bound, bound_kind) = match e {
                Estimator::MaxFlMinimum => (maxfl_lower_bound(gamma2), "lower"),
                _ => (fedavg_upper_bound(g * g, gamma2), "upper"),
            };
            rows.push(SweepRow {
                gamma_g: g,
                gamma_g2: g * g,
                estimator: *e,
                appeal_mean: est.mean,
                appeal_stderr: est.stderr,
                bound,
                bound_kind,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreeClientCase {
    AllClose,
    AllFar,
    TwoCloseOneFar,
}

impl ThreeClientCase {
    /// Canonical true means for each case.
    pub fn canonical_theta(self) -> [f64; 3] {
        match self {
            ThreeClientCase::AllClose => [0.0, 0.0, 0.0],
            ThreeClientCase::AllFar => [0.0, 10.0, 20.0],
            ThreeClientCase::TwoCloseOneFar => [0.0, 0.1, 50.0],
        }
    }

    /// Pairs closer than `3γ` count as close.
    pub fn classify(theta: &[f64; 3], gamma: f64) -> Self {
        let close = |a: f64, b: f64| (a - b).abs() < 3.0 * gamma;
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let n_close = pairs.iter().filter(|(i, j)| close(theta[*i], theta[*j])).count();
        match n_close {
            0 => ThreeClientCase::AllFar,
            1 => ThreeClientCase::TwoCloseOneFar,
            _ => ThreeClientCase::AllClose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub theta: [f64; 3],
    pub case: ThreeClientCase,
    pub fedavg: AppealEstimate,
    pub maxfl: AppealEstimate,
    /// Mean |w_MaxFL − w_FedAvg| over trials.
    pub mean_abs_estimate_gap: f64,
    /// Two-close case only: fraction of trials whose MaxFL minimum lies
    /// within `3γ` of the close pair's empirical midpoint.
    pub near_pair_fraction: Option<f64>,
    /// Clients whose MaxFL appeal exceeds their FedAvg appeal.
    pub maxfl_dominant_clients: Vec<usize>,
}

pub fn three_client_case(
    theta: [f64; 3],
    gamma2: f64,
    trials: usize,
    stream: RngStream,
    grid_step: f64,
) -> Result<CaseReport> {
    check_inputs(&theta, gamma2, trials)?;
    let gamma = gamma2.sqrt();
    let case = ThreeClientCase::classify(&theta, gamma);
    let out = run_trials(
        &[Estimator::FedAvgMean, Estimator::MaxFlMinimum],
        &theta,
        gamma2,
        trials,
        stream,
        grid_step,
    );
    let fedavg = summarize(&out[0], 3);
    let maxfl = summarize(&out[1], 3);
    let mean_abs_estimate_gap = out[0]
        .iter()
        .zip(&out[1])
        .map(|(a, b)| (a.w - b.w).abs())
        .sum::<f64>()
        / trials as f64;
    let near_pair_fraction = (case == ThreeClientCase::TwoCloseOneFar).then(|| {
        let (i, j) = [(0, 1), (0, 2), (1, 2)]
            .into_iter()
            .min_by(|a, b| {
                let da = (theta[a.0] - theta[a.1]).abs();
                let db = (theta[b.0] - theta[b.1]).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        out[1]
            .iter()
            .filter(|o| (o.w - 0.5 * (o.theta_hat[i] + o.theta_hat[j])).abs() <= 3.0 * gamma)
            .count() as f64
            / trials as f64
    });
    let maxfl_dominant_clients = (0..3)
        .filter(|&c| maxfl.per_client[c] > fedavg.per_client[c])
        .collect();
    Ok(CaseReport {
        theta,
        case,
        fedavg,
        maxfl,
        mean_abs_estimate_gap,
        near_pair_fraction,
        maxfl_dominant_clients,
    })
}

/// Runs the three canonical configurations.
pub fn three_client_cases(gamma2: f64, trials: usize, stream: RngStream) -> Result<Vec<CaseReport>> {
    [
        ThreeClientCase::AllClose,
        ThreeClientCase::AllFar,
        ThreeClientCase::TwoCloseOneFar,
    ]
    .iter()
    .enumerate()
    .map(|(i, c)| {
        three_client_case(
            c.canonical_theta(),
            gamma2,
            trials,
            stream.with_client(i as u64),
            DEFAULT_GRID_STEP,
        )
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    const S: SurrogateKind = SurrogateKind::Sigmoid;

    fn two(a: f64, b: f64) -> MeanEstProblem {
        MeanEstProblem::from_estimates(vec![a, b]).unwrap()
    }

    #[test]
    fn objective_examples() {
        assert_eq!(two(0.0, 0.0).objective_v(0.0, S), 0.5);
        assert!((two(0.0, 0.0).objective_v(1e3, S) - 1.0).abs() < 1e-15);
        // σ(4) at extended precision
        assert!((two(0.0, 4.0).objective_v(2.0, S) - 0.982013790037908).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = MeanEstProblem::from_estimates(vec![-0.3, 1.7, 0.4]).unwrap();
        for s in [SurrogateKind::Sigmoid, SurrogateKind::Softplus] {
            for i in 0..40 {
                let w = -2.0 + 0.1 * i as f64;
                let h = 1e-6;
                let fd = (p.objective_v(w + h, s) - p.objective_v(w - h, s)) / (2.0 * h);
                assert!((p.grad_v(w, s) - fd).abs() <= 1e-8, "w={w}");
            }
        }
        for i in 0..40 {
            let w = -2.0 + 0.1 * i as f64;
            let h = 1e-5;
            let fd = (p.grad_v(w + h, S) - p.grad_v(w - h, S)) / (2.0 * h);
            let hv = p.hessian_v(w);
            assert!((hv - fd).abs() <= 1e-6 * hv.abs().max(1.0), "w={w}");
        }
    }

    #[test]
    fn midpoint_is_stationary_and_curvature_flips() {
        for (a, b) in [(0.0, 6.0), (-1.0, 0.0), (2.5, 9.25)] {
            let p = two(a, b);
            assert!(p.grad_v(p.midpoint(), S).abs() <= 1e-12);
        }
        assert!(two(0.0, 6.0).hessian_v(3.0) < 0.0); // γ̂_G = 3
        assert!(two(0.0, 1.0).hessian_v(0.5) > 0.0); // γ̂_G = 0.5
    }

    #[test]
    fn softplus_and_relu_minimise_at_the_mean() {
        for s in [SurrogateKind::Softplus, SurrogateKind::Relu] {
            let m = two(-1.3, 4.1).find_local_minima(s);
            let mins: Vec<_> = m.iter().filter(|x| x.kind == StationaryKind::Minimum).collect();
            assert_eq!(mins.len(), 1);
            assert!((mins[0].w - 1.4).abs() <= 1e-6);
        }
    }

    #[test]
    fn sigmoid_two_minima_when_far() {
        let p = two(0.0, 6.0);
        let st = p.find_local_minima(S);
        let mins: Vec<f64> = st
            .iter()
            .filter(|s| s.kind == StationaryKind::Minimum)
            .map(|s| s.w)
            .collect();
        assert_eq!(mins.len(), 2);
        assert!(mins[0] > 0.0 && mins[0] <= 2.0);
        assert!(mins[1] >= 4.0 && mins[1] < 6.0);
        let mid = st.iter().find(|s| (s.w - 3.0).abs() < 1e-6).unwrap();
        assert_eq!(mid.kind, StationaryKind::Maximum);

        let near = two(0.0, 1.0).find_local_minima(S);
        assert_eq!(near.len(), 1);
        assert_eq!(near[0].kind, StationaryKind::Minimum);
        assert!((near[0].w - 0.5).abs() < 1e-9);
    }

    #[test]
    fn estimator_tie_break_is_deterministic() {
        // symmetric instance: both minima have the same objective value
        let w = Estimator::MaxFlMinimum.estimate(&[0.0, 6.0], DEFAULT_GRID_STEP);
        assert!(w < 3.0);
        assert_eq!(Estimator::FedAvgMean.estimate(&[0.0, 6.0], 1e-3), 3.0);
        assert!((Estimator::ReluSurrogate.estimate(&[0.0, 6.0], 1e-3) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn far_apart_minimum_keeps_its_offset() {
        let th = [0.0, 20.0];
        let est = Estimator::MaxFlMinimum.locate(&th, DEFAULT_GRID_STEP);
        let (i, delta) = est.anchor.expect("minimum sits on an empirical mean");
        assert_eq!(i, 0);
        // pulled toward the other client by roughly exp(-400)
        assert!(delta > 0.0 && delta < 1e-100);
        // client 0's true mean is right of its estimate, so the nudge helps it
        assert_eq!(appeal_flags_located(&[0.5, 20.0], &th, &est), vec![true, false]);
        assert_eq!(appeal_flags_located(&[-0.5, 20.0], &th, &est), vec![false, false]);
    }

    #[test]
    fn bounds() {
        assert!((fedavg_upper_bound(20.0, 1.0) - 0.036631277777468).abs() < 1e-12);
        assert!((maxfl_lower_bound(1.0) - 0.022992465073215).abs() < 1e-12);
    }

    #[test]
    fn iid_averaging_helps_two_clients() {
        let s = RngStream::new(5, 0, 0, Purpose::Trial);
        let e = expected_appeal(Estimator::FedAvgMean, &[1.0, 1.0], 1.0, 20_000, s).unwrap();
        assert!(e.mean - 3.0 * e.stderr > 0.5, "{e:?}");
        assert!(expected_appeal(Estimator::FedAvgMean, &[1.0, 1.0], 1.0, 0, s).is_err());
    }

    #[test]
    fn expected_appeal_is_reproducible() {
        let s = RngStream::new(5, 0, 0, Purpose::Trial);
        let a = expected_appeal(Estimator::MaxFlMinimum, &[0.0, 3.0], 1.0, 200, s).unwrap();
        let b = expected_appeal(Estimator::MaxFlMinimum, &[0.0, 3.0], 1.0, 200, s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn problem_quantities() {
        let p = MeanEstProblem::new(vec![0.0, 4.0], vec![1.0, 2.0], 0.25).unwrap();
        assert_eq!(p.gamma_g2, 4.0);
        assert_eq!(p.gamma_hat_g, 0.5);
        assert_eq!(p.midpoint(), 1.5);
        assert!(MeanEstProblem::new(vec![0.0], vec![0.0], 1.0).is_err());
        assert!(MeanEstProblem::new(vec![0.0, 1.0], vec![0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn case_classification() {
        assert_eq!(ThreeClientCase::classify(&[0.0, 0.1, 50.0], 1.0), ThreeClientCase::TwoCloseOneFar);
        assert_eq!(ThreeClientCase::classify(&[0.0, 10.0, 20.0], 1.0), ThreeClientCase::AllFar);
        assert_eq!(ThreeClientCase::classify(&[0.0, 0.0, 0.0], 1.0), ThreeClientCase::AllClose);
    }
}
