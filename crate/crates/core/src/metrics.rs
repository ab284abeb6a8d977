//! Evaluation quantities: GM-Appeal, accuracies, the train/test loss gap and
//! gradient diagnostics of the relaxed objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appeal::{sigmoid, sigmoid_derivative, weight_from_gap, AppealGap, WeightMode};
use crate::client::{fine_tune, ClientProfile, LossBasis};
use crate::error::Result;
use crate::models::{self, ModelSpec};
use crate::params::{compensated_sum, CompensatedSum, ModelParams};
use crate::rng::{Purpose, RngStream};

/// One row of `rounds.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub seed: u64,
    pub t: usize,
    pub algorithm: String,
    pub gm_appeal_seen: f64,
    pub gm_appeal_unseen: f64,
    pub avg_acc_seen: f64,
    pub avg_acc_unseen: f64,
    pub pref_acc_seen: f64,
    pub pref_acc_unseen: f64,
    pub n_participating: usize,
    pub n_eligible: usize,
    pub skipped: bool,
    pub grad_norm: f64,
    pub loss_gap: f64,
}

pub const ROUNDS_CSV_HEADER: &str = "seed,t,algorithm,gm_appeal_seen,gm_appeal_unseen,avg_acc_seen,avg_acc_unseen,pref_acc_seen,pref_acc_unseen,n_participating,n_eligible,skipped,grad_norm,loss_gap";

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

fn per_client<T: Send>(
    profiles: &[ClientProfile],
    f: impl Fn(&ClientProfile) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    profiles.par_iter().map(f).collect()
}

/// Per-client appeal flags of `w`.
pub fn appeal_flags(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec, basis: LossBasis) -> Result<Vec<bool>> {
    per_client(profiles, |p| crate::client::evaluate_appeal(p, spec, w, basis))
}

/// Fraction of clients whose loss on `basis` is strictly below `ρ_k`.
pub fn gm_appeal(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec, basis: LossBasis) -> Result<f64> {
    let flags = appeal_flags(w, profiles, spec, basis)?;
    Ok(flags.iter().filter(|&&a| a).count() as f64 / flags.len().max(1) as f64)
}

/// Mean test accuracy of `w` over clients.
pub fn average_accuracy(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<f64> {
    let accs = per_client(profiles, |p| models::accuracy(spec, w, p.test_batch()))?;
    Ok(mean(&accs))
}

/// Which model a client ends up using and its test accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferredChoice {
    pub global_appeals: bool,
    pub accuracy: f64,
}

/// Per client: test accuracy of the (optionally fine-tuned) global model when
/// it appeals on the train split, otherwise of the solo model.
pub fn preferred_choices(
    w: &ModelParams,
    profiles: &[ClientProfile],
    spec: &ModelSpec,
    fine_tune_steps: usize,
    eta_l: f64,
    batch_size: usize,
    stream: RngStream,
) -> Result<Vec<PreferredChoice>> {
    per_client(profiles, |p| {
        let candidate = fine_tune(
            p,
            spec,
            w,
            fine_tune_steps,
            eta_l,
            batch_size,
            stream.with_client(p.id as u64).with_purpose(Purpose::FineTune),
        )?;
        let global_appeals = crate::client::evaluate_appeal(p, spec, &candidate, LossBasis::TrainLoss)?;
        let accuracy = if global_appeals {
            models::accuracy(spec, &candidate, p.test_batch())?
        } else {
            match p.solo_test_accuracy() {
                Some(a) => a,
                None => models::accuracy(spec, p.solo_model().unwrap_or(w), p.test_batch())?,
            }
        };
        Ok(PreferredChoice { global_appeals, accuracy })
    })
}

pub fn preferred_model_accuracy(
    w: &ModelParams,
    profiles: &[ClientProfile],
    spec: &ModelSpec,
    fine_tune_steps: usize,
    eta_l: f64,
    batch_size: usize,
    stream: RngStream,
) -> Result<f64> {
    let c = preferred_choices(w, profiles, spec, fine_tune_steps, eta_l, batch_size, stream)?;
    Ok(mean(&c.iter().map(|c| c.accuracy).collect::<Vec<_>>()))
}

/// `|mean_k test-loss(w) − mean_k train-loss(w)|`.
pub fn loss_gap_diagnostic(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<f64> {
    let pairs = per_client(profiles, |p| {
        Ok((
            p.loss_on(spec, w, LossBasis::TestLoss)?,
            p.loss_on(spec, w, LossBasis::TrainLoss)?,
        ))
    })?;
    let test: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let train: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok((mean(&test) - mean(&train)).abs())
}

fn gaps_and_grads(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<Vec<(f64, ModelParams)>> {
    per_client(profiles, |p| {
        let rho = p.require_rho()?;
        let (l, g) = models::loss_and_grad(spec, w, p.train_batch())?;
        Ok((l - rho, g))
    })
}

/// Relaxed objective `(1/M) Σ σ(F_k(w) − ρ_k)`.
pub fn maxfl_objective(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<f64> {
    let gaps = per_client(profiles, |p| Ok(p.loss_on(spec, w, LossBasis::TrainLoss)? - p.require_rho()?))?;
    Ok(mean(&gaps.iter().map(|&g| sigmoid(g)).collect::<Vec<_>>()))
}

/// `(1/M) Σ weight_from_gap(gap_k, mode) ∇F_k(w)` with full-split gradients.
/// Under `SigmoidDerivative` this is the gradient of [`maxfl_objective`].
pub fn maxfl_objective_grad(
    w: &ModelParams,
    profiles: &[ClientProfile],
    spec: &ModelSpec,
    mode: WeightMode,
) -> Result<ModelParams> {
    let gg = gaps_and_grads(w, profiles, spec)?;
    let mut acc = CompensatedSum::new(w.dim());
    for (gap, g) in &gg {
        acc.add_scaled(weight_from_gap(AppealGap(*gap), mode), g);
    }
    let mut out = acc.finish();
    out.scale(1.0 / profiles.len().max(1) as f64);
    Ok(out)
}

pub fn maxfl_grad_norm(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec, mode: WeightMode) -> Result<f64> {
    Ok(maxfl_objective_grad(w, profiles, spec, mode)?.norm())
}

/// Pointwise heterogeneity diagnostic: `ratio = (1/M) Σ ‖∇F_k‖² / ‖(1/M) Σ ∇F_k‖²`
/// and the numerator. A vanishing mean gradient gives `ratio = +∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dissimilarity {
    pub ratio: f64,
    pub residual: f64,
}

pub fn dissimilarity_estimate(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<Dissimilarity> {
    let grads = per_client(profiles, |p| models::grad(spec, w, p.train_batch()))?;
    let m = grads.len().max(1) as f64;
    let residual = compensated_sum(grads.iter().map(|g| g.norm_sq())) / m;
    let mut acc = CompensatedSum::new(w.dim());
    for g in &grads {
        acc.add_scaled(1.0 / m, g);
    }
    let mean_sq = acc.finish().norm_sq();
    let ratio = if mean_sq == 0.0 { f64::INFINITY } else { residual / mean_sq };
    Ok(Dissimilarity { ratio, residual })
}

/// Unrelaxed objective: count of clients with `f_k(w) ≥ ρ_k` (lower is better).
pub fn sign_objective(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec, basis: LossBasis) -> Result<usize> {
    Ok(appeal_flags(w, profiles, spec, basis)?.iter().filter(|&&a| !a).count())
}

/// `Σ_k max{ρ_k − f_k(w), 0}`.
pub fn margin_objective(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec, basis: LossBasis) -> Result<f64> {
    let m = per_client(profiles, |p| Ok((p.require_rho()? - p.loss_on(spec, w, basis)?).max(0.0)))?;
    Ok(compensated_sum(m))
}

/// Sum over clients of `q_k ‖∇F_k‖` under `SigmoidDerivative`; the scale
/// against which a vanishing weighted gradient is judged.
pub fn weighted_grad_scale(w: &ModelParams, profiles: &[ClientProfile], spec: &ModelSpec) -> Result<f64> {
    let gg = gaps_and_grads(w, profiles, spec)?;
    Ok(compensated_sum(gg.iter().map(|(gap, g)| sigmoid_derivative(*gap) * g.norm())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::warmup;
    use crate::data::{ClientDataset, SampleStore};
    use crate::models::Batch;

    fn scalar_client(id: usize, train: Vec<f64>, test: Vec<f64>) -> ClientProfile {
        let n = train.len() as u64;
        let store = |v: Vec<f64>, off: u64| SampleStore {
            ids: (off..off + v.len() as u64).collect(),
            batch: Batch::scalar(v),
        };
        ClientProfile::new(
            id,
            ClientDataset {
                train: store(train, 0),
                test: store(test, n),
                split_ratio: 0.5,
                topped_up: 0,
                n_labels: None,
            },
        )
    }

    fn warmed(id: usize, centre: f64) -> ClientProfile {
        let mut c = scalar_client(id, vec![centre - 1.0, centre + 1.0], vec![centre - 1.0, centre + 1.0]);
        warmup(&mut c, &ModelSpec::ScalarQuadratic, 500, 0.1, 2, RngStream::new(0, id as u64, 0, Purpose::Warmup)).unwrap();
        c
    }

    #[test]
    fn gm_appeal_examples() {
        let spec = ModelSpec::ScalarQuadratic;
        // rho ≈ 1 for both; loss(w) = (w - c)^2 + 1
        let ps = vec![warmed(0, 0.0), warmed(1, 10.0)];
        let w = ModelParams(vec![0.0]);
        // client 0 loss = 1 = rho (within warm-up precision): not strictly below
        let a = gm_appeal(&w, &ps, &spec, LossBasis::TrainLoss).unwrap();
        assert!(a <= 0.5);
        assert_eq!(gm_appeal(&ModelParams(vec![5.0]), &ps, &spec, LossBasis::TrainLoss).unwrap(), 0.0);
        assert_eq!(sign_objective(&ModelParams(vec![5.0]), &ps, &spec, LossBasis::TrainLoss).unwrap(), 2);
        assert_eq!(loss_gap_diagnostic(&w, &ps, &spec).unwrap(), 0.0);
    }

    #[test]
    fn objective_in_unit_interval_and_gradient_vanishes_when_saturated() {
        let spec = ModelSpec::ScalarQuadratic;
        let ps = vec![warmed(0, 0.0), warmed(1, 1.0)];
        for w in [-3.0, 0.3, 4.0] {
            let v = maxfl_objective(&ModelParams(vec![w]), &ps, &spec).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
        let far = ModelParams(vec![1e3]);
        let n = maxfl_grad_norm(&far, &ps, &spec, WeightMode::SigmoidDerivative).unwrap();
        assert!(n <= 1e-15 * weighted_grad_scale(&far, &ps, &spec).unwrap().max(1.0));
    }

    #[test]
    fn dissimilarity_cases() {
        let spec = ModelSpec::ScalarQuadratic;
        let same = vec![warmed(0, 0.0), warmed(1, 0.0)];
        let d = dissimilarity_estimate(&ModelParams(vec![3.0]), &same, &spec).unwrap();
        assert!((d.ratio - 1.0).abs() < 1e-12);
        let opposite = vec![warmed(0, -1.0), warmed(1, 1.0)];
        let d = dissimilarity_estimate(&ModelParams(vec![0.0]), &opposite, &spec).unwrap();
        assert!(d.ratio.is_infinite());
        assert!((d.residual - 4.0).abs() < 1e-12);
    }

    #[test]
    fn margin_counts_only_satisfied_clients() {
        let spec = ModelSpec::ScalarQuadratic;
        let ps = vec![warmed(0, 0.0)];
        let rho = ps[0].rho().unwrap();
        assert_eq!(margin_objective(&ModelParams(vec![9.0]), &ps, &spec, LossBasis::TrainLoss).unwrap(), 0.0);
        let m = margin_objective(&ModelParams(vec![0.0]), &ps, &spec, LossBasis::TrainLoss).unwrap();
        assert!((m - (rho - 1.0).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn csv_header_matches_fields() {
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(RoundRecord {
            seed: 1,
            t: 0,
            algorithm: "maxfl".into(),
            gm_appeal_seen: 0.0,
            gm_appeal_unseen: 0.0,
            avg_acc_seen: 0.0,
            avg_acc_unseen: 0.0,
            pref_acc_seen: 0.0,
            pref_acc_unseen: 0.0,
            n_participating: 0,
            n_eligible: 0,
            skipped: false,
            grad_norm: 0.0,
            loss_gap: 0.0,
        })
        .unwrap();
        let s = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(s.lines().next().unwrap(), ROUNDS_CSV_HEADER);
    }
}
