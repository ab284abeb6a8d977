//! Sigmoid math and the appeal indicator shared by every other module.

use serde::{Deserialize, Serialize};

/// Logistic function, evaluated through `exp(-|x|)` so it never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(x)(1 − σ(x))`, computed as `e^{-|x|} / (1 + e^{-|x|})²` so that the
/// result is exactly even in `x` and keeps full relative precision in the tails.
#[inline]
pub fn sigmoid_derivative(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let d = 1.0 + e;
    e / (d * d)
}

/// Loss of the global model minus the client's requirement, `F_k(w) − ρ_k`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AppealGap(pub f64);

impl AppealGap {
    pub fn new(loss: f64, rho: f64) -> Self {
        AppealGap(loss - rho)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Formula that maps an appeal gap to a per-client aggregation weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `σ(gap)(1 − σ(gap))`: the gradient of the sigmoid-relaxed objective.
    #[default]
    SigmoidDerivative,
    /// `σ(gap)`.
    RawSigmoid,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::SigmoidDerivative => "sigmoid_derivative",
            WeightMode::RawSigmoid => "raw_sigmoid",
        }
    }
}

pub fn weight_from_gap(gap: AppealGap, mode: WeightMode) -> f64 {
    match mode {
        WeightMode::SigmoidDerivative => sigmoid_derivative(gap.0),
        WeightMode::RawSigmoid => sigmoid(gap.0),
    }
}

/// A model appeals to a client iff its loss is strictly below the requirement.
#[inline]
pub fn appeals(loss: f64, rho: f64) -> bool {
    loss < rho
}
