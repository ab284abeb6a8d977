//! Deterministic federated-learning simulator built around appeal-weighted
//! aggregation, with baselines, flexible participation, Byzantine clients and
//! a numerical toolkit for the two/three-client mean-estimation problem.

pub mod appeal;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod meanest;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod server;

pub use appeal::{appeals, sigmoid, weight_from_gap, AppealGap, WeightMode};
pub use client::{ClientProfile, ClientUpdate, LocalConfig, LossBasis};
pub use config::{ExperimentConfig, MeanEstConfig};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_meanest, Simulation};
pub use metrics::RoundRecord;
pub use models::{Batch, ModelSpec, Targets};
pub use params::ModelParams;
pub use rng::{Purpose, RngStream};
pub use server::{AggregatorSpec, ParticipationPolicy};
