//! Simulation of goodput-driven adaptive speculative decoding in a batched
//! LLM serving engine.
//!
//! A synthetic draft/target oracle stands in for real models. The engine
//! replays request traces through a discrete-event serving loop and picks the
//! speculation length of every step online.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN

pub mod acceptance;
pub mod config;
pub mod cost_model;
pub mod drafter;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod metrics;
pub mod oracle;
pub mod profiler;
pub mod validation;
pub mod verifier;
pub mod workload;

pub use acceptance::{expected_accepted, extend_ar, ArTable};
pub use config::{ExperimentConfig, ResolvedExperiment};
pub use cost_model::{
    draft_time, forward_time, quadratic_coeffs, spec_step_time, verify_time, BatchProfile,
    ModelPair, PerformanceCoefficients, QuadraticTimeCoeffs,
};
pub use drafter::{run_draft_phase, ConfidenceHistory, DraftPhaseResult};
pub use engine::{run_trace, Engine, EngineConfig, Policy, Request, StepRecord};
pub use error::{Error, Result};
pub use estimator::{estimate_goodput, GoodputEstimate, SloConfig};
pub use metrics::{speedup, Aggregates, RunSummary};
pub use oracle::{CategoryId, DraftModel, OracleConfig, SyntheticOracle, TargetModel};
pub use profiler::{fit_coefficients, CoefficientFit, TimingSample};
pub use verifier::{eliminate, prune_and_verify, EliminationResult};
pub use workload::{parse_trace, synth_trace, TraceEvent};
