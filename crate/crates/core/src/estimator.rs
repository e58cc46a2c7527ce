//! SLO-gated goodput estimation and the throughput-vs-length analysis tools.
//!
//! Goodput is expected accepted tokens divided by the modeled step time. A step
//! whose modeled time exceeds the scaled TPOT limit is rejected outright,
//! except for the zero-draft configuration which is always admissible since
//! there is nothing cheaper to fall back to.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::acceptance::{expected_accepted, ArTable};
use crate::cost_model::{verify_time, BatchProfile, ModelPair, QuadraticTimeCoeffs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConfig {
    pub ttft_limit_ms: f64,
    pub tpot_limit_ms: f64,
    pub scale: f64,
}

impl Default for SloConfig {
    fn default() -> Self {
        Self {
            ttft_limit_ms: 200.0,
            tpot_limit_ms: 30.0,
            scale: 1.0,
        }
    }
}

impl SloConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ttft_limit_ms", self.ttft_limit_ms),
            ("tpot_limit_ms", self.tpot_limit_ms),
            ("scale", self.scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "SLO {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_scale(self, scale: f64) -> Self {
        Self { scale, ..self }
    }

    pub fn scaled_ttft(&self) -> f64 {
        self.ttft_limit_ms * self.scale
    }

    pub fn scaled_tpot(&self) -> f64 {
        self.tpot_limit_ms * self.scale
    }
}

/// Estimated goodput of one hypothetical step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodputEstimate {
    /// Tokens per ms; `None` when the step violates the TPOT gate.
    pub value: Option<f64>,
    pub step_time: f64,
    pub expected_tokens: f64,
}

impl GoodputEstimate {
    pub fn is_rejected(&self) -> bool {
        self.value.is_none()
    }

    /// Rejected estimates rank below every admissible one.
    pub fn score(&self) -> f64 {
        self.value.unwrap_or(f64::NEG_INFINITY)
    }

    /// Strict improvement over `other`.
    pub fn beats(&self, other: &GoodputEstimate) -> bool {
        self.score() > other.score()
    }
}

/// Goodput of verifying `profile.pending_drafts` after `sunk_draft_time` ms of
/// drafting. `table` rows must match the pending counts.
pub fn estimate_goodput(
    profile: &BatchProfile,
    table: &ArTable,
    slo: &SloConfig,
    pair: &ModelPair,
    sunk_draft_time: f64,
) -> Result<GoodputEstimate> {
    if table.batch_size() != profile.batch_size() {
        return Err(Error::ShapeMismatch(format!(
            "table has {} rows, batch has {} requests",
            table.batch_size(),
            profile.batch_size()
        )));
    }
    if let Some(i) = table
        .row_lens()
        .iter()
        .zip(profile.pending_drafts())
        .position(|(a, b)| a != b)
    {
        return Err(Error::ShapeMismatch(format!(
            "request {i}: {} acceptance rates vs {} pending drafts",
            table.row_lens()[i],
            profile.pending_drafts()[i]
        )));
    }
    if !(sunk_draft_time >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sunk draft time {sunk_draft_time} < 0"
        )));
    }
    let step_time = sunk_draft_time + verify_time(&pair.target, profile);
    let expected_tokens = expected_accepted(table);
    let speculative = profile.total_pending() > 0;
    let value = if speculative && step_time > slo.scaled_tpot() {
        None
    } else {
        Some(expected_tokens / step_time)
    };
    Ok(GoodputEstimate {
        value,
        step_time,
        expected_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveShape {
    RisesThenFalls,
    MonotoneDecreasing,
}

/// Shape of `f(s) = g(s) / h(s)` from the sign of `f'(0)`, i.e. of
/// `g'(0) * c - b`. A zero derivative counts as decreasing.
pub fn curve_direction(quad: &QuadraticTimeCoeffs, g_prime_0: f64) -> CurveShape {
    if g_prime_0 * quad.c - quad.b > 0.0 {
        CurveShape::RisesThenFalls
    } else {
        CurveShape::MonotoneDecreasing
    }
}

fn validate_g(g_samples: &[f64], max_sl: usize) -> Result<()> {
    if g_samples.len() <= max_sl {
        return Err(Error::InvalidArgument(format!(
            "need {} cumulative samples, got {}",
            max_sl + 1,
            g_samples.len()
        )));
    }
    if g_samples[0] != 1.0 {
        return Err(Error::InvalidArgument("g(0) must be 1".into()));
    }
    Ok(())
}

/// Throughput `g(s) / h(s)` for every `s` in `0..=max_sl`.
pub fn throughput_curve(g_samples: &[f64], quad: &QuadraticTimeCoeffs, max_sl: usize) -> Vec<f64> {
    (0..=max_sl)
        .map(|s| g_samples[s] / quad.eval(s as f64))
        .collect()
}

/// Exhaustive argmax of `g(s) / h(s)` over `0..=max_sl`, smallest index on ties.
pub fn brute_force_optimal_sl(
    g_samples: &[f64],
    quad: &QuadraticTimeCoeffs,
    max_sl: usize,
) -> Result<usize> {
    validate_g(g_samples, max_sl)?;
    let curve = throughput_curve(g_samples, quad, max_sl);
    let mut best = 0;
    for (s, &f) in curve.iter().enumerate() {
        if f.partial_cmp(&curve[best]) == Some(Ordering::Greater) {
            best = s;
        }
    }
    Ok(best)
}

/// First `s` whose successor does not strictly improve throughput.
pub fn greedy_optimal_sl(
    g_samples: &[f64],
    quad: &QuadraticTimeCoeffs,
    max_sl: usize,
) -> Result<usize> {
    validate_g(g_samples, max_sl)?;
    let curve = throughput_curve(g_samples, quad, max_sl);
    Ok(curve
        .windows(2)
        .position(|w| !(w[1] > w[0]))
        .unwrap_or(max_sl))
}

/// True when `curve` never has a strict local minimum strictly between two
/// points it rose into, i.e. it rises (weakly) and then falls (weakly).
pub fn is_unimodal(curve: &[f64]) -> bool {
    let mut falling = false;
    for w in curve.windows(2) {
        if w[1] < w[0] {
            falling = true;
        } else if w[1] > w[0] && falling {
            return false;
        }
    }
    true
}
