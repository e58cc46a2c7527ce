//! Forward-pass execution time and the per-step cost of speculation.
//!
//! A forward pass over `n_context` context tokens and `n_batch` batch tokens
//! costs `alpha * n_context + gamma * n_batch + delta` milliseconds. Drafting
//! runs one pass per speculative position; each pass adds one context token per
//! request. Verification is a single target pass over every pending draft token
//! plus the bonus position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear forward-pass coefficients for one model on one platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCoefficients {
    /// ms per context token.
    pub alpha: f64,
    /// ms per batch token.
    pub gamma: f64,
    /// Fixed ms per forward pass.
    pub delta: f64,
}

impl PerformanceCoefficients {
    pub fn new(alpha: f64, gamma: f64, delta: f64) -> Result<Self> {
        let coeffs = Self {
            alpha,
            gamma,
            delta,
        };
        coeffs.validate()?;
        Ok(coeffs)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "coefficient {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Draft and target coefficients used together by every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub draft: PerformanceCoefficients,
    pub target: PerformanceCoefficients,
}

impl ModelPair {
    pub fn validate(&self) -> Result<()> {
        self.draft.validate()?;
        self.target.validate()
    }
}

/// Shape of the running batch as seen by the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProfile {
    context_lens: Vec<usize>,
    pending_drafts: Vec<usize>,
}

impl BatchProfile {
    pub fn new(context_lens: Vec<usize>, pending_drafts: Vec<usize>) -> Result<Self> {
        if context_lens.is_empty() {
            return Err(Error::InvalidArgument("batch must not be empty".into()));
        }
        if context_lens.len() != pending_drafts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} context lengths vs {} pending counts",
                context_lens.len(),
                pending_drafts.len()
            )));
        }
        if context_lens.contains(&0) {
            return Err(Error::InvalidArgument(
                "context lengths must be >= 1".into(),
            ));
        }
        Ok(Self {
            context_lens,
            pending_drafts,
        })
    }

    /// Profile with nothing pending verification.
    pub fn with_contexts(context_lens: Vec<usize>) -> Result<Self> {
        let n = context_lens.len();
        Self::new(context_lens, vec![0; n])
    }

    /// `batch_size` requests that all share one context length.
    pub fn uniform(batch_size: usize, context_len: usize) -> Result<Self> {
        Self::with_contexts(vec![context_len; batch_size])
    }

    pub fn batch_size(&self) -> usize {
        self.context_lens.len()
    }

    pub fn context_lens(&self) -> &[usize] {
        &self.context_lens
    }

    pub fn pending_drafts(&self) -> &[usize] {
        &self.pending_drafts
    }

    pub fn total_context(&self) -> usize {
        self.context_lens.iter().sum()
    }

    pub fn avg_context(&self) -> f64 {
        self.total_context() as f64 / self.batch_size() as f64
    }

    pub fn total_pending(&self) -> usize {
        self.pending_drafts.iter().sum()
    }

    /// Same contexts, new pending counts.
    pub fn with_pending(&self, pending_drafts: Vec<usize>) -> Result<Self> {
        Self::new(self.context_lens.clone(), pending_drafts)
    }

    /// Same contexts, every request pending `sl` drafts.
    pub fn with_uniform_pending(&self, sl: usize) -> Self {
        Self {
            context_lens: self.context_lens.clone(),
            pending_drafts: vec![sl; self.batch_size()],
        }
    }
}

/// Per-request step time `h(s) = a*s^2 + b*s + c` for uniform contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTimeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticTimeCoeffs {
    pub fn eval(&self, s: f64) -> f64 {
        (self.a * s + self.b) * s + self.c
    }

    pub fn derivative(&self, s: f64) -> f64 {
        2.0 * self.a * s + self.b
    }
}

pub fn forward_time(coeffs: &PerformanceCoefficients, n_context: f64, n_batch: f64) -> f64 {
    coeffs.alpha * n_context + coeffs.gamma * n_batch + coeffs.delta
}

/// Time for `passes` lockstep draft passes over the whole batch.
///
/// Pass `i` (1-based) sees `total_context + batch_size * (i - 1)` context
/// tokens and `batch_size` batch tokens.
pub fn draft_time(draft: &PerformanceCoefficients, profile: &BatchProfile, passes: usize) -> f64 {
    let bs = profile.batch_size() as f64;
    let ctx = profile.total_context() as f64;
    let k = passes as f64;
    // sum_{i=1..k} (ctx + bs*(i-1)) = k*ctx + bs*k*(k-1)/2
    let context_sum = k * ctx + bs * k * (k - 1.0) / 2.0;
    draft.alpha * context_sum + draft.gamma * bs * k + draft.delta * k
}

/// Time of the single verification pass over the profile's pending drafts.
///
/// Request `r` contributes `pending + 1` batch tokens and
/// `sum_{i=0..=pending} (context_len + i)` context tokens.
pub fn verify_time(target: &PerformanceCoefficients, profile: &BatchProfile) -> f64 {
    let mut n_context = 0.0;
    let mut n_batch = 0.0;
    for (&ctx, &pending) in profile.context_lens.iter().zip(&profile.pending_drafts) {
        let positions = (pending + 1) as f64;
        n_context += positions * ctx as f64 + positions * (positions - 1.0) / 2.0;
        n_batch += positions;
    }
    forward_time(target, n_context, n_batch)
}

/// Full step time for `sl` lockstep draft passes followed by verification of
/// all `sl` drafts for every request.
pub fn spec_step_time(pair: &ModelPair, profile: &BatchProfile, sl: usize) -> f64 {
    draft_time(&pair.draft, profile, sl)
        + verify_time(&pair.target, &profile.with_uniform_pending(sl))
}

/// Closed-form per-request step-time quadratic for a batch of `batch_size`
/// requests with mean context `avg_context`.
pub fn quadratic_coeffs(
    pair: &ModelPair,
    avg_context: f64,
    batch_size: usize,
) -> QuadraticTimeCoeffs {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let (d, v) = (&pair.draft, &pair.target);
    let bs = batch_size as f64;
    QuadraticTimeCoeffs {
        a: (d.alpha + v.alpha) / 2.0,
        b: d.alpha * avg_context + v.alpha * avg_context - d.alpha / 2.0
            + v.alpha / 2.0
            + d.gamma
            + v.gamma
            + d.delta / bs,
        c: v.alpha * avg_context + v.gamma + v.delta / bs,
    }
}
