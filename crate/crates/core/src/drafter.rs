//! Step-level speculative length control.
//!
//! The adaptive drafter runs a predict-execute-correct loop: before each draft
//! pass it predicts the next confidence of every request from a running
//! average, estimates the goodput of the step that would include that pass,
//! and executes the pass only when the prediction strictly beats the goodput
//! realized so far. After a pass the realized confidences replace the
//! prediction.
//!
//! Fixed-length and confidence-threshold drafting are provided for baselines.

use serde::{Deserialize, Serialize};

use crate::acceptance::ArTable;
use crate::cost_model::{draft_time, BatchProfile, ModelPair};
use crate::error::{Error, Result};
use crate::estimator::{estimate_goodput, GoodputEstimate, SloConfig};
use crate::oracle::{CategoryId, DraftModel, DraftToken};

pub const DEFAULT_MAX_SL: usize = 16;

/// Running estimate of next-pass draft confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistory {
    pub ema: f64,
    pub decay: f64,
}

impl Default for ConfidenceHistory {
    fn default() -> Self {
        Self {
            ema: 0.7,
            decay: 0.1,
        }
    }
}

impl ConfidenceHistory {
    pub fn new(initial: f64, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&initial) {
            return Err(Error::InvalidArgument(format!(
                "initial confidence {initial} outside [0, 1]"
            )));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay {decay} outside (0, 1]"
            )));
        }
        Ok(Self {
            ema: initial,
            decay,
        })
    }

    /// Blend the mean of `observed` into the average. No-op when empty.
    pub fn update(&mut self, observed: &[f64]) {
        if observed.is_empty() {
            return;
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        self.ema = (self.decay * mean + (1.0 - self.decay) * self.ema).clamp(0.0, 1.0);
    }
}

/// Drafted tokens and their cumulative acceptance rates for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftPhaseResult {
    /// Per-request drafted tokens offered to the verifier. Equal lengths for
    /// lockstep drafting; threshold drafting may cut rows short.
    pub drafts: Vec<Vec<DraftToken>>,
    pub table: ArTable,
    /// Modeled time of all executed draft passes.
    pub draft_time: f64,
    /// Number of lockstep draft passes executed.
    pub steps_taken: usize,
    /// Realized goodput estimate after 0, 1, .. `steps_taken` passes
    /// (adaptive drafting only).
    pub goodputs: Vec<GoodputEstimate>,
}

impl DraftPhaseResult {
    pub fn drafted_tokens(&self) -> usize {
        self.drafts.iter().map(Vec::len).sum()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.drafts.iter().flatten().map(|t| t.confidence).collect()
    }

    fn empty(batch_size: usize) -> Self {
        Self {
            drafts: vec![Vec::new(); batch_size],
            table: ArTable::empty(batch_size),
            draft_time: 0.0,
            steps_taken: 0,
            goodputs: Vec::new(),
        }
    }

    fn append(&mut self, tokens: Vec<DraftToken>) -> Result<()> {
        let confs: Vec<f64> = tokens.iter().map(|t| t.confidence).collect();
        self.table.push_confidences(&confs)?;
        for (row, tok) in self.drafts.iter_mut().zip(tokens) {
            row.push(tok);
        }
        self.steps_taken += 1;
        Ok(())
    }
}

fn draft_pass<M: DraftModel + ?Sized>(
    model: &mut M,
    categories: &[CategoryId],
    position: usize,
) -> Result<Vec<DraftToken>> {
    let tokens = model.draft(categories, position)?;
    if tokens.len() != categories.len() {
        return Err(Error::Oracle(format!(
            "draft model returned {} tokens for {} requests",
            tokens.len(),
            categories.len()
        )));
    }
    Ok(tokens)
}

fn check_batch(categories: &[CategoryId], profile: &BatchProfile) -> Result<()> {
    if categories.len() != profile.batch_size() {
        return Err(Error::ShapeMismatch(format!(
            "{} categories for a batch of {}",
            categories.len(),
            profile.batch_size()
        )));
    }
    Ok(())
}

/// Adaptive drafting for one step.
///
/// The first comparison is against the zero-draft configuration, so a pass is
/// only taken when it is predicted to beat plain autoregressive decoding.
pub fn run_draft_phase<M: DraftModel + ?Sized>(
    model: &mut M,
    categories: &[CategoryId],
    profile: &BatchProfile,
    history: &ConfidenceHistory,
    slo: &SloConfig,
    pair: &ModelPair,
    max_sl: usize,
) -> Result<DraftPhaseResult> {
    check_batch(categories, profile)?;
    let bs = profile.batch_size();
    let mut phase = DraftPhaseResult::empty(bs);
    let mut best = estimate_goodput(
        &profile.with_uniform_pending(0),
        &phase.table,
        slo,
        pair,
        0.0,
    )?;
    phase.goodputs.push(best);

    while phase.steps_taken < max_sl {
        let next = phase.steps_taken + 1;
        let mut predicted = phase.table.clone();
        predicted.push_confidences(&vec![history.ema; bs])?;
        let pending = profile.with_uniform_pending(next);
        let sunk = draft_time(&pair.draft, profile, next);
        let guess = estimate_goodput(&pending, &predicted, slo, pair, sunk)?;
        if !guess.beats(&best) {
            break;
        }

        let tokens = draft_pass(model, categories, next)?;
        phase.append(tokens)?;
        best = estimate_goodput(&pending, &phase.table, slo, pair, sunk)?;
        phase.goodputs.push(best);
    }
    phase.draft_time = draft_time(&pair.draft, profile, phase.steps_taken);
    Ok(phase)
}

/// Exactly `k` lockstep passes.
pub fn run_fixed_draft_phase<M: DraftModel + ?Sized>(
    model: &mut M,
    categories: &[CategoryId],
    profile: &BatchProfile,
    pair: &ModelPair,
    k: usize,
) -> Result<DraftPhaseResult> {
    check_batch(categories, profile)?;
    let mut phase = DraftPhaseResult::empty(profile.batch_size());
    for position in 1..=k {
        let tokens = draft_pass(model, categories, position)?;
        phase.append(tokens)?;
    }
    phase.draft_time = draft_time(&pair.draft, profile, k);
    Ok(phase)
}

/// Confidence-threshold drafting.
///
/// A request stops drafting at the first token whose confidence falls below
/// `threshold`; that token is still offered for verification. The batch keeps
/// drafting in lockstep while any request is active, up to `cap` passes, and
/// every pass is charged for the full batch.
pub fn run_threshold_draft_phase<M: DraftModel + ?Sized>(
    model: &mut M,
    categories: &[CategoryId],
    profile: &BatchProfile,
    pair: &ModelPair,
    threshold: f64,
    cap: usize,
) -> Result<DraftPhaseResult> {
    check_batch(categories, profile)?;
    let bs = profile.batch_size();
    let mut phase = DraftPhaseResult::empty(bs);
    let mut active = vec![true; bs];
    while phase.steps_taken < cap && active.iter().any(|&a| a) {
        let position = phase.steps_taken + 1;
        let tokens = draft_pass(model, categories, position)?;
        for (i, tok) in tokens.into_iter().enumerate() {
            if active[i] {
                phase.table.push(i, tok.confidence)?;
                phase.drafts[i].push(tok);
                active[i] = tok.confidence >= threshold;
            }
        }
        phase.steps_taken += 1;
    }
    phase.draft_time = draft_time(&pair.draft, profile, phase.steps_taken);
    Ok(phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::PerformanceCoefficients;
    use crate::oracle::{CategoryProcess, ConfidenceDist, OracleConfig, SyntheticOracle};

    fn constant_oracle(p: f64) -> SyntheticOracle {
        SyntheticOracle::new(OracleConfig {
            categories: vec![CategoryProcess {
                name: "c".into(),
                dist: ConfidenceDist::Fixed { p },
                drift: 0.0,
            }],
            miscalibration: 0.0,
            seed: 1,
        })
        .unwrap()
    }

    fn pair() -> ModelPair {
        ModelPair {
            draft: PerformanceCoefficients::new(0.0, 0.0, 1.0).unwrap(),
            target: PerformanceCoefficients::new(0.0, 1.0, 10.0).unwrap(),
        }
    }

    fn loose() -> SloConfig {
        SloConfig {
            tpot_limit_ms: 1e9,
            ..SloConfig::default()
        }
    }

    #[test]
    fn history_update_examples() {
        let mut h = ConfidenceHistory::new(0.2, 1.0).unwrap();
        h.update(&[0.6, 0.8]);
        assert!((h.ema - 0.7).abs() < 1e-12);

        let mut h = ConfidenceHistory::new(0.4, 0.5).unwrap();
        h.update(&[0.8]);
        assert!((h.ema - 0.6).abs() < 1e-12);

        h.update(&[]);
        assert!((h.ema - 0.6).abs() < 1e-12);

        assert!(ConfidenceHistory::new(0.5, 0.0).is_err());
        assert!(ConfidenceHistory::new(1.5, 0.5).is_err());
    }

    #[test]
    fn zero_history_never_drafts() {
        let mut oracle = constant_oracle(1.0);
        let history = ConfidenceHistory::new(0.0, 0.1).unwrap();
        let profile = BatchProfile::uniform(3, 100).unwrap();
        let phase = run_draft_phase(
            &mut oracle,
            &[CategoryId(0); 3],
            &profile,
            &history,
            &loose(),
            &pair(),
            16,
        )
        .unwrap();
        assert_eq!(phase.steps_taken, 0);
        assert_eq!(phase.draft_time, 0.0);
    }

    #[test]
    fn certain_acceptance_stops_at_throughput_peak() {
        // Per request: g(s) = s + 1, h(s) = 1*s + 1*(s+1) + 10 = 2s + 11.
        // f(s) = (s+1)/(2s+11) increases forever, so the cap binds.
        let mut oracle = constant_oracle(1.0);
        let history = ConfidenceHistory::new(1.0, 0.1).unwrap();
        let profile = BatchProfile::uniform(1, 100).unwrap();
        let phase = run_draft_phase(
            &mut oracle,
            &[CategoryId(0)],
            &profile,
            &history,
            &loose(),
            &pair(),
            5,
        )
        .unwrap();
        assert_eq!(phase.steps_taken, 5);
        assert!(phase.goodputs.windows(2).all(|w| w[1].beats(&w[0])));
    }

    #[test]
    fn tight_gate_blocks_drafting() {
        let mut oracle = constant_oracle(1.0);
        let history = ConfidenceHistory::new(1.0, 0.1).unwrap();
        let profile = BatchProfile::uniform(1, 100).unwrap();
        // autoregressive = 11 ms, one pass + verify = 1 + 12 = 13 ms
        let slo = SloConfig {
            tpot_limit_ms: 12.0,
            ..SloConfig::default()
        };
        let phase = run_draft_phase(
            &mut oracle,
            &[CategoryId(0)],
            &profile,
            &history,
            &slo,
            &pair(),
            16,
        )
        .unwrap();
        assert_eq!(phase.steps_taken, 0);
    }

    #[test]
    fn fixed_drafting_is_lockstep() {
        let mut oracle = SyntheticOracle::new(OracleConfig::default()).unwrap();
        let cats: Vec<_> = (0..4).map(CategoryId).collect();
        let profile = BatchProfile::uniform(4, 64).unwrap();
        let phase = run_fixed_draft_phase(&mut oracle, &cats, &profile, &pair(), 3).unwrap();
        assert_eq!(phase.table.row_lens(), vec![3; 4]);
        assert_eq!(phase.draft_time, 3.0);
        assert!(phase.table.validate().is_ok());
    }

    #[test]
    fn threshold_drafting_cuts_rows() {
        let mut oracle = constant_oracle(0.3);
        let profile = BatchProfile::uniform(2, 64).unwrap();
        let phase =
            run_threshold_draft_phase(&mut oracle, &[CategoryId(0); 2], &profile, &pair(), 0.4, 8)
                .unwrap();
        assert_eq!(phase.steps_taken, 1);
        assert_eq!(phase.table.row_lens(), vec![1, 1]);

        let mut oracle = constant_oracle(0.9);
        let phase =
            run_threshold_draft_phase(&mut oracle, &[CategoryId(0); 2], &profile, &pair(), 0.4, 8)
                .unwrap();
        assert_eq!(phase.steps_taken, 8);
    }

    #[test]
    fn category_count_must_match_batch() {
        let mut oracle = constant_oracle(0.5);
        let profile = BatchProfile::uniform(2, 64).unwrap();
        let res = run_draft_phase(
            &mut oracle,
            &[CategoryId(0)],
            &profile,
            &ConfidenceHistory::default(),
            &loose(),
            &pair(),
            4,
        );
        assert!(matches!(res, Err(Error::ShapeMismatch(_))));
    }
}
