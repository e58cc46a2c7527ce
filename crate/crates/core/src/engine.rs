//! Continuous-batching serving simulation.
//!
//! Requests join the batch at step boundaries. The simulated clock advances by
//! the modeled time of each decode step. Prefill of newly admitted requests is
//! charged to the clock just before the step that admits them.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost_model::{forward_time, verify_time, BatchProfile, ModelPair};
use crate::drafter::{
    run_draft_phase, run_fixed_draft_phase, run_threshold_draft_phase, ConfidenceHistory,
    DraftPhaseResult, DEFAULT_MAX_SL,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate_goodput, SloConfig};
use crate::metrics::{summarize, RunSummary};
use crate::oracle::{CategoryId, OracleConfig, SyntheticOracle};
use crate::verifier::{eliminate, verify_prefixes};
use crate::workload::TraceEvent;

pub const DEFAULT_MAX_BATCH: usize = 256;

/// Speculation policy driving each decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    Autoregressive,
    FixedSl(usize),
    Threshold { threshold: f64, cap: usize },
    Adaptive,
    AdaptiveDrafterOnly,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::FixedSl(0) => Err(Error::Config(
                "fixed speculative length must be >= 1".into(),
            )),
            Policy::Threshold { threshold, cap }
                if !(threshold > 0.0 && threshold < 1.0) || cap == 0 =>
            {
                Err(Error::Config(format!(
                    "threshold policy needs 0 < tau < 1 and cap >= 1, got {self}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn uses_history(&self) -> bool {
        matches!(self, Policy::Adaptive | Policy::AdaptiveDrafterOnly)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Autoregressive => write!(f, "autoregressive"),
            Policy::FixedSl(k) => write!(f, "fixed:{k}"),
            Policy::Threshold { threshold, cap } => write!(f, "threshold:{threshold}:{cap}"),
            Policy::Adaptive => write!(f, "adaptive"),
            Policy::AdaptiveDrafterOnly => write!(f, "adaptive-drafter-only"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized policy `{s}`"));
        let mut parts = s.trim().split(':');
        let policy = match parts.next().unwrap_or("") {
            "autoregressive" | "ar" => Policy::Autoregressive,
            "adaptive" => Policy::Adaptive,
            "adaptive-drafter-only" | "drafter-only" => Policy::AdaptiveDrafterOnly,
            "fixed" => Policy::FixedSl(parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?),
            "threshold" => {
                let threshold = parts.next().unwrap_or("0.4").parse().map_err(|_| bad())?;
                let cap = parts.next().unwrap_or("8").parse().map_err(|_| bad())?;
                Policy::Threshold { threshold, cap }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        policy.validate()?;
        Ok(policy)
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub pair: ModelPair,
    pub slo: SloConfig,
    pub max_batch_size: usize,
    pub max_sl: usize,
    pub history: ConfidenceHistory,
    pub oracle: OracleConfig,
    /// Record full acceptance-rate rows in every step record.
    pub log_ar_rows: bool,
}

impl EngineConfig {
    pub fn new(pair: ModelPair, oracle: OracleConfig) -> Self {
        Self {
            pair,
            slo: SloConfig::default(),
            max_batch_size: DEFAULT_MAX_BATCH,
            max_sl: DEFAULT_MAX_SL,
            history: ConfidenceHistory::default(),
            oracle,
            log_ar_rows: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pair.validate()?;
        self.slo.validate()?;
        self.oracle.validate()?;
        ConfidenceHistory::new(self.history.ema, self.history.decay)?;
        if self.max_batch_size == 0 {
            return Err(Error::Config("max_batch_size must be >= 1".into()));
        }
        if self.max_sl == 0 {
            return Err(Error::Config("max_sl must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub category: String,
    pub category_id: CategoryId,
    pub arrival_ms: f64,
    pub input_len: usize,
    pub target_output_len: usize,
    pub generated: usize,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
}

impl Request {
    pub fn context_len(&self) -> usize {
        self.input_len + self.generated
    }

    pub fn remaining(&self) -> usize {
        self.target_output_len - self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.finish_time.is_some()
    }
}

/// Audit trail of one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Clock at the start of the decode step, after any prefill charge.
    pub sim_time: f64,
    pub prefill_time: f64,
    pub admitted: usize,
    pub batch_size: usize,
    pub realized_sl: usize,
    pub drafted_tokens: usize,
    pub eliminated_tokens: usize,
    pub verified_tokens: usize,
    pub accepted_draft_tokens: usize,
    /// Accepted draft tokens plus one bonus token per request.
    pub accepted_tokens: usize,
    /// Tokens credited to requests after clamping at their output length.
    pub emitted_tokens: usize,
    pub expected_tokens: f64,
    pub step_time: f64,
    pub goodput_estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_prune_goodput: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub committed_goodputs: Vec<f64>,
    pub kept_lens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_rows: Option<Vec<Vec<f64>>>,
    pub slo_violated: bool,
}

pub struct Engine {
    config: EngineConfig,
    policy: Policy,
    oracle: SyntheticOracle,
    history: ConfidenceHistory,
    now: f64,
    queue: VecDeque<Request>,
    running: Vec<Request>,
    finished: Vec<Request>,
    steps: Vec<StepRecord>,
}

impl Engine {
    pub fn new(config: EngineConfig, policy: Policy, trace: &[TraceEvent]) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let mut events: Vec<&TraceEvent> = trace.iter().collect();
        events.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        let queue = events
            .into_iter()
            .enumerate()
            .map(|(id, ev)| {
                if ev.input_tokens == 0 || ev.output_tokens == 0 {
                    return Err(Error::Config(format!(
                        "request {id} has an empty input or output"
                    )));
                }
                Ok(Request {
                    id,
                    category: ev.category.clone(),
                    category_id: config.oracle.category_id(&ev.category)?,
                    arrival_ms: ev.arrival_ms,
                    input_len: ev.input_tokens,
                    target_output_len: ev.output_tokens,
                    generated: 0,
                    first_token_time: None,
                    finish_time: None,
                })
            })
            .collect::<Result<VecDeque<_>>>()?;
        let oracle = SyntheticOracle::new(config.oracle.clone())?;
        let history = config.history;
        Ok(Self {
            config,
            policy,
            oracle,
            history,
            now: 0.0,
            queue,
            running: Vec::new(),
            finished: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn running(&self) -> &[Request] {
        &self.running
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn finished(&self) -> &[Request] {
        &self.finished
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn history(&self) -> &ConfidenceHistory {
        &self.history
    }

    /// Move every arrived request into the running batch, up to the batch cap.
    ///
    /// Returns the number admitted and their total prefill time. The clock is
    /// not advanced here.
    pub fn admit(&mut self) -> (usize, f64) {
        let mut admitted = 0;
        let mut prefill = 0.0;
        while self.running.len() < self.config.max_batch_size {
            match self.queue.front() {
                Some(r) if r.arrival_ms <= self.now => {
                    let r = self.queue.pop_front().expect("front exists");
                    prefill += forward_time(&self.config.pair.target, 0.0, r.input_len as f64);
                    self.running.push(r);
                    admitted += 1;
                }
                _ => break,
            }
        }
        (admitted, prefill)
    }

    /// Admit waiting requests, then run one decode step.
    ///
    /// Returns `None` once every request has finished. An idle clock jumps
    /// straight to the next arrival.
    pub fn advance(&mut self) -> Result<Option<StepRecord>> {
        if self.running.is_empty() {
            match self.queue.front() {
                Some(next) => self.now = self.now.max(next.arrival_ms),
                None => return Ok(None),
            }
        }
        let (admitted, prefill) = self.admit();
        self.now += prefill;
        let record = self.step(admitted, prefill)?;
        Ok(Some(record))
    }

    fn draft(
        &mut self,
        categories: &[CategoryId],
        profile: &BatchProfile,
    ) -> Result<DraftPhaseResult> {
        let pair = &self.config.pair;
        match self.policy {
            Policy::Autoregressive => {
                run_fixed_draft_phase(&mut self.oracle, categories, profile, pair, 0)
            }
            Policy::FixedSl(k) => {
                run_fixed_draft_phase(&mut self.oracle, categories, profile, pair, k)
            }
            Policy::Threshold { threshold, cap } => run_threshold_draft_phase(
                &mut self.oracle,
                categories,
                profile,
                pair,
                threshold,
                cap,
            ),
            Policy::Adaptive | Policy::AdaptiveDrafterOnly => run_draft_phase(
                &mut self.oracle,
                categories,
                profile,
                &self.history,
                &self.config.slo,
                pair,
                self.config.max_sl,
            ),
        }
    }

    /// One decode step over the current running batch.
    pub fn step(&mut self, admitted: usize, prefill_time: f64) -> Result<StepRecord> {
        if self.running.is_empty() {
            return Err(Error::InvalidArgument("step on an empty batch".into()));
        }
        let slo = self.config.slo;
        let pair = self.config.pair;
        let categories: Vec<CategoryId> = self.running.iter().map(|r| r.category_id).collect();
        let profile =
            BatchProfile::with_contexts(self.running.iter().map(Request::context_len).collect())?;

        let phase = self.draft(&categories, &profile)?;
        let (kept, pre_prune_goodput, committed_goodputs) = if self.policy == Policy::Adaptive {
            let elim = eliminate(&profile, &phase, &slo, &pair)?;
            let committed = elim.committed.iter().map(|g| g.score()).collect();
            (elim.kept, Some(elim.pre_goodput.score()), committed)
        } else {
            (phase.table.row_lens(), None, Vec::new())
        };
        let verified = verify_prefixes(&mut self.oracle, &phase.drafts, &kept)?;

        let final_profile = profile.with_pending(kept.clone())?;
        let final_table = phase.table.truncated(&kept);
        let estimate =
            estimate_goodput(&final_profile, &final_table, &slo, &pair, phase.draft_time)?;
        let step_time = phase.draft_time + verify_time(&pair.target, &final_profile);
        let start = self.now;
        self.now += step_time;

        let accepted_draft_tokens: usize = verified.outcome.accepted_counts.iter().sum();
        let mut emitted_tokens = 0;
        for (req, out) in self.running.iter_mut().zip(&verified.outputs) {
            let credit = out.len().min(req.remaining());
            req.generated += credit;
            emitted_tokens += credit;
            if req.first_token_time.is_none() {
                req.first_token_time = Some(self.now);
            }
            if req.generated == req.target_output_len {
                req.finish_time = Some(self.now);
            }
        }
        let (done, still): (Vec<_>, Vec<_>) =
            self.running.drain(..).partition(Request::is_finished);
        self.running = still;
        self.finished.extend(done);

        if self.policy.uses_history() {
            self.history.update(&phase.confidences());
        }

        let bs = profile.batch_size();
        let drafted_tokens = phase.drafted_tokens();
        let verified_tokens: usize = kept.iter().sum();
        let record = StepRecord {
            step_index: self.steps.len(),
            sim_time: start,
            prefill_time,
            admitted,
            batch_size: bs,
            realized_sl: phase.steps_taken,
            drafted_tokens,
            eliminated_tokens: drafted_tokens - verified_tokens,
            verified_tokens,
            accepted_draft_tokens,
            accepted_tokens: accepted_draft_tokens + bs,
            emitted_tokens,
            expected_tokens: estimate.expected_tokens,
            step_time,
            goodput_estimate: estimate.score(),
            pre_prune_goodput,
            committed_goodputs,
            kept_lens: kept,
            ar_rows: self.config.log_ar_rows.then(|| final_table.rows().to_vec()),
            slo_violated: step_time > slo.scaled_tpot(),
        };
        self.steps.push(record.clone());
        Ok(record)
    }

    /// Run to completion.
    pub fn run(mut self) -> Result<(Vec<Request>, Vec<StepRecord>)> {
        while self.advance()?.is_some() {}
        let mut finished = self.finished;
        finished.sort_by_key(|r| r.id);
        Ok((finished, self.steps))
    }
}

/// Simulate `trace` under `policy` and summarize the run.
pub fn run_trace(
    trace: &[TraceEvent],
    policy: Policy,
    config: &EngineConfig,
    label: &str,
) -> Result<RunSummary> {
    if trace.is_empty() {
        return Err(Error::Config("trace is empty".into()));
    }
    let engine = Engine::new(config.clone(), policy, trace)?;
    let (requests, steps) = engine.run()?;
    Ok(summarize(label, policy, config, trace, &requests, steps))
}
