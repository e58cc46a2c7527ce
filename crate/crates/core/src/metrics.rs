//! Run summaries and the report files built from them.
//!
//! Files written per run (`<label>` is the run label):
//!
//! * `<label>.summary.json` - [`RunSummary`] without the step log
//! * `<label>.steps.jsonl` - one [`StepRecord`] per line
//! * `<label>.timeseries.csv` - `step_index,sim_time_ms,batch_size,realized_sl,verified_tokens,step_time_ms`
//!
//! Files written for a set of runs sharing a trace:
//!
//! * `comparison.csv` - per-run speedup against the autoregressive run and attainment (rows sorted by trace, policy, scale)
//! * `attainment.csv` - attainment per policy for each SLO scale
//! * `speedup_by_batch.csv` - per-token latency speedup bucketed by batch size

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, Policy, Request, StepRecord};
use crate::error::{Error, Result};
use crate::estimator::SloConfig;
use crate::workload::TraceEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: usize,
    pub category: String,
    pub arrival_ms: f64,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub e2e_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub requests: usize,
    pub steps: usize,
    pub total_sim_time_ms: f64,
    pub mean_e2e_ms: f64,
    pub median_e2e_ms: f64,
    pub mean_ttft_ms: f64,
    pub mean_tpot_ms: f64,
    pub mean_batch_size: f64,
    pub mean_realized_sl: f64,
    /// Draft tokens submitted for verification per request-step.
    pub mean_draft_tokens: f64,
    pub mean_accepted_draft_tokens: f64,
    /// Accepted over verified draft tokens; bonus tokens excluded.
    pub acceptance_rate: f64,
    pub eliminated_tokens: usize,
    pub slo_violation_steps: usize,
    pub speculative_violation_steps: usize,
    pub slo_attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub policy: Policy,
    pub seed: u64,
    pub trace_fingerprint: String,
    pub slo: SloConfig,
    pub aggregates: Aggregates,
    pub requests: Vec<RequestMetrics>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

/// FNV-1a over the canonical CSV rendering of the trace.
pub fn trace_fingerprint(trace: &[TraceEvent]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for ev in trace {
        let line = format!(
            "{},{},{},{}\n",
            ev.arrival_ms, ev.category, ev.input_tokens, ev.output_tokens
        );
        for b in line.bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn request_metrics(r: &Request) -> RequestMetrics {
    let first = r.first_token_time.unwrap_or(f64::NAN);
    let finish = r.finish_time.unwrap_or(f64::NAN);
    let tpot = if r.generated > 1 {
        (finish - first) / (r.generated - 1) as f64
    } else {
        0.0
    };
    RequestMetrics {
        id: r.id,
        category: r.category.clone(),
        arrival_ms: r.arrival_ms,
        input_tokens: r.input_len,
        output_tokens: r.target_output_len,
        ttft_ms: first - r.arrival_ms,
        tpot_ms: tpot,
        e2e_ms: finish - r.arrival_ms,
    }
}

fn attainment(requests: &[RequestMetrics], slo: &SloConfig) -> f64 {
    if requests.is_empty() {
        return 1.0;
    }
    let ok = requests
        .iter()
        .filter(|r| r.ttft_ms <= slo.scaled_ttft() && r.tpot_ms <= slo.scaled_tpot())
        .count();
    ok as f64 / requests.len() as f64
}

pub fn summarize(
    label: &str,
    policy: Policy,
    config: &EngineConfig,
    trace: &[TraceEvent],
    requests: &[Request],
    steps: Vec<StepRecord>,
) -> RunSummary {
    let requests: Vec<RequestMetrics> = requests.iter().map(request_metrics).collect();
    let request_steps: usize = steps.iter().map(|s| s.batch_size).sum();
    let verified: usize = steps.iter().map(|s| s.verified_tokens).sum();
    let accepted: usize = steps.iter().map(|s| s.accepted_draft_tokens).sum();
    let per_request_step = |n: usize| {
        if request_steps == 0 {
            0.0
        } else {
            n as f64 / request_steps as f64
        }
    };
    let aggregates = Aggregates {
        requests: requests.len(),
        steps: steps.len(),
        total_sim_time_ms: steps.last().map_or(0.0, |s| s.sim_time + s.step_time),
        mean_e2e_ms: mean(requests.iter().map(|r| r.e2e_ms)),
        median_e2e_ms: median(requests.iter().map(|r| r.e2e_ms).collect()),
        mean_ttft_ms: mean(requests.iter().map(|r| r.ttft_ms)),
        mean_tpot_ms: mean(requests.iter().map(|r| r.tpot_ms)),
        mean_batch_size: mean(steps.iter().map(|s| s.batch_size as f64)),
        mean_realized_sl: mean(steps.iter().map(|s| s.realized_sl as f64)),
        mean_draft_tokens: per_request_step(verified),
        mean_accepted_draft_tokens: per_request_step(accepted),
        acceptance_rate: if verified == 0 {
            0.0
        } else {
            accepted as f64 / verified as f64
        },
        eliminated_tokens: steps.iter().map(|s| s.eliminated_tokens).sum(),
        slo_violation_steps: steps.iter().filter(|s| s.slo_violated).count(),
        speculative_violation_steps: steps
            .iter()
            .filter(|s| s.slo_violated && s.realized_sl > 0)
            .count(),
        slo_attainment: attainment(&requests, &config.slo),
    };
    RunSummary {
        label: label.to_string(),
        policy,
        seed: config.oracle.seed,
        trace_fingerprint: trace_fingerprint(trace),
        slo: config.slo,
        aggregates,
        requests,
        steps,
    }
}

/// Fraction of requests meeting both TTFT and TPOT under `slo`.
pub fn slo_attainment(summary: &RunSummary, slo: &SloConfig) -> f64 {
    attainment(&summary.requests, slo)
}

/// Baseline mean end-to-end latency over candidate mean end-to-end latency.
pub fn speedup(candidate: &RunSummary, baseline: &RunSummary) -> Result<f64> {
    if candidate.trace_fingerprint != baseline.trace_fingerprint {
        return Err(Error::TraceMismatch(format!(
            "{} ran trace {}, {} ran trace {}",
            candidate.label,
            candidate.trace_fingerprint,
            baseline.label,
            baseline.trace_fingerprint
        )));
    }
    Ok(baseline.aggregates.mean_e2e_ms / candidate.aggregates.mean_e2e_ms)
}

/// Same ratio over medians.
pub fn median_speedup(candidate: &RunSummary, baseline: &RunSummary) -> Result<f64> {
    speedup(candidate, baseline)?;
    Ok(baseline.aggregates.median_e2e_ms / candidate.aggregates.median_e2e_ms)
}

/// Per-token latency speedup by batch-size bucket (powers of two).
///
/// Each step contributes `step_time / (emitted_tokens / batch_size)` to its
/// bucket; the ratio is baseline mean over candidate mean.
pub fn speedup_by_batch(candidate: &RunSummary, baseline: &RunSummary) -> BTreeMap<usize, f64> {
    fn buckets(steps: &[StepRecord]) -> BTreeMap<usize, (f64, usize)> {
        let mut out: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in steps.iter().filter(|s| s.emitted_tokens > 0) {
            let bucket = s.batch_size.next_power_of_two();
            let per_token = s.step_time * s.batch_size as f64 / s.emitted_tokens as f64;
            let e = out.entry(bucket).or_default();
            e.0 += per_token;
            e.1 += 1;
        }
        out
    }
    let cand = buckets(&candidate.steps);
    let base = buckets(&baseline.steps);
    cand.iter()
        .filter_map(|(b, &(sum, n))| {
            base.get(b)
                .map(|&(bsum, bn)| (*b, (bsum / bn as f64) / (sum / n as f64)))
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Write the three per-run files into `dir`; returns their paths.
pub fn emit_run(summary: &RunSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let label = &summary.label;
    let summary_path = dir.join(format!("{label}.summary.json"));
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    write_file(&summary_path, &json)?;

    let steps_path = dir.join(format!("{label}.steps.jsonl"));
    let mut lines = Vec::new();
    for s in &summary.steps {
        serde_json::to_writer(&mut lines, s)?;
        lines.push(b'\n');
    }
    write_file(&steps_path, &lines)?;

    let ts_path = dir.join(format!("{label}.timeseries.csv"));
    let mut wtr = csv::Writer::from_path(&ts_path)?;
    wtr.write_record([
        "step_index",
        "sim_time_ms",
        "batch_size",
        "realized_sl",
        "verified_tokens",
        "step_time_ms",
    ])?;
    for s in &summary.steps {
        wtr.write_record([
            s.step_index.to_string(),
            s.sim_time.to_string(),
            s.batch_size.to_string(),
            s.realized_sl.to_string(),
            s.verified_tokens.to_string(),
            s.step_time.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(vec![summary_path, steps_path, ts_path])
}

/// Read a summary written by [`emit_run`]. The step log is not loaded.
pub fn read_summary(path: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// One row of the cross-run comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub policy: String,
    pub trace: String,
    pub scale: f64,
    pub mean_e2e_ms: f64,
    pub speedup: Option<f64>,
    pub median_speedup: Option<f64>,
    pub slo_attainment: f64,
    pub attainment_delta: Option<f64>,
    pub acceptance_rate: f64,
    pub mean_draft_tokens: f64,
}

/// Compare every summary against the autoregressive run on the same trace and scale.
pub fn compare(summaries: &[RunSummary]) -> Vec<ComparisonRow> {
    let baseline_for = |s: &RunSummary| {
        summaries.iter().find(|b| {
            b.policy == Policy::Autoregressive
                && b.trace_fingerprint == s.trace_fingerprint
                && b.slo.scale == s.slo.scale
        })
    };
    summaries
        .iter()
        .map(|s| {
            let base = baseline_for(s);
            let att = s.aggregates.slo_attainment;
            ComparisonRow {
                label: s.label.clone(),
                policy: s.policy.to_string(),
                trace: s.trace_fingerprint.clone(),
                scale: s.slo.scale,
                mean_e2e_ms: s.aggregates.mean_e2e_ms,
                speedup: base.and_then(|b| speedup(s, b).ok()),
                median_speedup: base.and_then(|b| median_speedup(s, b).ok()),
                slo_attainment: att,
                attainment_delta: base.map(|b| att - b.aggregates.slo_attainment),
                acceptance_rate: s.aggregates.acceptance_rate,
                mean_draft_tokens: s.aggregates.mean_draft_tokens,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `comparison.csv`, `attainment.csv` and `speedup_by_batch.csv`.
pub fn emit_comparison(summaries: &[RunSummary], dir: &Path) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no summaries to compare".into()));
    }
    fs::create_dir_all(dir)?;
    let mut rows = compare(summaries);
    rows.sort_by(|a, b| {
        (a.trace.as_str(), a.policy.as_str())
            .cmp(&(b.trace.as_str(), b.policy.as_str()))
            .then(a.scale.total_cmp(&b.scale))
    });

    let cmp_path = dir.join("comparison.csv");
    let mut wtr = csv::Writer::from_path(&cmp_path)?;
    wtr.write_record([
        "label",
        "policy",
        "trace",
        "scale",
        "mean_e2e_ms",
        "speedup",
        "median_speedup",
        "slo_attainment",
        "attainment_delta",
        "acceptance_rate",
        "mean_draft_tokens",
    ])?;
    for r in &rows {
        wtr.write_record([
            r.label.clone(),
            r.policy.clone(),
            r.trace.clone(),
            r.scale.to_string(),
            r.mean_e2e_ms.to_string(),
            opt(r.speedup),
            opt(r.median_speedup),
            r.slo_attainment.to_string(),
            opt(r.attainment_delta),
            r.acceptance_rate.to_string(),
            r.mean_draft_tokens.to_string(),
        ])?;
    }
    wtr.flush()?;

    let att_path = dir.join("attainment.csv");
    let mut wtr = csv::Writer::from_path(&att_path)?;
    wtr.write_record(["policy", "trace", "scale", "slo_attainment", "speedup"])?;
    for r in &rows {
        wtr.write_record([
            r.policy.clone(),
            r.trace.clone(),
            r.scale.to_string(),
            r.slo_attainment.to_string(),
            opt(r.speedup),
        ])?;
    }
    wtr.flush()?;

    let batch_path = dir.join("speedup_by_batch.csv");
    let mut wtr = csv::Writer::from_path(&batch_path)?;
    wtr.write_record(["label", "policy", "batch_bucket", "speedup"])?;
    for s in summaries {
        let base = summaries.iter().find(|b| {
            b.policy == Policy::Autoregressive
                && b.trace_fingerprint == s.trace_fingerprint
                && b.slo.scale == s.slo.scale
        });
        if let Some(base) = base {
            for (bucket, ratio) in speedup_by_batch(s, base) {
                wtr.write_record([
                    s.label.clone(),
                    s.policy.to_string(),
                    bucket.to_string(),
                    ratio.to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(vec![cmp_path, att_path, batch_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(ttft: f64, tpot: f64, e2e: f64) -> RequestMetrics {
        RequestMetrics {
            id: 0,
            category: "qa".into(),
            arrival_ms: 0.0,
            input_tokens: 1,
            output_tokens: 2,
            ttft_ms: ttft,
            tpot_ms: tpot,
            e2e_ms: e2e,
        }
    }

    fn summary(label: &str, policy: Policy, e2e: &[f64]) -> RunSummary {
        let requests: Vec<_> = e2e.iter().map(|&e| req(10.0, 10.0, e)).collect();
        RunSummary {
            label: label.into(),
            policy,
            seed: 0,
            trace_fingerprint: "t".into(),
            slo: SloConfig::default(),
            aggregates: Aggregates {
                requests: requests.len(),
                steps: 0,
                total_sim_time_ms: 0.0,
                mean_e2e_ms: mean(e2e.iter().copied()),
                median_e2e_ms: median(e2e.to_vec()),
                mean_ttft_ms: 10.0,
                mean_tpot_ms: 10.0,
                mean_batch_size: 0.0,
                mean_realized_sl: 0.0,
                mean_draft_tokens: 0.0,
                mean_accepted_draft_tokens: 0.0,
                acceptance_rate: 0.0,
                eliminated_tokens: 0,
                slo_violation_steps: 0,
                speculative_violation_steps: 0,
                slo_attainment: 1.0,
            },
            requests,
            steps: vec![],
        }
    }

    #[test]
    fn attainment_examples() {
        let slo = SloConfig::default();
        let mut s = summary("a", Policy::Adaptive, &[1.0, 1.0]);
        s.requests = vec![req(0.0, 0.0, 0.0), req(0.0, 0.0, 0.0)];
        assert_eq!(slo_attainment(&s, &slo), 1.0);
        s.requests[1].tpot_ms = 31.0;
        assert_eq!(slo_attainment(&s, &slo), 0.5);
        s.requests[0].ttft_ms = 250.0;
        assert!(
            slo_attainment(&s, &slo.with_scale(1.4)) >= slo_attainment(&s, &slo.with_scale(0.8))
        );
    }

    #[test]
    fn speedup_examples() {
        let base = summary("ar", Policy::Autoregressive, &[200.0, 200.0]);
        let cand = summary("ad", Policy::Adaptive, &[100.0, 100.0]);
        assert_eq!(speedup(&base, &base).unwrap(), 1.0);
        assert_eq!(speedup(&cand, &base).unwrap(), 2.0);
        let mut other = cand.clone();
        other.trace_fingerprint = "u".into();
        assert!(matches!(
            speedup(&other, &base),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn comparison_covers_every_policy() {
        let runs = vec![
            summary("ar", Policy::Autoregressive, &[200.0]),
            summary("ad", Policy::Adaptive, &[100.0]),
            summary("f3", Policy::FixedSl(3), &[160.0]),
        ];
        let rows = compare(&runs);
        assert_eq!(rows[1].speedup, Some(2.0));
        assert_eq!(rows[2].speedup, Some(1.25));
        assert_eq!(rows[1].attainment_delta, Some(0.0));

        let dir = tempfile::tempdir().unwrap();
        let files = emit_comparison(&runs, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let table = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }

    #[test]
    fn fingerprint_depends_on_content() {
        let ev = |a: f64| TraceEvent {
            arrival_ms: a,
            category: "qa".into(),
            input_tokens: 1,
            output_tokens: 1,
        };
        assert_eq!(trace_fingerprint(&[ev(1.0)]), trace_fingerprint(&[ev(1.0)]));
        assert_ne!(trace_fingerprint(&[ev(1.0)]), trace_fingerprint(&[ev(2.0)]));
    }
}
