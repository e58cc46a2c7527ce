//! Single runs and parallel parameter sweeps.

use rayon::prelude::*;

use crate::config::{ExperimentConfig, ResolvedExperiment};
use crate::engine::{run_trace, Policy};
use crate::error::{Error, Result};
use crate::metrics::RunSummary;

pub fn simulate(exp: &ResolvedExperiment) -> Result<RunSummary> {
    run_trace(&exp.trace, exp.policy, &exp.engine, &exp.label)
}

fn cell_label(trace_name: &str, policy: Policy, scale: f64) -> String {
    format!(
        "{trace_name}.{}.x{scale}",
        policy.to_string().replace(':', "_")
    )
}

/// Expand `policies x scales x traces` into resolved experiments.
///
/// Each trace comes as a base config. Cells override its policy and SLO scale.
pub fn sweep_grid(
    traces: &[(String, ExperimentConfig)],
    policies: &[Policy],
    scales: &[f64],
) -> Result<Vec<ResolvedExperiment>> {
    if traces.is_empty() || policies.is_empty() || scales.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one trace, policy and scale".into(),
        ));
    }
    let mut out = Vec::new();
    for (name, base) in traces {
        let resolved = base.resolve()?;
        for &policy in policies {
            policy.validate()?;
            for &scale in scales {
                let mut engine = resolved.engine.clone();
                engine.slo = engine.slo.with_scale(scale);
                engine.slo.validate()?;
                out.push(ResolvedExperiment {
                    label: cell_label(name, policy, scale),
                    policy,
                    engine,
                    trace: resolved.trace.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Run every experiment on a pool of `jobs` threads; output order matches input.
pub fn run_all(experiments: &[ResolvedExperiment], jobs: usize) -> Result<Vec<RunSummary>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| experiments.par_iter().map(simulate).collect())
}
