//! `specsim` command-line entry point.
//!
//! Every flag can also be set through an environment variable named
//! `SPECSIM_<FLAG>` (for example `SPECSIM_SEED`, `SPECSIM_OUT_DIR`).
//! Flags override the corresponding config-file keys.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime fault, 4 validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use specsim_core::config::{
    read_coefficients, write_coefficients, ExperimentConfig, ResolvedExperiment,
};
use specsim_core::cost_model::ModelPair;
use specsim_core::engine::Policy;
use specsim_core::experiment::{run_all, simulate, sweep_grid};
use specsim_core::metrics::{emit_comparison, emit_run, read_summary, RunSummary};
use specsim_core::profiler::{
    default_grid, fit_coefficients, read_samples_csv, synth_measurements, CoefficientFit,
};
use specsim_core::validation;
use specsim_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

const DEFAULT_SCALES: [f64; 4] = [0.8, 1.0, 1.2, 1.4];
const DEFAULT_POLICIES: &str =
    "autoregressive,fixed:1,fixed:3,fixed:5,threshold:0.4:8,adaptive-drafter-only,adaptive";

#[derive(Parser)]
#[command(
    name = "specsim",
    version,
    about = "Adaptive speculative decoding serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit forward-pass coefficients and write a coefficient document.
    Profile(ProfileArgs),
    /// Run one trace under one policy and write its reports.
    Simulate(RunArgs),
    /// Run policies x SLO scales x traces in parallel and write comparison tables.
    Sweep(SweepArgs),
    /// Rebuild comparison tables from existing run summaries.
    Compare(CompareArgs),
    /// Run the model invariant suites.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, env = "SPECSIM_CONFIG")]
    config: PathBuf,
    /// Replace the config's trace source with this CSV file.
    #[arg(long, env = "SPECSIM_TRACE")]
    trace: Option<PathBuf>,
    #[arg(long, env = "SPECSIM_POLICY")]
    policy: Option<Policy>,
    #[arg(long, env = "SPECSIM_SEED")]
    seed: Option<u64>,
    /// SLO scale factor.
    #[arg(long, env = "SPECSIM_SCALE")]
    scale: Option<f64>,
    /// Divide trace arrival times by this factor.
    #[arg(long, env = "SPECSIM_RATE_SCALE")]
    rate_scale: Option<f64>,
    #[arg(long, env = "SPECSIM_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Run label used for output file names.
    #[arg(long, env = "SPECSIM_LABEL")]
    label: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// One config per trace; repeat for several traces.
    #[arg(long, env = "SPECSIM_CONFIG", value_delimiter = ',', required = true)]
    config: Vec<PathBuf>,
    #[arg(long, env = "SPECSIM_POLICIES", value_delimiter = ',', default_value = DEFAULT_POLICIES)]
    policies: Vec<Policy>,
    /// SLO scales; defaults to 0.8,1.0,1.2,1.4.
    #[arg(long = "scale", env = "SPECSIM_SCALE", value_delimiter = ',')]
    scales: Vec<f64>,
    #[arg(long, env = "SPECSIM_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "SPECSIM_RATE_SCALE")]
    rate_scale: Option<f64>,
    #[arg(long, env = "SPECSIM_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = "SPECSIM_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Summary files or directories containing `*.summary.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, env = "SPECSIM_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Hidden `{draft, target}` coefficients to synthesize measurements from.
    #[arg(long, env = "SPECSIM_HIDDEN", conflicts_with_all = ["draft_csv", "target_csv"])]
    hidden: Option<PathBuf>,
    /// Measured draft timings (`n_context,n_batch,elapsed_ms`).
    #[arg(long, requires = "target_csv")]
    draft_csv: Option<PathBuf>,
    #[arg(long, requires = "draft_csv")]
    target_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Relative measurement noise for synthesized samples.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, env = "SPECSIM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "SPECSIM_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, env = "SPECSIM_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write the outcomes to `<out-dir>/validation.json`.
    #[arg(long, env = "SPECSIM_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let (code, kind) = match error {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnknownCategory(_)
            | Error::TraceParse(_)
            | Error::TraceMismatch(_) => (EXIT_CONFIG, "config"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        Failure { code, kind, error }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile(a) => profile(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let details = match &f.error {
                Error::TraceParse(lines) => lines
                    .iter()
                    .map(|(line, msg)| json!({"line": line, "message": msg}))
                    .collect(),
                _ => Vec::new(),
            };
            let doc = json!({"error": {"kind": f.kind, "message": f.error.to_string(), "details": details}});
            eprintln!("{doc}");
            ExitCode::from(f.code)
        }
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    rate_scale: Option<f64>,
) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if rate_scale.is_some() {
        cfg.trace.rate_scale = rate_scale;
    }
    Ok(cfg)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn fit_report(fit: &CoefficientFit) -> serde_json::Value {
    json!({
        "coefficients": fit.coefficients,
        "residual_rms_ms": fit.residual_rms,
        "warnings": fit.warnings,
    })
}

fn profile(a: ProfileArgs) -> CliResult<u8> {
    let (draft, target) = match (&a.hidden, &a.draft_csv, &a.target_csv) {
        (Some(hidden), None, None) => {
            let pair = read_coefficients(hidden)?;
            let grid = default_grid();
            let d = synth_measurements(&pair.draft, &grid, a.samples, a.noise, a.seed)?;
            let t = synth_measurements(
                &pair.target,
                &grid,
                a.samples,
                a.noise,
                a.seed.wrapping_add(1),
            )?;
            (fit_coefficients(&d)?, fit_coefficients(&t)?)
        }
        (None, Some(dp), Some(tp)) => {
            let open = |p: &PathBuf| {
                fs::File::open(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            };
            (
                fit_coefficients(&read_samples_csv(open(dp)?)?)?,
                fit_coefficients(&read_samples_csv(open(tp)?)?)?,
            )
        }
        _ => {
            return Err(Error::Config(
                "profile needs --hidden or both --draft-csv and --target-csv".into(),
            )
            .into())
        }
    };
    let pair = ModelPair {
        draft: draft.coefficients,
        target: target.coefficients,
    };
    pair.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let coeff_path = a.out_dir.join("coefficients.json");
    write_coefficients(&coeff_path, &pair)?;
    let report_path = a.out_dir.join("profile_report.json");
    let report = json!({"draft": fit_report(&draft), "target": fit_report(&target)});
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    for w in draft.warnings.iter().chain(&target.warnings) {
        eprintln!("warning: {w}");
    }
    print_written(&[coeff_path, report_path]);
    Ok(0)
}

fn simulate_cmd(a: RunArgs) -> CliResult<u8> {
    let mut cfg = load_config(&a.config, a.seed, a.rate_scale)?;
    if let Some(policy) = a.policy {
        cfg.policy = policy;
        if a.label.is_none() {
            cfg.label = None;
        }
    }
    if let Some(label) = a.label {
        cfg.label = Some(label);
    }
    if let Some(scale) = a.scale {
        cfg.slo.scale = scale;
    }
    if let Some(trace) = a.trace {
        // resolve relative to the working directory, not the config
        cfg.trace.file = Some(std::path::absolute(&trace).map_err(Error::from)?);
        cfg.trace.synth = None;
    }
    cfg.slo.validate()?;
    let exp: ResolvedExperiment = cfg.resolve()?;
    let summary = simulate(&exp)?;
    let paths = emit_run(&summary, &a.out_dir)?;
    print_written(&paths);
    println!(
        "{}",
        serde_json::to_string(&summary.aggregates).map_err(Error::from)?
    );
    Ok(0)
}

fn sweep(a: SweepArgs) -> CliResult<u8> {
    let scales = if a.scales.is_empty() {
        DEFAULT_SCALES.to_vec()
    } else {
        a.scales
    };
    let mut traces = Vec::new();
    for path in &a.config {
        let cfg = load_config(path, a.seed, a.rate_scale)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "trace".into());
        traces.push((name, cfg));
    }
    let experiments = sweep_grid(&traces, &a.policies, &scales)?;
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()).into());
    }
    let summaries = run_all(&experiments, jobs)?;
    for s in &summaries {
        emit_run(s, &a.out_dir)?;
    }
    let paths = emit_comparison(&summaries, &a.out_dir)?;
    println!(
        "{} runs written to {}",
        summaries.len(),
        a.out_dir.display()
    );
    print_written(&paths);
    Ok(0)
}

fn collect_summaries(inputs: &[PathBuf]) -> CliResult<Vec<RunSummary>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(Error::from)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".summary.json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    files
        .iter()
        .map(|p| read_summary(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())).into()))
        .collect()
}

fn compare_cmd(a: CompareArgs) -> CliResult<u8> {
    let summaries = collect_summaries(&a.inputs)?;
    let paths = emit_comparison(&summaries, &a.out_dir)?;
    print_written(&paths);
    Ok(0)
}

fn validate(a: ValidateArgs) -> CliResult<u8> {
    let outcomes = validation::run_all(a.seed)?;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    if let Some(dir) = a.out_dir {
        fs::create_dir_all(&dir).map_err(Error::from)?;
        let doc = serde_json::to_string_pretty(&outcomes).map_err(Error::from)? + "\n";
        fs::write(dir.join("validation.json"), doc).map_err(Error::from)?;
    }
    Ok(if outcomes.iter().all(|o| o.passed) {
        0
    } else {
        EXIT_VALIDATION
    })
}
