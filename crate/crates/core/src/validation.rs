//! Self-check suites for the model layer.
//!
//! Each suite draws randomized instances from a fixed seed and reports a
//! pass/fail [`CheckOutcome`]. They back the `validate` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::acceptance::expected_accepted;
use crate::cost_model::{
    quadratic_coeffs, BatchProfile, ModelPair, PerformanceCoefficients, QuadraticTimeCoeffs,
};
use crate::drafter::{run_draft_phase, run_fixed_draft_phase, ConfidenceHistory};
use crate::error::Result;
use crate::estimator::{brute_force_optimal_sl, is_unimodal, throughput_curve, SloConfig};
use crate::oracle::{
    CategoryId, CategoryProcess, ConfidenceDist, DraftToken, OracleConfig, SyntheticOracle,
};
use crate::profiler::{default_grid, fit_coefficients, synth_measurements};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Random draft/target coefficients with the target at least as slow as the draft.
pub fn random_pair(rng: &mut impl Rng) -> ModelPair {
    let draft = PerformanceCoefficients {
        alpha: rng.random_range(0.0..5e-5),
        gamma: rng.random_range(0.0..0.02),
        delta: rng.random_range(0.1..2.0),
    };
    let target = PerformanceCoefficients {
        alpha: rng.random_range(1e-5..1e-3),
        gamma: rng.random_range(0.01..0.3),
        delta: rng.random_range(2.0..30.0),
    };
    ModelPair { draft, target }
}

/// Cumulative expected tokens `g(0..=max_sl)` from random per-position confidences.
pub fn random_g(rng: &mut impl Rng, max_sl: usize) -> Vec<f64> {
    let mut g = vec![1.0];
    let mut ar = 1.0;
    for _ in 0..max_sl {
        ar *= rng.random_range(0.0..=1.0f64);
        g.push(g.last().unwrap() + ar);
    }
    g
}

/// `g(0..=max_sl)` for a constant per-position confidence.
pub fn constant_g(confidence: f64, max_sl: usize) -> Vec<f64> {
    let mut g = vec![1.0];
    let mut ar = 1.0;
    for _ in 0..max_sl {
        ar *= confidence;
        g.push(g.last().unwrap() + ar);
    }
    g
}

/// Rises within this relative slack are floating-point noise.
const RISE_SLACK: f64 = 1e-12;

fn has_spurious_valley(curve: &[f64]) -> bool {
    let cleaned: Vec<f64> = curve.windows(2).fold(vec![curve[0]], |mut acc, w| {
        let prev = *acc.last().unwrap();
        acc.push(if w[1] > w[0] && w[1] <= w[0] * (1.0 + RISE_SLACK) {
            prev.min(w[1])
        } else {
            w[1]
        });
        acc
    });
    !is_unimodal(&cleaned)
}

/// Throughput curves over `0..=max_sl` never dip and rise again.
pub fn unimodality(instances: usize, max_sl: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut rising = 0;
    for _ in 0..instances {
        let pair = random_pair(&mut rng);
        let quad = quadratic_coeffs(
            &pair,
            rng.random_range(16.0..4096.0),
            rng.random_range(1..=128),
        );
        let g = random_g(&mut rng, max_sl);
        let curve = throughput_curve(&g, &quad, max_sl);
        if curve[1] > curve[0] {
            rising += 1;
        }
        if has_spurious_valley(&curve) {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "unimodality",
        failures == 0,
        format!("{failures} of {instances} curves non-unimodal ({rising} rise first)"),
    )
}

fn constant_oracle(p: f64, seed: u64) -> SyntheticOracle {
    SyntheticOracle::new(OracleConfig {
        categories: vec![CategoryProcess {
            name: "const".into(),
            dist: ConfidenceDist::Fixed { p },
            drift: 0.0,
        }],
        miscalibration: 0.0,
        seed,
    })
    .expect("valid constant oracle")
}

/// Result of comparing the adaptive drafter against exhaustive search.
#[derive(Debug, Clone, Serialize)]
pub struct GreedyStopStats {
    pub instances: usize,
    pub matches: usize,
    pub tie_mismatches: usize,
    pub hard_mismatches: usize,
}

/// Adaptive drafter with constant confidence and a matching history versus
/// [`brute_force_optimal_sl`]. Mismatches within `1e-9` relative goodput are ties.
pub fn greedy_stop_stats(instances: usize, max_sl: usize, seed: u64) -> Result<GreedyStopStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slo = SloConfig {
        tpot_limit_ms: f64::MAX,
        ..SloConfig::default()
    };
    let mut stats = GreedyStopStats {
        instances,
        matches: 0,
        tie_mismatches: 0,
        hard_mismatches: 0,
    };
    for i in 0..instances {
        let pair = random_pair(&mut rng);
        let confidence: f64 = rng.random_range(0.0..=1.0);
        let bs = rng.random_range(1..=64);
        let ctx = rng.random_range(16..=2048);
        let profile = BatchProfile::uniform(bs, ctx)?;
        let history = ConfidenceHistory {
            ema: confidence,
            decay: 0.1,
        };
        let mut oracle = constant_oracle(confidence, i as u64);
        let phase = run_draft_phase(
            &mut oracle,
            &vec![CategoryId(0); bs],
            &profile,
            &history,
            &slo,
            &pair,
            max_sl,
        )?;

        let quad = quadratic_coeffs(&pair, ctx as f64, bs);
        let g = constant_g(confidence, max_sl);
        let best = brute_force_optimal_sl(&g, &quad, max_sl)?;
        if phase.steps_taken == best {
            stats.matches += 1;
        } else {
            let curve = throughput_curve(&g, &quad, max_sl);
            let (a, b) = (curve[phase.steps_taken], curve[best]);
            if (a - b).abs() <= 1e-9 * b.abs() {
                stats.tie_mismatches += 1;
            } else {
                stats.hard_mismatches += 1;
            }
        }
    }
    Ok(stats)
}

pub fn greedy_stop(instances: usize, max_sl: usize, seed: u64) -> Result<CheckOutcome> {
    let s = greedy_stop_stats(instances, max_sl, seed)?;
    let ratio = s.matches as f64 / s.instances as f64;
    Ok(CheckOutcome::new(
        "greedy_stop",
        ratio >= 0.99 && s.hard_mismatches == 0,
        format!(
            "{}/{} exact, {} ties, {} non-tie mismatches",
            s.matches, s.instances, s.tie_mismatches, s.hard_mismatches
        ),
    ))
}

/// Mean actual vs mean estimated accepted tokens for fixed-length drafting.
pub fn nat_calibration_error(
    batch: usize,
    sl: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let config = OracleConfig {
        seed,
        ..OracleConfig::default()
    };
    let n_cat = config.categories.len();
    let mut oracle = SyntheticOracle::new(config)?;
    let cats: Vec<CategoryId> = (0..batch).map(|i| CategoryId(i % n_cat)).collect();
    let profile = BatchProfile::uniform(batch, 512)?;
    let pair = ModelPair {
        draft: PerformanceCoefficients {
            alpha: 0.0,
            gamma: 0.0,
            delta: 1.0,
        },
        target: PerformanceCoefficients {
            alpha: 0.0,
            gamma: 0.0,
            delta: 1.0,
        },
    };
    let (mut actual, mut estimated) = (0.0, 0.0);
    for _ in 0..steps {
        let phase = run_fixed_draft_phase(&mut oracle, &cats, &profile, &pair, sl)?;
        estimated += expected_accepted(&phase.table);
        let rows: Vec<&[DraftToken]> = phase.drafts.iter().map(Vec::as_slice).collect();
        let out = oracle.verify_step(&rows);
        actual += (out.accepted_counts.iter().sum::<usize>() + batch) as f64;
    }
    Ok((actual / steps as f64, estimated / steps as f64))
}

pub fn nat_calibration(batch: usize, sl: usize, steps: usize, seed: u64) -> Result<CheckOutcome> {
    let (actual, estimated) = nat_calibration_error(batch, sl, steps, seed)?;
    let rel = (actual - estimated).abs() / estimated;
    Ok(CheckOutcome::new(
        "nat_calibration",
        rel < 0.03,
        format!("mean actual {actual:.4}, mean estimated {estimated:.4}, relative error {rel:.5}"),
    ))
}

/// Per-bucket (width 0.1) counts of tested tokens and accepted tokens.
///
/// A token is tested when every earlier token of its draft was accepted.
pub fn confidence_buckets(tokens: usize, seed: u64) -> Result<Vec<(usize, usize, f64)>> {
    let config = OracleConfig {
        seed,
        ..OracleConfig::default()
    };
    let n_cat = config.categories.len();
    let mut oracle = SyntheticOracle::new(config)?;
    let batch = 64;
    let depth = 8;
    let cats: Vec<CategoryId> = (0..batch).map(|i| CategoryId(i % n_cat)).collect();
    // (tested, accepted, confidence sum)
    let mut buckets = vec![(0usize, 0usize, 0.0f64); 10];
    let mut tested = 0;
    while tested < tokens {
        let mut rows = vec![Vec::new(); batch];
        for pos in 1..=depth {
            for (row, t) in rows.iter_mut().zip(oracle.draft_step(&cats, pos)?) {
                row.push(t);
            }
        }
        let refs: Vec<&[DraftToken]> = rows.iter().map(Vec::as_slice).collect();
        let out = oracle.verify_step(&refs);
        for (row, &m) in rows.iter().zip(&out.accepted_counts) {
            // tokens 0..m accepted, token m (if any) rejected
            for (k, t) in row.iter().enumerate().take((m + 1).min(row.len())) {
                let b = ((t.confidence * 10.0) as usize).min(9);
                buckets[b].0 += 1;
                buckets[b].1 += usize::from(k < m);
                buckets[b].2 += t.confidence;
                tested += 1;
            }
        }
    }
    Ok(buckets)
}

pub fn bucket_calibration(
    tokens: usize,
    min_samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<CheckOutcome> {
    let buckets = confidence_buckets(tokens, seed)?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for &(n, acc, conf_sum) in &buckets {
        if n >= min_samples {
            checked += 1;
            worst = worst.max((acc as f64 / n as f64 - conf_sum / n as f64).abs());
        }
    }
    Ok(CheckOutcome::new(
        "confidence_buckets",
        checked > 0 && worst <= tolerance,
        format!("{checked} buckets with >= {min_samples} samples, worst gap {worst:.4}"),
    ))
}

/// 95th-percentile relative error of each coefficient over `seeds` fits.
pub fn recovery_p95(
    hidden: &PerformanceCoefficients,
    samples: usize,
    noise: f64,
    seeds: u64,
) -> Result<[f64; 3]> {
    let mut errs: [Vec<f64>; 3] = Default::default();
    for seed in 0..seeds {
        let data = synth_measurements(hidden, &default_grid(), samples, noise, seed)?;
        let fit = fit_coefficients(&data)?.coefficients;
        for (k, (got, want)) in [
            (fit.alpha, hidden.alpha),
            (fit.gamma, hidden.gamma),
            (fit.delta, hidden.delta),
        ]
        .into_iter()
        .enumerate()
        {
            errs[k].push(((got - want) / want).abs());
        }
    }
    Ok(errs.map(|mut e| {
        e.sort_by(f64::total_cmp);
        let idx = ((e.len() as f64) * 0.95).ceil() as usize - 1;
        e[idx.min(e.len() - 1)]
    }))
}

pub fn coefficient_recovery(seeds: u64) -> Result<CheckOutcome> {
    let hidden = PerformanceCoefficients {
        alpha: 0.002,
        gamma: 0.15,
        delta: 4.0,
    };
    let p95 = recovery_p95(&hidden, 200, 0.01, seeds)?;
    let grid: Vec<(f64, f64)> = (1..=8)
        .flat_map(|i| (0..8).map(move |j| (128.0 * i as f64, f64::from(1u32 << j))))
        .collect();
    let exact =
        fit_coefficients(&synth_measurements(&hidden, &grid, grid.len(), 0.0, 0)?)?.coefficients;
    let exact_err = [
        ((exact.alpha - hidden.alpha) / hidden.alpha).abs(),
        ((exact.gamma - hidden.gamma) / hidden.gamma).abs(),
        ((exact.delta - hidden.delta) / hidden.delta).abs(),
    ];
    let passed = p95.iter().all(|&e| e <= 0.02) && exact_err.iter().all(|&e| e <= 1e-9);
    Ok(CheckOutcome::new(
        "coefficient_recovery",
        passed,
        format!(
            "p95 relative error {p95:.5?}; noiseless error {:.2e}",
            exact_err.iter().copied().fold(0.0, f64::max)
        ),
    ))
}

/// Whether a throughput curve's shape agrees with the sign test on `g'(0)`.
pub fn curve_shape_agrees(quad: &QuadraticTimeCoeffs, g_prime_0: f64) -> bool {
    use crate::estimator::{curve_direction, CurveShape};
    // continuous g(s) = 1 + g'(0) s near the origin
    let f = |s: f64| (1.0 + g_prime_0 * s) / quad.eval(s);
    let eps = 1e-6;
    let rising = f(eps) > f(0.0);
    (curve_direction(quad, g_prime_0) == CurveShape::RisesThenFalls) == rising
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        unimodality(1000, 32, seed),
        greedy_stop(500, 16, seed)?,
        nat_calibration(32, 4, 10_000, seed)?,
        bucket_calibration(2_000_000, 100_000, 0.02, seed)?,
        coefficient_recovery(100)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(unimodality(200, 32, 1).passed);
        assert!(greedy_stop(100, 16, 1).unwrap().passed);
        assert!(nat_calibration(8, 4, 2000, 1).unwrap().passed);
    }

    #[test]
    fn constant_g_matches_geometric_sum() {
        let g = constant_g(0.5, 4);
        assert_eq!(g, vec![1.0, 1.5, 1.75, 1.875, 1.9375]);
    }

    #[test]
    fn sign_test_matches_numeric_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let pair = random_pair(&mut rng);
            let quad = quadratic_coeffs(
                &pair,
                rng.random_range(16.0..4096.0),
                rng.random_range(1..=64),
            );
            let g0: f64 = rng.random_range(0.0..=1.0);
            if (g0 * quad.c - quad.b).abs() > 1e-6 {
                assert!(curve_shape_agrees(&quad, g0));
            }
        }
    }
}
