//! Offline analyzer: fit forward-pass coefficients from timing samples.

use std::collections::BTreeSet;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost_model::{forward_time, PerformanceCoefficients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub n_context: f64,
    pub n_batch: f64,
    #[serde(rename = "elapsed_ms")]
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFit {
    pub coefficients: PerformanceCoefficients,
    /// Least-squares solution before clamping to non-negative values.
    pub raw: [f64; 3],
    pub residual_rms: f64,
    pub warnings: Vec<String>,
}

/// Default grid: batch tokens 1..=256 in powers of two, four context sizes.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::new();
    for n_context in [128.0, 512.0, 2048.0, 8192.0] {
        for p in 0..=8 {
            grid.push((n_context, f64::from(1u32 << p)));
        }
    }
    grid
}

/// Noisy timings of `hidden`; the grid is cycled until `count` samples exist.
pub fn synth_measurements(
    hidden: &PerformanceCoefficients,
    grid: &[(f64, f64)],
    count: usize,
    noise_rel: f64,
    seed: u64,
) -> Result<Vec<TimingSample>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("profiling grid is empty".into()));
    }
    let noise = Normal::new(0.0, noise_rel)
        .map_err(|e| Error::InvalidArgument(format!("noise_rel {noise_rel}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = grid
        .iter()
        .cycle()
        .take(count)
        .map(|&(n_context, n_batch)| {
            let exact = forward_time(hidden, n_context, n_batch);
            let mut elapsed = exact * (1.0 + noise.sample(&mut rng));
            // redraw the rare non-positive sample
            while elapsed <= 0.0 {
                elapsed = exact * (1.0 + noise.sample(&mut rng));
            }
            TimingSample {
                n_context,
                n_batch,
                elapsed,
            }
        })
        .collect();
    Ok(samples)
}

/// Ordinary least squares for `elapsed = alpha*n_context + gamma*n_batch + delta`.
///
/// Columns are scaled to unit max-norm and solved by SVD; a singular-value
/// ratio below `1e-12` counts as rank deficient.
pub fn fit_coefficients(samples: &[TimingSample]) -> Result<CoefficientFit> {
    if samples.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} samples, need at least 3",
            samples.len()
        )));
    }
    let distinct = |f: fn(&TimingSample) -> f64| {
        samples
            .iter()
            .map(|s| f(s).to_bits())
            .collect::<BTreeSet<_>>()
            .len()
    };
    if distinct(|s| s.n_context) < 2 || distinct(|s| s.n_batch) < 2 {
        return Err(Error::RankDeficient(
            "need two distinct context and batch sizes".into(),
        ));
    }
    for s in samples {
        if !(s.elapsed > 0.0) || s.n_context < 0.0 || s.n_batch < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid timing sample {s:?}"
            )));
        }
    }

    let n = samples.len();
    let mut x = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => samples[r].n_context,
        1 => samples[r].n_batch,
        _ => 1.0,
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.elapsed));
    let scales: Vec<f64> = (0..3)
        .map(|c| x.column(c).amax().max(f64::MIN_POSITIVE))
        .collect();
    for (c, &scale) in scales.iter().enumerate() {
        x.column_mut(c).scale_mut(1.0 / scale);
    }

    let svd = x.clone().svd(true, true);
    let (max_sv, min_sv) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| {
            (hi.max(s), lo.min(s))
        });
    if !(min_sv > 1e-12 * max_sv) {
        return Err(Error::RankDeficient(format!(
            "singular values span {min_sv:e}..{max_sv:e}"
        )));
    }
    let scaled = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let raw = [
        scaled[0] / scales[0],
        scaled[1] / scales[1],
        scaled[2] / scales[2],
    ];

    let residuals = &x * &scaled - &y;
    let residual_rms = (residuals.norm_squared() / n as f64).sqrt();

    let mut warnings = Vec::new();
    let tolerance = 1e-9 * y.amax();
    for (name, v) in ["alpha", "gamma", "delta"].iter().zip(raw) {
        if v < -tolerance {
            warnings.push(format!("fitted {name} = {v:e} is negative; clamped to 0"));
        }
    }
    let coefficients =
        PerformanceCoefficients::new(raw[0].max(0.0), raw[1].max(0.0), raw[2].max(0.0))?;
    Ok(CoefficientFit {
        coefficients,
        raw,
        residual_rms,
        warnings,
    })
}

/// Read samples from CSV with columns `n_context,n_batch,elapsed_ms`.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<TimingSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.deserialize::<TimingSample>().enumerate() {
        match rec {
            Ok(s) => out.push(s),
            Err(e) => bad.push((i as u64 + 2, e.to_string())),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::TraceParse(bad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hidden() -> PerformanceCoefficients {
        PerformanceCoefficients::new(0.002, 0.15, 4.0).unwrap()
    }

    #[test]
    fn noiseless_samples_lie_on_the_plane() {
        let samples = synth_measurements(&hidden(), &default_grid(), 36, 0.0, 1).unwrap();
        for s in &samples {
            assert_eq!(s.elapsed, forward_time(&hidden(), s.n_context, s.n_batch));
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let a = synth_measurements(&hidden(), &default_grid(), 100, 0.01, 5).unwrap();
        let b = synth_measurements(&hidden(), &default_grid(), 100, 0.01, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let grid: Vec<(f64, f64)> = (0..8)
            .flat_map(|i| (0..8).map(move |j| (128.0 * (i + 1) as f64, (1u32 << j) as f64)))
            .collect();
        let samples = synth_measurements(&hidden(), &grid, grid.len(), 0.0, 0).unwrap();
        let fit = fit_coefficients(&samples).unwrap();
        let h = hidden();
        for (got, want) in [
            (fit.coefficients.alpha, h.alpha),
            (fit.coefficients.gamma, h.gamma),
            (fit.coefficients.delta, h.delta),
        ] {
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(fit.residual_rms < 1e-9);
        assert!(fit.warnings.is_empty());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let one = synth_measurements(&hidden(), &[(128.0, 4.0)], 10, 0.0, 0).unwrap();
        assert!(matches!(
            fit_coefficients(&one),
            Err(Error::RankDeficient(_))
        ));
        // collinear: n_batch always equals n_context / 128
        let line: Vec<_> = (1..6).map(|i| (128.0 * i as f64, i as f64)).collect();
        let samples = synth_measurements(&hidden(), &line, 5, 0.0, 0).unwrap();
        assert!(matches!(
            fit_coefficients(&samples),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn negative_slope_is_clamped_with_warning() {
        let samples = vec![
            TimingSample {
                n_context: 0.0,
                n_batch: 0.0,
                elapsed: 10.0,
            },
            TimingSample {
                n_context: 100.0,
                n_batch: 0.0,
                elapsed: 5.0,
            },
            TimingSample {
                n_context: 0.0,
                n_batch: 10.0,
                elapsed: 12.0,
            },
            TimingSample {
                n_context: 100.0,
                n_batch: 10.0,
                elapsed: 7.0,
            },
        ];
        let fit = fit_coefficients(&samples).unwrap();
        assert_eq!(fit.coefficients.alpha, 0.0);
        assert!(fit.raw[0] < 0.0);
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn csv_samples() {
        let doc = "n_context,n_batch,elapsed_ms\n128,1,4.5\n512, 8 ,6.0\n";
        let s = read_samples_csv(doc.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].n_batch, 8.0);
        let bad = "n_context,n_batch,elapsed_ms\n128,x,4.5\n";
        assert!(
            matches!(read_samples_csv(bad.as_bytes()), Err(Error::TraceParse(v)) if v[0].0 == 2)
        );
    }
}
