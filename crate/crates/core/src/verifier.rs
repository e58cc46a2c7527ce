//! Request-level speculative length control by draft-token elimination.
//!
//! Before verification the globally least likely retained draft token is
//! removed as long as doing so strictly raises estimated goodput. Rows of an
//! [`ArTable`] are non-increasing, so the candidate is always a row tail and
//! every request keeps a prefix of its drafts.

use serde::{Deserialize, Serialize};

use crate::cost_model::{BatchProfile, ModelPair};
use crate::drafter::DraftPhaseResult;
use crate::error::{Error, Result};
use crate::estimator::{estimate_goodput, GoodputEstimate, SloConfig};
use crate::oracle::{DraftToken, TargetModel, VerifyOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationResult {
    /// Retained prefix length per request.
    pub kept: Vec<usize>,
    pub removed_count: usize,
    pub pre_goodput: GoodputEstimate,
    pub post_goodput: GoodputEstimate,
    /// Goodput after each committed removal, in commit order.
    pub committed: Vec<GoodputEstimate>,
}

/// Tokens produced for each request by one verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedStep {
    /// Accepted draft ids followed by the bonus id.
    pub outputs: Vec<Vec<u32>>,
    pub outcome: VerifyOutcome,
}

/// Request whose retained tail has the lowest cumulative rate.
///
/// Ties go to the longer retained row, then to the lower request index.
fn find_min_ar(phase: &DraftPhaseResult, kept: &[usize]) -> Option<usize> {
    let rows = phase.table.rows();
    let mut best: Option<(usize, f64)> = None;
    for (i, &n) in kept.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let ar = rows[i][n - 1];
        let better = match best {
            None => true,
            Some((j, best_ar)) => ar < best_ar || (ar == best_ar && n > kept[j]),
        };
        if better {
            best = Some((i, ar));
        }
    }
    best.map(|(i, _)| i)
}

fn estimate_kept(
    profile: &BatchProfile,
    phase: &DraftPhaseResult,
    kept: &[usize],
    slo: &SloConfig,
    pair: &ModelPair,
) -> Result<GoodputEstimate> {
    let pending = profile.with_pending(kept.to_vec())?;
    estimate_goodput(
        &pending,
        &phase.table.truncated(kept),
        slo,
        pair,
        phase.draft_time,
    )
}

/// Greedy elimination of low-acceptance draft tokens.
pub fn eliminate(
    profile: &BatchProfile,
    phase: &DraftPhaseResult,
    slo: &SloConfig,
    pair: &ModelPair,
) -> Result<EliminationResult> {
    if phase.drafts.len() != profile.batch_size() {
        return Err(Error::ShapeMismatch(format!(
            "{} draft rows for a batch of {}",
            phase.drafts.len(),
            profile.batch_size()
        )));
    }
    phase.table.validate()?;
    let mut kept = phase.table.row_lens();
    let pre_goodput = estimate_kept(profile, phase, &kept, slo, pair)?;
    let mut best = pre_goodput;
    let mut committed = Vec::new();

    while let Some(i) = find_min_ar(phase, &kept) {
        kept[i] -= 1;
        let trial = estimate_kept(profile, phase, &kept, slo, pair)?;
        if trial.beats(&best) {
            best = trial;
            committed.push(trial);
        } else {
            kept[i] += 1;
            break;
        }
    }

    let removed_count = phase.table.row_lens().iter().sum::<usize>() - kept.iter().sum::<usize>();
    Ok(EliminationResult {
        kept,
        removed_count,
        pre_goodput,
        post_goodput: best,
        committed,
    })
}

/// Verify the first `kept[i]` drafts of every request with `model`.
pub fn verify_prefixes<M: TargetModel + ?Sized>(
    model: &mut M,
    drafts: &[Vec<DraftToken>],
    kept: &[usize],
) -> Result<VerifiedStep> {
    let retained: Vec<&[DraftToken]> = drafts.iter().zip(kept).map(|(row, &n)| &row[..n]).collect();
    let outcome = model.verify(&retained)?;
    if outcome.accepted_counts.len() != drafts.len() || outcome.bonus.len() != drafts.len() {
        return Err(Error::Oracle(
            "target model returned a malformed outcome".into(),
        ));
    }
    let outputs = retained
        .iter()
        .zip(&outcome.accepted_counts)
        .zip(&outcome.bonus)
        .map(|((row, &m), &bonus)| {
            if m > row.len() {
                return Err(Error::Oracle(format!(
                    "accepted {m} of {} retained tokens",
                    row.len()
                )));
            }
            Ok(row[..m]
                .iter()
                .map(|t| t.id)
                .chain(std::iter::once(bonus))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifiedStep { outputs, outcome })
}

/// Eliminate, then verify what remains.
pub fn prune_and_verify<M: TargetModel + ?Sized>(
    model: &mut M,
    profile: &BatchProfile,
    phase: &DraftPhaseResult,
    slo: &SloConfig,
    pair: &ModelPair,
) -> Result<(VerifiedStep, EliminationResult)> {
    let elim = eliminate(profile, phase, slo, pair)?;
    let verified = verify_prefixes(model, &phase.drafts, &elim.kept)?;
    Ok((verified, elim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acceptance::ArTable;
    use crate::cost_model::PerformanceCoefficients;
    use crate::oracle::{CategoryProcess, ConfidenceDist, OracleConfig, SyntheticOracle};

    fn phase_from_rows(rows: Vec<Vec<f64>>, draft_time: f64) -> DraftPhaseResult {
        let table = ArTable::from_rows(rows.clone()).unwrap();
        let drafts = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(k, _)| DraftToken {
                        id: k as u32,
                        confidence: 0.5,
                        true_prob: 1.0,
                        draw: 0.0,
                    })
                    .collect()
            })
            .collect();
        let steps_taken = rows.iter().map(Vec::len).max().unwrap_or(0);
        DraftPhaseResult {
            drafts,
            table,
            draft_time,
            steps_taken,
            goodputs: vec![],
        }
    }

    fn pair() -> ModelPair {
        ModelPair {
            draft: PerformanceCoefficients::new(0.0, 0.0, 1.0).unwrap(),
            target: PerformanceCoefficients::new(0.0, 5.0, 10.0).unwrap(),
        }
    }

    fn oracle() -> SyntheticOracle {
        SyntheticOracle::new(OracleConfig {
            categories: vec![CategoryProcess {
                name: "c".into(),
                dist: ConfidenceDist::Fixed { p: 1.0 },
                drift: 0.0,
            }],
            ..OracleConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn certain_tokens_are_never_removed() {
        let profile = BatchProfile::uniform(2, 10).unwrap();
        let phase = phase_from_rows(vec![vec![1.0; 3], vec![1.0; 3]], 3.0);
        let (out, elim) = prune_and_verify(
            &mut oracle(),
            &profile,
            &phase,
            &SloConfig::default(),
            &pair(),
        )
        .unwrap();
        assert_eq!(elim.removed_count, 0);
        assert_eq!(elim.kept, vec![3, 3]);
        assert_eq!(out.outputs[0].len(), 4);
    }

    #[test]
    fn unlikely_tail_is_removed() {
        // keep both: (1 + 0.9 + 0.01) / (2 + 15 + 10) = 0.0707
        // drop tail: (1 + 0.9) / (2 + 10 + 10) = 0.0864
        // drop both: 1 / (2 + 5 + 10) = 0.0588
        let profile = BatchProfile::uniform(1, 10).unwrap();
        let phase = phase_from_rows(vec![vec![0.9, 0.01]], 2.0);
        let elim = eliminate(&profile, &phase, &SloConfig::default(), &pair()).unwrap();
        assert_eq!(elim.kept, vec![1]);
        assert_eq!(elim.removed_count, 1);
        assert!(elim.post_goodput.beats(&elim.pre_goodput));
    }

    #[test]
    fn no_drafts_means_bonus_only() {
        let profile = BatchProfile::uniform(3, 10).unwrap();
        let phase = phase_from_rows(vec![vec![], vec![], vec![]], 0.0);
        let (out, elim) = prune_and_verify(
            &mut oracle(),
            &profile,
            &phase,
            &SloConfig::default(),
            &pair(),
        )
        .unwrap();
        assert_eq!(elim.removed_count, 0);
        assert!(out.outputs.iter().all(|o| o.len() == 1));
    }

    #[test]
    fn ties_prefer_longer_rows_then_lower_index() {
        let phase = phase_from_rows(vec![vec![0.5], vec![0.9, 0.5], vec![0.9, 0.5]], 0.0);
        assert_eq!(find_min_ar(&phase, &[1, 2, 2]), Some(1));
        assert_eq!(find_min_ar(&phase, &[1, 1, 2]), Some(2));
        assert_eq!(find_min_ar(&phase, &[0, 0, 0]), None);
    }

    #[test]
    fn rejected_step_is_pruned_until_admissible() {
        // 3 ms draft + verify of 4 tokens (20 ms) + 10 = 33 ms > 30 ms.
        let profile = BatchProfile::uniform(1, 10).unwrap();
        let phase = phase_from_rows(vec![vec![0.9, 0.8, 0.7]], 3.0);
        let elim = eliminate(&profile, &phase, &SloConfig::default(), &pair()).unwrap();
        assert!(elim.pre_goodput.is_rejected());
        assert!(!elim.post_goodput.is_rejected());
        assert!(elim.kept[0] < 3);
    }
}
