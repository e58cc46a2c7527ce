//! Synthetic draft/target model pair.
//!
//! Each request category owns a confidence process: a per-position hidden
//! acceptance probability drawn from a Beta (or point-mass) distribution whose
//! mean drifts linearly with the draft position. The draft model reports that
//! probability, optionally offset by a miscalibration term, as its confidence.
//! The target model accepts drafted tokens sequentially: token `k` passes with
//! its hidden probability given that all earlier tokens passed, and a bonus
//! token is always emitted.
//!
//! Acceptance draws are taken when a token is drafted, so the verification
//! outcome of a prefix does not depend on which tail tokens were pruned.
//!
//! Randomness comes from `ChaCha8Rng` (the ChaCha stream cipher with 8 rounds)
//! seeded with `seed_from_u64`, which is stable across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfidenceDist {
    Beta { alpha: f64, beta: f64 },
    Fixed { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryProcess {
    pub name: String,
    pub dist: ConfidenceDist,
    /// Additive shift of the hidden probability per draft position after the first.
    #[serde(default = "default_drift")]
    pub drift: f64,
}

fn default_drift() -> f64 {
    -0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default = "default_categories")]
    pub categories: Vec<CategoryProcess>,
    /// Signed offset between reported confidence and hidden probability.
    #[serde(default)]
    pub miscalibration: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            categories: default_categories(),
            miscalibration: 0.0,
            seed: 0,
        }
    }
}

/// Six request categories with distinct confidence processes.
pub fn default_categories() -> Vec<CategoryProcess> {
    let beta = |name: &str, alpha: f64, beta: f64, drift: f64| CategoryProcess {
        name: name.to_string(),
        dist: ConfidenceDist::Beta { alpha, beta },
        drift,
    };
    vec![
        beta("translation", 6.0, 2.5, -0.04),
        beta("summarization", 5.0, 3.0, -0.05),
        beta("qa", 4.0, 3.0, -0.05),
        beta("math", 7.0, 2.0, -0.03),
        beta("rag", 6.0, 2.0, -0.04),
        beta("chat", 3.0, 3.0, -0.06),
    ]
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("oracle needs at least one category".into()));
        }
        if !self.miscalibration.is_finite() {
            return Err(Error::Config("miscalibration must be finite".into()));
        }
        for cat in &self.categories {
            if !cat.drift.is_finite() {
                return Err(Error::Config(format!(
                    "category {}: drift must be finite",
                    cat.name
                )));
            }
            match cat.dist {
                ConfidenceDist::Beta { alpha, beta } => {
                    Beta::new(alpha, beta)
                        .map_err(|e| Error::Config(format!("category {}: {e}", cat.name)))?;
                }
                ConfidenceDist::Fixed { p } if !p.is_finite() => {
                    return Err(Error::Config(format!(
                        "category {}: p must be finite",
                        cat.name
                    )));
                }
                ConfidenceDist::Fixed { .. } => {}
            }
        }
        Ok(())
    }

    pub fn category_id(&self, name: &str) -> Result<CategoryId> {
        self.categories
            .iter()
            .position(|c| c.name == name)
            .map(CategoryId)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

/// One drafted token as carried from drafting to verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftToken {
    pub id: u32,
    /// Confidence reported by the draft model.
    pub confidence: f64,
    /// Hidden conditional acceptance probability. Only the oracle reads this.
    pub true_prob: f64,
    /// Hidden uniform draw deciding acceptance. Only the oracle reads this.
    pub draw: f64,
}

impl DraftToken {
    pub fn would_accept(&self) -> bool {
        self.draw < self.true_prob
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Accepted draft tokens per request (bonus excluded).
    pub accepted_counts: Vec<usize>,
    pub bonus: Vec<u32>,
}

/// A model that can propose one token per request in lockstep.
pub trait DraftModel {
    /// Draft position `position` (1-based) for every request.
    fn draft(&mut self, categories: &[CategoryId], position: usize) -> Result<Vec<DraftToken>>;
}

/// A model that verifies retained draft prefixes.
pub trait TargetModel {
    fn verify(&mut self, retained: &[&[DraftToken]]) -> Result<VerifyOutcome>;
}

enum Sampler {
    Beta(Beta<f64>),
    Fixed(f64),
}

pub struct SyntheticOracle {
    config: OracleConfig,
    samplers: Vec<Sampler>,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        let samplers = config
            .categories
            .iter()
            .map(|c| match c.dist {
                ConfidenceDist::Beta { alpha, beta } => {
                    Sampler::Beta(Beta::new(alpha, beta).expect("validated"))
                }
                ConfidenceDist::Fixed { p } => Sampler::Fixed(p),
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            samplers,
            rng,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// One lockstep draft pass at `position` (1-based).
    pub fn draft_step(
        &mut self,
        categories: &[CategoryId],
        position: usize,
    ) -> Result<Vec<DraftToken>> {
        if categories.is_empty() {
            return Err(Error::InvalidArgument(
                "draft step on an empty batch".into(),
            ));
        }
        let offset = position.saturating_sub(1) as f64;
        categories
            .iter()
            .map(|&cat| {
                let process = self
                    .config
                    .categories
                    .get(cat.0)
                    .ok_or_else(|| Error::UnknownCategory(format!("#{}", cat.0)))?;
                let base = match &self.samplers[cat.0] {
                    Sampler::Beta(b) => b.sample(&mut self.rng),
                    Sampler::Fixed(p) => *p,
                };
                let true_prob = (base + process.drift * offset).clamp(0.0, 1.0);
                let confidence = (true_prob + self.config.miscalibration).clamp(0.0, 1.0);
                let draw: f64 = self.rng.random();
                let id: u32 = self.rng.random();
                Ok(DraftToken {
                    id,
                    confidence,
                    true_prob,
                    draw,
                })
            })
            .collect()
    }

    /// Sequential acceptance over each retained prefix plus one bonus token.
    pub fn verify_step(&mut self, retained: &[&[DraftToken]]) -> VerifyOutcome {
        let accepted_counts = retained
            .iter()
            .map(|row| row.iter().take_while(|t| t.would_accept()).count())
            .collect();
        let bonus = retained.iter().map(|_| self.rng.random::<u32>()).collect();
        VerifyOutcome {
            accepted_counts,
            bonus,
        }
    }
}

impl DraftModel for SyntheticOracle {
    fn draft(&mut self, categories: &[CategoryId], position: usize) -> Result<Vec<DraftToken>> {
        self.draft_step(categories, position)
    }
}

impl TargetModel for SyntheticOracle {
    fn verify(&mut self, retained: &[&[DraftToken]]) -> Result<VerifyOutcome> {
        Ok(self.verify_step(retained))
    }
}
