//! Free-energy gate deciding which samples take the adaptation path.
//!
//! The score is `logsumexp(f)` over the flattened millimetre pose, i.e. the
//! negated free energy. With millimetre inputs the score is dominated by the
//! largest coordinate, so the default gate (`ood_below` at 800) flags poses
//! whose extent along every axis stays under roughly 800 mm.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodDirection {
    /// Out-of-distribution when the score is strictly below the threshold.
    OodBelow,
    /// Out-of-distribution when the score is strictly above the threshold.
    OodAbove,
}

impl fmt::Display for OodDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodDirection::OodBelow => "below",
            OodDirection::OodAbove => "above",
        })
    }
}

impl FromStr for OodDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "below" | "ood_below" => Ok(OodDirection::OodBelow),
            "above" | "ood_above" => Ok(OodDirection::OodAbove),
            other => Err(Error::Argument(format!("unknown OOD direction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyDecision {
    pub score: f64,
    pub is_ood: bool,
    pub threshold_used: f64,
    pub direction: OodDirection,
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Direct evaluation; overflows for inputs above ~709.
pub fn logsumexp_naive(values: &[f64]) -> f64 {
    values.iter().map(|v| v.exp()).sum::<f64>().ln()
}

/// `logsumexp` of the flattened pose (the negated free energy).
pub fn energy_score(pose: &Pose) -> Result<f64> {
    pose.ensure_finite()?;
    Ok(logsumexp(&pose.flatten()))
}

/// Threshold comparison; a score equal to the threshold is in-distribution.
pub fn classify(score: f64, threshold: f64, direction: OodDirection) -> EnergyDecision {
    let is_ood = match direction {
        OodDirection::OodBelow => score < threshold,
        OodDirection::OodAbove => score > threshold,
    };
    EnergyDecision {
        score,
        is_ood,
        threshold_used: threshold,
        direction,
    }
}

/// Seeded Bernoulli stream used as the random-selection baseline.
#[derive(Debug, Clone)]
pub struct RandomSelector {
    rate: f64,
    rng: ChaCha8Rng,
}

impl RandomSelector {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Argument(format!("selection rate {rate} outside [0, 1]")));
        }
        Ok(Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Iterator for RandomSelector {
    type Item = bool;

    fn next(&mut self) -> Option<bool> {
        Some(self.rng.random::<f64>() < self.rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Energy,
    Random,
    All,
    None,
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorKind::Energy => "energy",
            SelectorKind::Random => "random",
            SelectorKind::All => "all",
            SelectorKind::None => "none",
        })
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(SelectorKind::Energy),
            "random" => Ok(SelectorKind::Random),
            "all" => Ok(SelectorKind::All),
            "none" => Ok(SelectorKind::None),
            other => Err(Error::Argument(format!("unknown selector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    pub threshold: f64,
    pub direction: OodDirection,
    pub random_rate: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            kind: SelectorKind::Energy,
            threshold: DEFAULT_ENERGY_THRESHOLD,
            direction: OodDirection::OodBelow,
            random_rate: 0.0,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn with_kind(kind: SelectorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Energy decisions for every pose plus the per-sample selection flags
    /// implied by the configured policy, in input order.
    pub fn decide(&self, scores: &[f64]) -> Result<Vec<(EnergyDecision, bool)>> {
        let decisions = scores
            .iter()
            .map(|&s| classify(s, self.threshold, self.direction));
        Ok(match self.kind {
            SelectorKind::Energy => decisions.map(|d| (d, d.is_ood)).collect(),
            SelectorKind::All => decisions.map(|d| (d, true)).collect(),
            SelectorKind::None => decisions.map(|d| (d, false)).collect(),
            SelectorKind::Random => decisions
                .zip(RandomSelector::new(self.random_rate, self.seed)?)
                .collect(),
        })
    }
}
