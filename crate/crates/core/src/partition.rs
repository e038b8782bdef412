//! Seeded green/red vocabulary partitioning.
//!
//! The bit-exact contract: step seeds and hard memberships are stateless
//! hashes, so a detector written in any language can reproduce the partition
//! from `(global_key, preceding token, token id, gamma)` alone, without ever
//! materializing a list. The soft path relaxes the same Bernoulli draw with
//! a two-way Gumbel-Softmax for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix64;

/// Multiplier folding the preceding token into the step seed. Normative.
pub const STEP_SEED_MULTIPLIER: u64 = 0x9E3779B97F4A7C15;
/// Multiplier folding the queried token id into the membership hash. Normative.
pub const MEMBERSHIP_MULTIPLIER: u64 = 0xD2B74407B1CE6E93;

/// Splitting ratios are clamped to this band at every use so the z-score
/// denominator stays positive and the Gumbel logits stay finite.
pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 1.0 - 1e-3;

/// Clamp a splitting ratio into the usable band.
#[inline]
pub fn clamp_gamma(gamma: f64) -> f64 {
    gamma.clamp(GAMMA_MIN, GAMMA_MAX)
}

/// Experiment-wide secret key. Constant within a generation/detection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionKey {
    pub global_key: u64,
}

impl PartitionKey {
    pub fn new(global_key: u64) -> Self {
        Self { global_key }
    }
}

/// Per-step partition seed derived from the preceding token.
#[inline]
pub fn step_seed(key: PartitionKey, prev: u32) -> u64 {
    mix64(key.global_key ^ (prev as u64 + 1).wrapping_mul(STEP_SEED_MULTIPLIER))
}

/// Uniform variate in [0, 1) deciding the membership of token `v` under `seed`.
#[inline]
pub fn membership_unit(seed: u64, v: u32) -> f64 {
    let h = mix64(seed ^ (v as u64 + 1).wrapping_mul(MEMBERSHIP_MULTIPLIER));
    h as f64 / 18446744073709551616.0 // 2^64
}

/// Hard green-list membership: an O(1) stateless Bernoulli(gamma) draw.
#[inline]
pub fn hard_membership(seed: u64, v: u32, gamma: f64) -> Result<bool> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Input(format!(
            "gamma must lie strictly in (0,1), got {gamma}"
        )));
    }
    Ok(membership_unit(seed, v) < gamma)
}

/// Soft membership value with the noise that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftMembership {
    /// Relaxed membership in (0, 1).
    pub value: f64,
    pub gumbel_pair: (f64, f64),
    pub temperature: f64,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-way Gumbel-Softmax relaxation of a Bernoulli(gamma) membership draw.
///
/// Computed in log space as a logistic over the logit gap, which is exactly
/// the two-term softmax with arguments `(ln gamma + g0)/tau` and
/// `(ln(1-gamma) + g1)/tau`. The caller supplies the noise pair so gradient
/// checks can freeze it.
pub fn soft_membership(gamma: f64, tau: f64, g0: f64, g1: f64) -> Result<SoftMembership> {
    if tau <= 0.0 {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    let gamma = clamp_gamma(gamma);
    let gap = (gamma.ln() + g0) - ((1.0 - gamma).ln() + g1);
    let value = sigmoid(gap / tau);
    Ok(SoftMembership {
        value,
        gumbel_pair: (g0, g1),
        temperature: tau,
    })
}

/// Derivative of the soft membership w.r.t. gamma at fixed noise.
///
/// d y / d gamma = y (1-y) / (tau * gamma * (1-gamma)).
#[inline]
pub fn soft_membership_dgamma(value: f64, gamma: f64, tau: f64) -> f64 {
    value * (1.0 - value) / (tau * gamma * (1.0 - gamma))
}
