//! Scalar reward baselines.
//!
//! The variance-aware baseline weighs each reward by `w_i^2 * s_i`, where `s_i`
//! is the squared norm of the sample's score gradient. Group mean and
//! leave-one-out are the usual critic-free choices; the length and
//! token-energy variants swap `s_i` for a cheap proxy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-12;

/// One row per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub weight: f64,
    pub reward: f64,
    /// Squared score-gradient norm `||g_i||^2`.
    pub grad_norm_sq: f64,
    pub length: usize,
    pub group_id: u64,
}

pub fn check(input: &[Sample]) -> Result<()> {
    if input.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    for s in input {
        if !s.weight.is_finite() || s.weight < 0.0 || !s.reward.is_finite() {
            return Err(Error::Data("weights must be finite and >= 0, rewards finite".into()));
        }
        if !s.grad_norm_sq.is_finite() || s.grad_norm_sq < 0.0 {
            return Err(Error::Data("grad_norm_sq must be finite and >= 0".into()));
        }
    }
    Ok(())
}

/// `sum w^2 s R / (sum w^2 s + eps)`.
pub fn opob(input: &[Sample], eps: f64) -> Result<f64> {
    check(input)?;
    let (n, d) = input.iter().fold((0.0, 0.0), |(n, d), x| {
        let q = x.weight * x.weight * x.grad_norm_sq;
        (n + q * x.reward, d + q)
    });
    if d + eps <= 0.0 {
        return Err(Error::DegenerateBatch("second-moment weights sum to zero".into()));
    }
    Ok(n / (d + eps))
}

/// Mean reward per group id.
pub fn group_mean(input: &[Sample]) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for s in input {
        let e = acc.entry(s.group_id).or_default();
        e.0 += s.reward;
        e.1 += 1;
    }
    acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
}

/// Mean reward of the other members of sample `k`'s group.
pub fn rloo(input: &[Sample], k: usize) -> Result<f64> {
    let g = input
        .get(k)
        .ok_or_else(|| Error::Input(format!("sample {k} out of range")))?
        .group_id;
    let (sum, n) = input
        .iter()
        .enumerate()
        .filter(|(i, s)| *i != k && s.group_id == g)
        .fold((0.0, 0usize), |(s, n), (_, x)| (s + x.reward, n + 1));
    if n == 0 {
        return Err(Error::DegenerateBatch(format!("group {g} has a single sample")));
    }
    Ok(sum / n as f64)
}

/// `1 - 2 pi(y) + ||pi||^2`: the squared norm of the logit-space score of one
/// token under a softmax.
pub fn otb_energy_weight(dist: &[f64], p_y: f64) -> f64 {
    let sq: f64 = dist.iter().map(|p| p * p).sum();
    1.0 - 2.0 * p_y + sq
}

/// The variance-aware formula with `s_i` replaced by the completion length.
pub fn opo_length_baseline(input: &[Sample], eps: f64) -> Result<f64> {
    if input.iter().any(|s| s.length == 0) {
        return Err(Error::Input("lengths must be positive".into()));
    }
    let proxy: Vec<Sample> = input
        .iter()
        .map(|s| Sample {
            grad_norm_sq: s.length as f64,
            ..*s
        })
        .collect();
    opob(&proxy, eps)
}
