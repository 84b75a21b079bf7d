//! Importance ratios between the learner and the sampler, the truncation and
//! masking transforms applied to them, and effective-sample-size diagnostics.
//!
//! All ratios are formed in log space. A sequence ratio is the product of its
//! token ratios; the geometric ratio is its `T`-th root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory};

/// Granularity at which a clip/mask rule is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Sequence,
    Token,
    GeoMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Truncate,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMaskConfig {
    pub level: Level,
    pub mode: ClipMode,
    /// Lower bound `a >= 0`.
    pub a: f64,
    /// Upper bound `c > a`.
    pub c: f64,
    pub m2po_threshold: Option<f64>,
}

impl ClipMaskConfig {
    pub const DEFAULT_C: f64 = 8.0;

    pub fn new(level: Level, mode: ClipMode, a: f64, c: f64) -> Self {
        ClipMaskConfig {
            level,
            mode,
            a,
            c,
            m2po_threshold: None,
        }
    }

    /// Sequence-level truncation into `[0, c]`.
    pub fn seq_tis(c: f64) -> Self {
        Self::new(Level::Sequence, ClipMode::Truncate, 0.0, c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.c.is_finite() {
            return Err(Error::config("method.c", "clip bounds must be finite"));
        }
        if self.a < 0.0 {
            return Err(Error::config("method.a", "lower bound must be >= 0"));
        }
        if self.c <= self.a {
            return Err(Error::config("method.c", "upper bound must exceed the lower bound"));
        }
        if let Some(t) = self.m2po_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("method.m2po_threshold", "threshold must be positive"));
            }
        }
        Ok(())
    }

    fn inside(&self, r: f64) -> bool {
        r > self.a && r < self.c
    }
}

/// Ratios for one trajectory, before and after a transform.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub log_seq_ratio: f64,
    pub seq_ratio: f64,
    pub token_ratios: Vec<f64>,
    pub geo_mean_ratio: f64,
    /// Sequence weight after the transform. Equals `seq_ratio` until
    /// [`apply_clip_mask`] is called. For token-level rules it is the product
    /// of the transformed token weights.
    pub truncated_seq_ratio: f64,
    /// Per-token weights after the transform (token-level rules only touch
    /// these; sequence rules broadcast the sequence weight).
    pub token_weights: Vec<f64>,
    pub mask_flag: bool,
    pub tag: &'static str,
}

impl WeightReport {
    /// Weight the estimator actually uses for a sequence-level method.
    pub fn effective_weight(&self) -> f64 {
        if self.mask_flag {
            0.0
        } else {
            self.truncated_seq_ratio
        }
    }

    pub fn masked_tokens(&self) -> usize {
        if self.mask_flag {
            self.token_weights.len()
        } else {
            self.token_weights.iter().filter(|&&w| w == 0.0).count()
        }
    }
}

/// Ratios from explicit per-token log-probabilities.
pub fn ratios_from_logprobs(learner: &[f64], sampler: &[f64]) -> Result<WeightReport> {
    if learner.len() != sampler.len() {
        return Err(Error::Data(format!(
            "{} learner logprobs vs {} sampler logprobs",
            learner.len(),
            sampler.len()
        )));
    }
    if learner.is_empty() {
        return Err(Error::Data("empty completion".into()));
    }
    if learner.iter().chain(sampler).any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite logprob".into()));
    }
    let diffs: Vec<f64> = learner.iter().zip(sampler).map(|(l, s)| l - s).collect();
    let log_seq: f64 = diffs.iter().sum();
    let token_ratios: Vec<f64> = diffs.iter().map(|d| d.exp()).collect();
    let seq = log_seq.exp();
    Ok(WeightReport {
        log_seq_ratio: log_seq,
        seq_ratio: seq,
        geo_mean_ratio: (log_seq / diffs.len() as f64).exp(),
        truncated_seq_ratio: seq,
        token_weights: token_ratios.clone(),
        token_ratios,
        mask_flag: false,
        tag: "raw",
    })
}

/// Untruncated ratios of `traj` under `learner`, recomputing learner
/// log-probabilities.
pub fn compute_ratios(traj: &Trajectory, learner: &PolicyParams) -> Result<WeightReport> {
    let lp = learner.log_prob(&traj.prompt, &traj.completion)?;
    ratios_from_logprobs(&lp.per_token, &traj.sampler_logprobs)
}

pub fn apply_clip_mask(report: &WeightReport, cfg: &ClipMaskConfig) -> WeightReport {
    let mut out = report.clone();
    let t = report.token_ratios.len();
    match (cfg.level, cfg.mode) {
        (Level::Sequence, ClipMode::Truncate) => {
            out.truncated_seq_ratio = report.seq_ratio.clamp(cfg.a, cfg.c);
            out.token_weights = vec![out.truncated_seq_ratio; t];
            out.tag = "seq_tis";
        }
        (Level::Sequence, ClipMode::Mask) => {
            out.mask_flag = !cfg.inside(report.seq_ratio);
            out.token_weights = vec![if out.mask_flag { 0.0 } else { report.seq_ratio }; t];
            out.tag = "seq_mis";
        }
        (Level::Token, mode) => {
            out.token_weights = report
                .token_ratios
                .iter()
                .map(|&r| match mode {
                    ClipMode::Truncate => r.clamp(cfg.a, cfg.c),
                    ClipMode::Mask if cfg.inside(r) => r,
                    ClipMode::Mask => 0.0,
                })
                .collect();
            out.truncated_seq_ratio = out.token_weights.iter().product();
            out.mask_flag = out.token_weights.iter().all(|&w| w == 0.0);
            out.tag = if mode == ClipMode::Truncate {
                "tok_tis"
            } else {
                "tok_mis"
            };
        }
        (Level::GeoMean, ClipMode::Truncate) => {
            // w' = w * (g'/g)^T = g'^T
            let g = report.geo_mean_ratio.clamp(cfg.a, cfg.c);
            out.truncated_seq_ratio = (g.ln() * t as f64).exp();
            out.token_weights = vec![out.truncated_seq_ratio; t];
            out.tag = "geo_tis";
        }
        (Level::GeoMean, ClipMode::Mask) => {
            out.mask_flag = !cfg.inside(report.geo_mean_ratio);
            out.token_weights = vec![if out.mask_flag { 0.0 } else { report.seq_ratio }; t];
            out.tag = "geo_mis";
        }
    }
    out
}

/// Greedy token masking: drop the token with the largest `|log w_t|` until the
/// mean of `(log w_t)^2` over kept tokens is at most `threshold`. Ties go to
/// the lowest `(trajectory, token)` index.
pub fn m2po_mask(batch: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    let mut keep: Vec<Vec<bool>> = batch.iter().map(|r| vec![true; r.len()]).collect();
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    let mut sum_sq = 0.0;
    for (i, ratios) in batch.iter().enumerate() {
        for (t, r) in ratios.iter().enumerate() {
            let l = r.ln();
            sum_sq += l * l;
            order.push((l.abs(), i, t));
        }
    }
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut kept = order.len();
    for &(abs, i, t) in &order {
        if kept == 0 || sum_sq / kept as f64 <= threshold {
            break;
        }
        keep[i][t] = false;
        sum_sq = (sum_sq - abs * abs).max(0.0);
        kept -= 1;
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssStats {
    pub ess: f64,
    pub ess_ratio: f64,
    pub batch_size: usize,
}

/// `(sum w)^2 / sum w^2`. Zero entries stand for masked samples and still
/// count towards the batch size.
pub fn ess(weights: &[f64]) -> Result<EssStats> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Data("ESS weights must be finite and non-negative".into()));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::DegenerateBatch("all importance weights are zero".into()));
    }
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), w| {
        let x = w / max;
        (s + x, s2 + x * x)
    });
    let b = weights.len();
    let e = (s * s / s2).clamp(1.0, b as f64);
    Ok(EssStats {
        ess: e,
        ess_ratio: e / b as f64,
        batch_size: b,
    })
}

/// ESS from log-weights; `None` marks a masked sample (weight 0). Safe when the
/// weights themselves would overflow.
pub fn ess_from_log(log_weights: &[Option<f64>]) -> Result<EssStats> {
    let max = log_weights.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateBatch("all importance weights are zero".into()));
    }
    if !max.is_finite() {
        return Err(Error::Data("non-finite log weight".into()));
    }
    let w: Vec<f64> = log_weights.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
    ess(&w)
}

/// Per-token `r - 1 - log r` with `log r = learner - sampler`.
pub fn k3(log_ratio: f64) -> f64 {
    (log_ratio.exp_m1() - log_ratio).max(0.0)
}

/// Mean k3 estimate over every token of the batch, using the learner
/// log-probabilities already stored on each trajectory.
pub fn kl_from_logprobs(batch: &[Trajectory]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in batch {
        for (l, s) in tr.learner_logprobs.iter().zip(&tr.sampler_logprobs) {
            sum += k3(l - s);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn kl_estimate(batch: &[Trajectory], learner: &PolicyParams) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in batch {
        let lp = learner.log_prob(&tr.prompt, &tr.completion)?;
        for (l, s) in lp.per_token.iter().zip(&tr.sampler_logprobs) {
            sum += k3(l - s);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
