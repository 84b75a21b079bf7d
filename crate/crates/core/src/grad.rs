//! Off-policy policy-gradient assembly.
//!
//! Each trajectory yields one weighted score vector `h_i = sum_t c_t * grad log
//! pi(y_t)`, where the per-token coefficients `c_t` come from the importance
//! weighting rule. Sequence-level rules broadcast one weight to every token, so
//! `h_i = w_i * g_i`. The update is `(1/B) sum_i (R_i - b) h_i`, formed from two
//! running buffers `G_R = sum R_i h_i` and `G_S = sum h_i` so the baseline can be
//! chosen after the single gradient pass:
//!
//! ```text
//! grad = (G_R - b * G_S) / B,   b = N / (D + eps)
//! N = sum ||h_i||^2 R_i,        D = sum ||h_i||^2
//! ```
//!
//! For sequence rules `||h_i||^2 = w_i^2 ||g_i||^2`. Group-scoped baselines keep
//! one `G_S` buffer per group. Leave-one-out is the group-mean estimator scaled
//! by `n / (n - 1)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, Sample};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory};
use crate::weighting::{self, ClipMaskConfig, ClipMode, Level, WeightReport};

/// How importance ratios become per-token coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Untruncated sequence ratio.
    Raw,
    ClipMask(ClipMaskConfig),
    /// Token ratios with greedy second-moment masking over the batch.
    M2po {
        threshold: f64,
    },
    /// Geometric sequence ratio with asymmetric PPO-style clipping.
    Gspo {
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    GroupMean,
    Rloo,
    /// Variance-aware baseline from the exact `||h_i||^2`.
    Opob,
    /// Same formula with `s_i` replaced by the completion length.
    OpoLength,
    /// Same formula with `s_i` replaced by summed per-token energy weights.
    OtbEnergy,
}

impl BaselineKind {
    pub fn uses_gradients(self) -> bool {
        matches!(
            self,
            BaselineKind::Opob | BaselineKind::OpoLength | BaselineKind::OtbEnergy
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Batch,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub transform: Transform,
    pub baseline: BaselineKind,
    pub scope: Scope,
    /// Use unclipped ratios inside the variance-aware baseline.
    pub opob_raw_ratios: bool,
    pub eps: f64,
}

impl EstimatorConfig {
    pub fn new(transform: Transform, baseline: BaselineKind) -> Self {
        EstimatorConfig {
            transform,
            baseline,
            scope: Scope::Batch,
            opob_raw_ratios: false,
            eps: baselines::DEFAULT_EPS,
        }
    }

    /// Sequence truncation at `c` with the variance-aware baseline.
    pub fn vcpo(c: f64) -> Self {
        Self::new(Transform::ClipMask(ClipMaskConfig::seq_tis(c)), BaselineKind::Opob)
    }

    pub fn validate(&self) -> Result<()> {
        match self.transform {
            Transform::Raw => {}
            Transform::ClipMask(c) => c.validate()?,
            Transform::M2po { threshold } => {
                if !(threshold > 0.0 && threshold.is_finite()) {
                    return Err(Error::config("method.m2po_threshold", "threshold must be positive"));
                }
            }
            Transform::Gspo { low, high } => {
                if !(low.is_finite() && high.is_finite() && (0.0..1.0).contains(&low) && high > 1.0) {
                    return Err(Error::config("method.gspo", "need 0 <= low < 1 < high"));
                }
                if self.baseline.uses_gradients() {
                    return Err(Error::config(
                        "method.baseline",
                        "GSPO clipping depends on the advantage sign, so the baseline must not depend on gradients",
                    ));
                }
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("method.eps", "eps must be finite and >= 0"));
        }
        Ok(())
    }

    /// Self-describing label written into logs.
    pub fn tag(&self) -> String {
        let t = match self.transform {
            Transform::Raw => "raw_is".to_string(),
            Transform::ClipMask(c) => {
                let lvl = match c.level {
                    Level::Sequence => "seq",
                    Level::Token => "tok",
                    Level::GeoMean => "geo",
                };
                let m = match c.mode {
                    ClipMode::Truncate => "tis",
                    ClipMode::Mask => "mis",
                };
                format!("{lvl}_{m}(a={},c={})", c.a, c.c)
            }
            Transform::M2po { threshold } => format!("m2po_tok(t={threshold})"),
            Transform::Gspo { low, high } => format!("gspo_geo(lo={low},hi={high})"),
        };
        let b = match self.baseline {
            BaselineKind::Zero => "zero",
            BaselineKind::GroupMean => "group_mean",
            BaselineKind::Rloo => "rloo",
            BaselineKind::Opob => "opob",
            BaselineKind::OpoLength => "opo_length",
            BaselineKind::OtbEnergy => "otb_energy",
        };
        let scope = match self.scope {
            Scope::Batch => "batch",
            Scope::Group => "group",
        };
        let raw = if self.baseline.uses_gradients() && self.opob_raw_ratios {
            ",raw_ratios"
        } else {
            ""
        };
        format!("{t}+{b}[{scope}{raw}],baseline_after_clip")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    /// ESS of the unclipped sequence ratios; masked samples count as 0.
    /// Zero when every sample is masked.
    pub ess: f64,
    pub ess_ratio: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub masked_count: usize,
    pub masked_tokens: usize,
    pub total_tokens: usize,
    pub reward_mean: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub gradient: Vec<f64>,
    /// Batch baseline, or the mean of the per-group baselines.
    pub baseline: f64,
    pub stats: BatchStats,
    pub tag: String,
    /// Set when no sample carried weight; the optimizer must not step.
    pub skipped: bool,
}

/// Running buffers for one baseline scope.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeBuffer {
    pub g_s: Vec<f64>,
    pub n: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulators {
    pub g_r: Vec<f64>,
    pub scopes: BTreeMap<u64, ScopeBuffer>,
}

impl GradAccumulators {
    pub fn new(dim: usize) -> Self {
        GradAccumulators {
            g_r: vec![0.0; dim],
            scopes: BTreeMap::new(),
        }
    }

    /// Adds one weighted score vector with reward `r` and baseline weight `q`.
    pub fn add(&mut self, key: u64, h: &[f64], r: f64, q: f64) {
        let dim = self.g_r.len();
        let buf = self.scopes.entry(key).or_insert_with(|| ScopeBuffer {
            g_s: vec![0.0; dim],
            n: 0.0,
            d: 0.0,
        });
        for ((gr, gs), x) in self.g_r.iter_mut().zip(buf.g_s.iter_mut()).zip(h) {
            *gr += r * x;
            *gs += x;
        }
        buf.n += q * r;
        buf.d += q;
    }

    /// `(G_R - sum_k b_k G_S^k) / B`.
    pub fn finish(&self, baselines: &BTreeMap<u64, f64>, batch_size: usize) -> Vec<f64> {
        let mut out = self.g_r.clone();
        for (k, buf) in &self.scopes {
            let b = baselines.get(k).copied().unwrap_or(0.0);
            for (o, s) in out.iter_mut().zip(&buf.g_s) {
                *o -= b * s;
            }
        }
        let inv = 1.0 / batch_size as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }
}

/// Per-sample data shared by both assembly paths.
struct Prepared {
    report: WeightReport,
    learner_lp: Vec<f64>,
    coefs: Vec<f64>,
    raw_coefs: Vec<f64>,
    key: u64,
}

impl Prepared {
    fn masked(&self) -> bool {
        self.coefs.iter().all(|&c| c == 0.0)
    }

    /// RMS of the coefficients: the sequence weight for sequence rules.
    fn weight(&self) -> f64 {
        let n = self.coefs.len().max(1) as f64;
        (self.coefs.iter().map(|c| c * c).sum::<f64>() / n).sqrt()
    }
}

fn scope_key(cfg: &EstimatorConfig, tr: &Trajectory) -> u64 {
    match cfg.scope {
        Scope::Batch => 0,
        Scope::Group => tr.group_id,
    }
}

fn prepare(batch: &[Trajectory], learner: &PolicyParams, cfg: &EstimatorConfig) -> Result<Vec<Prepared>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for tr in batch {
        tr.check_invariants()?;
        let lp = learner.log_prob(&tr.prompt, &tr.completion)?;
        let report = weighting::ratios_from_logprobs(&lp.per_token, &tr.sampler_logprobs)?;
        out.push(Prepared {
            report,
            learner_lp: lp.per_token,
            coefs: Vec::new(),
            raw_coefs: Vec::new(),
            key: scope_key(cfg, tr),
        });
    }
    let m2po_keep = match cfg.transform {
        Transform::M2po { threshold } => {
            let ratios: Vec<Vec<f64>> = out.iter().map(|p| p.report.token_ratios.clone()).collect();
            Some(weighting::m2po_mask(&ratios, threshold))
        }
        _ => None,
    };
    for (i, p) in out.iter_mut().enumerate() {
        let t = p.report.token_ratios.len();
        let (coefs, raw): (Vec<f64>, Vec<f64>) = match cfg.transform {
            Transform::Raw => (vec![p.report.seq_ratio; t], vec![p.report.seq_ratio; t]),
            Transform::ClipMask(c) => {
                let tr = weighting::apply_clip_mask(&p.report, &c);
                let raw = match c.level {
                    Level::Token => p.report.token_ratios.clone(),
                    _ => vec![p.report.seq_ratio; t],
                };
                let coefs = if tr.mask_flag { vec![0.0; t] } else { tr.token_weights };
                (coefs, raw)
            }
            Transform::M2po { .. } => {
                let keep = &m2po_keep.as_ref().expect("mask computed")[i];
                let c = p
                    .report
                    .token_ratios
                    .iter()
                    .zip(keep)
                    .map(|(&r, &k)| if k { r } else { 0.0 })
                    .collect();
                (c, p.report.token_ratios.clone())
            }
            // d s / d theta = s * (1/T) sum_t grad log pi(y_t); the keep mask is
            // applied once the advantage sign is known.
            Transform::Gspo { .. } => {
                let c = vec![p.report.geo_mean_ratio / t as f64; t];
                (c.clone(), c)
            }
        };
        p.raw_coefs = raw
            .iter()
            .zip(&coefs)
            .map(|(&r, &c)| if c == 0.0 { 0.0 } else { r })
            .collect();
        p.coefs = coefs;
    }
    Ok(out)
}

/// Group sizes and reward means per scope key, over every sample.
fn reward_means(batch: &[Trajectory], prep: &[Prepared]) -> BTreeMap<u64, (f64, usize)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (tr, p) in batch.iter().zip(prep) {
        let e = acc.entry(p.key).or_default();
        e.0 += tr.reward;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

/// Zeroes GSPO samples whose clipped branch is active: positive advantage above
/// `high`, or negative advantage below `low`.
fn apply_gspo_keep(cfg: &EstimatorConfig, prep: &mut [Prepared], advantages: &[f64]) {
    if let Transform::Gspo { low, high } = cfg.transform {
        for (p, &a) in prep.iter_mut().zip(advantages) {
            let s = p.report.geo_mean_ratio;
            if (a > 0.0 && s > high) || (a < 0.0 && s < low) {
                p.coefs.iter_mut().for_each(|c| *c = 0.0);
                p.raw_coefs.iter_mut().for_each(|c| *c = 0.0);
            }
        }
    }
}

fn otb_energy(learner: &PolicyParams, tr: &Trajectory) -> f64 {
    (0..tr.completion.len())
        .map(|t| {
            let probs = learner.next_probs(&tr.prompt, &tr.completion[..t]);
            baselines::otb_energy_weight(&probs, probs[tr.completion[t] as usize])
        })
        .sum()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Weight `q_i` of a sample inside the variance-aware formula.
fn baseline_weight(cfg: &EstimatorConfig, learner: &PolicyParams, tr: &Trajectory, p: &Prepared, h: &[f64]) -> f64 {
    match cfg.baseline {
        BaselineKind::Opob if cfg.opob_raw_ratios => {
            let mut hr = vec![0.0; h.len()];
            learner.accumulate_token_scores(&tr.prompt, &tr.completion, &p.raw_coefs, &mut hr);
            norm_sq(&hr)
        }
        BaselineKind::Opob => norm_sq(h),
        BaselineKind::OpoLength => p.weight().powi(2) * tr.completion.len() as f64,
        BaselineKind::OtbEnergy => p.weight().powi(2) * otb_energy(learner, tr),
        _ => 0.0,
    }
}

fn stats_for(batch: &[Trajectory], prep: &[Prepared], gradient: &[f64]) -> BatchStats {
    let logw: Vec<Option<f64>> = prep
        .iter()
        .map(|p| (!p.masked()).then_some(p.report.log_seq_ratio))
        .collect();
    let (ess, ess_ratio) = match weighting::ess_from_log(&logw) {
        Ok(e) => (e.ess, e.ess_ratio),
        Err(_) => (0.0, 0.0),
    };
    let mut kl = 0.0;
    let mut total_tokens = 0;
    for (tr, p) in batch.iter().zip(prep) {
        for (l, s) in p.learner_lp.iter().zip(&tr.sampler_logprobs) {
            kl += weighting::k3(l - s);
        }
        total_tokens += tr.completion.len();
    }
    BatchStats {
        ess,
        ess_ratio,
        kl: kl / total_tokens.max(1) as f64,
        grad_norm: norm_sq(gradient).sqrt(),
        masked_count: prep.iter().filter(|p| p.masked()).count(),
        masked_tokens: prep.iter().map(|p| p.coefs.iter().filter(|&&c| c == 0.0).count()).sum(),
        total_tokens,
        reward_mean: batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64,
        warnings: Vec::new(),
    }
}

fn mean_of(map: &BTreeMap<u64, f64>) -> f64 {
    if map.is_empty() {
        0.0
    } else {
        map.values().sum::<f64>() / map.len() as f64
    }
}

/// Reward-only baselines per scope key, and each sample's advantage under them.
fn reward_only_baselines(
    cfg: &EstimatorConfig,
    batch: &[Trajectory],
    prep: &[Prepared],
) -> Result<(BTreeMap<u64, f64>, Vec<f64>)> {
    let means = reward_means(batch, prep);
    if cfg.baseline == BaselineKind::Rloo {
        if let Some((k, _)) = means.iter().find(|(_, (_, n))| *n < 2) {
            return Err(Error::DegenerateBatch(format!(
                "leave-one-out baseline needs at least 2 samples in scope {k}"
            )));
        }
    }
    let b: BTreeMap<u64, f64> = means
        .iter()
        .map(|(&k, &(m, _))| {
            let v = match cfg.baseline {
                BaselineKind::GroupMean | BaselineKind::Rloo => m,
                _ => 0.0,
            };
            (k, v)
        })
        .collect();
    let adv = batch.iter().zip(prep).map(|(tr, p)| tr.reward - b[&p.key]).collect();
    Ok((b, adv))
}

fn single_sample(batch: &[Trajectory], prep: &[Prepared], dim: usize, cfg: &EstimatorConfig) -> UpdateReport {
    let gradient = vec![0.0; dim];
    let mut stats = stats_for(batch, prep, &gradient);
    stats
        .warnings
        .push("batch of one sample: the baseline equals its reward and the update is zero".into());
    UpdateReport {
        gradient,
        baseline: batch[0].reward,
        stats,
        tag: cfg.tag(),
        skipped: false,
    }
}

fn skipped(batch: &[Trajectory], prep: &[Prepared], dim: usize, cfg: &EstimatorConfig) -> UpdateReport {
    let gradient = vec![0.0; dim];
    let mut stats = stats_for(batch, prep, &gradient);
    stats.warnings.push("every sample is masked; update skipped".into());
    UpdateReport {
        gradient,
        baseline: 0.0,
        stats,
        tag: cfg.tag(),
        skipped: true,
    }
}

/// Single-pass assembly through the two gradient buffers.
pub fn accumulate_batch(batch: &[Trajectory], learner: &PolicyParams, cfg: &EstimatorConfig) -> Result<UpdateReport> {
    let mut prep = prepare(batch, learner, cfg)?;
    let dim = learner.dim();
    if batch.len() == 1 {
        return Ok(single_sample(batch, &prep, dim, cfg));
    }
    let (mut b, adv) = reward_only_baselines(cfg, batch, &prep)?;
    apply_gspo_keep(cfg, &mut prep, &adv);
    if prep.iter().all(Prepared::masked) {
        return Ok(skipped(batch, &prep, dim, cfg));
    }
    let sizes = reward_means(batch, &prep);
    let mut acc = GradAccumulators::new(dim);
    let mut h = vec![0.0; dim];
    for (tr, p) in batch.iter().zip(&prep) {
        if p.masked() {
            continue;
        }
        h.iter_mut().for_each(|x| *x = 0.0);
        learner.accumulate_token_scores(&tr.prompt, &tr.completion, &p.coefs, &mut h);
        if cfg.baseline == BaselineKind::Rloo {
            let n = sizes[&p.key].1 as f64;
            h.iter_mut().for_each(|x| *x *= n / (n - 1.0));
        }
        let q = baseline_weight(cfg, learner, tr, p, &h);
        acc.add(p.key, &h, tr.reward, q);
    }
    if cfg.baseline.uses_gradients() {
        for (k, buf) in &acc.scopes {
            let denom = buf.d + cfg.eps;
            b.insert(*k, if denom > 0.0 { buf.n / denom } else { 0.0 });
        }
    }
    let gradient = acc.finish(&b, batch.len());
    let stats = stats_for(batch, &prep, &gradient);
    Ok(UpdateReport {
        gradient,
        baseline: mean_of(&b),
        stats,
        tag: cfg.tag(),
        skipped: false,
    })
}

/// Reference assembly: pass one computes every `h_i` and the baselines, pass
/// two recomputes `h_i` and sums `(R_i - b_i) h_i / B` directly.
pub fn naive_two_pass(batch: &[Trajectory], learner: &PolicyParams, cfg: &EstimatorConfig) -> Result<UpdateReport> {
    let mut prep = prepare(batch, learner, cfg)?;
    let dim = learner.dim();
    if batch.len() == 1 {
        return Ok(single_sample(batch, &prep, dim, cfg));
    }
    let (_, adv) = reward_only_baselines(cfg, batch, &prep)?;
    apply_gspo_keep(cfg, &mut prep, &adv);
    if prep.iter().all(Prepared::masked) {
        return Ok(skipped(batch, &prep, dim, cfg));
    }
    let score = |tr: &Trajectory, p: &Prepared| {
        let mut h = vec![0.0; dim];
        learner.accumulate_token_scores(&tr.prompt, &tr.completion, &p.coefs, &mut h);
        h
    };

    // pass 1
    let mut rows: Vec<Sample> = Vec::with_capacity(batch.len());
    for (tr, p) in batch.iter().zip(&prep) {
        let h = score(tr, p);
        let (weight, s) = match cfg.baseline {
            BaselineKind::Opob => (1.0, baseline_weight(cfg, learner, tr, p, &h)),
            BaselineKind::OtbEnergy => (p.weight(), otb_energy(learner, tr)),
            _ => (p.weight(), 0.0),
        };
        rows.push(Sample {
            weight,
            reward: tr.reward,
            grad_norm_sq: s,
            length: tr.completion.len(),
            group_id: p.key,
        });
    }
    let mut per_sample = vec![0.0; batch.len()];
    let mut scope_b: BTreeMap<u64, f64> = BTreeMap::new();
    let keys: Vec<u64> = reward_means(batch, &prep).keys().copied().collect();
    for k in keys {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| prep[i].key == k).collect();
        let all: Vec<Sample> = idx.iter().map(|&i| rows[i]).collect();
        let live: Vec<Sample> = idx.iter().filter(|&&i| !prep[i].masked()).map(|&i| rows[i]).collect();
        let gradient_aware = |f: &dyn Fn(&[Sample]) -> Result<f64>| -> Result<f64> {
            if live.is_empty() {
                Ok(0.0)
            } else {
                f(&live)
            }
        };
        let b = match cfg.baseline {
            BaselineKind::Zero => 0.0,
            BaselineKind::GroupMean | BaselineKind::Rloo => baselines::group_mean(&all)[&k],
            BaselineKind::Opob | BaselineKind::OtbEnergy => gradient_aware(&|x| baselines::opob(x, cfg.eps))?,
            BaselineKind::OpoLength => gradient_aware(&|x| baselines::opo_length_baseline(x, cfg.eps))?,
        };
        scope_b.insert(k, b);
        for (j, &i) in idx.iter().enumerate() {
            per_sample[i] = if cfg.baseline == BaselineKind::Rloo {
                baselines::rloo(&all, j)?
            } else {
                b
            };
        }
    }

    // pass 2
    let mut gradient = vec![0.0; dim];
    for (i, (tr, p)) in batch.iter().zip(&prep).enumerate() {
        if p.masked() {
            continue;
        }
        let h = score(tr, p);
        let a = tr.reward - per_sample[i];
        for (g, x) in gradient.iter_mut().zip(&h) {
            *g += a * x;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    gradient.iter_mut().for_each(|x| *x *= inv);
    let stats = stats_for(batch, &prep, &gradient);
    Ok(UpdateReport {
        gradient,
        baseline: mean_of(&scope_b),
        stats,
        tag: cfg.tag(),
        skipped: false,
    })
}

/// Truncated sequence weights plus the variance-aware baseline. Batch ESS is
/// always reported from the unclipped ratios.
pub fn vcpo_update(batch: &[Trajectory], learner: &PolicyParams, c: f64) -> Result<UpdateReport> {
    accumulate_batch(batch, learner, &EstimatorConfig::vcpo(c))
}

/// Subtracts `beta * sum_t (log pi_learner - log pi_ref)` from each reward.
pub fn shape_rewards_kl(
    batch: &mut [Trajectory],
    learner: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
) -> Result<()> {
    for tr in batch.iter_mut() {
        let l = learner.log_prob(&tr.prompt, &tr.completion)?.total;
        let r = reference.log_prob(&tr.prompt, &tr.completion)?.total;
        tr.reward -= beta * (l - r);
    }
    Ok(())
}
