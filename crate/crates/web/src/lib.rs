//! Browser demo. Each exported function takes plain numbers or strings and
//! returns a JSON document that `www/index.html` draws on a canvas.
//!
//! The same computations are exposed as ordinary Rust functions so they can be
//! tested natively.

use serde::Serialize;
use vcpo_core::baselines::{self, Sample};
use vcpo_core::config::Method;
use vcpo_core::experiment;
use vcpo_core::optimizer::scaled_lr;
use vcpo_core::policy::{PolicyKind, PolicyParams, Token, Vocab};
use vcpo_core::rng::{Domain, Stream};
use vcpo_core::weighting::{self, ClipMaskConfig};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct EssView {
    pub weights: Vec<f64>,
    pub truncated: Vec<f64>,
    pub ess: f64,
    pub ess_ratio: f64,
    pub truncated_ess_ratio: f64,
    pub lr_eff: f64,
}

/// ESS of comma-separated raw sequence weights, the truncated weights at
/// `c`, and the step size the optimizer would take.
pub fn ess_view(weights: &str, c: f64, rho_on: f64, lr: f64) -> Result<EssView, String> {
    let w: Vec<f64> = weights
        .split([',', ' ', '\n'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: `{s}`")))
        .collect::<Result<_, _>>()?;
    if !(rho_on > 0.0 && rho_on <= 1.0) {
        return Err("rho_on must be in (0, 1]".into());
    }
    let cfg = ClipMaskConfig::seq_tis(c);
    cfg.validate().map_err(|e| e.to_string())?;
    let raw = weighting::ess(&w).map_err(|e| e.to_string())?;
    let truncated: Vec<f64> = w.iter().map(|x| x.clamp(cfg.a, cfg.c)).collect();
    let t = weighting::ess(&truncated).map_err(|e| e.to_string())?;
    Ok(EssView {
        lr_eff: scaled_lr(raw.ess_ratio, rho_on, lr),
        weights: w,
        truncated,
        ess: raw.ess,
        ess_ratio: raw.ess_ratio,
        truncated_ess_ratio: t.ess_ratio,
    })
}

#[derive(Debug, Serialize)]
pub struct BaselineCurve {
    pub b: Vec<f64>,
    /// Per-sample `tr Var` of `w (R - b) grad log pi` at each `b`.
    pub variance: Vec<f64>,
    pub opob: f64,
    pub reward_mean: f64,
    pub ess_ratio: f64,
}

const CURVE_PROMPT: [Token; 2] = [0, 2];
const CURVE_POINTS: usize = 81;

/// Empirical single-sample gradient variance as a function of a constant
/// baseline on a five-token tabular toy, with sampler/learner mismatch
/// controlled by `spread`.
pub fn baseline_curve(spread: f64, samples: usize, seed: u64) -> Result<BaselineCurve, String> {
    if samples < 2 || !(0.0..=5.0).contains(&spread) {
        return Err("need samples >= 2 and spread in [0, 5]".into());
    }
    let vocab = Vocab::standard(5).map_err(|e| e.to_string())?;
    let mu = PolicyParams::random(PolicyKind::TabularBigram, vocab, 0, 1.0, seed).map_err(|e| e.to_string())?;
    let mut rng = Stream::new(seed, Domain::Test, 1);
    let theta: Vec<f64> = mu.theta().iter().map(|x| x + spread * rng.normal()).collect();
    let pi = PolicyParams::from_theta(PolicyKind::TabularBigram, vocab, 0, theta, 1).map_err(|e| e.to_string())?;

    let mut rows = Vec::with_capacity(samples);
    let mut scores = Vec::with_capacity(samples);
    for i in 0..samples as u64 {
        let t = mu.sample(&CURVE_PROMPT, seed * 1_000_003 + i, 3);
        let lp = pi.log_prob(&t.prompt, &t.completion).map_err(|e| e.to_string())?;
        let w = (lp.total - t.sampler_logprobs.iter().sum::<f64>()).exp();
        let g = pi.score_gradient(&t.prompt, &t.completion);
        let reward = 1.0 + t.completion.iter().filter(|&&x| x == 3).count() as f64;
        rows.push(Sample {
            weight: w,
            reward,
            grad_norm_sq: g.iter().map(|x| x * x).sum(),
            length: t.completion.len(),
            group_id: 0,
        });
        scores.push(g);
    }
    let opob = baselines::opob(&rows, 0.0).map_err(|e| e.to_string())?;
    let n = samples as f64;
    let reward_mean = rows.iter().map(|s| s.reward).sum::<f64>() / n;
    let lo = rows.iter().map(|s| s.reward).fold(f64::INFINITY, f64::min).min(opob) - 1.0;
    let hi = rows
        .iter()
        .map(|s| s.reward)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(opob)
        + 1.0;
    let dim = scores[0].len();
    let mut b = Vec::with_capacity(CURVE_POINTS);
    let mut variance = Vec::with_capacity(CURVE_POINTS);
    for j in 0..CURVE_POINTS {
        let bj = lo + (hi - lo) * j as f64 / (CURVE_POINTS - 1) as f64;
        let mut second = 0.0;
        let mut mean = vec![0.0; dim];
        for (s, g) in rows.iter().zip(&scores) {
            let a = s.weight * (s.reward - bj);
            second += a * a * s.grad_norm_sq;
            for (m, x) in mean.iter_mut().zip(g) {
                *m += a * x;
            }
        }
        let mean_sq: f64 = mean.iter().map(|m| (m / n) * (m / n)).sum();
        b.push(bj);
        variance.push(second / n - mean_sq);
    }
    let ess = weighting::ess(&rows.iter().map(|s| s.weight).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    Ok(BaselineCurve {
        b,
        variance,
        opob,
        reward_mean,
        ess_ratio: ess.ess_ratio,
    })
}

#[derive(Debug, Serialize)]
pub struct RunView {
    pub method: String,
    pub estimator: String,
    pub ess_ratio: Vec<f64>,
    pub kl: Vec<f64>,
    pub staleness_max: Vec<u64>,
    /// `(step, accuracy)` at the eval cadence.
    pub val_acc: Vec<(u64, f64)>,
    pub collapsed: bool,
    pub multi_version_trajectories: u64,
}

pub const MAX_DEMO_STEPS: u64 = 600;

/// One seed of the `fig2-toy` setting with the given method, lag and length.
pub fn lagged_run(method: &str, k: u64, steps: u64, seed: u64, in_flight: bool) -> Result<RunView, String> {
    let m = Method::ALL
        .into_iter()
        .find(|m| m.name() == method)
        .ok_or_else(|| format!("unknown method `{method}`"))?;
    if steps == 0 || steps > MAX_DEMO_STEPS {
        return Err(format!("steps must be in 1..={MAX_DEMO_STEPS}"));
    }
    let preset = experiment::preset("fig2-toy").ok_or("fig2-toy preset missing")?;
    let mut cfg = preset.configs[0].clone();
    cfg.method.name = m;
    cfg.pipeline.k = k;
    cfg.pipeline.in_flight = in_flight;
    cfg.pipeline.total_steps = steps;
    cfg.seeds = vec![seed];
    let (out, _) = experiment::run_seed(&cfg, seed).map_err(|e| e.to_string())?;
    let summary = experiment::summarize_records(seed, &out.records, 0, &cfg.collapse);
    Ok(RunView {
        method: m.name(),
        estimator: cfg.learner_spec().map_err(|e| e.to_string())?.estimator.tag(),
        ess_ratio: out.records.iter().map(|r| r.ess_ratio).collect(),
        kl: out.records.iter().map(|r| r.kl).collect(),
        staleness_max: out.records.iter().map(|r| r.staleness_max).collect(),
        val_acc: out
            .records
            .iter()
            .filter_map(|r| r.val_acc.map(|a| (r.step, a)))
            .collect(),
        collapsed: summary.collapsed,
        multi_version_trajectories: out.multi_version_trajectories,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = essView)]
pub fn ess_view_js(weights: &str, c: f64, rho_on: f64, lr: f64) -> Result<String, JsValue> {
    to_js(ess_view(weights, c, rho_on, lr))
}

#[wasm_bindgen(js_name = baselineCurve)]
pub fn baseline_curve_js(spread: f64, samples: u32, seed: u32) -> Result<String, JsValue> {
    to_js(baseline_curve(spread, samples as usize, seed as u64))
}

#[wasm_bindgen(js_name = laggedRun)]
pub fn lagged_run_js(method: &str, k: u32, steps: u32, seed: u32, in_flight: bool) -> Result<String, JsValue> {
    to_js(lagged_run(method, k as u64, steps as u64, seed as u64, in_flight))
}

#[wasm_bindgen(js_name = methodNames)]
pub fn method_names() -> String {
    serde_json::to_string(&Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>()).expect("strings serialize")
}
