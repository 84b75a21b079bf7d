//! Experiment configuration.
//!
//! Files are TOML (or JSON when the name ends in `.json`). Every section is
//! optional; missing keys take the defaults below, some of which depend on
//! `task.name` and `policy.kind`. Unknown keys and type mismatches are
//! rejected with the dotted path of the offending key.
//!
//! ```toml
//! name = "example"
//! seeds = [0, 1, 2]
//! mode = "deterministic"        # deterministic | concurrent | sync
//!
//! [task]
//! name = "countdown_mini"       # mod_sum | reverse | countdown_mini
//! # vocab_size, prompt_len, answer_len, train_size, val_size, seed
//!
//! [policy]
//! kind = "tabular_bigram"       # tabular_bigram | tiny_mlp
//! hidden = 16
//! init_scale = 0.0
//!
//! [pipeline]
//! k = 0
//! batch_size = 64
//! prompts_per_batch = 16
//! completions_per_prompt = 4
//! in_flight = false
//! # queue_capacity = 64         # default (k + 1) * batch_size
//! total_steps = 400
//! stale_policy = "consume_if_within_k"   # or "drop"
//! audit = false
//! [pipeline.timing]
//! token_us = 200
//! update_us = 10000
//! jitter = 0.25
//!
//! [method]
//! name = "vcpo"   # reinforce seq_tis tok_tis geo_tis seq_mis tok_mis geo_mis
//!                 # m2po gspo kl_reward otb_proxy opo_proxy low_lr vcpo
//! c = 8.0
//! a = 0.0
//! beta = 0.001
//! m2po_threshold = 0.04
//! gspo_low = 0.8
//! gspo_high = 1.2
//! lr_scale = 0.1                # low_lr only
//! # baseline = "opob"           # override: zero group_mean rloo opob opo_length otb_energy
//! scope = "batch"               # batch | group
//! opob_raw_ratios = false
//! # ess_scaling = true          # override; default on for vcpo only
//! eps = 1e-12
//!
//! [optimizer]
//! lr = 0.01                     # 0.001 for tiny_mlp
//! betas = [0.9, 0.999]
//! eps = 1e-8
//! weight_decay = 0.1
//! clip_norm = 1.0
//! warmup_steps = 0
//! stable_steps = 0
//! decay_steps = 0
//! rho_on_mode = "estimate"      # estimate | override
//! # rho_on_value = 0.55
//! rho_on_steps = 1
//! ess_scaling = false           # turn on for any method; method.ess_scaling wins
//!
//! [eval]
//! every = 5
//!
//! [collapse]
//! acc_fraction = 0.5
//! acc_patience = 20
//! kl_multiple = 10.0
//! kl_window = 100
//! kl_min_history = 100
//! kl_floor = 0.01
//!
//! [output]
//! root = "runs"                 # overridden by $VCPO_OUT
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grad::{BaselineKind, EstimatorConfig, Scope, Transform};
use crate::metrics::CollapseCriteria;
use crate::optimizer::OptimizerConfig;
use crate::pipeline::{LearnerSpec, PipelineConfig};
use crate::policy::PolicyKind;
use crate::tasks::{TaskName, TaskSpec};
use crate::weighting::{ClipMaskConfig, ClipMode, Level};

pub const OUTPUT_ENV: &str = "VCPO_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Reinforce,
    SeqTis,
    TokTis,
    GeoTis,
    SeqMis,
    TokMis,
    GeoMis,
    M2po,
    Gspo,
    KlReward,
    OtbProxy,
    OpoProxy,
    LowLr,
    Vcpo,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Reinforce,
        Method::SeqTis,
        Method::TokTis,
        Method::GeoTis,
        Method::SeqMis,
        Method::TokMis,
        Method::GeoMis,
        Method::M2po,
        Method::Gspo,
        Method::KlReward,
        Method::OtbProxy,
        Method::OpoProxy,
        Method::LowLr,
        Method::Vcpo,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Concurrent,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub hidden: usize,
    /// Standard deviation of the initial parameters.
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    pub c: f64,
    pub a: f64,
    pub beta: f64,
    pub m2po_threshold: f64,
    pub gspo_low: f64,
    pub gspo_high: f64,
    pub lr_scale: f64,
    pub baseline: Option<BaselineKind>,
    pub scope: Scope,
    pub opob_raw_ratios: bool,
    pub ess_scaling: Option<bool>,
    pub eps: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            name: Method::Vcpo,
            c: ClipMaskConfig::DEFAULT_C,
            a: 0.0,
            beta: 0.001,
            m2po_threshold: 0.04,
            gspo_low: 0.8,
            gspo_high: 1.2,
            lr_scale: 0.1,
            baseline: None,
            scope: Scope::Batch,
            opob_raw_ratios: false,
            ess_scaling: None,
            eps: crate::baselines::DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub root: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub pipeline: PipelineConfig,
    pub method: MethodConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub collapse: CollapseCriteria,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Defaults for a task and policy kind.
    pub fn defaults(task: TaskName, kind: PolicyKind) -> Self {
        let optimizer = OptimizerConfig {
            lr: match kind {
                PolicyKind::TabularBigram => 1e-2,
                PolicyKind::TinyMlp => 1e-3,
            },
            ..OptimizerConfig::default()
        };
        ExperimentConfig {
            name: "run".into(),
            seeds: vec![0],
            mode: Mode::Deterministic,
            task: TaskSpec::default_for(task),
            policy: PolicyConfig {
                kind,
                hidden: 16,
                init_scale: match kind {
                    PolicyKind::TabularBigram => 0.0,
                    PolicyKind::TinyMlp => 0.5,
                },
            },
            pipeline: PipelineConfig::default(),
            method: MethodConfig::default(),
            optimizer,
            eval: EvalConfig { every: 5 },
            collapse: CollapseCriteria::default(),
            output: OutputConfig { root: "runs".into() },
        }
    }

    /// Resolves a user document (already converted to JSON form) on top of the
    /// defaults for its task and policy kind.
    pub fn from_value(user: &Value) -> Result<Self> {
        let obj = user
            .as_object()
            .ok_or_else(|| Error::config("<root>", "configuration must be a table"))?;
        let task_name: TaskName = serde_json::from_value(
            obj.get("task")
                .and_then(|t| t.get("name"))
                .cloned()
                .unwrap_or(Value::from("countdown_mini")),
        )
        .map_err(|e| Error::config("task.name", e.to_string()))?;
        let kind: PolicyKind = serde_json::from_value(
            obj.get("policy")
                .and_then(|p| p.get("kind"))
                .cloned()
                .unwrap_or(Value::from("tabular_bigram")),
        )
        .map_err(|e| Error::config("policy.kind", e.to_string()))?;
        let defaults = serde_json::to_value(Self::defaults(task_name, kind)).expect("defaults serialise");
        check_keys(&defaults, user, "")?;
        let mut merged = defaults.clone();
        merge(&mut merged, user);
        let cfg: ExperimentConfig = match serde_json::from_value(merged) {
            Ok(c) => c,
            Err(e) => return Err(locate_error(&defaults, user, e)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: toml::Value = toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        let json = serde_json::to_value(v).map_err(|e| Error::config("<toml>", e.to_string()))?;
        Self::from_value(&json)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        Self::from_value(&v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        if self.policy.kind == PolicyKind::TinyMlp && !(1..=32).contains(&self.policy.hidden) {
            return Err(Error::config(
                "policy.hidden",
                "tiny_mlp hidden width must be in 1..=32",
            ));
        }
        if !(self.policy.init_scale.is_finite() && self.policy.init_scale >= 0.0) {
            return Err(Error::config("policy.init_scale", "must be finite and >= 0"));
        }
        if self.eval.every == 0 {
            return Err(Error::config("eval.every", "must be >= 1"));
        }
        self.pipeline.validate()?;
        self.optimizer.validate()?;
        let m = &self.method;
        if !(m.beta.is_finite() && m.beta >= 0.0) {
            return Err(Error::config("method.beta", "must be finite and >= 0"));
        }
        if !(m.lr_scale.is_finite() && m.lr_scale > 0.0) {
            return Err(Error::config("method.lr_scale", "must be positive"));
        }
        let spec = self.learner_spec()?;
        if spec.estimator.baseline == BaselineKind::Rloo
            && self.pipeline.completions_per_prompt < 2
            && m.scope == Scope::Group
        {
            return Err(Error::config(
                "method.baseline",
                "rloo needs at least 2 completions per prompt",
            ));
        }
        if spec.estimator.baseline == BaselineKind::Rloo && self.pipeline.batch_size < 2 {
            return Err(Error::config("method.baseline", "rloo needs a batch of at least 2"));
        }
        Ok(())
    }

    /// Maps the method onto an estimator, reward shaping and optimizer.
    pub fn learner_spec(&self) -> Result<LearnerSpec> {
        let m = &self.method;
        let cm = |level, mode| Transform::ClipMask(ClipMaskConfig::new(level, mode, m.a, m.c));
        let tis = cm(Level::Sequence, ClipMode::Truncate);
        let (transform, baseline) = match m.name {
            Method::Reinforce => (Transform::Raw, BaselineKind::GroupMean),
            Method::SeqTis | Method::LowLr | Method::KlReward => (tis, BaselineKind::GroupMean),
            Method::TokTis => (cm(Level::Token, ClipMode::Truncate), BaselineKind::GroupMean),
            Method::GeoTis => (cm(Level::GeoMean, ClipMode::Truncate), BaselineKind::GroupMean),
            Method::SeqMis => (cm(Level::Sequence, ClipMode::Mask), BaselineKind::GroupMean),
            Method::TokMis => (cm(Level::Token, ClipMode::Mask), BaselineKind::GroupMean),
            Method::GeoMis => (cm(Level::GeoMean, ClipMode::Mask), BaselineKind::GroupMean),
            Method::M2po => (
                Transform::M2po {
                    threshold: m.m2po_threshold,
                },
                BaselineKind::GroupMean,
            ),
            Method::Gspo => (
                Transform::Gspo {
                    low: m.gspo_low,
                    high: m.gspo_high,
                },
                BaselineKind::GroupMean,
            ),
            Method::OtbProxy => (tis, BaselineKind::OtbEnergy),
            Method::OpoProxy => (tis, BaselineKind::OpoLength),
            Method::Vcpo => (tis, BaselineKind::Opob),
        };
        let estimator = EstimatorConfig {
            transform,
            baseline: m.baseline.unwrap_or(baseline),
            scope: m.scope,
            opob_raw_ratios: m.opob_raw_ratios,
            eps: m.eps,
        };
        estimator.validate()?;
        let mut optimizer = self.optimizer.clone();
        if m.name == Method::LowLr {
            optimizer.lr *= m.lr_scale;
        }
        optimizer.ess_scaling = m
            .ess_scaling
            .unwrap_or(m.name == Method::Vcpo || self.optimizer.ess_scaling);
        Ok(LearnerSpec {
            estimator,
            kl_beta: (m.name == Method::KlReward).then_some(m.beta),
            optimizer,
            eval_every: self.eval.every,
        })
    }

    /// Output root, honouring the environment override.
    pub fn output_root(&self) -> String {
        std::env::var(OUTPUT_ENV).unwrap_or_else(|_| self.output.root.clone())
    }
}

/// Rejects keys in `user` that have no counterpart in `defaults`.
fn check_keys(defaults: &Value, user: &Value, path: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(u)) = (defaults, user) {
        for (k, v) in u {
            let p = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match d.get(k) {
                None => return Err(Error::config(p, "unknown key")),
                Some(dv) if dv.is_object() => check_keys(dv, v, &p)?,
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn leaves(v: &Value, path: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                leaves(x, &p, out);
            }
        }
        _ => out.push((path.to_string(), v.clone())),
    }
}

fn single(path: &str, v: &Value) -> Value {
    let mut out = v.clone();
    for part in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), out);
        out = Value::Object(m);
    }
    out
}

/// Finds the first user key that fails to deserialise on its own.
fn locate_error(defaults: &Value, user: &Value, fallback: serde_json::Error) -> Error {
    let mut ls = Vec::new();
    leaves(user, "", &mut ls);
    for (path, v) in ls {
        let mut m = defaults.clone();
        merge(&mut m, &single(&path, &v));
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(m) {
            return Error::config(path, e.to_string());
        }
    }
    Error::config("<root>", fallback.to_string())
}

/// Sets a dotted key in a JSON document, creating tables as needed.
pub fn set_path(doc: &mut Value, path: &str, v: Value) {
    merge(doc, &single(path, &v));
}
