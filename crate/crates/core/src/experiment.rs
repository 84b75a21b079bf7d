//! Run orchestration: per-seed runs, output files, sweeps, presets and
//! reports.
//!
//! A run directory holds `config.resolved` (TOML), `seed-<n>.csv`,
//! `seed-<n>.events.jsonl` and `summary.json`. Every number in the summary can
//! be recomputed from the CSV files with [`summarize_records`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{set_path, ExperimentConfig, Method, Mode};
use crate::error::{Error, Result};
use crate::metrics::{self, CollapseCriteria, Event, StepRecord};
use crate::optimizer::RhoOnMode;
use crate::pipeline::{self, Learner, PipelineConfig, RunOutput};
use crate::policy::{PolicyKind, PolicyParams};
use crate::tasks::{Task, TaskName};

/// ESS ratio below which a step counts as degenerate in summaries.
pub const LOW_ESS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub steps: u64,
    pub final_val_acc: Option<f64>,
    pub best_val_acc: Option<f64>,
    pub collapsed: bool,
    pub collapse_step: Option<u64>,
    pub first_kl_spike_step: Option<u64>,
    pub first_low_ess_step: Option<u64>,
    pub min_ess_ratio: f64,
    pub max_staleness: u64,
    pub skipped_updates: u64,
    pub final_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub estimator: String,
    pub k: u64,
    pub rho_on: Option<f64>,
    pub seeds: Vec<SeedSummary>,
}

impl RunSummary {
    pub fn collapsed_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.collapsed).count()
    }

    pub fn mean_final_acc(&self) -> f64 {
        let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.final_val_acc).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Summary statistics of one seed, derived only from its step log and the
/// number of `skip_update` events.
pub fn summarize_records(seed: u64, rows: &[StepRecord], skipped: u64, c: &CollapseCriteria) -> SeedSummary {
    let verdict = metrics::detect_collapse(rows, c);
    let accs: Vec<f64> = rows.iter().filter_map(|r| r.val_acc).collect();
    SeedSummary {
        seed,
        steps: rows.len() as u64,
        final_val_acc: accs.last().copied(),
        best_val_acc: accs.iter().copied().reduce(f64::max),
        collapsed: verdict.collapsed,
        collapse_step: verdict.collapse_step,
        first_kl_spike_step: verdict.first_kl_spike_step,
        first_low_ess_step: rows.iter().find(|r| r.ess_ratio < LOW_ESS).map(|r| r.step),
        min_ess_ratio: rows.iter().map(|r| r.ess_ratio).fold(f64::INFINITY, f64::min),
        max_staleness: rows.iter().map(|r| r.staleness_max).max().unwrap_or(0),
        skipped_updates: skipped,
        final_wall_ms: rows.last().map_or(0.0, |r| r.wall_ms),
    }
}

pub fn initial_params(cfg: &ExperimentConfig, task: &Task, seed: u64) -> Result<PolicyParams> {
    PolicyParams::random(
        cfg.policy.kind,
        task.vocab(),
        cfg.policy.hidden,
        cfg.policy.init_scale,
        seed,
    )
}

fn pipeline_for(cfg: &ExperimentConfig, seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        ..cfg.pipeline.clone()
    }
}

/// On-policy ESS reference for `seed`: the configured override, or the mean
/// ESS ratio of `rho_on_steps` synchronous steps.
pub fn rho_on_for(cfg: &ExperimentConfig, task: &Task, seed: u64) -> Result<Option<f64>> {
    let spec = cfg.learner_spec()?;
    if !spec.optimizer.ess_scaling {
        return Ok(None);
    }
    match cfg.optimizer.rho_on_mode {
        RhoOnMode::Override => Ok(cfg.optimizer.rho_on_value),
        RhoOnMode::Estimate => {
            let init = initial_params(cfg, task, seed)?;
            let p = pipeline_for(cfg, seed);
            pipeline::estimate_rho_on(task, &p, &spec, init, cfg.optimizer.rho_on_steps as u64).map(Some)
        }
    }
}

/// Runs one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(RunOutput, Option<f64>)> {
    cfg.validate()?;
    let task = Task::new(cfg.task.clone())?;
    let rho_on = rho_on_for(cfg, &task, seed)?;
    let spec = cfg.learner_spec()?;
    let init = initial_params(cfg, &task, seed)?;
    let learner = Learner::new(&task, spec, init, rho_on)?;
    let p = pipeline_for(cfg, seed);
    let out = match cfg.mode {
        Mode::Deterministic => pipeline::run_deterministic(&task, &p, learner)?,
        Mode::Concurrent => pipeline::run_concurrent(&task, &p, learner)?,
        Mode::Sync => pipeline::run_sync(&task, &p, learner)?,
    };
    Ok((out, rho_on))
}

fn count_skips(events: &[Event]) -> u64 {
    events.iter().filter(|e| matches!(e, Event::SkipUpdate { .. })).count() as u64
}

/// Runs every seed in memory and summarises them.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<RunOutput>)> {
    let mut outs = Vec::new();
    let mut seeds = Vec::new();
    let mut rho = None;
    for &seed in &cfg.seeds {
        let (out, rho_on) = run_seed(cfg, seed)?;
        rho = rho.or(rho_on);
        seeds.push(summarize_records(
            seed,
            &out.records,
            count_skips(&out.events),
            &cfg.collapse,
        ));
        outs.push(out);
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.method.name.name(),
        estimator: cfg.learner_spec()?.estimator.tag(),
        k: cfg.pipeline.k,
        rho_on: rho,
        seeds,
    };
    Ok((summary, outs))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every seed and writes the run directory `<dir>`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.resolved"), &cfg.to_toml())?;
    let mut seeds = Vec::new();
    let mut rho = None;
    for &seed in &cfg.seeds {
        let (out, rho_on) = run_seed(cfg, seed)?;
        rho = rho.or(rho_on);
        metrics::write_csv(&dir.join(format!("seed-{seed}.csv")), &out.records)?;
        let mut events = out.events.clone();
        let s = summarize_records(seed, &out.records, count_skips(&events), &cfg.collapse);
        if let Some(step) = s.collapse_step {
            events.push(Event::Collapse {
                step,
                reason: match (s.first_kl_spike_step, s.collapse_step) {
                    (Some(a), Some(b)) if a == b => "kl spike".into(),
                    _ => "validation accuracy drop".into(),
                },
            });
        }
        metrics::write_events(&dir.join(format!("seed-{seed}.events.jsonl")), &events)?;
        seeds.push(s);
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.method.name.name(),
        estimator: cfg.learner_spec()?.estimator.tag(),
        k: cfg.pipeline.k,
        rho_on: rho,
        seeds,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&dir.join("summary.json"), &json)?;
    Ok(summary)
}

/// Runs `cfg` under `<output root>/<name>`.
pub fn run(cfg: &ExperimentConfig) -> Result<(PathBuf, RunSummary)> {
    let dir = Path::new(&cfg.output_root()).join(&cfg.name);
    let s = run_to_dir(cfg, &dir)?;
    Ok((dir, s))
}

/// A cartesian grid over dotted config keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub axes: Vec<(String, Vec<Value>)>,
}

impl Grid {
    /// Parses `[grid]` entries of the form `"method.c" = [2.0, 8.0]`. A file
    /// without a `[grid]` table, or with an empty one, is the empty grid.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: toml::Value = toml::from_str(text).map_err(|e| Error::config("<grid>", e.to_string()))?;
        let json = serde_json::to_value(v).map_err(|e| Error::config("<grid>", e.to_string()))?;
        let mut axes = Vec::new();
        if let Some(obj) = json.as_object() {
            for k in obj.keys() {
                if k != "grid" {
                    return Err(Error::config(k.clone(), "grid files only contain a [grid] table"));
                }
            }
            if let Some(g) = obj.get("grid").and_then(Value::as_object) {
                for (k, vals) in g {
                    let arr = vals
                        .as_array()
                        .ok_or_else(|| Error::config(format!("grid.{k}"), "expected an array"))?;
                    if arr.is_empty() {
                        return Err(Error::config(format!("grid.{k}"), "empty axis"));
                    }
                    axes.push((k.clone(), arr.clone()));
                }
            }
        }
        Ok(Grid { axes })
    }

    /// Every assignment, last axis fastest. The empty grid has one empty point.
    pub fn points(&self) -> Vec<Vec<(String, Value)>> {
        let mut out: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for (k, vals) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((k.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        out
    }
}

fn slug(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `(dotted key, value)` pairs of one grid point.
pub type GridPoint = Vec<(String, Value)>;

/// Resolves `base` with each grid point applied.
pub fn expand(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<(GridPoint, ExperimentConfig)>> {
    let mut out = Vec::new();
    for point in grid.points() {
        let mut doc = base.to_value();
        let mut name = base.name.clone();
        for (k, v) in &point {
            set_path(&mut doc, k, v.clone());
            let leaf = k.rsplit('.').next().unwrap_or(k);
            name.push_str(&format!("-{leaf}={}", slug(v)));
        }
        set_path(&mut doc, "name", Value::from(name));
        out.push((point, ExperimentConfig::from_value(&doc)?));
    }
    Ok(out)
}

pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

/// Runs every grid point and writes `<root>/<base name>/sweep_summary.csv`
/// with one row per (point, seed).
pub fn sweep(base: &ExperimentConfig, grid: &Grid) -> Result<(PathBuf, Vec<RunSummary>)> {
    let points = expand(base, grid)?;
    let root = Path::new(&base.output_root()).join(&base.name);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut table = String::from("run");
    for (k, _) in &grid.axes {
        table.push(',');
        table.push_str(k);
    }
    table.push_str(",seed,final_val_acc,best_val_acc,collapsed,first_low_ess_step,min_ess_ratio\n");
    let mut all = Vec::new();
    for (point, cfg) in points {
        let s = run_to_dir(&cfg, &root.join(&cfg.name))?;
        for seed in &s.seeds {
            table.push_str(&cfg.name);
            for (_, v) in &point {
                table.push(',');
                table.push_str(&slug(v));
            }
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            table.push_str(&format!(
                ",{},{},{},{},{},{}\n",
                seed.seed,
                opt(seed.final_val_acc),
                opt(seed.best_val_acc),
                seed.collapsed,
                seed.first_low_ess_step.map_or(String::new(), |v| v.to_string()),
                seed.min_ess_ratio
            ));
        }
        all.push(s);
    }
    write_text(&root.join(SWEEP_SUMMARY), &table)?;
    Ok((root, all))
}

/// Recomputes a run directory's summary from its CSV logs and renders it.
pub fn report(dir: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(&dir.join("config.resolved"))?;
    let mut out = String::new();
    out.push_str(&format!(
        "run {} | method {} | {} | k = {} | {} seeds\n",
        cfg.name,
        cfg.method.name.name(),
        cfg.learner_spec()?.estimator.tag(),
        cfg.pipeline.k,
        cfg.seeds.len()
    ));
    out.push_str(
        "seed   steps  final_acc  best_acc  collapsed  collapse_step  first_ess<0.1  min_ess_ratio  max_stale\n",
    );
    for &seed in &cfg.seeds {
        let rows = metrics::read_csv(&dir.join(format!("seed-{seed}.csv")))?;
        let events_path = dir.join(format!("seed-{seed}.events.jsonl"));
        let text = std::fs::read_to_string(&events_path).map_err(|e| Error::io(&events_path, e))?;
        let skipped = text.lines().filter(|l| l.contains("\"skip_update\"")).count() as u64;
        let s = summarize_records(seed, &rows, skipped, &cfg.collapse);
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        let u = |x: Option<u64>| x.map_or("-".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{:<6} {:<6} {:<10} {:<9} {:<10} {:<14} {:<14} {:<14.4} {}\n",
            seed,
            s.steps,
            f(s.final_val_acc),
            f(s.best_val_acc),
            s.collapsed,
            u(s.collapse_step),
            u(s.first_low_ess_step),
            s.min_ess_ratio,
            s.max_staleness
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub configs: Vec<ExperimentConfig>,
}

fn base(name: &str, task: TaskName, kind: PolicyKind, method: Method, k: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(task, kind);
    c.name = name.to_string();
    c.method.name = method;
    c.pipeline.k = k;
    c
}

/// Shared by every fig2-toy run and its oracle. The rate is high enough that
/// eight versions of lag move the sampler far from the learner.
pub const FIG2_LR: f64 = 0.25;

fn fig2_like(name: &str, method: Method, k: u64) -> ExperimentConfig {
    let mut c = base(name, TaskName::CountdownMini, PolicyKind::TabularBigram, method, k);
    c.seeds = (0..5).collect();
    c.pipeline.total_steps = 400;
    c.optimizer.lr = FIG2_LR;
    c
}

fn stale_like(name: &str, method: Method, k: u64) -> ExperimentConfig {
    let mut c = base(name, TaskName::ModSum, PolicyKind::TinyMlp, method, k);
    c.seeds = (0..5).collect();
    c.pipeline.total_steps = 400;
    c.policy.hidden = 32;
    c.optimizer.lr = 1e-2;
    c
}

/// Named experiment bundles.
pub fn presets() -> Vec<Preset> {
    let mut large = base(
        "paper-f1",
        TaskName::CountdownMini,
        PolicyKind::TabularBigram,
        Method::Vcpo,
        12,
    );
    large.optimizer.lr = 1e-6;
    large.optimizer.warmup_steps = 5;
    large.optimizer.stable_steps = 395;
    large.optimizer.rho_on_mode = RhoOnMode::Override;
    large.optimizer.rho_on_value = Some(1.0);
    large.pipeline.prompts_per_batch = 8;
    large.pipeline.completions_per_prompt = 8;
    large.pipeline.batch_size = 64;
    large.pipeline.total_steps = 400;
    vec![
        Preset {
            name: "fig2-toy",
            description: "CountdownMini, tabular policy, k = 8: sequence TIS (c = 8) vs VCPO, 5 seeds",
            configs: vec![
                fig2_like("fig2-toy-seq_tis", Method::SeqTis, 8),
                fig2_like("fig2-toy-vcpo", Method::Vcpo, 8),
            ],
        },
        Preset {
            name: "sync-oracle",
            description: "CountdownMini, tabular policy, k = 0 REINFORCE with group-mean baseline, fig2-toy optimizer",
            configs: vec![fig2_like("sync-oracle", Method::Reinforce, 0)],
        },
        Preset {
            name: "stale-128",
            description: "ModSum, tiny MLP: VCPO at k = 128 and its k = 0 reference",
            configs: vec![
                stale_like("stale-128-vcpo", Method::Vcpo, 128),
                stale_like("stale-128-sync", Method::Vcpo, 0),
            ],
        },
        Preset {
            name: "paper-f1",
            description: "optimizer and batch settings copied from the large-model runs (lr 1e-6, 8x8 batch, k = 12); learns little at toy scale",
            configs: vec![large],
        },
    ]
}

pub fn preset(name: &str) -> Option<Preset> {
    presets().into_iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = Grid::from_toml_str(
            "[grid]\n\"method.name\" = [\"seq_tis\", \"tok_tis\", \"geo_tis\", \"seq_mis\", \"tok_mis\", \"geo_mis\"]\n\"method.c\" = [2.0, 8.0]\n",
        )
        .unwrap();
        assert_eq!(g.points().len(), 12);
        assert_eq!(Grid::from_toml_str("").unwrap().points().len(), 1);
        assert_eq!(Grid::from_toml_str("[grid]\n").unwrap().points().len(), 1);
    }

    #[test]
    fn expand_applies_overrides() {
        let base = ExperimentConfig::defaults(TaskName::ModSum, PolicyKind::TinyMlp);
        let g = Grid::from_toml_str("[grid]\n\"method.c\" = [2.0, 8.0]\n").unwrap();
        let cfgs = expand(&base, &g).unwrap();
        assert_eq!(cfgs[0].1.method.c, 2.0);
        assert_eq!(cfgs[1].1.method.c, 8.0);
        assert_ne!(cfgs[0].1.name, cfgs[1].1.name);
        let bad = Grid::from_toml_str("[grid]\n\"method.cc\" = [1]\n").unwrap();
        assert!(expand(&base, &bad).unwrap_err().is_config());
    }

    #[test]
    fn presets_validate() {
        for p in presets() {
            for c in &p.configs {
                c.validate().unwrap();
            }
        }
    }
}
