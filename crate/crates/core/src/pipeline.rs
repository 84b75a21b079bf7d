//! Sampler/learner pipeline with a bounded policy lag `k`.
//!
//! The sampler generates *waves*: `B` rollouts decoded in lockstep, one
//! token per decode step. A wave's prompts and every rollout's random stream
//! are keyed by the wave index, so the tokens drawn never depend on thread
//! timing. With `stale_policy = consume_if_within_k` wave `w` may not start
//! until the learner has published version `w - k`; since the learner's update
//! `n` consumes wave `n` and runs on version `n`, no consumed token is more than
//! `k` versions old. With `stale_policy = drop` the sampler is only limited by
//! the queue, and items older than `k` are dropped when the learner reaches
//! them.
//!
//! With `in_flight` the sampler adopts the newest published snapshot at every
//! decode-step boundary, so one trajectory may carry several versions.
//!
//! Two schedulers drive the same sampler and learner:
//!
//! * [`run_deterministic`] is a discrete-event simulation on a virtual clock.
//!   Decode steps and updates take seeded, jittered durations in integer
//!   microseconds, and events are processed in time order (a publish at the
//!   same instant as a decode step is seen by that step). Identical inputs
//!   give bitwise identical outputs.
//! * [`run_concurrent`] runs the sampler on its own thread, connected by a
//!   bounded channel and a snapshot mailbox. Wall time is real.
//!
//! [`run_sync`] is the plain generate-then-update loop; it matches
//! [`run_deterministic`] at `k = 0` bit for bit.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, EstimatorConfig};
use crate::metrics::{Event, StepRecord};
use crate::optimizer::{OptState, OptimizerConfig, StepOutcome};
use crate::policy::{PolicyParams, Rollout, Token, Trajectory};
use crate::rng::{Domain, Stream};
use crate::tasks::Task;

/// Fraction of masked tokens at which a `mask_storm` event is logged.
pub const MASK_STORM_FRAC: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    Drop,
    ConsumeIfWithinK,
}

/// Virtual durations of the deterministic scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    /// One decode step of a whole wave.
    pub token_us: u64,
    /// One learner update.
    pub update_us: u64,
    /// Each duration is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            token_us: 200,
            update_us: 10_000,
            jitter: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub k: u64,
    pub batch_size: usize,
    pub prompts_per_batch: usize,
    pub completions_per_prompt: usize,
    pub in_flight: bool,
    /// Trajectories the queue can hold; defaults to `(k + 1) * batch_size`.
    pub queue_capacity: Option<usize>,
    /// Set per run from the experiment's seed list, never from a file.
    #[serde(skip)]
    pub seed: u64,
    pub total_steps: u64,
    pub stale_policy: StalePolicy,
    pub timing: Timing,
    /// Re-check every consumed token's log-probability against the archived
    /// snapshot of its version.
    pub audit: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 0,
            batch_size: 64,
            prompts_per_batch: 16,
            completions_per_prompt: 4,
            in_flight: false,
            queue_capacity: None,
            seed: 0,
            total_steps: 400,
            stale_policy: StalePolicy::ConsumeIfWithinK,
            timing: Timing::default(),
            audit: false,
        }
    }
}

impl PipelineConfig {
    pub fn capacity(&self) -> usize {
        self.queue_capacity
            .unwrap_or_else(|| (self.k as usize).saturating_add(1).saturating_mul(self.batch_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_batch == 0 || self.completions_per_prompt == 0 {
            return Err(Error::config(
                "pipeline.prompts_per_batch",
                "prompts and completions per batch must be >= 1",
            ));
        }
        if self.batch_size != self.prompts_per_batch * self.completions_per_prompt {
            return Err(Error::config(
                "pipeline.batch_size",
                format!(
                    "{} != prompts_per_batch * completions_per_prompt = {}",
                    self.batch_size,
                    self.prompts_per_batch * self.completions_per_prompt
                ),
            ));
        }
        if self.capacity() < self.batch_size {
            return Err(Error::config(
                "pipeline.queue_capacity",
                "queue smaller than one batch would deadlock the learner",
            ));
        }
        if !(0.0..1.0).contains(&self.timing.jitter) {
            return Err(Error::config("pipeline.timing.jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything the learner needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub estimator: EstimatorConfig,
    /// Reward penalty `beta * (log pi - log pi_ref)` against the initial policy.
    pub kl_beta: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub eval_every: u64,
}

pub struct Learner<'a> {
    task: &'a Task,
    spec: LearnerSpec,
    params: PolicyParams,
    reference: Option<PolicyParams>,
    opt: OptState,
}

impl<'a> Learner<'a> {
    pub fn new(task: &'a Task, spec: LearnerSpec, init: PolicyParams, rho_on: Option<f64>) -> Result<Self> {
        spec.estimator.validate()?;
        if spec.eval_every == 0 {
            return Err(Error::config("eval.every", "must be >= 1"));
        }
        let mut opt = OptState::new(spec.optimizer.clone(), init.dim())?;
        if let Some(r) = rho_on {
            opt.set_rho_on(r)?;
        }
        let reference = spec.kl_beta.map(|_| init.clone());
        Ok(Learner {
            task,
            spec,
            params: init,
            reference,
            opt,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    fn should_eval(&self, step: u64, total: u64) -> bool {
        step.is_multiple_of(self.spec.eval_every) || step + 1 == total
    }

    /// One update on `batch`; always publishes a successor version, even when
    /// the step is skipped, so that versions count learner steps.
    pub fn update(&mut self, mut batch: Vec<Trajectory>, evaluate: bool) -> Result<(StepRecord, Vec<Event>)> {
        let step = self.params.version();
        let train_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len().max(1) as f64;
        let (mut smax, mut ssum, mut scount) = (0u64, 0u64, 0u64);
        for t in &batch {
            for &v in &t.sampler_versions {
                let s = step.saturating_sub(v);
                smax = smax.max(s);
                ssum += s;
                scount += 1;
            }
        }
        if let (Some(beta), Some(r)) = (self.spec.kl_beta, &self.reference) {
            grad::shape_rewards_kl(&mut batch, &self.params, r, beta)?;
        }
        let mut events = Vec::new();
        let mut theta = self.params.theta().to_vec();
        let mut lr_eff = 0.0;
        let mut rec = StepRecord {
            step,
            wall_ms: 0.0,
            train_reward,
            ess: 0.0,
            ess_ratio: 0.0,
            kl: 0.0,
            grad_norm: 0.0,
            lr_eff: 0.0,
            baseline: 0.0,
            masked_frac: 0.0,
            staleness_max: smax,
            staleness_mean: if scount == 0 { 0.0 } else { ssum as f64 / scount as f64 },
            val_acc: None,
        };
        match grad::accumulate_batch(&batch, &self.params, &self.spec.estimator) {
            Ok(report) => {
                let s = &report.stats;
                rec.ess = s.ess;
                rec.ess_ratio = s.ess_ratio;
                rec.kl = s.kl;
                rec.grad_norm = s.grad_norm;
                rec.baseline = report.baseline;
                rec.masked_frac = s.masked_tokens as f64 / s.total_tokens.max(1) as f64;
                if rec.masked_frac >= MASK_STORM_FRAC {
                    events.push(Event::MaskStorm {
                        step,
                        masked_frac: rec.masked_frac,
                    });
                }
                if report.skipped {
                    events.push(Event::SkipUpdate {
                        step,
                        reason: "every sample masked".into(),
                    });
                } else {
                    for w in &s.warnings {
                        events.push(Event::Warning {
                            step,
                            message: w.clone(),
                        });
                    }
                    let loss_grad: Vec<f64> = report.gradient.iter().map(|g| -g).collect();
                    match self.opt.adamw_step(&mut theta, &loss_grad, s.ess_ratio)? {
                        StepOutcome::Applied { lr_eff: lr, .. } => lr_eff = lr,
                        StepOutcome::Skipped { reason } => events.push(Event::SkipUpdate { step, reason }),
                    }
                }
            }
            Err(Error::DegenerateBatch(reason)) => events.push(Event::SkipUpdate { step, reason }),
            Err(e) => return Err(e),
        }
        rec.lr_eff = lr_eff;
        self.params = self.params.successor(theta);
        if evaluate {
            rec.val_acc = Some(self.task.validation_accuracy(&self.params)?);
        }
        Ok((rec, events))
    }
}

/// Trajectory counts that must reconcile at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conservation {
    pub generated: u64,
    pub consumed: u64,
    pub dropped_stale: u64,
    pub dropped_at_end: u64,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.generated == self.consumed + self.dropped_stale + self.dropped_at_end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub final_params: PolicyParams,
    /// Token count per staleness value over every consumed token.
    pub staleness_hist: BTreeMap<u64, u64>,
    pub counts: Conservation,
    /// Consumed trajectories with at least two distinct sampler versions.
    pub multi_version_trajectories: u64,
    /// Tokens whose recorded log-probability disagreed with the archive.
    pub audit_mismatches: u64,
}

/// Prompts and rollouts of wave `w`.
fn new_wave(task: &Task, cfg: &PipelineConfig, w: u64) -> Vec<Rollout> {
    let mut sched = Stream::new(cfg.seed, Domain::PromptSchedule, w);
    let train = task.train();
    let mut out = Vec::with_capacity(cfg.batch_size);
    for p in 0..cfg.prompts_per_batch {
        let prompt: Vec<Token> = train[sched.below(train.len() as u64) as usize].clone();
        let group = w * cfg.prompts_per_batch as u64 + p as u64;
        for c in 0..cfg.completions_per_prompt {
            let i = (w * cfg.batch_size as u64) + (p * cfg.completions_per_prompt + c) as u64;
            let stream = Stream::new(cfg.seed, Domain::Trajectory, i);
            out.push(Rollout::new(prompt.clone(), group, stream, task.max_len()));
        }
    }
    out
}

fn finish_wave(task: &Task, rollouts: Vec<Rollout>) -> Vec<Trajectory> {
    rollouts
        .into_iter()
        .map(|r| {
            let mut t = r.finish();
            t.reward = task.reward(&t.prompt, &t.completion);
            t
        })
        .collect()
}

fn jittered(base: u64, jitter: f64, s: &mut Stream) -> u64 {
    let f = 1.0 + jitter * (2.0 * s.next_f64() - 1.0);
    ((base as f64) * f).round().max(1.0) as u64
}

fn wave_jitter(cfg: &PipelineConfig, w: u64) -> Stream {
    Stream::new(cfg.seed, Domain::Jitter, w)
}

fn update_duration(cfg: &PipelineConfig, n: u64) -> u64 {
    let mut s = Stream::new(cfg.seed, Domain::Jitter, (1 << 48) | n);
    jittered(cfg.timing.update_us, cfg.timing.jitter, &mut s)
}

/// Bookkeeping shared by every scheduler on the consuming side.
struct Ledger {
    hist: BTreeMap<u64, u64>,
    counts: Conservation,
    multi: u64,
    audit_mismatches: u64,
    archive: BTreeMap<u64, Arc<PolicyParams>>,
    records: Vec<StepRecord>,
    events: Vec<Event>,
}

impl Ledger {
    fn new(init: &PolicyParams) -> Self {
        let mut archive = BTreeMap::new();
        archive.insert(init.version(), Arc::new(init.clone()));
        Ledger {
            hist: BTreeMap::new(),
            counts: Conservation::default(),
            multi: 0,
            audit_mismatches: 0,
            archive,
            records: Vec::new(),
            events: Vec::new(),
        }
    }

    fn consume(&mut self, batch: &[Trajectory], step: u64, audit: bool) {
        for t in batch {
            let mut distinct = t.sampler_versions.clone();
            distinct.dedup();
            if distinct.len() > 1 {
                self.multi += 1;
            }
            for &v in &t.sampler_versions {
                *self.hist.entry(step.saturating_sub(v)).or_default() += 1;
            }
            if audit {
                for (i, &v) in t.sampler_versions.iter().enumerate() {
                    let ok = self.archive.get(&v).is_some_and(|p| {
                        p.log_prob(&t.prompt, &t.completion)
                            .map(|lp| lp.per_token[i] == t.sampler_logprobs[i])
                            .unwrap_or(false)
                    });
                    if !ok {
                        self.audit_mismatches += 1;
                    }
                }
            }
        }
        self.counts.consumed += batch.len() as u64;
    }

    /// Keeps the snapshots a consumable token can still reference.
    fn publish(&mut self, params: &PolicyParams, k: u64) {
        self.archive.insert(params.version(), Arc::new(params.clone()));
        let floor = params.version().saturating_sub(k + 1);
        self.archive.retain(|&v, _| v >= floor);
    }

    fn finish(self, final_params: PolicyParams) -> RunOutput {
        RunOutput {
            records: self.records,
            events: self.events,
            final_params,
            staleness_hist: self.hist,
            counts: self.counts,
            multi_version_trajectories: self.multi,
            audit_mismatches: self.audit_mismatches,
        }
    }
}

/// Generate one wave with the current parameters, then update; repeat.
pub fn run_sync(task: &Task, cfg: &PipelineConfig, mut learner: Learner<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    let mut ledger = Ledger::new(learner.params());
    let mut clock = 0u64;
    for n in 0..cfg.total_steps {
        let params = learner.params().clone();
        let mut rollouts = new_wave(task, cfg, n);
        let mut jit = wave_jitter(cfg, n);
        while rollouts.iter().any(|r| !r.is_done()) {
            for r in rollouts.iter_mut() {
                r.step(&params);
            }
            clock += jittered(cfg.timing.token_us, cfg.timing.jitter, &mut jit);
        }
        let batch = finish_wave(task, rollouts);
        ledger.counts.generated += batch.len() as u64;
        clock += update_duration(cfg, n);
        ledger.consume(&batch, n, cfg.audit);
        let evaluate = learner.should_eval(n, cfg.total_steps);
        let (mut rec, ev) = learner.update(batch, evaluate)?;
        rec.wall_ms = clock as f64 / 1000.0;
        ledger.records.push(rec);
        ledger.events.extend(ev);
        ledger.publish(learner.params(), cfg.k);
    }
    let final_params = learner.params().clone();
    Ok(ledger.finish(final_params))
}

struct ActiveWave {
    index: u64,
    rollouts: Vec<Rollout>,
    params: Arc<PolicyParams>,
    jitter: Stream,
    decode_step: usize,
}

struct Queued {
    traj: Trajectory,
    wave: u64,
    push_us: u64,
}

/// Discrete-event simulation of the concurrent pipeline on a virtual clock.
pub fn run_deterministic(task: &Task, cfg: &PipelineConfig, mut learner: Learner<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    let cap = cfg.capacity();
    let b = cfg.batch_size;
    let gated = cfg.stale_policy == StalePolicy::ConsumeIfWithinK;
    let mut ledger = Ledger::new(learner.params());
    // publish_us[v]: virtual time at which version v became visible
    let mut publish_us: Vec<u64> = vec![0];
    let mut snapshots: Vec<Arc<PolicyParams>> = vec![Arc::new(learner.params().clone())];
    let mut queue: VecDeque<Queued> = VecDeque::new();
    let mut sampler_us = 0u64;
    let mut learner_free_us = 0u64;
    // Time since which the queue has had room for one more wave.
    let mut room_us: Option<u64> = Some(0);
    let mut next_wave = 0u64;
    let mut active: Option<ActiveWave> = None;
    let mut n = 0u64;

    let newest_at = |publish_us: &[u64], t: u64| -> usize { publish_us.partition_point(|&p| p <= t) - 1 };

    while n < cfg.total_steps {
        // Stale items at the head are dropped before the learner looks at them.
        if !gated {
            while let Some(front) = queue.front() {
                if n.saturating_sub(front.traj.oldest_version()) <= cfg.k {
                    break;
                }
                let wave = front.wave;
                let mut count = 0;
                while queue
                    .front()
                    .is_some_and(|q| q.wave == wave && n.saturating_sub(q.traj.oldest_version()) > cfg.k)
                {
                    queue.pop_front();
                    count += 1;
                }
                ledger.counts.dropped_stale += count as u64;
                if room_us.is_none() && queue.len() + b <= cap {
                    room_us = Some(learner_free_us);
                }
                ledger.events.push(Event::Dropped {
                    step: n,
                    wave,
                    count,
                    reason: format!("older than k = {}", cfg.k),
                });
            }
        }
        let learner_next = (queue.len() >= b).then(|| {
            let start = learner_free_us.max(queue[b - 1].push_us);
            (start, start + update_duration(cfg, n))
        });

        // When and whether the sampler can act next.
        let sampler_next: Option<u64> = match &active {
            Some(_) => Some(sampler_us),
            None => {
                let room = room_us.filter(|_| queue.len() + b <= cap);
                let gate = if gated {
                    let need = next_wave.saturating_sub(cfg.k) as usize;
                    publish_us.get(need).copied()
                } else {
                    Some(0)
                };
                match (room, gate) {
                    (Some(r), Some(g)) => Some(sampler_us.max(g).max(r)),
                    _ => None,
                }
            }
        };

        let learner_first = match (learner_next, sampler_next) {
            (Some((_, end)), Some(ts)) => end <= ts,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => unreachable!("pipeline stalled with a valid configuration"),
        };

        if learner_first {
            let (start, end) = learner_next.expect("learner ready");
            let items: Vec<Queued> = queue.drain(..b).collect();
            if room_us.is_none() && queue.len() + b <= cap {
                room_us = Some(start);
            }
            let batch: Vec<Trajectory> = items.into_iter().map(|q| q.traj).collect();
            ledger.consume(&batch, n, cfg.audit);
            let evaluate = learner.should_eval(n, cfg.total_steps);
            let (mut rec, ev) = learner.update(batch, evaluate)?;
            rec.wall_ms = end as f64 / 1000.0;
            ledger.records.push(rec);
            ledger.events.extend(ev);
            ledger.publish(learner.params(), cfg.k);
            learner_free_us = end;
            publish_us.push(end);
            snapshots.push(Arc::new(learner.params().clone()));
            n += 1;
            continue;
        }

        let ts = sampler_next.expect("sampler ready");
        sampler_us = ts;
        if active.is_none() {
            let v = newest_at(&publish_us, ts);
            active = Some(ActiveWave {
                index: next_wave,
                rollouts: new_wave(task, cfg, next_wave),
                params: Arc::clone(&snapshots[v]),
                jitter: wave_jitter(cfg, next_wave),
                decode_step: 0,
            });
            next_wave += 1;
        }
        let wave = active.as_mut().expect("active wave");
        if cfg.in_flight {
            let v = newest_at(&publish_us, ts);
            if v as u64 != wave.params.version() {
                if wave.decode_step > 0 {
                    ledger.events.push(Event::SnapshotExchange {
                        step: v as u64,
                        wave: wave.index,
                        token: wave.decode_step,
                        from: wave.params.version(),
                        to: v as u64,
                    });
                }
                wave.params = Arc::clone(&snapshots[v]);
            }
        }
        for r in wave.rollouts.iter_mut() {
            r.step(&wave.params);
        }
        wave.decode_step += 1;
        sampler_us += jittered(cfg.timing.token_us, cfg.timing.jitter, &mut wave.jitter);
        if wave.rollouts.iter().all(Rollout::is_done) {
            let done = active.take().expect("active wave");
            let trajs = finish_wave(task, done.rollouts);
            ledger.counts.generated += trajs.len() as u64;
            for traj in trajs {
                queue.push_back(Queued {
                    traj,
                    wave: done.index,
                    push_us: sampler_us,
                });
            }
            room_us = (queue.len() + b <= cap).then_some(sampler_us);
        }
    }
    ledger.counts.dropped_at_end = queue.len() as u64;
    if !queue.is_empty() {
        ledger.events.push(Event::Dropped {
            step: n,
            wave: queue.front().map_or(0, |q| q.wave),
            count: queue.len(),
            reason: "run ended".into(),
        });
    }
    let final_params = learner.params().clone();
    Ok(ledger.finish(final_params))
}

struct Mailbox {
    state: Mutex<(Arc<PolicyParams>, bool)>,
    cv: Condvar,
}

/// The same pipeline with the sampler on its own thread.
pub fn run_concurrent(task: &Task, cfg: &PipelineConfig, mut learner: Learner<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let gated = cfg.stale_policy == StalePolicy::ConsumeIfWithinK;
    let mailbox = Mailbox {
        state: Mutex::new((Arc::new(learner.params().clone()), false)),
        cv: Condvar::new(),
    };
    let (tx, rx) = crossbeam_channel::bounded::<(Trajectory, u64)>(cfg.capacity());
    let mut ledger = Ledger::new(learner.params());
    let started = Instant::now();

    let result = std::thread::scope(|scope| -> Result<()> {
        let mb = &mailbox;
        let sampler = scope.spawn(move || {
            let mut events = Vec::new();
            let mut sent = 0u64;
            'waves: for w in 0.. {
                let mut params = {
                    let mut st = mb.state.lock().expect("mailbox poisoned");
                    while gated && !st.1 && st.0.version() + cfg.k < w {
                        st = mb.cv.wait(st).expect("mailbox poisoned");
                    }
                    if st.1 {
                        break 'waves;
                    }
                    Arc::clone(&st.0)
                };
                let mut rollouts = new_wave(task, cfg, w);
                let mut step = 0;
                while rollouts.iter().any(|r| !r.is_done()) {
                    if cfg.in_flight {
                        let latest = Arc::clone(&mb.state.lock().expect("mailbox poisoned").0);
                        if latest.version() != params.version() {
                            if step > 0 {
                                events.push(Event::SnapshotExchange {
                                    step: latest.version(),
                                    wave: w,
                                    token: step,
                                    from: params.version(),
                                    to: latest.version(),
                                });
                            }
                            params = latest;
                        }
                    }
                    for r in rollouts.iter_mut() {
                        r.step(&params);
                    }
                    step += 1;
                }
                for t in finish_wave(task, rollouts) {
                    let stop = mb.state.lock().expect("mailbox poisoned").1;
                    if stop || tx.send((t, w)).is_err() {
                        break 'waves;
                    }
                    sent += 1;
                }
            }
            drop(tx);
            (events, sent)
        });

        let mut run = || -> Result<()> {
            for n in 0..cfg.total_steps {
                let mut batch = Vec::with_capacity(b);
                while batch.len() < b {
                    let (t, w) = rx.recv().map_err(|_| Error::Data("sampler stopped early".into()))?;
                    if !gated && n.saturating_sub(t.oldest_version()) > cfg.k {
                        ledger.counts.dropped_stale += 1;
                        ledger.events.push(Event::Dropped {
                            step: n,
                            wave: w,
                            count: 1,
                            reason: format!("older than k = {}", cfg.k),
                        });
                        continue;
                    }
                    batch.push(t);
                }
                ledger.consume(&batch, n, cfg.audit);
                let evaluate = learner.should_eval(n, cfg.total_steps);
                let (mut rec, ev) = learner.update(batch, evaluate)?;
                rec.wall_ms = started.elapsed().as_secs_f64() * 1000.0;
                ledger.records.push(rec);
                ledger.events.extend(ev);
                ledger.publish(learner.params(), cfg.k);
                let mut st = mailbox.state.lock().expect("mailbox poisoned");
                st.0 = Arc::new(learner.params().clone());
                mailbox.cv.notify_all();
            }
            Ok(())
        };
        let res = run();
        {
            let mut st = mailbox.state.lock().expect("mailbox poisoned");
            st.1 = true;
            mailbox.cv.notify_all();
        }
        let mut leftover = 0u64;
        while rx.recv().is_ok() {
            leftover += 1;
        }
        let (events, sent) = sampler.join().expect("sampler thread panicked");
        ledger.events.extend(events);
        ledger.counts.generated = sent;
        ledger.counts.dropped_at_end = leftover;
        if leftover > 0 {
            ledger.events.push(Event::Dropped {
                step: cfg.total_steps,
                wave: 0,
                count: leftover as usize,
                reason: "run ended".into(),
            });
        }
        res
    });
    result?;
    let final_params = learner.params().clone();
    Ok(ledger.finish(final_params))
}

/// Mean batch ESS ratio over `n_steps` synchronous updates.
pub fn estimate_rho_on(
    task: &Task,
    cfg: &PipelineConfig,
    spec: &LearnerSpec,
    init: PolicyParams,
    n_steps: u64,
) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::config("optimizer.rho_on_steps", "must be >= 1"));
    }
    let mut spec = spec.clone();
    spec.optimizer.ess_scaling = false;
    let sync = PipelineConfig {
        k: 0,
        total_steps: n_steps,
        in_flight: false,
        queue_capacity: None,
        ..cfg.clone()
    };
    let learner = Learner::new(task, spec, init, None)?;
    let out = run_sync(task, &sync, learner)?;
    Ok(out.records.iter().map(|r| r.ess_ratio).sum::<f64>() / out.records.len() as f64)
}
