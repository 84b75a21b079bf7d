use vcpo_core::config::{ExperimentConfig, Method};
use vcpo_core::experiment;
use vcpo_core::optimizer::{scaled_lr, OptState, OptimizerConfig, RhoOnMode, StepOutcome};
use vcpo_core::pipeline::{self, Learner, PipelineConfig};
use vcpo_core::policy::PolicyKind;
use vcpo_core::rng::{Domain, Stream};
use vcpo_core::tasks::{Task, TaskName};

fn cfg(ess_scaling: bool, rho_on: f64) -> OptimizerConfig {
    OptimizerConfig {
        ess_scaling,
        rho_on_mode: RhoOnMode::Override,
        rho_on_value: Some(rho_on),
        ..Default::default()
    }
}

// Frozen from an independent scalar AdamW loop (lr 1e-2, wd 0.1, betas
// 0.9/0.999, eps 1e-8, clip 1); the third gradient has norm 5 and is clipped.
const TRACE: [[f64; 5]; 3] = [
    [
        0.4895000009999999,
        -0.28970000049999994,
        0.0899000019999996,
        -0.00999999966666668,
        2.00799999975,
    ],
    [
        0.48634713093933907,
        -0.28674693027136755,
        0.08096633769878309,
        -0.016690581892417886,
        2.010686681301267,
    ],
    [
        0.47920374285514894,
        -0.28440139046478075,
        0.08536653262796469,
        -0.02185346073618603,
        2.0123049970375337,
    ],
];

#[test]
fn adamw_matches_reference_trace() {
    let grads = [
        [0.1, -0.2, 0.05, 0.3, -0.4],
        [-0.05, 0.1, 0.2, 0.0, 0.1],
        [3.0, 0.0, -4.0, 0.0, 0.0],
    ];
    let mut st = OptState::new(cfg(false, 1.0), 5).unwrap();
    let mut theta = [0.5, -0.3, 0.1, 0.0, 2.0];
    for (g, want) in grads.iter().zip(TRACE) {
        st.adamw_step(&mut theta, g, 1.0).unwrap();
        for (a, b) in theta.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn effective_lr_examples() {
    assert_eq!(scaled_lr(0.25, 1.0, 1e-6), 5e-7);
    assert_eq!(scaled_lr(0.4, 0.4, 3e-3), 3e-3);
    assert_eq!(scaled_lr(0.0, 0.5, 1e-2), 0.0);
    let st = OptState::new(cfg(true, 0.55), 1).unwrap();
    assert_eq!(st.rho_on, Some(0.55));
    assert!((st.effective_lr(0.55).unwrap() - 1e-2).abs() < 1e-18);
}

#[test]
fn scaling_is_scale_consistent() {
    let mut rng = Stream::new(1, Domain::Test, 0);
    for _ in 0..1000 {
        let on = 0.01 + 0.49 * rng.next_f64();
        let off = 0.01 + 0.49 * rng.next_f64();
        let a = scaled_lr(off, on, 1e-3);
        let b = scaled_lr(2.0 * off, 2.0 * on, 1e-3);
        assert!((a - b).abs() <= 1e-15 * a);
    }
}

#[test]
fn matching_rho_is_plain_adamw() {
    let mut rng = Stream::new(2, Domain::Test, 0);
    let mut a = OptState::new(cfg(true, 0.6), 8).unwrap();
    let mut b = OptState::new(cfg(false, 0.6), 8).unwrap();
    let mut ta: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let mut tb = ta.clone();
    for _ in 0..50 {
        let g: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        a.adamw_step(&mut ta, &g, 0.6).unwrap();
        b.adamw_step(&mut tb, &g, 0.6).unwrap();
    }
    assert_eq!(ta, tb);
}

#[test]
fn updates_stay_bounded() {
    let mut rng = Stream::new(3, Domain::Test, 0);
    for _ in 0..200 {
        let mut st = OptState::new(cfg(true, 1.0), 6).unwrap();
        let mut theta: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
        for _ in 0..10 {
            let g: Vec<f64> = (0..6).map(|_| (4.0 * rng.normal()).exp() * rng.normal()).collect();
            let rho = 0.01 + 0.99 * rng.next_f64();
            let before = theta.clone();
            let StepOutcome::Applied { lr_eff, .. } = st.adamw_step(&mut theta, &g, rho).unwrap() else {
                panic!("finite gradient skipped");
            };
            for (t, b) in theta.iter().zip(&before) {
                let step = t - b * (1.0 - lr_eff * st.cfg.weight_decay);
                assert!(step.abs() <= 10.0 * lr_eff);
            }
        }
    }
}

#[test]
fn non_finite_gradient_is_skipped() {
    let mut st = OptState::new(cfg(false, 1.0), 2).unwrap();
    let mut theta = [1.0, 2.0];
    let out = st.adamw_step(&mut theta, &[f64::NAN, 0.0], 1.0).unwrap();
    assert!(matches!(out, StepOutcome::Skipped { .. }));
    assert_eq!(theta, [1.0, 2.0]);
    assert_eq!(st.step, 0);
}

#[test]
fn zero_warmup_and_decay_is_constant() {
    let c = OptimizerConfig::default();
    assert!((0..1000).all(|s| c.scheduled_lr(s) == c.lr));
}

#[test]
fn rho_on_estimate_averages_sync_steps() {
    let mut c = ExperimentConfig::defaults(TaskName::CountdownMini, PolicyKind::TabularBigram);
    c.method.name = Method::Vcpo;
    c.optimizer.lr = 0.3;
    c.pipeline.prompts_per_batch = 4;
    c.pipeline.completions_per_prompt = 2;
    c.pipeline.batch_size = 8;
    let task = Task::new(c.task.clone()).unwrap();
    let mut spec = c.learner_spec().unwrap();
    let init = experiment::initial_params(&c, &task, 0).unwrap();
    assert_eq!(
        pipeline::estimate_rho_on(&task, &c.pipeline, &spec, init.clone(), 1).unwrap(),
        1.0
    );
    let est = pipeline::estimate_rho_on(&task, &c.pipeline, &spec, init.clone(), 3).unwrap();
    spec.optimizer.ess_scaling = false;
    let p = PipelineConfig {
        total_steps: 3,
        ..c.pipeline.clone()
    };
    let out = pipeline::run_sync(&task, &p, Learner::new(&task, spec, init, None).unwrap()).unwrap();
    let mean = out.records.iter().map(|r| r.ess_ratio).sum::<f64>() / 3.0;
    assert_eq!(est, mean);
}
