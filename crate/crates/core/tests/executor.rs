use dexmode_core::backbone::{ModelConfig, Observation};
use dexmode_core::bench::demo::*;
use dexmode_core::bench::*;
use dexmode_core::executor::*;
use dexmode_core::flow::{ActionChunk, ActionLayout};
use dexmode_core::imcopilot::{Copilot, NetConfig};
use dexmode_core::model::Variant;
use dexmode_core::record::Source;
use dexmode_core::train::{TrainConfig, VlaTrainer};
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Emits the same action row in every slot, with a scripted trigger sequence.
struct Scripted {
    row: Vec<f64>,
    triggers: Vec<f64>,
    layout: ActionLayout,
}

impl ChunkPolicy for Scripted {
    fn horizon(&self) -> usize {
        8
    }

    fn layout(&self) -> &ActionLayout {
        &self.layout
    }

    fn chunk(&mut self, _obs: &Observation, step: usize, _rng: &mut dyn RngCore) -> dexmode_core::Result<ActionChunk> {
        let mut data = Vec::new();
        for i in 0..8 {
            let mut r = self.row.clone();
            let trig = self.layout.trigger();
            r[trig] = self.triggers[(step + i) % self.triggers.len()];
            data.extend(r);
        }
        ActionChunk::new(8, self.row.len(), data)
    }
}

fn untrained_copilot() -> Copilot {
    Copilot::new(&NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

fn peel_policy(triggers: Vec<f64>) -> Scripted {
    let mut row = vec![0.0; peel::ACTION_DIM];
    row[1] = 0.5;
    row[2..8].copy_from_slice(&[0.1, -0.1, 0.2, 0.3, 0.3, 0.3]);
    Scripted {
        row,
        triggers,
        layout: peel::dims().layout,
    }
}

#[test]
fn option_examples() {
    assert_eq!(select_option(0.7, true), DispatchOption::Option2);
    assert_eq!(select_option(0.5, true), DispatchOption::Option1);
    assert_eq!(select_option(0.9, false), DispatchOption::Option1);
    assert_eq!(select_option(0.0, true), DispatchOption::Option1);
}

#[test]
fn joint_target_examples() {
    assert_eq!(integrate_joint_targets(&[0.3, -0.1], &[0.0, 0.0], 0.5, &[]), vec![0.3, -0.1]);
    let q = integrate_joint_targets(&[0.2], &[0.1], 0.5, &[]);
    assert!((q[0] - 0.25).abs() < 1e-15);
    assert_eq!(integrate_joint_targets(&[0.2], &[1.0], 0.5, &[Some((-0.5, 0.6))]), vec![0.6]);
    assert_eq!(integrate_joint_targets(&[0.2], &[-2.0], 0.5, &[Some((-0.5, 0.6))]), vec![-0.5]);
}

#[test]
fn replan_interval_is_bounded_by_horizon() {
    assert!(ExecutorConfig { replan: 0, max_steps: None }.validate(8).is_err());
    assert!(ExecutorConfig { replan: 9, max_steps: None }.validate(8).is_err());
    assert!(ExecutorConfig { replan: 8, max_steps: None }.validate(8).is_ok());
}

#[test]
fn replay_reproduces_the_demo() {
    let cfg = InsertionConfig::default();
    for seed in [3, 17, 40] {
        let demo = insertion_episode(&cfg, seed, InsertionController::Expert, 0.0).unwrap();
        let mut policy = ReplayPolicy {
            actions: demo.rows.iter().map(|r| r.action.clone()).collect(),
            horizon: 8,
            layout: insertion::dims().layout,
        };
        let mut env = InsertionEnv::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(&mut env, &mut policy, None, &ExecutorConfig::default(), &mut rng).unwrap();
        assert_eq!(r.record.outcome, demo.outcome);
        assert_eq!(r.record.rows.len(), demo.rows.len());
        for (a, b) in r.record.rows.iter().zip(&demo.rows) {
            assert_eq!(a.action, b.action);
            assert_eq!((&a.vision, &a.proprio, &a.force, &a.tactile), (&b.vision, &b.proprio, &b.force, &b.tactile));
            assert_eq!(a.source, Source::Vla);
        }
    }
}

#[test]
fn trigger_off_keeps_the_hand_with_the_action_model() {
    let cop = untrained_copilot();
    let mut env = PeelEnv::new(PeelConfig::default(), 1).unwrap();
    let mut policy = peel_policy(vec![0.0]);
    let r = rollout(&mut env, &mut policy, Some(&cop), &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!r.record.rows.is_empty());
    for row in &r.record.rows {
        assert_eq!(row.source, Source::Vla);
        assert_eq!(&row.action[2..8], &policy.row[2..8]);
    }
}

#[test]
fn trigger_on_hands_over_to_the_copilot() {
    let cop = untrained_copilot();
    let mut env = PeelEnv::new(PeelConfig::default(), 1).unwrap();
    let mut policy = peel_policy(vec![1.0]);
    let r = rollout(&mut env, &mut policy, Some(&cop), &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut check = PeelEnv::new(PeelConfig::default(), 1).unwrap();
    for row in &r.record.rows {
        assert_eq!(row.source, Source::Copilot);
        // arm columns still come from the chunk
        assert_eq!(&row.action[..2], &policy.row[..2]);
        assert_eq!(row.action[2..8], cop.act(&check.history).unwrap());
        check.step(&row.action).unwrap();
    }
    assert_eq!(r.dispatch_violations(true), 0);
}

#[test]
fn trigger_without_copilot_is_ignored() {
    let mut env = PeelEnv::new(PeelConfig::default(), 1).unwrap();
    let mut policy = peel_policy(vec![1.0]);
    let r = rollout(&mut env, &mut policy, None, &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.record.rows.iter().all(|row| row.source == Source::Vla));
    assert_eq!(r.dispatch_violations(false), 0);
}

#[test]
fn inference_cadence() {
    for replan in [1, 3, 4, 8] {
        let mut env = PeelEnv::new(PeelConfig { max_steps: 50, ..PeelConfig::default() }, 2).unwrap();
        let mut policy = peel_policy(vec![0.0]);
        let cfg = ExecutorConfig { replan, max_steps: Some(37) };
        let r = rollout(&mut env, &mut policy, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = r.record.rows.len();
        let expect: Vec<usize> = (0..n).step_by(replan).collect();
        assert_eq!(r.inferences, expect, "replan {replan}");
        assert!(n <= 37);
    }
}

#[test]
fn non_finite_chunk_aborts_as_failure() {
    let mut env = InsertionEnv::new(InsertionConfig::default(), 0).unwrap();
    let mut policy = Scripted {
        row: vec![f64::NAN, 0.0, 1.0, 0.0],
        triggers: vec![0.0],
        layout: insertion::dims().layout,
    };
    let r = rollout(&mut env, &mut policy, None, &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.aborted);
    assert!(!r.record.outcome.success);
    assert!(r.record.rows.is_empty());
}

/// Insertion env that reports a numeric failure on a fixed step.
struct Faulty {
    inner: InsertionEnv,
    fail_at: usize,
}

impl TaskEnv for Faulty {
    fn task(&self) -> Task {
        Task::Insertion
    }
    fn observe(&self) -> Observation {
        self.inner.observe()
    }
    fn step(&mut self, action: &[f64]) -> dexmode_core::Result<()> {
        if self.inner.steps() == self.fail_at {
            return Err(dexmode_core::Error::NonFinite("contact force".into()));
        }
        self.inner.step(action)
    }
    fn done(&self) -> bool {
        self.inner.done()
    }
    fn outcome(&self) -> dexmode_core::record::Outcome {
        self.inner.outcome()
    }
    fn steps(&self) -> usize {
        self.inner.steps()
    }
    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }
}

#[test]
fn env_failures_carry_the_step_index() {
    let mut env = Faulty {
        inner: InsertionEnv::new(InsertionConfig::default(), 0).unwrap(),
        fail_at: 5,
    };
    let mut policy = Scripted {
        row: vec![0.0, 0.0, 1.0, 0.0],
        triggers: vec![0.0],
        layout: insertion::dims().layout,
    };
    let err = rollout(&mut env, &mut policy, None, &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(&err, dexmode_core::Error::NonFinite(m) if m.contains("step 5")), "{err}");
}

#[test]
fn vla_rollout_is_deterministic() {
    let cfg = InsertionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let demos = collect_demos(6, 0, &DemoFilter::default(), &mut rng, |s| insertion_episode(&cfg, s, InsertionController::Expert, 0.3)).unwrap();
    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig { steps: 5, ..TrainConfig::default() };
    let mut tr = VlaTrainer::new(&mcfg, &insertion::dims(), Variant::Full, &tcfg, &demos).unwrap();
    tr.run(usize::MAX, |_| {}).unwrap();
    let run = |tr: &mut VlaTrainer| {
        let mut env = InsertionEnv::new(cfg.clone(), 77).unwrap();
        rollout(&mut env, &mut tr.policy, None, &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    };
    let a = run(&mut tr);
    let b = run(&mut tr);
    assert_eq!(a, b);
    assert!(tr.policy.routing.tokens > 0);
    assert_eq!(tr.policy.routing.violations, 0);
    assert_eq!(tr.policy.routing.counts.iter().sum::<usize>(), tr.policy.routing.tokens);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn source_tag_follows_trigger(triggers in prop::collection::vec(0.0f64..1.0, 1..12), loaded in any::<bool>(), seed in 0u64..50) {
        let cop = untrained_copilot();
        let mut env = PeelEnv::new(PeelConfig { max_steps: 40, ..PeelConfig::default() }, seed).unwrap();
        let mut policy = peel_policy(triggers.clone());
        let r = rollout(&mut env, &mut policy, loaded.then_some(&cop), &ExecutorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, row) in r.record.rows.iter().enumerate() {
            let c = triggers[i % triggers.len()];
            prop_assert_eq!(row.trigger, c);
            prop_assert_eq!(row.source == Source::Copilot, c > 0.5 && loaded);
        }
        prop_assert_eq!(r.dispatch_violations(loaded), 0);
    }
}
