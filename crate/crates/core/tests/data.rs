use dexmode_core::bench::Task;
use dexmode_core::data::*;
use dexmode_core::model::Variant;
use dexmode_core::record::{EpisodeRecord, Outcome, Source, StepRow};
use dexmode_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_episode(rng: &mut ChaCha8Rng, id: u64) -> EpisodeRecord {
    let steps = rng.gen_range(0..6);
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-8..8)) - 0.5).collect() };
    let rows = (0..steps)
        .map(|_| StepRow {
            vision: v(4),
            proprio: v(3),
            force: v(14),
            tactile: v(60),
            action: v(4),
            trigger: 0.0,
            source: Source::Vla,
        })
        .collect();
    EpisodeRecord {
        episode_id: id,
        instruction: (id % 2) as usize,
        domain_seed: rng.gen(),
        rows,
        outcome: Outcome {
            success: rng.gen(),
            peeled: rng.gen::<bool>().then(|| rng.gen()),
        },
    }
}

fn to_text(eps: &[EpisodeRecord]) -> String {
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, eps).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps: Vec<_> = (0..10).map(|i| random_episode(&mut rng, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.jsonl");
    write_dataset(&path, &eps).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in eps.iter().zip(&back) {
        assert_eq!(a, b);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            let bits = |r: &StepRow| r.tactile.iter().chain(&r.force).map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}

#[test]
fn empty_dataset() {
    assert_eq!(to_text(&[]), "");
    assert!(read_dataset_from("".as_bytes()).unwrap().is_empty());
}

#[test]
fn one_meta_per_episode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps: Vec<_> = (0..7).map(|i| random_episode(&mut rng, i)).collect();
    let text = to_text(&eps);
    let metas = text.lines().filter(|l| l.contains("\"kind\":\"meta\"")).count();
    assert_eq!(metas, 7);
    assert!(text.lines().filter(|l| l.contains("\"kind\":\"meta\"")).all(|l| l.contains("\"schema_version\":1")));
}

fn two_step_episode() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ep = random_episode(&mut rng, 42);
    while ep.rows.len() < 2 {
        ep = random_episode(&mut rng, 42);
    }
    ep.rows.truncate(2);
    to_text(&[ep])
}

#[test]
fn out_of_order_step_names_the_episode() {
    let text = two_step_episode();
    let lines: Vec<&str> = text.lines().collect();
    let swapped = [lines[1], lines[0], lines[2]].join("\n");
    match read_dataset_from(swapped.as_bytes()) {
        Err(Error::Parse { line, msg }) => {
            assert_eq!(line, 1);
            assert!(msg.contains("episode 42"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_line_reports_its_number() {
    let text = two_step_episode();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replace("\"proprio\"", "\"propiro\"");
    match read_dataset_from(lines.join("\n").as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    match read_dataset_from("{not json\n".as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn version_mismatch_is_explicit() {
    let text = two_step_episode().replace("\"schema_version\":1", "\"schema_version\":7");
    assert!(matches!(
        read_dataset_from(text.as_bytes()),
        Err(Error::SchemaVersion { found: 7, expected: 1 })
    ));
}

#[test]
fn truncated_episode_is_rejected() {
    let text = two_step_episode();
    let head: Vec<&str> = text.lines().take(2).collect();
    assert!(matches!(read_dataset_from(head.join("\n").as_bytes()), Err(Error::Parse { .. })));
}

#[test]
fn missing_dataset_names_the_path() {
    let err = read_dataset("/nonexistent/demos.jsonl").unwrap_err();
    assert!(matches!(&err, Error::MissingArtifact(p) if p.ends_with("demos.jsonl")));
    assert!(err.to_string().contains("/nonexistent/demos.jsonl"));
}

fn column_episode(values: &[f64]) -> EpisodeRecord {
    EpisodeRecord {
        episode_id: 0,
        instruction: 0,
        domain_seed: 0,
        rows: values
            .iter()
            .map(|&v| StepRow {
                vision: vec![v],
                proprio: vec![v, 3.0],
                force: vec![v],
                tactile: vec![v],
                action: vec![v, 0.0],
                trigger: 0.0,
                source: Source::Expert,
            })
            .collect(),
        outcome: Outcome::default(),
    }
}

#[test]
fn norm_examples() {
    let s = compute_norm_stats(&[column_episode(&[0.0, 2.0])]).unwrap();
    assert_eq!(s.proprio.mean, vec![1.0, 3.0]);
    assert_eq!(s.proprio.std, vec![1.0, STD_FLOOR]);
    assert_eq!(s.action.std[1], STD_FLOOR);
    let x = s.proprio.normalize(&[2.0, 3.0]);
    assert_eq!(x, vec![1.0, 0.0]);
    assert_eq!(s.proprio.denormalize(&x), vec![2.0, 3.0]);
    assert!(compute_norm_stats(&[]).is_err());
    assert!(compute_norm_stats(&[column_episode(&[])]).is_err());
}

proptest! {
    #[test]
    fn norm_stats_ignore_episode_order(cols in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..6), 1..6), rot in 0usize..6) {
        let eps: Vec<_> = cols.iter().map(|c| column_episode(c)).collect();
        let mut shuffled = eps.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(compute_norm_stats(&eps).unwrap(), compute_norm_stats(&shuffled).unwrap());
    }

    #[test]
    fn norm_stats_are_exact(col in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let s = compute_norm_stats(&[column_episode(&col)]).unwrap();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((s.force.mean[0] - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((s.force.std[0] - var.sqrt().max(STD_FLOOR)).abs() <= 1e-9 * (1.0 + var.sqrt()));
        prop_assert!(s.force.std[0] >= STD_FLOOR);
    }

    #[test]
    fn any_dataset_round_trips(seed in any::<u64>(), n in 0u64..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<_> = (0..n).map(|i| random_episode(&mut rng, i)).collect();
        prop_assert_eq!(read_dataset_from(to_text(&eps).as_bytes()).unwrap(), eps);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::new(Task::Peel);
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn partial_config_takes_defaults() {
    let cfg = RunConfig::from_toml("task = \"insertion\"\n[training]\nsteps = 10\n").unwrap();
    assert_eq!(cfg.training.steps, 10);
    assert_eq!(cfg.model.experts, 8);
    assert_eq!(cfg.ablation.variant().unwrap(), Variant::Full);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "task = \"insertion\"\nmystery = 1\n",
        "task = \"insertion\"\n[model]\nexperts = 8\nexpert_count = 4\n",
        "task = \"insertion\"\n[env.insertion]\ntolerence = 0.1\n",
    ] {
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn flags_must_name_a_variant() {
    let text = "task = \"insertion\"\n[ablation]\nfusion = false\nforce = true\ntactile = true\ncopilot = true\n";
    assert!(RunConfig::from_toml(text).is_err());
}

#[test]
fn variant_flag_contradiction_is_rejected() {
    let text = "task = \"insertion\"\n[ablation]\nforce = false\n";
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.ablation.variant().unwrap(), Variant::NoForce);
    assert!(cfg.clone().with_variant(Variant::Full, true).is_err());
    assert_eq!(cfg.clone().with_variant(Variant::NoForce, true).unwrap().ablation, AblationFlags::of(Variant::NoForce));
    assert_eq!(cfg.with_variant(Variant::Baseline, false).unwrap().ablation, AblationFlags::of(Variant::Baseline));
}

#[test]
fn every_variant_has_distinct_flags() {
    for v in Variant::ALL {
        assert_eq!(AblationFlags::of(v).variant().unwrap(), v);
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}
