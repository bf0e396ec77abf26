//! Run-level commands: copilot training, demonstration generation, action
//! model training, evaluation and the ablation grid. Each writes into a run
//! directory and picks up where an earlier invocation stopped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dexmode_autodiff::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::demo::{collect_demos, insertion_episode, peel_episode, InsertionController, Rotation};
use crate::bench::{compute_pcr, InsertionEnv, PeelEnv, Task, TaskEnv};
use crate::data::{read_dataset, write_dataset, RunConfig};
use crate::error::{contract, Error, Result};
use crate::executor::{rollout, RoutingTally, VlaPolicy};
use crate::imcopilot::{
    distill_student, evaluate_rotation, ppo_train, Controller, Copilot, CurveRow, DistillReport, RotationStats,
};
use crate::model::Variant;
use crate::record::EpisodeRecord;
use crate::train::{load_policy, LossRow, VlaTrainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEEDS_FILE: &str = "seeds.txt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const COPILOT_FILE: &str = "copilot.ckpt";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const VLA_FILE: &str = "vla.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Writes the resolved config and seed list, the first thing every command
/// does in its run directory.
pub fn init_run_dir(dir: &Path, cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    fs::write(dir.join(SEEDS_FILE), list.join("\n") + "\n")?;
    log::info!("run directory {} (seeds {list:?})", dir.display());
    Ok(())
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn load_copilot(path: &Path) -> Result<Copilot> {
    require(path)?;
    Copilot::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopilotSummary {
    pub seed: u64,
    pub distill: Option<DistillReport>,
}

/// Trains the teacher with PPO, then distills the student. Both stages leave
/// a checkpoint, and a finished stage is not repeated.
pub fn train_copilot(cfg: &RunConfig, dir: &Path) -> Result<(Copilot, CopilotSummary)> {
    let c = &cfg.copilot;
    fs::create_dir_all(dir)?;
    let final_path = dir.join(COPILOT_FILE);
    if final_path.exists() {
        log::info!("copilot already trained at {}", final_path.display());
        return Ok((load_copilot(&final_path)?, CopilotSummary { seed: c.seed, distill: None }));
    }
    let teacher_path = dir.join(TEACHER_FILE);
    let mut copilot = if teacher_path.exists() {
        log::info!("resuming from teacher checkpoint {}", teacher_path.display());
        load_copilot(&teacher_path)?
    } else {
        let mut curve = csv_file(&dir.join("ppo_curve.csv"), CurveRow::HEADER)?;
        let mut write_err = None;
        let (cop, _) = ppo_train(&c.ppo, &c.rotor, &c.ranges, c.seed, |row| {
            if row.iteration % 10 == 0 {
                log::info!("ppo iteration {} return {:.2} success {:.2}", row.iteration, row.mean_return, row.success_rate);
            }
            if let Err(e) = writeln!(curve, "{}", row.csv()) {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        cop.to_checkpoint().save(&teacher_path)?;
        cop
    };
    let report = distill_student(&mut copilot, &c.rotor, &c.ranges, &c.distill, c.seed.wrapping_add(1))?;
    log::info!("distillation held-out mse {:.4} (target variance {:.4})", report.heldout_mse, report.heldout_variance);
    fs::write(dir.join("distill.json"), serde_json::to_string_pretty(&report)?)?;
    copilot.to_checkpoint().save(&final_path)?;
    Ok((copilot, CopilotSummary { seed: c.seed, distill: Some(report) }))
}

/// Rotation statistics for the copilot's teacher and student and for the
/// scripted baseline, over the same episode seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopilotEval {
    pub teacher: RotationStats,
    pub student: RotationStats,
    pub scripted: RotationStats,
}

pub fn evaluate_copilot(cfg: &RunConfig, copilot: &Copilot, episodes: usize, seed: u64) -> Result<CopilotEval> {
    let c = &cfg.copilot;
    let run = |ctl| evaluate_rotation(ctl, &c.rotor, &c.ranges, episodes, seed);
    Ok(CopilotEval {
        teacher: run(Controller::Teacher(copilot))?,
        student: run(Controller::Student(copilot))?,
        scripted: run(Controller::Scripted)?,
    })
}

/// Success-filtered demonstrations for `variant`. Peel demonstrations use
/// the copilot for rotation unless the variant runs without it, in which case
/// the scripted rotation and the relaxed filter apply.
pub fn generate_demos(cfg: &RunConfig, variant: Variant, copilot: Option<&Copilot>, count: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let d = &cfg.demos;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.task {
        Task::Insertion => {
            let env = &cfg.env.insertion;
            collect_demos(count, 0, &d.filter, &mut rng, |s| insertion_episode(env, s, InsertionController::Expert, d.noise))
        }
        Task::Peel => {
            let env = &cfg.env.peel;
            if variant.uses_copilot() {
                let Some(cop) = copilot else {
                    return contract("peel demonstrations need a trained copilot");
                };
                collect_demos(count, 0, &d.filter, &mut rng, |s| peel_episode(env, s, Rotation::Copilot(cop)))
            } else {
                collect_demos(count, 0, &d.relaxed_filter, &mut rng, |s| peel_episode(env, s, Rotation::Scripted))
            }
        }
    }
}

/// Demos file that `variant` trains on; the no-copilot peel variant has its
/// own scripted-rotation set.
pub fn demos_name(task: Task, variant: Variant) -> &'static str {
    if task == Task::Peel && !variant.uses_copilot() {
        "demos-scripted.jsonl"
    } else {
        DEMOS_FILE
    }
}

/// Reads an existing demos file or generates and writes one.
pub fn ensure_demos(cfg: &RunConfig, variant: Variant, copilot: Option<&Copilot>, path: &Path, count: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    if path.exists() {
        let recs = read_dataset(path)?;
        if recs.len() == count {
            log::info!("reusing {} demonstrations from {}", recs.len(), path.display());
            return Ok(recs);
        }
        log::warn!("{} holds {} episodes, regenerating {count}", path.display(), recs.len());
    }
    let recs = generate_demos(cfg, variant, copilot, count, seed)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_dataset(path, &recs)?;
    Ok(recs)
}

/// Trains the action model, saving a checkpoint every `checkpoint_every`
/// steps. An existing checkpoint at `ckpt` is resumed.
pub fn train_vla(cfg: &RunConfig, variant: Variant, records: &[EpisodeRecord], ckpt: &Path, mut log: impl FnMut(&LossRow)) -> Result<VlaTrainer> {
    let mut tr = if ckpt.exists() {
        let tr = VlaTrainer::resume(&Checkpoint::load(ckpt)?, records)?;
        if tr.variant != variant {
            return Err(Error::Config(format!("{} holds a {} model, not {variant}", ckpt.display(), tr.variant)));
        }
        log::info!("resuming {variant} at step {}", tr.step());
        tr
    } else {
        VlaTrainer::new(&cfg.model, &cfg.task.dims(), variant, &cfg.training, records)?
    };
    let every = cfg.training.checkpoint_every.max(1);
    while !tr.done() {
        let next = (tr.step() / every + 1) * every;
        tr.run(next, &mut log)?;
        tr.to_checkpoint()?.save(ckpt)?;
    }
    if !ckpt.exists() {
        tr.to_checkpoint()?.save(ckpt)?;
    }
    Ok(tr)
}

pub fn load_vla(path: &Path) -> Result<VlaPolicy> {
    require(path)?;
    load_policy(&Checkpoint::load(path)?)
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    pub episodes: usize,
    pub sr: f64,
    pub pcr: Option<f64>,
    pub utilization: Vec<f64>,
    pub routing_violations: usize,
    pub dispatch_violations: usize,
    pub aborted: usize,
}

impl EvalMetrics {
    pub fn header(experts: usize) -> String {
        let mut h = String::from("task,variant,seed,episodes,sr,pcr,max_util,routing_violations,dispatch_violations,aborted");
        for e in 0..experts {
            h.push_str(&format!(",util_e{e}"));
        }
        h
    }

    pub fn max_utilization(&self) -> f64 {
        self.utilization.iter().copied().fold(0.0, f64::max)
    }

    pub fn csv(&self, experts: usize) -> String {
        let pcr = self.pcr.map_or(String::new(), |p| format!("{p:.4}"));
        let util = if self.utilization.is_empty() { String::new() } else { format!("{:.4}", self.max_utilization()) };
        let mut row = format!(
            "{},{},{},{},{:.4},{pcr},{util},{},{},{}",
            self.task, self.variant, self.seed, self.episodes, self.sr, self.routing_violations, self.dispatch_violations, self.aborted
        );
        for e in 0..experts {
            match self.utilization.get(e) {
                Some(u) => row.push_str(&format!(",{u:.4}")),
                None => row.push(','),
            }
        }
        row
    }
}

/// Environment seed of evaluation episode `ep` under run seed `seed`. Kept
/// apart from the small seeds the demonstrations draw from.
pub fn eval_env_seed(seed: u64, ep: u64) -> u64 {
    (seed + 1) << 32 | ep
}

fn make_env(cfg: &RunConfig, seed: u64) -> Result<Box<dyn TaskEnv>> {
    Ok(match cfg.task {
        Task::Insertion => Box::new(InsertionEnv::new(cfg.env.insertion.clone(), seed)?),
        Task::Peel => Box::new(PeelEnv::new(cfg.env.peel.clone(), seed)?),
    })
}

fn run_episodes(cfg: &RunConfig, policy: &mut VlaPolicy, copilot: Option<&Copilot>, seed: u64, eps: std::ops::Range<u64>) -> Result<Vec<(EpisodeRecord, usize, bool)>> {
    let mut out = Vec::with_capacity(eps.end.saturating_sub(eps.start) as usize);
    for ep in eps {
        let env_seed = eval_env_seed(seed, ep);
        let mut env = make_env(cfg, env_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ 0x0e7a_15ee_d000_0000);
        let r = rollout(env.as_mut(), policy, copilot, &cfg.eval.executor, &mut rng)?;
        let viol = r.dispatch_violations(copilot.is_some() && env.copilot_history().is_some());
        let mut record = r.record;
        record.episode_id = ep;
        record.domain_seed = env_seed;
        out.push((record, viol, r.aborted));
    }
    Ok(out)
}

/// Evaluates `policy` on `episodes` episodes. Episodes have their own seeds,
/// so the result does not depend on `threads`; records come back sorted by
/// episode id. The copilot is only consulted by variants that use it.
pub fn evaluate(
    cfg: &RunConfig,
    policy: &VlaPolicy,
    copilot: Option<&Copilot>,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<(EvalMetrics, Vec<EpisodeRecord>)> {
    if episodes == 0 {
        return contract("evaluation needs at least one episode");
    }
    let copilot = copilot.filter(|_| policy.variant.uses_copilot());
    let threads = threads.clamp(1, episodes);
    let per = episodes.div_ceil(threads) as u64;
    let mut tally = RoutingTally {
        counts: vec![0; policy.routing.counts.len()],
        ..Default::default()
    };
    let mut results = Vec::with_capacity(episodes);
    let parts: Vec<Result<(Vec<_>, RoutingTally)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads as u64)
            .map(|t| {
                let mut p = policy.clone();
                p.routing = tally.clone();
                let range = (t * per).min(episodes as u64)..((t + 1) * per).min(episodes as u64);
                scope.spawn(move || run_episodes(cfg, &mut p, copilot, seed, range).map(|r| (r, p.routing)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    for part in parts {
        let (rows, t) = part?;
        results.extend(rows);
        tally.tokens += t.tokens;
        tally.violations += t.violations;
        for (a, b) in tally.counts.iter_mut().zip(&t.counts) {
            *a += b;
        }
    }
    let n = results.len() as f64;
    let sr = results.iter().filter(|r| r.0.outcome.success).count() as f64 / n;
    let pcr = match cfg.task {
        Task::Peel => {
            let mut total = 0.0;
            for (r, _, _) in &results {
                total += compute_pcr(r.outcome.peeled.unwrap_or(0.0))?;
            }
            Some(total / n)
        }
        Task::Insertion => None,
    };
    let metrics = EvalMetrics {
        task: cfg.task,
        variant: policy.variant,
        seed,
        episodes,
        sr,
        pcr,
        utilization: if tally.counts.is_empty() { vec![] } else { tally.utilization() },
        routing_violations: tally.violations,
        dispatch_violations: results.iter().map(|r| r.1).sum(),
        aborted: results.iter().filter(|r| r.2).count(),
    };
    Ok((metrics, results.into_iter().map(|r| r.0).collect()))
}

/// Where the ablation grid keeps the artifacts of one variant and seed.
pub fn cell_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(format!("seed-{seed}"))
}

/// Demonstrations, training and evaluation for one variant and seed.
pub fn run_cell(cfg: &RunConfig, variant: Variant, copilot: Option<&Copilot>, out: &Path, seed: u64, episodes: usize, threads: usize) -> Result<EvalMetrics> {
    let mut cfg = cfg.clone().with_variant(variant, false)?;
    cfg.training.seed = seed;
    cfg.demos.seed = seed;
    let dir = cell_dir(out, variant, seed);
    init_run_dir(&dir, &cfg, &[seed])?;
    let demos_path = out.join("demos").join(format!("seed-{seed}")).join(demos_name(cfg.task, variant));
    let demos = ensure_demos(&cfg, variant, copilot, &demos_path, cfg.demos.count, seed)?;
    let mut loss = csv_file(&dir.join(LOSS_FILE), "step,loss")?;
    let tr = train_vla(&cfg, variant, &demos, &dir.join(VLA_FILE), |r| {
        log::debug!("{variant} seed {seed} step {} loss {:.4}", r.step, r.loss);
        let _ = writeln!(loss, "{},{:.6}", r.step, r.loss);
    })?;
    let (m, _) = evaluate(&cfg, &tr.policy, copilot, episodes, seed, threads)?;
    let mut f = fs::File::create(dir.join(METRICS_FILE))?;
    writeln!(f, "{}", EvalMetrics::header(cfg.model.experts))?;
    writeln!(f, "{}", m.csv(cfg.model.experts))?;
    Ok(m)
}

/// Per-variant means over seeds, in grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub sr: f64,
    pub pcr: Option<f64>,
    pub max_utilization: f64,
}

pub fn summarize(rows: &[EvalMetrics]) -> Vec<VariantSummary> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let mine: Vec<&EvalMetrics> = rows.iter().filter(|r| r.variant == v).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let pcr = mine.iter().map(|r| r.pcr).sum::<Option<f64>>().map(|p| p / n);
        out.push(VariantSummary {
            variant: v,
            seeds: mine.iter().map(|r| r.seed).collect(),
            sr: mine.iter().map(|r| r.sr).sum::<f64>() / n,
            pcr,
            max_utilization: mine.iter().map(|r| r.max_utilization()).fold(0.0, f64::max),
        });
    }
    out
}

/// Runs every requested variant on every seed and writes the per-cell rows
/// and the comparison table under `out`.
pub fn ablate(
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    copilot: Option<&Copilot>,
    out: &Path,
    episodes: usize,
    threads: usize,
) -> Result<(Vec<EvalMetrics>, Vec<VariantSummary>)> {
    init_run_dir(out, cfg, seeds)?;
    let mut rows = Vec::new();
    for &v in variants {
        for &s in seeds {
            log::info!("ablation cell {v} seed {s}");
            rows.push(run_cell(cfg, v, copilot, out, s, episodes, threads)?);
        }
    }
    let experts = cfg.model.experts;
    let mut f = fs::File::create(out.join(METRICS_FILE))?;
    writeln!(f, "{}", EvalMetrics::header(experts))?;
    for r in &rows {
        writeln!(f, "{}", r.csv(experts))?;
    }
    let summary = summarize(&rows);
    let mut f = fs::File::create(out.join("summary.csv"))?;
    writeln!(f, "variant,seeds,sr,pcr,max_util")?;
    for s in &summary {
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let pcr = s.pcr.map_or(String::new(), |p| format!("{p:.4}"));
        writeln!(f, "{},{},{:.4},{pcr},{:.4}", s.variant, seeds.join(" "), s.sr, s.max_utilization)?;
    }
    Ok((rows, summary))
}

fn csv_file(path: &Path, header: &str) -> Result<fs::File> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    Ok(f)
}
