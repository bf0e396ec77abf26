use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dexmode_core::bench::Task;
use dexmode_core::data::{read_dataset, write_dataset, RunConfig};
use dexmode_core::model::Variant;
use dexmode_core::pipeline::{self, EvalMetrics};

#[derive(Parser)]
#[command(name = "dexmode", version, about = "Train and evaluate contact-aware manipulation policies on the surrogate tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the rotation copilot (teacher by PPO, then the student).
    TrainCopilot(Common),
    /// Generate success-filtered demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        /// Number of demonstrations; defaults to the config value.
        #[arg(long)]
        count: Option<usize>,
        /// Trained copilot, needed for peel demonstrations.
        #[arg(long)]
        copilot: Option<PathBuf>,
    },
    /// Train the action model on a demonstration file.
    TrainVla {
        #[command(flatten)]
        common: Common,
        /// Demonstrations; defaults to the file gen-demos writes in --out.
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Roll out a trained action model and emit metrics rows.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Action model checkpoint; defaults to vla.ckpt in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        copilot: Option<PathBuf>,
    },
    /// Run the variant grid on shared seeds and emit a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid; all five variants by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        copilot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed list of the config with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

struct Resolved {
    cfg: RunConfig,
    variant: Variant,
    seeds: Vec<u64>,
    episodes: usize,
}

impl Common {
    /// Loads the config and applies the command-line overrides. Contradictions
    /// are reported here, before any work starts.
    fn resolve(&self) -> Result<Resolved> {
        let (mut cfg, explicit) = RunConfig::load_with_flags(&self.config)?;
        let variant = match self.variant {
            Some(v) => {
                cfg = cfg.with_variant(v, explicit)?;
                v
            }
            None => cfg.ablation.variant()?,
        };
        let seeds = match self.seed {
            Some(s) => vec![s],
            None => cfg.eval.seeds.clone(),
        };
        if seeds.is_empty() {
            bail!("no seeds configured");
        }
        if let Some(s) = self.seed {
            cfg.training.seed = s;
            cfg.demos.seed = s;
            cfg.copilot.seed = s;
            cfg.eval.seeds = vec![s];
        }
        let episodes = self.episodes.unwrap_or(cfg.eval.episodes);
        if self.threads == 0 {
            bail!("--threads must be at least 1");
        }
        Ok(Resolved { cfg, variant, seeds, episodes })
    }
}

fn copilot_for(task: Task, variant: Variant, path: Option<&Path>, out: &Path) -> Result<Option<dexmode_core::imcopilot::Copilot>> {
    if task != Task::Peel || !variant.uses_copilot() {
        return Ok(None);
    }
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| out.join(pipeline::COPILOT_FILE));
    Ok(Some(pipeline::load_copilot(&path)?))
}

fn print_rows(rows: &[EvalMetrics], experts: usize) {
    println!("{}", EvalMetrics::header(experts));
    for r in rows {
        println!("{}", r.csv(experts));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::TrainCopilot(c) => {
            let r = c.resolve()?;
            pipeline::init_run_dir(&c.out, &r.cfg, &[r.cfg.copilot.seed])?;
            let (cop, _) = pipeline::train_copilot(&r.cfg, &c.out)?;
            let ev = pipeline::evaluate_copilot(&r.cfg, &cop, r.episodes, r.cfg.copilot.seed)?;
            let mut f = std::fs::File::create(c.out.join("copilot_eval.csv"))?;
            let header = "controller,episodes,success_rate,mean_return,mean_abs_rotation,drop_rate,sign_agreement";
            writeln!(f, "{header}")?;
            println!("{header}");
            for (name, s) in [("teacher", &ev.teacher), ("student", &ev.student), ("scripted", &ev.scripted)] {
                let row = format!(
                    "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    s.episodes, s.success_rate, s.mean_return, s.mean_abs_rotation, s.drop_rate, s.sign_agreement
                );
                writeln!(f, "{row}")?;
                println!("{row}");
            }
        }
        Command::GenDemos { common, count, copilot } => {
            let r = common.resolve()?;
            let seed = r.seeds[0];
            let cop = copilot_for(r.cfg.task, r.variant, copilot.as_deref(), &common.out)?;
            pipeline::init_run_dir(&common.out, &r.cfg, &[seed])?;
            let n = count.unwrap_or(r.cfg.demos.count);
            let recs = pipeline::generate_demos(&r.cfg, r.variant, cop.as_ref(), n, seed)?;
            let path = common.out.join(pipeline::demos_name(r.cfg.task, r.variant));
            write_dataset(&path, &recs)?;
            println!("wrote {} demonstrations to {}", recs.len(), path.display());
        }
        Command::TrainVla { common, demos } => {
            let r = common.resolve()?;
            let path = demos.unwrap_or_else(|| common.out.join(pipeline::demos_name(r.cfg.task, r.variant)));
            let recs = read_dataset(&path)?;
            let mut cfg = r.cfg;
            cfg.training.seed = r.seeds[0];
            pipeline::init_run_dir(&common.out, &cfg, &[cfg.training.seed])?;
            let mut loss = std::fs::OpenOptions::new().create(true).append(true).open(common.out.join(pipeline::LOSS_FILE))?;
            let tr = pipeline::train_vla(&cfg, r.variant, &recs, &common.out.join(pipeline::VLA_FILE), |row| {
                log::info!("step {} loss {:.4}", row.step, row.loss);
                let _ = writeln!(loss, "{},{:.6}", row.step, row.loss);
            })?;
            println!("trained {} for {} steps", tr.variant, tr.step());
        }
        Command::Eval { common, checkpoint, copilot } => {
            let r = common.resolve()?;
            let ck = checkpoint.unwrap_or_else(|| common.out.join(pipeline::VLA_FILE));
            let policy = pipeline::load_vla(&ck)?;
            if common.variant.is_some() && policy.variant != r.variant {
                bail!("{} holds a {} model, not {}", ck.display(), policy.variant, r.variant);
            }
            let cop = copilot_for(r.cfg.task, policy.variant, copilot.as_deref(), &common.out)?;
            pipeline::init_run_dir(&common.out, &r.cfg, &r.seeds)?;
            let mut rows = Vec::new();
            for &s in &r.seeds {
                rows.push(pipeline::evaluate(&r.cfg, &policy, cop.as_ref(), r.episodes, s, common.threads)?.0);
            }
            let experts = r.cfg.model.experts;
            let mut f = std::fs::File::create(common.out.join(pipeline::METRICS_FILE))?;
            writeln!(f, "{}", EvalMetrics::header(experts))?;
            for row in &rows {
                writeln!(f, "{}", row.csv(experts))?;
            }
            print_rows(&rows, experts);
        }
        Command::Ablate { common, variants, copilot } => {
            let r = common.resolve()?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let needs_copilot = r.cfg.task == Task::Peel && variants.iter().any(|v| v.uses_copilot());
            let cop = if needs_copilot {
                let path = copilot.unwrap_or_else(|| common.out.join(pipeline::COPILOT_FILE));
                Some(pipeline::load_copilot(&path)?)
            } else {
                None
            };
            let (rows, summary) = pipeline::ablate(&r.cfg, &variants, &r.seeds, cop.as_ref(), &common.out, r.episodes, common.threads)?;
            print_rows(&rows, r.cfg.model.experts);
            println!();
            println!("variant,sr,pcr,max_util");
            for s in summary {
                println!("{},{:.4},{},{:.4}", s.variant, s.sr, s.pcr.map_or(String::new(), |p| format!("{p:.4}")), s.max_utilization);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()).context("dexmode failed") {
        eprintln!("{e:#}");
        std::process::exit(1);
    }
}
