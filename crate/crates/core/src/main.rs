use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ead_core::policy::checkpoint;
use ead_core::runner::{
    compare_runs, dump_schedule, eval_prompt_set, evaluate, run_fork_experiment, run_inference_scaling, train,
    with_workers, BranchPoints, ExperimentConfig, ForkRow, ScaleRow,
};
use ead_core::schedule::Schedule;

#[derive(Parser)]
#[command(name = "ead", version, about = "Annealed-temperature RLVR on a tiny policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, samples and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: runs/seed<S>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's evaluation prompts.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print τ_t curves for several decay rates.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,25,40000")]
        d: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Branch continuations from positions of base responses.
    Fork {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Absolute token positions; defaults to length quartiles.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<usize>>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// maj@N and pass@N per decoding schedule from one checkpoint.
    Scale {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        n: Vec<usize>,
        /// Fixed temperatures compared against the config's annealed schedule.
        #[arg(long, value_delimiter = ',', default_value = "0.6,1.0,1.2")]
        taus: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge several runs' metrics on step.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            workers,
            steps,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let dir = out.unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed)));
            let outcome = train(&cfg, Some(&dir))?;
            let last = outcome.records.last().and_then(|r| r.eval.as_ref());
            match last.and_then(|e| e.pass_at(1)) {
                Some(p) => eprintln!("{}: final pass@1 {p:.4}", dir.display()),
                None => eprintln!("{}: done", dir.display()),
            }
        }
        Command::Eval { ckpt, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let params = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let out = with_workers(cfg.workers, || evaluate(&params, &cfg, &eval_prompt_set(&cfg), 0))??;
            let s = out.summary;
            let mut text = String::from("metric,value\n");
            for (k, v) in &s.pass {
                text.push_str(&format!("pass@{k},{v}\n"));
            }
            for (k, v) in &s.worst {
                text.push_str(&format!("worst@{k},{v}\n"));
            }
            for (k, v) in &s.maj {
                text.push_str(&format!("maj@{k},{v}\n"));
            }
            text.push_str(&format!("mean_reward,{}\n", s.mean_reward));
            text.push_str(&format!("mean_entropy,{}\n", s.profile.mean_entropy));
            text.push_str(&format!("behavior_entropy,{}\n", s.profile.behavior_entropy));
            emit(&text, None)?;
        }
        Command::Schedule { config, d, horizon, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            if d.is_empty() || d.iter().any(|&x| !(x >= 1.0 && x.is_finite())) {
                bail!("--d values must be finite and >= 1");
            }
            emit(&dump_schedule(&cfg.schedule, &d, horizon), out.as_deref())?;
        }
        Command::Fork {
            ckpt,
            config,
            positions,
            k,
            tau,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let params = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let points = positions.map(BranchPoints::Absolute).unwrap_or_else(BranchPoints::quartiles);
            let rows = with_workers(cfg.workers, || run_fork_experiment(&params, &cfg, &points, k, tau))??;
            emit(&ForkRow::csv(&rows, k), out.as_deref())?;
        }
        Command::Scale {
            ckpt,
            config,
            n,
            taus,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let params = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ead = match cfg.schedule {
                s @ Schedule::Annealed(_) => s,
                Schedule::Fixed(_) => Schedule::default(),
            };
            let mut schedules = vec![ead];
            for t in taus {
                schedules.push(Schedule::fixed(t).with_context(|| format!("--taus {t}"))?);
            }
            let rows = with_workers(cfg.workers, || run_inference_scaling(&params, &cfg, &n, &schedules))??;
            emit(&ScaleRow::csv(&rows), out.as_deref())?;
        }
        Command::Compare { dirs, out } => {
            emit(&compare_runs(&dirs)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
