use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::config::{ExperimentConfig, RunPaths};
use super::record::{header, report_ks, worst_ks, EvalSummary, RunRecord, TrainStats, UpdateStats};
use super::{io_err, RunnerError};
use crate::metrics::{majority_at_n, pass_at_k, profile_from_rollouts, worst_at_k, EvalBatch, PromptSamples};
use crate::objectives::{compute_loss, dynamic_sampling_filter, LossReport};
use crate::policy::{backward, checkpoint, Adam, PolicyParams};
use crate::rng::{self, tag};
use crate::rollout::{generate_group_with, write_jsonl, Rollout, RolloutGroup};
use crate::tasks::TaskInstance;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub records: Vec<RunRecord>,
}

pub struct EvalOutput {
    pub summary: EvalSummary,
    /// Samples per evaluation prompt, in prompt order.
    pub rollouts: Vec<Vec<Rollout>>,
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers == 0`.
pub fn with_workers<T: Send>(
    workers: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, RunnerError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunnerError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// The fixed evaluation prompts for a config; identical at every eval step.
pub fn eval_prompt_set(cfg: &ExperimentConfig) -> Vec<TaskInstance> {
    let mut r = rng::stream(cfg.seed, &[tag::EVAL_PROMPTS]);
    (0..cfg.eval_prompts).map(|_| cfg.tasks.draw(&mut r)).collect()
}

/// Draws `cfg.eval_samples` responses per prompt under `cfg.eval_schedule`.
pub fn evaluate(
    params: &PolicyParams,
    cfg: &ExperimentConfig,
    prompts: &[TaskInstance],
    step: u64,
) -> Result<EvalOutput, RunnerError> {
    let d = cfg.eval_schedule.decay_rate(step);
    let dec = params.decoder();
    let groups: Vec<RolloutGroup> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let seed = rng::derive_seed(cfg.seed, &[tag::EVAL_ROLLOUTS, step, i as u64]);
            generate_group_with(&dec, inst, &cfg.eval_schedule, d, cfg.eval_samples, cfg.max_len, seed, 1.0)
        })
        .collect::<Result<_, _>>()?;
    let rollouts: Vec<Vec<Rollout>> = groups.into_iter().map(|g| g.rollouts).collect();
    let summary = summarize(&rollouts, cfg.eval_samples)?;
    Ok(EvalOutput { summary, rollouts })
}

fn summarize(rollouts: &[Vec<Rollout>], n: usize) -> Result<EvalSummary, RunnerError> {
    let batch = EvalBatch {
        prompts: rollouts.iter().map(|r| PromptSamples::from_rollouts(r)).collect(),
    };
    let count = rollouts.iter().map(Vec::len).sum::<usize>().max(1);
    let reward: f64 = rollouts.iter().flatten().map(|r| r.reward).sum();
    Ok(EvalSummary {
        n,
        pass: report_ks(n)
            .into_iter()
            .map(|k| pass_at_k(&batch, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?,
        worst: worst_ks(n)
            .into_iter()
            .map(|k| worst_at_k(&batch, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?,
        maj: report_ks(n)
            .into_iter()
            .map(|k| majority_at_n(&batch, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?,
        mean_reward: reward / count as f64,
        profile: profile_from_rollouts(rollouts),
    })
}

fn rollout_stats(groups: &[RolloutGroup]) -> (f64, f64, f64, f64) {
    let (mut reward, mut len, mut h, mut hb, mut n, mut tokens) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
    for r in groups.iter().flat_map(|g| &g.rollouts) {
        reward += r.reward;
        len += r.len() as f64;
        h += r.target_entropy.iter().sum::<f64>();
        hb += r.behavior_entropy.iter().sum::<f64>();
        n += 1;
        tokens += r.len();
    }
    let n = n.max(1) as f64;
    let tokens = tokens.max(1) as f64;
    (reward / n, len / n, h / tokens, hb / tokens)
}

fn combine(reports: &[LossReport]) -> UpdateStats {
    let tokens = reports.iter().map(|r| r.tokens).sum::<usize>().max(1) as f64;
    let weighted = |f: fn(&LossReport) -> f64| reports.iter().map(|r| f(r) * r.tokens as f64).sum::<f64>() / tokens;
    let m = reports.len().max(1) as f64;
    UpdateStats {
        loss: reports.iter().map(|r| r.loss).sum::<f64>() / m,
        clip_fraction: weighted(|r| r.clip_fraction),
        mean_ratio: weighted(|r| r.mean_ratio),
        max_ratio: reports.iter().map(|r| r.max_ratio).fold(0.0, f64::max),
        mean_tis_weight: weighted(|r| r.mean_tis_weight),
        grad_norm: reports.iter().map(|r| r.grad_norm).sum::<f64>() / m,
        max_grad_norm: reports.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
        kl: weighted(|r| r.kl),
    }
}

struct Sinks {
    paths: RunPaths,
    metrics: csv::Writer<File>,
    rollouts: BufWriter<File>,
    n: usize,
}

impl Sinks {
    fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, RunnerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let paths = RunPaths::new(dir);
        let cfg_path = paths.config();
        fs::write(&cfg_path, cfg.to_json() + "\n").map_err(io_err(&cfg_path))?;
        let mut metrics = csv::Writer::from_path(paths.metrics())?;
        metrics.write_record(header(cfg.eval_samples))?;
        let rollouts_path = paths.rollouts();
        let rollouts = BufWriter::new(File::create(&rollouts_path).map_err(io_err(&rollouts_path))?);
        Ok(Self {
            paths,
            metrics,
            rollouts,
            n: cfg.eval_samples,
        })
    }

    fn row(&mut self, rec: &RunRecord) -> Result<(), RunnerError> {
        self.metrics.write_record(rec.row(self.n))?;
        self.metrics.flush().map_err(io_err(&self.paths.metrics()))?;
        Ok(())
    }

    fn samples(&mut self, step: u64, out: &EvalOutput, prompts: usize) -> Result<(), RunnerError> {
        let records: Vec<_> = out
            .rollouts
            .iter()
            .take(prompts)
            .enumerate()
            .flat_map(|(i, rs)| rs.iter().map(move |r| r.record(step, i)))
            .collect();
        write_jsonl(&mut self.rollouts, &records)?;
        self.rollouts.flush().map_err(io_err(&self.paths.rollouts()))?;
        Ok(())
    }

    fn checkpoint(&self, params: &PolicyParams, step: u64) -> Result<(), RunnerError> {
        checkpoint::save(params, &self.paths.checkpoint(step))?;
        Ok(())
    }
}

/// Trains a policy from scratch. With `out` set, writes `metrics.csv`,
/// `rollouts.jsonl`, `config.resolved.json` and checkpoints there.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome, RunnerError> {
    cfg.validate()?;
    with_workers(cfg.workers, || train_inner(cfg, out))?
}

fn train_inner(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome, RunnerError> {
    let mut sinks = out.map(|dir| Sinks::open(dir, cfg)).transpose()?;
    let mut params = cfg.init_params();
    let reference = params.clone();
    let mut adam = Adam::new(cfg.dims());
    let prompts = eval_prompt_set(cfg);
    let mut records = Vec::new();

    if let Some(s) = &sinks {
        s.checkpoint(&params, 0)?;
    }

    for step in 0..=cfg.steps {
        let d = cfg.schedule.decay_rate(step);
        let eval = if step % cfg.eval_every == 0 || step == cfg.steps {
            let out = evaluate(&params, cfg, &prompts, step)?;
            if let Some(s) = &mut sinks {
                s.samples(step, &out, cfg.log_prompts)?;
            }
            Some(out.summary)
        } else {
            None
        };
        let mut rec = RunRecord {
            step,
            d_s: d,
            train: None,
            eval,
        };
        if step == cfg.steps {
            if let Some(s) = &mut sinks {
                s.row(&rec)?;
            }
            records.push(rec);
            break;
        }

        let result = train_step(cfg, &mut params, &reference, &mut adam, step, d);
        let failure = match result {
            Ok(stats) => {
                rec.train = Some(stats);
                None
            }
            Err((stats, err)) => {
                rec.train = stats;
                Some(err)
            }
        };
        if let Some(s) = &mut sinks {
            s.row(&rec)?;
        }
        records.push(rec);
        if let Some(err) = failure {
            return Err(err);
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
            if let Some(s) = &sinks {
                s.checkpoint(&params, done)?;
            }
        }
    }

    if let Some(s) = &sinks {
        if cfg.steps > 0 {
            s.checkpoint(&params, cfg.steps)?;
        }
    }
    Ok(TrainOutcome { params, records })
}

type StepResult = Result<TrainStats, (Option<TrainStats>, RunnerError)>;

/// One rollout batch followed by `cfg.minibatches` sequential updates. On a
/// non-finite loss or gradient the partial statistics come back with the
/// error so they can be logged.
fn train_step(
    cfg: &ExperimentConfig,
    params: &mut PolicyParams,
    reference: &PolicyParams,
    adam: &mut Adam,
    step: u64,
    d: f64,
) -> StepResult {
    let bail = |e: RunnerError| (None, e);
    let instances: Vec<TaskInstance> = (0..cfg.prompts_per_step)
        .map(|i| cfg.tasks.draw(&mut rng::stream(cfg.seed, &[tag::TRAIN_PROMPTS, step, i as u64])))
        .collect();
    let groups: Vec<RolloutGroup> = {
        let dec = params.decoder();
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let seed = rng::derive_seed(cfg.seed, &[tag::TRAIN_ROLLOUTS, step, i as u64]);
                generate_group_with(
                    &dec,
                    inst,
                    &cfg.schedule,
                    d,
                    cfg.group_size,
                    cfg.max_len,
                    seed,
                    cfg.objective.std_floor,
                )
            })
            .collect::<Result<_, _>>()
            .map_err(|e| bail(e.into()))?
    };
    let (mean_reward, mean_len, entropy, behavior_entropy) = rollout_stats(&groups);
    let groups = if cfg.objective.dynamic_sampling {
        dynamic_sampling_filter(&groups)
    } else {
        groups
    };
    let mut stats = TrainStats {
        mean_reward,
        mean_response_length: mean_len,
        entropy,
        behavior_entropy,
        groups_used: groups.len(),
        update: None,
    };
    if groups.is_empty() {
        return Ok(stats);
    }

    let chunks = cfg.minibatches.min(groups.len());
    let per = groups.len().div_ceil(chunks);
    let mut reports = Vec::with_capacity(chunks);
    for batch in groups.chunks(per) {
        let (mut report, graph) = compute_loss(batch, params, reference, &cfg.objective).map_err(|e| bail(e.into()))?;
        let grads = backward(params, &graph).map_err(|e| bail(e.into()))?;
        report.grad_norm = grads.norm();
        reports.push(report);
        let what = if !reports.last().expect("pushed").loss.is_finite() {
            Some("loss".to_string())
        } else {
            grads.first_non_finite().map(|t| format!("gradient in `{t}`"))
        };
        if let Some(what) = what {
            stats.update = Some(combine(&reports));
            return Err((Some(stats), RunnerError::NonFinite { step, what }));
        }
        adam.step(params, &grads, cfg.lr).map_err(|e| bail(e.into()))?;
    }
    stats.update = Some(combine(&reports));
    Ok(stats)
}
