use std::collections::HashSet;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::train::eval_prompt_set;
use super::RunnerError;
use crate::metrics::{majority_at_n, pass_at_k, EvalBatch, PromptSamples};
use crate::policy::PolicyParams;
use crate::rng::{self, tag};
use crate::rollout::{fork_generate, generate_with, Rollout};
use crate::schedule::Schedule;

/// τ_t curves, one column per decay rate. Row `t` holds position `t`.
pub fn dump_schedule(schedule: &Schedule, ds: &[f64], horizon: usize) -> String {
    let traces: Vec<Vec<f64>> = ds.iter().map(|&d| schedule.trace(d, horizon)).collect();
    let mut out = String::from("t");
    for d in ds {
        out.push_str(&format!(",d={d}"));
    }
    out.push('\n');
    for t in 0..horizon {
        out.push_str(&t.to_string());
        for tr in &traces {
            out.push_str(&format!(",{}", tr[t]));
        }
        out.push('\n');
    }
    out
}

/// Where to branch within each base response.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchPoints {
    /// Token indices, clamped to the base response length.
    Absolute(Vec<usize>),
    /// Fractions of the base response length, floored.
    Relative(Vec<f64>),
}

impl BranchPoints {
    pub fn quartiles() -> Self {
        Self::Relative(vec![0.0, 0.25, 0.5, 0.75, 1.0])
    }

    fn labels(&self) -> Vec<String> {
        match self {
            Self::Absolute(ps) => ps.iter().map(|p| p.to_string()).collect(),
            Self::Relative(fs) => fs.iter().map(|f| format!("{f}")).collect(),
        }
    }

    fn resolve(&self, len: usize) -> Vec<usize> {
        match self {
            Self::Absolute(ps) => ps.iter().map(|&p| p.min(len)).collect(),
            Self::Relative(fs) => fs.iter().map(|&f| ((f * len as f64).floor() as usize).min(len)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForkRow {
    pub position: String,
    /// Plurality-vote accuracy over the `k` branches, averaged over prompts.
    pub maj: f64,
    /// Fraction of correct branches.
    pub accuracy: f64,
    /// Mean number of distinct answers among the branches.
    pub distinct_answers: f64,
}

impl ForkRow {
    pub fn csv(rows: &[ForkRow], k: usize) -> String {
        let mut out = format!("position,maj@{k},accuracy,distinct_answers\n");
        for r in rows {
            out.push_str(&format!("{},{},{},{}\n", r.position, r.maj, r.accuracy, r.distinct_answers));
        }
        out
    }
}

/// For each evaluation prompt, samples one base response at `tau_branch`,
/// then `k` continuations from every branch point.
pub fn run_fork_experiment(
    params: &PolicyParams,
    cfg: &ExperimentConfig,
    points: &BranchPoints,
    k: usize,
    tau_branch: f64,
) -> Result<Vec<ForkRow>, RunnerError> {
    if k == 0 {
        return Err(RunnerError::InvalidConfig("k must be >= 1".into()));
    }
    let base_schedule =
        Schedule::fixed(tau_branch).map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
    let prompts = eval_prompt_set(cfg);
    let dec = params.decoder();
    let labels = points.labels();
    // per prompt, per branch point: k branches
    let per_prompt: Vec<Vec<Vec<Rollout>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let state = dec.run(&inst.prompt);
            let mut r = rng::stream(cfg.seed, &[tag::FORK, i as u64]);
            let base = generate_with(&dec, &state, inst, &base_schedule, 1.0, cfg.max_len, &mut r);
            points
                .resolve(base.len())
                .into_iter()
                .enumerate()
                .map(|(j, pos)| {
                    let seed = rng::derive_seed(cfg.seed, &[tag::FORK, i as u64, j as u64 + 1]);
                    fork_generate(params, inst, &base, pos, k, tau_branch, cfg.max_len, seed)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    labels
        .into_iter()
        .enumerate()
        .map(|(j, position)| {
            let sets: Vec<&Vec<Rollout>> = per_prompt.iter().map(|p| &p[j]).collect();
            let batch = EvalBatch {
                prompts: sets.iter().map(|s| PromptSamples::from_rollouts(s)).collect(),
            };
            let maj = majority_at_n(&batch, k)?;
            let accuracy = pass_at_k(&batch, 1)?;
            let distinct = sets
                .iter()
                .map(|s| s.iter().map(|r| &r.answer).collect::<HashSet<_>>().len() as f64)
                .sum::<f64>()
                / sets.len() as f64;
            Ok(ForkRow {
                position,
                maj,
                accuracy,
                distinct_answers: distinct,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRow {
    pub schedule: String,
    pub n: usize,
    pub maj: f64,
    pub pass: f64,
    /// Per-sample accuracy over the first `n` samples.
    pub accuracy: f64,
}

impl ScaleRow {
    pub fn csv(rows: &[ScaleRow]) -> String {
        let mut out = String::from("schedule,n,maj,pass,accuracy\n");
        for r in rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.schedule, r.n, r.maj, r.pass, r.accuracy));
        }
        out
    }
}

/// maj@N and pass@N from one checkpoint under each decoding schedule.
/// Annealed schedules run at their step-0 decay rate. Sample `j` of prompt
/// `i` uses the same random stream under every schedule.
pub fn run_inference_scaling(
    params: &PolicyParams,
    cfg: &ExperimentConfig,
    ns: &[usize],
    schedules: &[Schedule],
) -> Result<Vec<ScaleRow>, RunnerError> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    if n_max == 0 || ns.contains(&0) {
        return Err(RunnerError::InvalidConfig("N values must be >= 1".into()));
    }
    let prompts = eval_prompt_set(cfg);
    let dec = params.decoder();
    let states: Vec<Vec<f64>> = prompts.iter().map(|p| dec.run(&p.prompt)).collect();
    let mut rows = Vec::new();
    for schedule in schedules {
        schedule
            .validate()
            .map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
        let d = schedule.decay_rate(0);
        let samples: Vec<Vec<Rollout>> = prompts
            .par_iter()
            .zip(&states)
            .enumerate()
            .map(|(i, (inst, state))| {
                (0..n_max)
                    .map(|j| {
                        let mut r = rng::stream(cfg.seed, &[tag::SCALE, i as u64, j as u64]);
                        generate_with(&dec, state, inst, schedule, d, cfg.max_len, &mut r)
                    })
                    .collect()
            })
            .collect();
        let batch = EvalBatch {
            prompts: samples.iter().map(|s| PromptSamples::from_rollouts(s)).collect(),
        };
        for &n in ns {
            let truncated = EvalBatch {
                prompts: batch
                    .prompts
                    .iter()
                    .map(|p| PromptSamples {
                        correct: p.correct[..n].to_vec(),
                        answers: p.answers[..n].to_vec(),
                    })
                    .collect(),
            };
            rows.push(ScaleRow {
                schedule: schedule.label(),
                n,
                maj: majority_at_n(&batch, n)?,
                pass: pass_at_k(&truncated, n)?,
                accuracy: pass_at_k(&truncated, 1)?,
            });
        }
    }
    Ok(rows)
}
