//! Evaluation statistics: pass@k, worst@k, majority@N and entropy profiles.
//!
//! pass@k uses the unbiased estimator `1 - C(n - c, k) / C(n, k)` for a
//! prompt with `c` correct out of `n` samples. worst@k is its dual, the
//! probability that all `k` drawn samples are correct: `C(c, k) / C(n, k)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyParams;
use crate::rng;
use crate::rollout::{generate_with, Rollout};
use crate::schedule::Schedule;
use crate::tasks::{Answer, TaskInstance};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("k = {k} but a prompt only has {n} samples")]
    KExceedsSamples { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("evaluation batch has no prompts")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSamples {
    pub correct: Vec<bool>,
    pub answers: Vec<Answer>,
}

impl PromptSamples {
    pub fn from_rollouts(rollouts: &[Rollout]) -> Self {
        Self {
            correct: rollouts.iter().map(|r| r.reward == 1.0).collect(),
            answers: rollouts.iter().map(|r| r.answer.clone()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.correct.len()
    }

    pub fn c(&self) -> usize {
        self.correct.iter().filter(|&&x| x).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalBatch {
    pub prompts: Vec<PromptSamples>,
}

impl EvalBatch {
    fn check(&self, k: usize) -> Result<(), MetricsError> {
        if self.prompts.is_empty() {
            return Err(MetricsError::EmptyBatch);
        }
        if k == 0 {
            return Err(MetricsError::ZeroK);
        }
        match self.prompts.iter().find(|p| p.n() < k) {
            Some(p) => Err(MetricsError::KExceedsSamples { k, n: p.n() }),
            None => Ok(()),
        }
    }
}

/// `1 - C(n - c, k) / C(n, k)` via the running product.
pub fn pass_at_k_single(n: usize, c: usize, k: usize) -> f64 {
    if n - c < k {
        return 1.0;
    }
    1.0 - (0..k).fold(1.0, |acc, j| acc * (n - c - j) as f64 / (n - j) as f64)
}

/// `C(c, k) / C(n, k)`.
pub fn worst_at_k_single(n: usize, c: usize, k: usize) -> f64 {
    if c < k {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, j| acc * (c - j) as f64 / (n - j) as f64)
}

pub fn pass_at_k(batch: &EvalBatch, k: usize) -> Result<f64, MetricsError> {
    batch.check(k)?;
    let total: f64 = batch.prompts.iter().map(|p| pass_at_k_single(p.n(), p.c(), k)).sum();
    Ok(total / batch.prompts.len() as f64)
}

pub fn worst_at_k(batch: &EvalBatch, k: usize) -> Result<f64, MetricsError> {
    batch.check(k)?;
    let total: f64 = batch.prompts.iter().map(|p| worst_at_k_single(p.n(), p.c(), k)).sum();
    Ok(total / batch.prompts.len() as f64)
}

/// Plurality answer among the first `n` samples. Ties go to the answer whose
/// first occurrence is earliest. Returns the index of that first occurrence.
pub fn plurality_index(answers: &[Answer]) -> Option<usize> {
    let mut counts: HashMap<&Answer, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        counts.entry(a).or_insert((0, i)).0 += 1;
    }
    counts
        .values()
        .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)))
        .map(|&(_, first)| first)
}

pub fn majority_at_n(batch: &EvalBatch, n: usize) -> Result<f64, MetricsError> {
    batch.check(n)?;
    let hits = batch
        .prompts
        .iter()
        .filter(|p| {
            let winner = plurality_index(&p.answers[..n]).expect("n >= 1");
            p.answers[winner] != Answer::Invalid && p.correct[winner]
        })
        .count();
    Ok(hits as f64 / batch.prompts.len() as f64)
}

/// Mean token entropy by generated position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    /// Mean entropy of the `tau = 1` distribution at each position.
    pub per_position: Vec<f64>,
    /// Mean entropy of the distribution actually sampled from.
    pub behavior_per_position: Vec<f64>,
    pub counts: Vec<usize>,
    /// Token-weighted average per prompt, then averaged over prompts.
    pub mean_entropy: f64,
    pub behavior_entropy: f64,
}

/// Builds a profile from per-prompt rollout sets.
pub fn profile_from_rollouts(per_prompt: &[Vec<Rollout>]) -> EntropyProfile {
    let mut sums: Vec<f64> = Vec::new();
    let mut bsums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut mean = 0.0;
    let mut bmean = 0.0;
    let mut prompts = 0usize;
    for rollouts in per_prompt {
        let (mut h, mut hb, mut tokens) = (0.0, 0.0, 0usize);
        for r in rollouts {
            for (t, (&e, &eb)) in r.target_entropy.iter().zip(&r.behavior_entropy).enumerate() {
                if sums.len() <= t {
                    sums.push(0.0);
                    bsums.push(0.0);
                    counts.push(0);
                }
                sums[t] += e;
                bsums[t] += eb;
                counts[t] += 1;
                h += e;
                hb += eb;
                tokens += 1;
            }
        }
        if tokens > 0 {
            mean += h / tokens as f64;
            bmean += hb / tokens as f64;
            prompts += 1;
        }
    }
    let div = prompts.max(1) as f64;
    EntropyProfile {
        per_position: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        behavior_per_position: bsums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        counts,
        mean_entropy: mean / div,
        behavior_entropy: bmean / div,
    }
}

/// Samples `samples` responses per prompt under `schedule` and averages the
/// next-token entropies encountered along them.
pub fn entropy_profile(
    params: &PolicyParams,
    prompts: &[TaskInstance],
    schedule: &Schedule,
    d: f64,
    samples: usize,
    max_len: usize,
    seed: u64,
) -> EntropyProfile {
    let dec = params.decoder();
    let per_prompt: Vec<Vec<Rollout>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let state = dec.run(&inst.prompt);
            (0..samples)
                .map(|j| {
                    let mut r = rng::stream(seed, &[rng::tag::PROFILE, i as u64, j as u64]);
                    generate_with(&dec, &state, inst, schedule, d, max_len, &mut r)
                })
                .collect()
        })
        .collect();
    profile_from_rollouts(&per_prompt)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
