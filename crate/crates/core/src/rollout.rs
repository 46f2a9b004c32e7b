//! Response generation under a temperature schedule.
//!
//! Every sampled token records two log-probabilities: the behavior track
//! (the tempered distribution the token was actually drawn from) and the
//! target track (the same logits at temperature 1.0, i.e. the policy being
//! optimized). The gap between them is what importance weighting corrects.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{entropy_from_log_probs, inverse_cdf, log_softmax_into};
use crate::objectives::normalize_advantages;
use crate::policy::{Decoder, PolicyParams};
use crate::rng;
use crate::schedule::Schedule;
use crate::tasks::{verify, vocab, Answer, TaskInstance};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("branch position {pos} is past the end of a {len}-token response")]
    BranchOutOfRange { pos: usize, len: usize },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// `log pi(y_t | .; tau_t)` under the policy that generated the rollout.
    pub behavior_logprobs: Vec<f64>,
    /// `log pi(y_t | .; 1)` under the same parameters.
    pub target_logprobs: Vec<f64>,
    /// Entropy of the tempered next-token distribution at each position.
    pub behavior_entropy: Vec<f64>,
    /// Entropy of the `tau = 1` next-token distribution at each position.
    pub target_entropy: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub answer: Answer,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn record(&self, step: u64, prompt_index: usize) -> RolloutRecord {
        RolloutRecord {
            step,
            prompt_index,
            prompt: self.prompt.clone(),
            tokens: self.tokens.clone(),
            temperatures: self.temperatures.clone(),
            behavior_logprobs: self.behavior_logprobs.clone(),
            target_logprobs: self.target_logprobs.clone(),
            reward: self.reward,
            terminated: self.terminated,
            answer: self.answer.to_string(),
        }
    }
}

/// One line of `rollouts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: u64,
    pub prompt_index: usize,
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub behavior_logprobs: Vec<f64>,
    pub target_logprobs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub answer: String,
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[RolloutRecord]) -> Result<(), RolloutError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn correct_count(&self) -> usize {
        self.rollouts.iter().filter(|r| r.reward == 1.0).count()
    }
}

/// Per-step sampling state shared by all generation entry points.
struct Sampler<'d, 'p> {
    dec: &'d Decoder<'p>,
    logits: Vec<f64>,
    target: Vec<f64>,
    behavior: Vec<f64>,
    probs: Vec<f64>,
}

impl<'d, 'p> Sampler<'d, 'p> {
    fn new(dec: &'d Decoder<'p>) -> Self {
        let v = dec.params().dims().vocab;
        Self {
            dec,
            logits: vec![0.0; v],
            target: vec![0.0; v],
            behavior: vec![0.0; v],
            probs: vec![0.0; v],
        }
    }

    /// Continues `partial` from `state` until EOS or `max_len` tokens.
    fn extend<R: Rng + ?Sized>(
        &mut self,
        partial: &mut Rollout,
        mut state: Vec<f64>,
        temperature: impl Fn(usize) -> f64,
        max_len: usize,
        rng: &mut R,
    ) {
        while partial.tokens.len() < max_len && partial.tokens.last() != Some(&vocab::EOS) {
            let t = partial.tokens.len();
            let tau = temperature(t);
            self.dec.logits_into(&state, &mut self.logits);
            log_softmax_into(&self.logits, 1.0, &mut self.target);
            log_softmax_into(&self.logits, tau, &mut self.behavior);
            for (p, lp) in self.probs.iter_mut().zip(&self.behavior) {
                *p = lp.exp();
            }
            let u: f64 = rng.random();
            let tok = inverse_cdf(&self.probs, u);
            partial.tokens.push(tok);
            partial.temperatures.push(tau);
            partial.behavior_logprobs.push(self.behavior[tok]);
            partial.target_logprobs.push(self.target[tok]);
            partial.behavior_entropy.push(entropy_from_log_probs(&self.behavior));
            partial.target_entropy.push(entropy_from_log_probs(&self.target));
            if tok != vocab::EOS && partial.tokens.len() < max_len {
                self.dec.step(&mut state, tok);
            }
        }
    }
}

fn empty_rollout(prompt: &[usize]) -> Rollout {
    Rollout {
        prompt: prompt.to_vec(),
        tokens: Vec::new(),
        temperatures: Vec::new(),
        behavior_logprobs: Vec::new(),
        target_logprobs: Vec::new(),
        behavior_entropy: Vec::new(),
        target_entropy: Vec::new(),
        reward: 0.0,
        terminated: false,
        answer: Answer::Invalid,
    }
}

fn finalize(instance: &TaskInstance, mut r: Rollout) -> Rollout {
    let verdict = verify(instance, &r.tokens);
    r.reward = verdict.reward;
    r.answer = verdict.answer;
    r.terminated = r.tokens.last() == Some(&vocab::EOS);
    r
}

/// Generates from a decoder and a precomputed prompt state. The group and
/// evaluation paths call this directly so the prompt is encoded once.
pub fn generate_with<R: Rng + ?Sized>(
    dec: &Decoder<'_>,
    prompt_state: &[f64],
    instance: &TaskInstance,
    schedule: &Schedule,
    d: f64,
    max_len: usize,
    rng: &mut R,
) -> Rollout {
    let mut sampler = Sampler::new(dec);
    let mut r = empty_rollout(&instance.prompt);
    sampler.extend(
        &mut r,
        prompt_state.to_vec(),
        |t| schedule.temperature_at(t, d),
        max_len,
        rng,
    );
    finalize(instance, r)
}

pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    instance: &TaskInstance,
    schedule: &Schedule,
    d: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout, RolloutError> {
    if max_len == 0 {
        return Err(RolloutError::ZeroMaxLen);
    }
    let dec = params.decoder();
    let state = dec.run(&instance.prompt);
    Ok(generate_with(&dec, &state, instance, schedule, d, max_len, rng))
}

/// `G` rollouts for one prompt; rollout `i` draws from the stream `(group_seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_group(
    params: &PolicyParams,
    instance: &TaskInstance,
    schedule: &Schedule,
    d: f64,
    group_size: usize,
    max_len: usize,
    group_seed: u64,
    std_floor: f64,
) -> Result<RolloutGroup, RolloutError> {
    let dec = params.decoder();
    generate_group_with(&dec, instance, schedule, d, group_size, max_len, group_seed, std_floor)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_group_with(
    dec: &Decoder<'_>,
    instance: &TaskInstance,
    schedule: &Schedule,
    d: f64,
    group_size: usize,
    max_len: usize,
    group_seed: u64,
    std_floor: f64,
) -> Result<RolloutGroup, RolloutError> {
    if max_len == 0 {
        return Err(RolloutError::ZeroMaxLen);
    }
    let state = dec.run(&instance.prompt);
    let rollouts: Vec<Rollout> = (0..group_size)
        .map(|i| {
            let mut r = rng::stream(group_seed, &[i as u64]);
            generate_with(dec, &state, instance, schedule, d, max_len, &mut r)
        })
        .collect();
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    Ok(RolloutGroup {
        instance: instance.clone(),
        advantages: normalize_advantages(&rewards, std_floor),
        rollouts,
    })
}

/// `k` continuations of `base` that keep its first `branch_pos` tokens and
/// sample the rest at the fixed temperature `tau_branch`.
#[allow(clippy::too_many_arguments)]
pub fn fork_generate(
    params: &PolicyParams,
    instance: &TaskInstance,
    base: &Rollout,
    branch_pos: usize,
    k: usize,
    tau_branch: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Rollout>, RolloutError> {
    if branch_pos > base.tokens.len() {
        return Err(RolloutError::BranchOutOfRange {
            pos: branch_pos,
            len: base.tokens.len(),
        });
    }
    if !(tau_branch.is_finite() && tau_branch > 0.0) {
        return Err(RolloutError::BadTemperature(tau_branch));
    }
    if max_len == 0 {
        return Err(RolloutError::ZeroMaxLen);
    }
    let dec = params.decoder();
    let mut prefix_ctx = base.prompt.clone();
    prefix_ctx.extend_from_slice(&base.tokens[..branch_pos]);
    let state = dec.run(&prefix_ctx);
    let mut sampler = Sampler::new(&dec);
    Ok((0..k)
        .map(|i| {
            let mut r = empty_rollout(&base.prompt);
            r.tokens = base.tokens[..branch_pos].to_vec();
            r.temperatures = base.temperatures[..branch_pos].to_vec();
            r.behavior_logprobs = base.behavior_logprobs[..branch_pos].to_vec();
            r.target_logprobs = base.target_logprobs[..branch_pos].to_vec();
            r.behavior_entropy = base.behavior_entropy[..branch_pos].to_vec();
            r.target_entropy = base.target_entropy[..branch_pos].to_vec();
            let mut stream = rng::stream(seed, &[i as u64]);
            sampler.extend(&mut r, state.clone(), |_| tau_branch, max_len, &mut stream);
            finalize(instance, r)
        })
        .collect())
}

/// Recomputes both log-prob tracks for a fixed token sequence.
pub fn rescore(
    params: &PolicyParams,
    instance: &TaskInstance,
    tokens: &[usize],
    schedule: &Schedule,
    d: f64,
) -> Rollout {
    let dec = params.decoder();
    let mut state = dec.run(&instance.prompt);
    let v = params.dims().vocab;
    let (mut logits, mut target, mut behavior) = (vec![0.0; v], vec![0.0; v], vec![0.0; v]);
    let mut r = empty_rollout(&instance.prompt);
    for (t, &tok) in tokens.iter().enumerate() {
        let tau = schedule.temperature_at(t, d);
        dec.logits_into(&state, &mut logits);
        log_softmax_into(&logits, 1.0, &mut target);
        log_softmax_into(&logits, tau, &mut behavior);
        r.tokens.push(tok);
        r.temperatures.push(tau);
        r.behavior_logprobs.push(behavior[tok]);
        r.target_logprobs.push(target[tok]);
        r.behavior_entropy.push(entropy_from_log_probs(&behavior));
        r.target_entropy.push(entropy_from_log_probs(&target));
        if t + 1 < tokens.len() {
            dec.step(&mut state, tok);
        }
    }
    finalize(instance, r)
}
