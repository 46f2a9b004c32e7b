//! Group-normalized advantages and clipped policy-gradient losses.
//!
//! All losses are returned in minimization form together with a
//! [`LossGraph`]: the loss's derivative with respect to each token's
//! `tau = 1` log-probability, evaluated at the current parameters. Because
//! every objective here is a function of those log-probabilities only, the
//! graph's linear surrogate has exactly the loss's gradient.
//!
//! Ratios use `r_t = pi_theta(y_t) / pi_old(y_t)` with both sides at
//! temperature 1; the stored target track supplies `pi_old`. Importance
//! weights that undo the tempered sampling are the optional TIS factor
//! `min(pi_old(.;1) / pi_old(.;tau), cap)`.
//!
//! The GRPO variant uses symmetric clipping, per-response length
//! normalization and the `k3` KL estimator
//! `pi_ref / pi - log(pi_ref / pi) - 1` against a frozen reference policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{LossGraph, PolicyError, PolicyParams, SequenceTerm};
use crate::rollout::{Rollout, RolloutGroup};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("loss needs at least one rollout")]
    EmptyBatch,
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "DAPO")]
    Dapo,
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "PG")]
    Pg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TisMode {
    Off,
    PerToken,
    PerSequence,
}

mod cap_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cap: &f64, s: S) -> Result<S::Ok, S::Error> {
        if cap.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*cap)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad tis_cap `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub tis_mode: TisMode,
    /// Upper bound on importance weights; `"inf"` in JSON disables truncation.
    #[serde(with = "cap_serde")]
    pub tis_cap: f64,
    /// KL penalty toward the reference policy (GRPO only).
    pub kl_coeff: f64,
    pub std_floor: f64,
    /// Drop groups whose rewards are all equal before computing the loss.
    pub dynamic_sampling: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Dapo,
            eps_low: 0.2,
            eps_high: 0.28,
            tis_mode: TisMode::PerToken,
            tis_cap: 2.0,
            kl_coeff: 0.04,
            std_floor: 1e-6,
            dynamic_sampling: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.to_string()));
        if !(self.eps_low >= 0.0 && self.eps_high >= 0.0) {
            return bad("clip bounds must be >= 0");
        }
        if !(self.tis_cap > 0.0) {
            return bad("tis_cap must be > 0");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be >= 0");
        }
        if !(self.std_floor >= 0.0) {
            return bad("std_floor must be >= 0");
        }
        Ok(())
    }
}

/// Diagnostics for one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Fraction of tokens whose clipped branch is the active minimum.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub mean_tis_weight: f64,
    /// Filled in by the caller once the gradient has been accumulated.
    pub grad_norm: f64,
    /// Mean per-token k3 estimate (GRPO), otherwise 0.
    pub kl: f64,
    pub tokens: usize,
}

/// `A_i = (R_i - mean) / max(std, std_floor)` with the population std.
/// A constant group gets exactly zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// `pi_theta(y_t) / pi_old(y_t)` at temperature 1.
pub fn token_ratio(rollout: &Rollout, params: &PolicyParams, t: usize) -> Result<f64, ObjectiveError> {
    let lp = params.token_logprobs(&rollout.prompt, &rollout.tokens[..=t], &vec![1.0; t + 1])?;
    Ok((lp[t] - rollout.target_logprobs[t]).exp())
}

/// Truncated importance weights, one per token. `Off` yields all ones.
pub fn tis_weights(rollout: &Rollout, mode: TisMode, cap: f64) -> Vec<f64> {
    let n = rollout.len();
    match mode {
        TisMode::Off => vec![1.0; n],
        TisMode::PerToken => rollout
            .target_logprobs
            .iter()
            .zip(&rollout.behavior_logprobs)
            .map(|(t, b)| (t - b).exp().min(cap))
            .collect(),
        TisMode::PerSequence => vec![sequence_tis_weight(rollout, cap); n],
    }
}

/// `min(pi_old(y; 1) / pi_old(y; schedule), cap)` for the whole response.
pub fn sequence_tis_weight(rollout: &Rollout, cap: f64) -> f64 {
    let log_ratio: f64 = rollout
        .target_logprobs
        .iter()
        .zip(&rollout.behavior_logprobs)
        .map(|(t, b)| t - b)
        .sum();
    log_ratio.exp().min(cap)
}

/// Keeps groups with `0 < correct < G`.
pub fn dynamic_sampling_filter(groups: &[RolloutGroup]) -> Vec<RolloutGroup> {
    groups
        .iter()
        .filter(|g| {
            let c = g.correct_count();
            c > 0 && c < g.rollouts.len()
        })
        .cloned()
        .collect()
}

/// Current-policy and (optionally) reference log-probs for every rollout.
struct Scored {
    current: Vec<Vec<f64>>,
    reference: Option<Vec<Vec<f64>>>,
}

fn score_groups(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_ref: Option<&PolicyParams>,
) -> Vec<Scored> {
    let dec = params.decoder();
    let dec_ref = params_ref.map(|p| p.decoder());
    groups
        .par_iter()
        .map(|g| {
            let score = |dec: &crate::policy::Decoder<'_>| {
                let state = dec.run(&g.instance.prompt);
                g.rollouts
                    .iter()
                    .map(|r| dec.response_logprobs(&state, &r.tokens, &vec![1.0; r.len()]))
                    .collect::<Vec<_>>()
            };
            Scored {
                current: score(&dec),
                reference: dec_ref.as_ref().map(score),
            }
        })
        .collect()
}

struct Stats {
    loss: f64,
    clipped: usize,
    tokens: usize,
    ratio_sum: f64,
    ratio_max: f64,
    weight_sum: f64,
    kl_sum: f64,
}

impl Stats {
    fn new() -> Self {
        Self {
            loss: 0.0,
            clipped: 0,
            tokens: 0,
            ratio_sum: 0.0,
            ratio_max: 0.0,
            weight_sum: 0.0,
            kl_sum: 0.0,
        }
    }

    fn report(&self) -> LossReport {
        let n = self.tokens.max(1) as f64;
        LossReport {
            loss: self.loss,
            clip_fraction: self.clipped as f64 / n,
            mean_ratio: self.ratio_sum / n,
            max_ratio: self.ratio_max,
            mean_tis_weight: self.weight_sum / n,
            grad_norm: 0.0,
            kl: self.kl_sum / n,
            tokens: self.tokens,
        }
    }
}

/// Clipped surrogate `min(r A, clip(r, lo, hi) A)`, its derivative with
/// respect to `log r`, and whether the clipped branch is active.
fn clipped_term(ratio: f64, adv: f64, lo: f64, hi: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(lo, hi) * adv;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, ratio * adv, false)
    }
}

enum Aggregation {
    /// `1 / sum |y|` over the whole batch.
    Tokens,
    /// `1 / (M |y_i|)`, M rollouts in the batch.
    PerResponse,
}

struct Shape {
    clip: Option<(f64, f64)>,
    aggregation: Aggregation,
    kl_coeff: f64,
}

fn surrogate_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_ref: Option<&PolicyParams>,
    cfg: &ObjectiveConfig,
    shape: Shape,
) -> Result<(LossReport, LossGraph), ObjectiveError> {
    let total_tokens: usize = groups.iter().flat_map(|g| &g.rollouts).map(|r| r.len()).sum();
    let total_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    if total_rollouts == 0 || total_tokens == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let scored = score_groups(groups, params, params_ref);
    let mut stats = Stats::new();
    let mut graph = LossGraph::default();
    for (g, s) in groups.iter().zip(&scored) {
        for (i, r) in g.rollouts.iter().enumerate() {
            let adv = g.advantages[i];
            let scale = match shape.aggregation {
                Aggregation::Tokens => 1.0 / total_tokens as f64,
                Aggregation::PerResponse => 1.0 / (total_rollouts * r.len().max(1)) as f64,
            };
            let weights = tis_weights(r, cfg.tis_mode, cfg.tis_cap);
            let mut coeffs = vec![0.0; r.len()];
            for t in 0..r.len() {
                let lp = s.current[i][t];
                let ratio = (lp - r.target_logprobs[t]).exp();
                let w = weights[t];
                let (obj, d_obj, active) = match shape.clip {
                    Some((lo, hi)) => clipped_term(ratio, adv, lo, hi),
                    None => (ratio * adv, ratio * adv, false),
                };
                stats.loss -= scale * w * obj;
                coeffs[t] -= scale * w * d_obj;
                if let Some(reference) = &s.reference {
                    let u = reference[i][t] - lp;
                    let k3 = u.exp() - u - 1.0;
                    stats.loss += scale * shape.kl_coeff * k3;
                    coeffs[t] += scale * shape.kl_coeff * (1.0 - u.exp());
                    stats.kl_sum += k3;
                }
                stats.clipped += active as usize;
                stats.tokens += 1;
                stats.ratio_sum += ratio;
                stats.ratio_max = stats.ratio_max.max(ratio);
                stats.weight_sum += w;
            }
            graph.push(SequenceTerm {
                prompt: r.prompt.clone(),
                response: r.tokens.clone(),
                temps: vec![1.0; r.len()],
                weights: coeffs,
            });
        }
    }
    Ok((stats.report(), graph))
}

/// Token-aggregated asymmetric-clip objective, negated.
pub fn dapo_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossReport, LossGraph), ObjectiveError> {
    let shape = Shape {
        clip: Some((1.0 - cfg.eps_low, 1.0 + cfg.eps_high)),
        aggregation: Aggregation::Tokens,
        kl_coeff: 0.0,
    };
    surrogate_loss(groups, params, None, cfg, shape)
}

/// Symmetric clip at `eps_low`, per-response normalization and a k3 KL penalty.
pub fn grpo_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossReport, LossGraph), ObjectiveError> {
    let shape = Shape {
        clip: Some((1.0 - cfg.eps_low, 1.0 + cfg.eps_low)),
        aggregation: Aggregation::PerResponse,
        kl_coeff: cfg.kl_coeff,
    };
    surrogate_loss(groups, params, Some(params_ref), cfg, shape)
}

/// `-E[w_TIS * r * A]`, token-aggregated like [`dapo_loss`].
pub fn pg_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossReport, LossGraph), ObjectiveError> {
    let shape = Shape {
        clip: None,
        aggregation: Aggregation::Tokens,
        kl_coeff: 0.0,
    };
    surrogate_loss(groups, params, None, cfg, shape)
}

/// Dispatches on `cfg.kind`. `params_ref` is only read by GRPO.
pub fn compute_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossReport, LossGraph), ObjectiveError> {
    match cfg.kind {
        ObjectiveKind::Dapo => dapo_loss(groups, params, cfg),
        ObjectiveKind::Grpo => grpo_loss(groups, params, params_ref, cfg),
        ObjectiveKind::Pg => pg_loss(groups, params, cfg),
    }
}
