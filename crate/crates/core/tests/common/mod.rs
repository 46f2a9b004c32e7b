#![allow(dead_code)]

use std::path::PathBuf;

use ead_core::distribution::enumerate_sequences;
use ead_core::objectives::{
    compute_loss, normalize_advantages, sequence_tis_weight, ObjectiveConfig, ObjectiveKind, TisMode,
};
use ead_core::policy::{backward, Dims, PolicyParams};
use ead_core::rollout::{rescore, RolloutGroup};
use ead_core::runner::ExperimentConfig;
use ead_core::schedule::{AnnealSchedule, Schedule};
use ead_core::tasks::{vocab, TaskInstance, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("bundled config loads")
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn ead(tau_max: f64, tau_min: f64, d0: f64, c: usize) -> Schedule {
    Schedule::Annealed(AnnealSchedule::new(tau_max, tau_min, d0, c).unwrap())
}

fn perturbed(p: &PolicyParams, rng: &mut ChaCha8Rng, size: f64) -> PolicyParams {
    let mut q = p.clone();
    for (_, _, t) in q.tensors_mut() {
        for x in t.iter_mut() {
            *x += size * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    q
}

/// Random groups over a 5-token vocabulary, with rollouts scored by `old`
/// under a hot-then-cold schedule so every track differs.
fn random_groups(old: &PolicyParams, rng: &mut ChaCha8Rng) -> Vec<RolloutGroup> {
    let vocab = old.dims().vocab;
    let schedule = ead(1.6, 0.4, 2.0, 0);
    let d = schedule.decay_rate(0);
    (0..2)
        .map(|_| {
            let plen = rng.random_range(1..=3);
            let instance = TaskInstance {
                prompt: (0..plen).map(|_| rng.random_range(0..vocab)).collect(),
                spec: TaskSpec::AnyPair { n: 3 },
            };
            let mut rollouts: Vec<_> = (0..3)
                .map(|_| {
                    let len = rng.random_range(1..=4);
                    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                    rescore(old, &instance, &tokens, &schedule, d)
                })
                .collect();
            // mixed rewards so advantages are non-zero
            for (i, r) in rollouts.iter_mut().enumerate() {
                r.reward = if i == 0 { 1.0 } else if i == 1 { 0.0 } else { rng.random_range(0..2) as f64 };
            }
            let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
            RolloutGroup {
                instance,
                advantages: normalize_advantages(&rewards, 1e-6),
                rollouts,
            }
        })
        .collect()
}

/// Relative error between the analytic gradient of `kind` and central
/// differences, as `|g - g_fd| / |g_fd|` on the full parameter vector.
pub fn gradient_relative_error(kind: ObjectiveKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(5, 4, 6);
    let old = PolicyParams::init_uniform(dims, seed, 0.6);
    let groups = random_groups(&old, &mut rng);
    let params = perturbed(&old, &mut rng, 0.15);
    let reference = perturbed(&old, &mut rng, 0.15);
    let cfg = ObjectiveConfig {
        kind,
        tis_mode: TisMode::PerToken,
        ..Default::default()
    };
    let (_, graph) = compute_loss(&groups, &params, &reference, &cfg).unwrap();
    let analytic = backward(&params, &graph).unwrap().flatten();
    let loss_at = |p: &PolicyParams| compute_loss(&groups, p, &reference, &cfg).unwrap().0.loss;
    let eps = 1e-5;
    let base = params.flatten();
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = params.clone();
            p.set_flat(i, base[i] + eps);
            let up = loss_at(&p);
            p.set_flat(i, base[i] - eps);
            let down = loss_at(&p);
            (up - down) / (2.0 * eps)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(scale > 1e-8, "degenerate gradient for seed {seed}");
    diff / scale
}

/// A 16-token policy with stopping, digits and `favored` tokens made likely
/// enough that rewards carry mass.
pub fn biased_policy(seed: u64, favored: &[usize]) -> PolicyParams {
    let mut params = PolicyParams::init_uniform(Dims::new(vocab::SIZE, 6, 8), seed, 0.4);
    for (name, _, t) in params.tensors_mut() {
        if name == "b_out" {
            t[vocab::EOS] += 1.5;
            for x in t.iter_mut().take(10) {
                *x += 0.5;
            }
            for &f in favored {
                t[f] += 2.0;
            }
        }
    }
    params
}

/// Exact expectations over every response up to `max_len` for a 16-token
/// policy. Returns `(E_behavior[w R], E_target[R], capped)` where `capped`
/// holds `E_behavior[min(w, cap) R]` for each entry of `caps`.
pub fn tis_expectations(
    instance: &TaskInstance,
    schedule: &Schedule,
    max_len: usize,
    seed: u64,
    favored: &[usize],
    caps: &[f64],
) -> (f64, f64, Vec<f64>) {
    let params = biased_policy(seed, favored);
    let d = schedule.decay_rate(0);
    let seqs = enumerate_sequences(&params, &instance.prompt, vocab::EOS, schedule, d, max_len).unwrap();
    let (mut behavior, mut target) = (0.0, 0.0);
    let mut capped = vec![0.0; caps.len()];
    for s in &seqs {
        let r = rescore(&params, instance, &s.tokens, schedule, d);
        let pb = s.behavior_logprob.exp();
        behavior += pb * sequence_tis_weight(&r, f64::INFINITY) * r.reward;
        target += s.target_logprob.exp() * r.reward;
        for (acc, &cap) in capped.iter_mut().zip(caps) {
            *acc += pb * sequence_tis_weight(&r, cap) * r.reward;
        }
    }
    (behavior, target, capped)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// `(pass, worst)` by listing every size-`k` subset of `n` samples whose
/// first `c` are correct.
pub fn subset_estimates(n: usize, c: usize, k: usize) -> (f64, f64) {
    let all = subsets(n, k);
    let any = all.iter().filter(|s| s.iter().any(|&i| i < c)).count();
    let every = all.iter().filter(|s| s.iter().all(|&i| i < c)).count();
    (any as f64 / all.len() as f64, every as f64 / all.len() as f64)
}
