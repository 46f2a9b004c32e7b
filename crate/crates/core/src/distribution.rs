//! Temperature-scaled categorical distributions over a token vocabulary.
//!
//! Besides sampling and entropy this module carries two diagnostics for
//! reasoning about temperature:
//!
//! * [`entropy_beta_derivative`]: with inverse temperature `beta = 1/tau`,
//!   `dH/dbeta = -beta * Var_{v ~ p(beta)}(h_v)`, which is never positive,
//!   so entropy never decreases as temperature rises.
//! * [`variance_inflation`]: the second moment `E_{y ~ pi_tau}[(pi_1(y) / pi_tau(y))^2]`
//!   of the importance weight that maps temperature-`tau` samples back to the
//!   `tau = 1` policy. It is 1 at `tau = 1` and grows on either side.
//!
//! `variance_inflation` takes normalized weights `w_i in [0, 1]` and applies
//! temperature as the power `w_i^(1/tau)`. That is the same map as dividing
//! logits by `tau` when `w_i = exp(h_i)`; [`variance_inflation_logits`] is the
//! logit-side view of the identical quantity.

use rand::Rng;
use thiserror::Error;

use crate::schedule::Schedule;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),
    #[error("inverse temperature must be finite and > 0, got {0}")]
    BadBeta(f64),
    #[error("logit {index} is not finite ({value})")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("weight {index} = {value} is outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("at least one weight must be positive")]
    AllWeightsZero,
    #[error("enumeration of {count} sequences exceeds the limit of {limit}")]
    EnumerationTooLarge { count: f64, limit: f64 },
}

/// Maximum number of leaf sequences [`enumerate_sequences`] will visit.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Unnormalized scores, one per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DistributionError> {
        if values.len() < 2 {
            return Err(DistributionError::VocabTooSmall(values.len()));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DistributionError::NonFiniteLogit { index, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    tau: f64,
}

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Builds a distribution from explicit probabilities (e.g. a degenerate one-hot).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Self {
            probs,
            log_probs,
            tau: 1.0,
        }
    }
}

/// Writes `log softmax(logits / tau)` into `out`. No validation: callers on
/// hot paths (rollouts, loss evaluation) have already checked their inputs.
pub fn log_softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let inv = 1.0 / tau;
    let mut max = f64::NEG_INFINITY;
    for (o, &h) in out.iter_mut().zip(logits) {
        *o = h * inv;
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o -= max;
        sum += o.exp();
    }
    let log_z = sum.ln();
    for o in out.iter_mut() {
        *o -= log_z;
    }
}

pub fn softmax_at(h: &LogitVector, tau: f64) -> Result<TokenDistribution, DistributionError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DistributionError::BadTemperature(tau));
    }
    let mut log_probs = vec![0.0; h.vocab_size()];
    log_softmax_into(h.values(), tau, &mut log_probs);
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(TokenDistribution {
        probs,
        log_probs,
        tau,
    })
}

/// Inverse-CDF lookup over the fixed vocabulary order for a uniform draw `u in [0, 1)`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = v;
            cum += p;
            if u < cum {
                return v;
            }
        }
    }
    // rounding left the cumulative sum a hair below 1
    last_positive
}

/// Draws one token. Consumes exactly one `f64` from `rng`.
pub fn sample<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    inverse_cdf(&dist.probs, u)
}

/// Entropy in nats from log-probabilities, with `0 ln 0 = 0`.
pub fn entropy_from_log_probs(log_probs: &[f64]) -> f64 {
    let h: f64 = log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    entropy_from_log_probs(&dist.log_probs)
}

/// `dH/dbeta = -beta * Var_{v ~ softmax(beta h)}(h_v)`.
pub fn entropy_beta_derivative(h: &LogitVector, beta: f64) -> Result<f64, DistributionError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DistributionError::BadBeta(beta));
    }
    let dist = softmax_at(h, 1.0 / beta)?;
    let mean: f64 = dist.probs.iter().zip(h.values()).map(|(p, x)| p * x).sum();
    let var: f64 = dist
        .probs
        .iter()
        .zip(h.values())
        .map(|(p, x)| p * (x - mean) * (x - mean))
        .sum();
    Ok(-beta * var)
}

/// `(sum_i w_i^(2 - 1/tau) * sum_i w_i^(1/tau)) / (sum_i w_i)^2`.
///
/// Zero weights carry zero probability at every temperature and are skipped.
pub fn variance_inflation(weights: &[f64], tau: f64) -> Result<f64, DistributionError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DistributionError::BadTemperature(tau));
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(0.0..=1.0).contains(*w))
    {
        return Err(DistributionError::WeightOutOfRange { index, value });
    }
    let positive: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
    if positive.is_empty() {
        return Err(DistributionError::AllWeightsZero);
    }
    let x = 1.0 / tau;
    let total: f64 = positive.iter().sum();
    let a: f64 = positive.iter().map(|w| w.powf(2.0 - x)).sum();
    let b: f64 = positive.iter().map(|w| w.powf(x)).sum();
    Ok(a * b / (total * total))
}

/// `sum_v pi_1(v)^2 / pi_tau(v)` computed from logits.
pub fn variance_inflation_logits(h: &LogitVector, tau: f64) -> Result<f64, DistributionError> {
    let target = softmax_at(h, 1.0)?;
    let behavior = softmax_at(h, tau)?;
    Ok(target
        .log_probs
        .iter()
        .zip(&behavior.log_probs)
        .map(|(&t, &b)| (2.0 * t - b).exp())
        .sum())
}

/// An autoregressive model that can score the next token given a context.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, context: &[usize]) -> Vec<f64>;
}

/// One complete response with its log-probability under the `tau = 1` policy
/// and under the behavior schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<usize>,
    pub target_logprob: f64,
    pub behavior_logprob: f64,
}

/// Enumerates every response reachable under `max_len`: sequences that end in
/// `eos` at length `<= max_len`, plus length-`max_len` sequences without it.
/// Together they partition the response space, so their probabilities sum to 1
/// under any schedule.
pub fn enumerate_sequences<M: NextTokenModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    eos: usize,
    schedule: &Schedule,
    d: f64,
    max_len: usize,
) -> Result<Vec<ScoredSequence>, DistributionError> {
    let vocab = model.vocab_size();
    let count = (vocab as f64).powi(max_len as i32);
    if count > ENUMERATION_LIMIT {
        return Err(DistributionError::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::new();
    let mut context = prompt.to_vec();
    let mut response = Vec::new();
    let mut scratch = vec![0.0; vocab];
    enumerate_rec(
        model,
        eos,
        schedule,
        d,
        max_len,
        &mut context,
        &mut response,
        0.0,
        0.0,
        &mut scratch,
        &mut out,
    );
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rec<M: NextTokenModel + ?Sized>(
    model: &M,
    eos: usize,
    schedule: &Schedule,
    d: f64,
    max_len: usize,
    context: &mut Vec<usize>,
    response: &mut Vec<usize>,
    target: f64,
    behavior: f64,
    scratch: &mut [f64],
    out: &mut Vec<ScoredSequence>,
) {
    let t = response.len();
    if t == max_len || response.last() == Some(&eos) {
        out.push(ScoredSequence {
            tokens: response.clone(),
            target_logprob: target,
            behavior_logprob: behavior,
        });
        return;
    }
    let logits = model.next_logits(context);
    let tau = schedule.temperature_at(t, d);
    let mut target_lp = vec![0.0; logits.len()];
    log_softmax_into(&logits, 1.0, &mut target_lp);
    log_softmax_into(&logits, tau, scratch);
    let behavior_lp = scratch.to_vec();
    for v in 0..logits.len() {
        context.push(v);
        response.push(v);
        enumerate_rec(
            model,
            eos,
            schedule,
            d,
            max_len,
            context,
            response,
            target + target_lp[v],
            behavior + behavior_lp[v],
            scratch,
            out,
        );
        response.pop();
        context.pop();
    }
}

/// Exact `sum_y pi(y|x;1)^2 / pi(y|x;schedule)` over all responses up to `max_len`.
pub fn sequence_variance_inflation<M: NextTokenModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    eos: usize,
    schedule: &Schedule,
    d: f64,
    max_len: usize,
) -> Result<f64, DistributionError> {
    let seqs = enumerate_sequences(model, prompt, eos, schedule, d, max_len)?;
    Ok(seqs
        .iter()
        .map(|s| (2.0 * s.target_logprob - s.behavior_logprob).exp())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let d = softmax_at(&lv(&[0.0, 0.0, 0.0]), 7.0).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let d = softmax_at(&lv(&[0.0, 2f64.ln()]), 1.0).unwrap();
        assert!((d.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
        let d = softmax_at(&lv(&[0.0, 2f64.ln()]), 2.0).unwrap();
        let r2 = 2f64.sqrt();
        assert!((d.probs()[0] - 1.0 / (1.0 + r2)).abs() < 1e-15);
        assert!((d.probs()[1] - r2 / (1.0 + r2)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert_eq!(
            softmax_at(&lv(&[0.0, 1.0]), 0.0),
            Err(DistributionError::BadTemperature(0.0))
        );
        assert!(softmax_at(&lv(&[0.0, 1.0]), -1.0).is_err());
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::INFINITY]),
            Err(DistributionError::NonFiniteLogit { index: 1, .. })
        ));
        assert!(matches!(
            LogitVector::new(vec![0.0]),
            Err(DistributionError::VocabTooSmall(1))
        ));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let d = softmax_at(&lv(&[1000.0, 999.0, -1000.0]), 0.01).unwrap();
        assert!(d.probs().iter().all(|p| p.is_finite()));
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(token_entropy(&d) >= 0.0);
    }

    #[test]
    fn sample_degenerate_and_deterministic() {
        let one_hot = TokenDistribution::from_probs(vec![1.0, 0.0]);
        let mut r = rng::stream(0, &[]);
        for _ in 0..100 {
            assert_eq!(sample(&one_hot, &mut r), 0);
        }
        let half = TokenDistribution::from_probs(vec![0.5, 0.5]);
        let a: Vec<usize> = {
            let mut r = rng::stream(42, &[1, 2]);
            (0..32).map(|_| sample(&half, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = rng::stream(42, &[1, 2]);
            (0..32).map(|_| sample(&half, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_frequencies_within_three_sigma() {
        let dist = softmax_at(&lv(&[0.3, -1.0, 1.2, 0.0]), 1.0).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut r = rng::stream(9, &[]);
        for _ in 0..n {
            counts[sample(&dist, &mut r)] += 1;
        }
        for (c, p) in counts.iter().zip(dist.probs()) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn inverse_cdf_skips_zero_mass() {
        assert_eq!(inverse_cdf(&[0.0, 1.0, 0.0], 0.0), 1);
        assert_eq!(inverse_cdf(&[0.25, 0.75, 0.0], 0.999_999_999_999), 1);
    }

    #[test]
    fn entropy_examples() {
        let u = softmax_at(&lv(&[0.0; 4]), 1.0).unwrap();
        assert!((token_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(token_entropy(&TokenDistribution::from_probs(vec![0.0, 1.0, 0.0])), 0.0);
        let d = TokenDistribution::from_probs(vec![1.0 / 3.0, 2.0 / 3.0]);
        let expected = -(1.0f64 / 3.0) * (1.0f64 / 3.0).ln() - (2.0f64 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((token_entropy(&d) - expected).abs() < 1e-15);
        assert!((expected - 0.6365).abs() < 1e-4);
    }

    #[test]
    fn beta_derivative_examples() {
        assert_eq!(entropy_beta_derivative(&lv(&[2.0, 2.0, 2.0]), 3.0).unwrap(), 0.0);
        let v = entropy_beta_derivative(&lv(&[0.0, 1.0]), 1.0).unwrap();
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((v + (p1 - p1 * p1)).abs() < 1e-15);
        assert!((v + 0.19661).abs() < 1e-5);
        assert!(entropy_beta_derivative(&lv(&[0.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn variance_inflation_examples() {
        assert!((variance_inflation(&[0.3, 0.3, 0.3], 2.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((variance_inflation(&[0.9, 0.2, 0.05], 1.0).unwrap() - 1.0).abs() < 1e-15);
        let v = variance_inflation(&[1.0, 0.5], 2.0).unwrap();
        let expected = (1.0 + 0.5f64.powf(1.5)) * (1.0 + 0.5f64.sqrt()) / 2.25;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 1.0270).abs() < 1e-4);
        // brute force over the two-token distribution
        let p1 = [1.0 / 1.5, 0.5 / 1.5];
        let zt = 1.0 + 0.5f64.sqrt();
        let pt = [1.0 / zt, 0.5f64.sqrt() / zt];
        let brute: f64 = (0..2).map(|i| p1[i] * p1[i] / pt[i]).sum();
        assert!((v - brute).abs() < 1e-14);
    }

    #[test]
    fn variance_inflation_rejects_out_of_range() {
        assert!(matches!(
            variance_inflation(&[0.5, 1.5], 2.0),
            Err(DistributionError::WeightOutOfRange { index: 1, .. })
        ));
        assert_eq!(
            variance_inflation(&[0.0, 0.0], 2.0),
            Err(DistributionError::AllWeightsZero)
        );
    }

    #[test]
    fn weight_and_logit_views_agree() {
        let w = [0.9, 0.4, 0.05, 0.6];
        let h = lv(&w.map(f64::ln));
        for tau in [0.3, 0.7, 1.0, 1.8, 4.0] {
            let a = variance_inflation(&w, tau).unwrap();
            let b = variance_inflation_logits(&h, tau).unwrap();
            assert!((a - b).abs() < 1e-12 * a, "tau {tau}: {a} vs {b}");
        }
    }

    struct Table;

    impl NextTokenModel for Table {
        fn vocab_size(&self) -> usize {
            3
        }
        fn next_logits(&self, context: &[usize]) -> Vec<f64> {
            let s: usize = context.iter().sum();
            vec![0.3 * s as f64, -0.5, 0.2 * context.len() as f64]
        }
    }

    #[test]
    fn enumeration_partitions_probability() {
        let sched = Schedule::fixed(1.7).unwrap();
        let seqs = enumerate_sequences(&Table, &[0], 2, &sched, 1.0, 3).unwrap();
        // EOS=2 at position 0: 1, at 1: 2, at 2: 4, no-EOS length 3: 8
        assert_eq!(seqs.len(), 1 + 2 + 4 + 8);
        let t: f64 = seqs.iter().map(|s| s.target_logprob.exp()).sum();
        let b: f64 = seqs.iter().map(|s| s.behavior_logprob.exp()).sum();
        assert!((t - 1.0).abs() < 1e-12);
        assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_refuses_huge_spaces() {
        let sched = Schedule::fixed(1.0).unwrap();
        assert!(matches!(
            enumerate_sequences(&Table, &[0], 2, &sched, 1.0, 13),
            Err(DistributionError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn sequence_inflation_is_one_on_policy() {
        let sched = Schedule::fixed(1.0).unwrap();
        let v = sequence_variance_inflation(&Table, &[1], 2, &sched, 1.0, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..24).prop_flat_map(|n| proptest::collection::vec(-6.0f64..6.0, n))
    }

    proptest! {
        #[test]
        fn softmax_matches_prescaled_logits(h in logits_strategy(), tau in 0.05f64..10.0) {
            let a = softmax_at(&lv(&h), tau).unwrap();
            let scaled: Vec<f64> = h.iter().map(|x| x / tau).collect();
            let b = softmax_at(&lv(&scaled), 1.0).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounded_by_log_vocab(h in logits_strategy(), tau in 0.05f64..10.0) {
            let d = softmax_at(&lv(&h), tau).unwrap();
            let e = token_entropy(&d);
            prop_assert!(e >= 0.0 && e <= (h.len() as f64).ln() + 1e-12);
        }
    }
}
