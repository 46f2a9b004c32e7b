use rayon::prelude::*;

use super::{dot, Decoder, Dims, PolicyError, PolicyParams};
use crate::distribution::log_softmax_into;

/// One response whose per-token log-probabilities enter the loss linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTerm {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub temps: Vec<f64>,
    /// `dLoss / d log pi(response[t])`, held constant during backprop.
    pub weights: Vec<f64>,
}

/// `loss = sum over terms, tokens of weight * log pi(token | prefix; tau)`,
/// with weights treated as constants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGraph {
    pub terms: Vec<SequenceTerm>,
}

impl LossGraph {
    pub fn push(&mut self, term: SequenceTerm) {
        self.terms.push(term);
    }

    /// Evaluates the linear surrogate `sum w_t log pi_t` at `params`.
    pub fn surrogate(&self, params: &PolicyParams) -> f64 {
        let dec = params.decoder();
        self.terms
            .iter()
            .map(|term| {
                let state = dec.run(&term.prompt);
                dec.response_logprobs(&state, &term.response, &term.temps)
                    .iter()
                    .zip(&term.weights)
                    .map(|(lp, w)| lp * w)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Gradient buffers with the same shapes as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub grads: PolicyParams,
    pub samples: usize,
}

impl GradAccumulator {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            grads: PolicyParams::zeros(dims),
            samples: 0,
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        for ((_, _, dst), (_, _, src)) in self.grads.tensors_mut().into_iter().zip(other.grads.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self.samples += other.samples;
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, t) in self.grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.grads
            .tensors()
            .into_iter()
            .find(|(_, _, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _, _)| name)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.flatten()
    }
}

/// Terms per parallel work item. Fixed so the summation order never depends
/// on the worker count.
const CHUNK: usize = 8;

/// Exact gradient of `graph` with respect to every parameter tensor.
pub fn backward(params: &PolicyParams, graph: &LossGraph) -> Result<GradAccumulator, PolicyError> {
    let vocab = params.dims().vocab;
    for term in &graph.terms {
        if term.prompt.is_empty() {
            return Err(PolicyError::EmptyPrefix);
        }
        if term.response.len() != term.temps.len() || term.response.len() != term.weights.len() {
            return Err(PolicyError::LengthMismatch {
                tokens: term.response.len(),
                temps: term.temps.len().min(term.weights.len()),
            });
        }
        if let Some(&token) = term.prompt.iter().chain(&term.response).find(|&&t| t >= vocab) {
            return Err(PolicyError::TokenOutOfRange { token, vocab });
        }
    }
    let dec = params.decoder();
    let partials: Vec<GradAccumulator> = graph
        .terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut work = Workspace::new(params.dims());
            for term in chunk {
                work.accumulate(&dec, term);
            }
            work.finish(params)
        })
        .collect();
    let mut total = GradAccumulator::zeros(params.dims());
    for p in &partials {
        total.merge(p);
    }
    Ok(total)
}

struct Workspace {
    acc: GradAccumulator,
    /// vocab x hidden gradient w.r.t. the cached input projection.
    d_proj: Vec<f64>,
}

impl Workspace {
    fn new(dims: Dims) -> Self {
        Self {
            acc: GradAccumulator::zeros(dims),
            d_proj: vec![0.0; dims.vocab * dims.hidden],
        }
    }

    fn accumulate(&mut self, dec: &Decoder<'_>, term: &SequenceTerm) {
        if term.weights.iter().all(|&w| w == 0.0) {
            self.acc.samples += 1;
            return;
        }
        let params = dec.params();
        let Dims { vocab, hidden: h, .. } = params.dims();
        let p_len = term.prompt.len();
        let t_len = term.response.len();
        let inputs: Vec<usize> = term
            .prompt
            .iter()
            .chain(&term.response[..t_len.saturating_sub(1)])
            .copied()
            .collect();
        let steps = inputs.len();

        // states[k] is the state after consuming k input tokens
        let mut states = vec![0.0; (steps + 1) * h];
        for (k, &tok) in inputs.iter().enumerate() {
            let (prev, next) = states.split_at_mut((k + 1) * h);
            let prev = &prev[k * h..];
            let next = &mut next[..h];
            for j in 0..h {
                next[j] = (dec_proj(dec, tok, j, h) + dot(&params.w_rec[j * h..(j + 1) * h], prev)).tanh();
            }
        }

        let g = &mut self.acc.grads;
        let mut d_states = vec![0.0; (steps + 1) * h];
        let mut logits = vec![0.0; vocab];
        let mut lp = vec![0.0; vocab];
        for t in 0..t_len {
            let w = term.weights[t];
            if w == 0.0 {
                continue;
            }
            let k = p_len + t;
            let s = &states[k * h..(k + 1) * h];
            dec.logits_into(s, &mut logits);
            let tau = term.temps[t];
            log_softmax_into(&logits, tau, &mut lp);
            let ds = &mut d_states[k * h..(k + 1) * h];
            for v in 0..vocab {
                let onehot = if v == term.response[t] { 1.0 } else { 0.0 };
                let dz = w * (onehot - lp[v].exp()) / tau;
                if dz == 0.0 {
                    continue;
                }
                g.b_out[v] += dz;
                let w_row = &params.w_out[v * h..(v + 1) * h];
                let g_row = &mut g.w_out[v * h..(v + 1) * h];
                for j in 0..h {
                    g_row[j] += dz * s[j];
                    ds[j] += dz * w_row[j];
                }
            }
        }

        let mut da = vec![0.0; h];
        for k in (1..=steps).rev() {
            let (before, here) = d_states.split_at_mut(k * h);
            let ds = &here[..h];
            let s = &states[k * h..(k + 1) * h];
            let mut any = false;
            for j in 0..h {
                da[j] = ds[j] * (1.0 - s[j] * s[j]);
                any |= da[j] != 0.0;
            }
            if !any {
                continue;
            }
            let tok = inputs[k - 1];
            let dp = &mut self.d_proj[tok * h..(tok + 1) * h];
            for j in 0..h {
                dp[j] += da[j];
            }
            let s_prev = &states[(k - 1) * h..k * h];
            let ds_prev = &mut before[(k - 1) * h..];
            for j in 0..h {
                let a = da[j];
                if a == 0.0 {
                    continue;
                }
                let w_row = &params.w_rec[j * h..(j + 1) * h];
                let g_row = &mut g.w_rec[j * h..(j + 1) * h];
                for i in 0..h {
                    g_row[i] += a * s_prev[i];
                    ds_prev[i] += a * w_row[i];
                }
            }
        }
        self.acc.samples += 1;
    }

    fn finish(mut self, params: &PolicyParams) -> GradAccumulator {
        let Dims {
            vocab,
            embed: e,
            hidden: h,
        } = params.dims();
        let g = &mut self.acc.grads;
        for v in 0..vocab {
            let dp = &self.d_proj[v * h..(v + 1) * h];
            if dp.iter().all(|&x| x == 0.0) {
                continue;
            }
            let emb = &params.embed[v * e..(v + 1) * e];
            for j in 0..h {
                let a = dp[j];
                g.bias[j] += a;
                let w_row = &params.w_in[j * e..(j + 1) * e];
                let gw_row = &mut g.w_in[j * e..(j + 1) * e];
                let ge_row = &mut g.embed[v * e..(v + 1) * e];
                for i in 0..e {
                    gw_row[i] += a * emb[i];
                    ge_row[i] += a * w_row[i];
                }
            }
        }
        self.acc
    }
}

#[inline]
fn dec_proj(dec: &Decoder<'_>, tok: usize, j: usize, h: usize) -> f64 {
    dec.proj[tok * h + j]
}
