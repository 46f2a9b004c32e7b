//! A small recurrent policy with hand-written backpropagation.
//!
//! ```text
//! state_0 = 0
//! state_k = tanh(W_rec state_{k-1} + W_in embed(token_k) + bias)
//! logits  = W_out state_last + b_out
//! ```
//!
//! Everything is `f64` so finite-difference checks stay tight. Read-only
//! evaluation goes through [`Decoder`], which caches the per-token input
//! projection `W_in embed(v) + bias`.

mod adam;
mod backward;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{log_softmax_into, NextTokenModel};
use crate::rng;

pub use adam::Adam;
pub use backward::{backward, LossGraph, SequenceTerm};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("prefix must contain at least one token")]
    EmptyPrefix,
    #[error("{tokens} response tokens but {temps} temperatures")]
    LengthMismatch { tokens: usize, temps: usize },
    #[error("non-finite gradient in `{0}`; optimizer step skipped")]
    NonFiniteGradient(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn new(vocab: usize, embed: usize, hidden: usize) -> Self {
        Self {
            vocab,
            embed,
            hidden,
        }
    }
}

pub const TENSOR_NAMES: [&str; 6] = ["embed", "w_in", "w_rec", "bias", "w_out", "b_out"];

/// Policy weights. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: Dims,
    /// vocab x embed
    pub embed: Vec<f64>,
    /// hidden x embed
    pub w_in: Vec<f64>,
    /// hidden x hidden
    pub w_rec: Vec<f64>,
    /// hidden
    pub bias: Vec<f64>,
    /// vocab x hidden
    pub w_out: Vec<f64>,
    /// vocab
    pub b_out: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            vocab: v,
            embed: e,
            hidden: h,
        } = dims;
        Self {
            dims,
            embed: vec![0.0; v * e],
            w_in: vec![0.0; h * e],
            w_rec: vec![0.0; h * h],
            bias: vec![0.0; h],
            w_out: vec![0.0; v * h],
            b_out: vec![0.0; v],
        }
    }

    /// Uniform(-0.08, 0.08) initialization drawn from the experiment seed.
    pub fn init(dims: Dims, seed: u64) -> Self {
        Self::init_uniform(dims, seed, 0.08)
    }

    pub fn init_uniform(dims: Dims, seed: u64, scale: f64) -> Self {
        Self::init_scaled(dims, seed, scale, scale)
    }

    /// Uniform init with a separate half-width for the output layer. A small
    /// `output_scale` gives rich hidden features but a near-uniform policy.
    pub fn init_scaled(dims: Dims, seed: u64, scale: f64, output_scale: f64) -> Self {
        let mut p = Self::zeros(dims);
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        for (name, _, data) in p.tensors_mut() {
            let s = if name == "w_out" || name == "b_out" { output_scale } else { scale };
            for x in data.iter_mut() {
                let u: f64 = r.random();
                *x = s * (2.0 * u - 1.0);
            }
        }
        p
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn shapes(dims: Dims) -> [(&'static str, Vec<usize>); 6] {
        let Dims {
            vocab: v,
            embed: e,
            hidden: h,
        } = dims;
        [
            ("embed", vec![v, e]),
            ("w_in", vec![h, e]),
            ("w_rec", vec![h, h]),
            ("bias", vec![h]),
            ("w_out", vec![v, h]),
            ("b_out", vec![v]),
        ]
    }

    pub fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 6] {
        let [a, b, c, d, e, f] = Self::shapes(self.dims);
        [
            (a.0, a.1, &self.embed),
            (b.0, b.1, &self.w_in),
            (c.0, c.1, &self.w_rec),
            (d.0, d.1, &self.bias),
            (e.0, e.1, &self.w_out),
            (f.0, f.1, &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, Vec<usize>, &mut Vec<f64>); 6] {
        let [a, b, c, d, e, f] = Self::shapes(self.dims);
        [
            (a.0, a.1, &mut self.embed),
            (b.0, b.1, &mut self.w_in),
            (c.0, c.1, &mut self.w_rec),
            (d.0, d.1, &mut self.bias),
            (e.0, e.1, &mut self.w_out),
            (f.0, f.1, &mut self.b_out),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Flat copy of all weights in [`TENSOR_NAMES`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = 0;
        for (_, _, data) in self.tensors_mut() {
            if index < offset + data.len() {
                data[index - offset] = value;
                return;
            }
            offset += data.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(self)
    }

    /// Logits for the next token after `prefix`.
    pub fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>, PolicyError> {
        if prefix.is_empty() {
            return Err(PolicyError::EmptyPrefix);
        }
        self.check_tokens(prefix)?;
        let dec = self.decoder();
        let state = dec.run(prefix);
        Ok(dec.logits(&state))
    }

    /// `sum_t log softmax(logits([x, y_<t]) / tau_t)[y_t]`.
    pub fn sequence_logprob(
        &self,
        prompt: &[usize],
        response: &[usize],
        temps: &[f64],
    ) -> Result<f64, PolicyError> {
        Ok(self.token_logprobs(prompt, response, temps)?.iter().sum())
    }

    pub fn token_logprobs(
        &self,
        prompt: &[usize],
        response: &[usize],
        temps: &[f64],
    ) -> Result<Vec<f64>, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::EmptyPrefix);
        }
        if response.len() != temps.len() {
            return Err(PolicyError::LengthMismatch {
                tokens: response.len(),
                temps: temps.len(),
            });
        }
        self.check_tokens(prompt)?;
        self.check_tokens(response)?;
        let dec = self.decoder();
        let state = dec.run(prompt);
        Ok(dec.response_logprobs(&state, response, temps))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t >= self.dims.vocab) {
            Some(&token) => Err(PolicyError::TokenOutOfRange {
                token,
                vocab: self.dims.vocab,
            }),
            None => Ok(()),
        }
    }
}

impl NextTokenModel for PolicyParams {
    fn vocab_size(&self) -> usize {
        self.dims.vocab
    }

    fn next_logits(&self, context: &[usize]) -> Vec<f64> {
        self.logits(context).expect("valid context")
    }
}

/// Read-only evaluation helper with the input projection precomputed.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    /// vocab x hidden: `W_in embed(v) + bias` for every token `v`.
    proj: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        let Dims {
            vocab: v,
            embed: e,
            hidden: h,
        } = params.dims;
        let mut proj = vec![0.0; v * h];
        for tok in 0..v {
            let emb = &params.embed[tok * e..(tok + 1) * e];
            let row = &mut proj[tok * h..(tok + 1) * h];
            for (j, out) in row.iter_mut().enumerate() {
                let w = &params.w_in[j * e..(j + 1) * e];
                *out = params.bias[j] + dot(w, emb);
            }
        }
        Self { params, proj }
    }

    pub fn params(&self) -> &PolicyParams {
        self.params
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.params.dims.hidden]
    }

    /// Advances `state` by one input token, in place.
    pub fn step(&self, state: &mut Vec<f64>, token: usize) {
        let h = self.params.dims.hidden;
        let mut next = self.proj[token * h..(token + 1) * h].to_vec();
        for (j, out) in next.iter_mut().enumerate() {
            *out = (*out + dot(&self.params.w_rec[j * h..(j + 1) * h], state)).tanh();
        }
        *state = next;
    }

    pub fn run(&self, tokens: &[usize]) -> Vec<f64> {
        let mut state = self.initial_state();
        for &t in tokens {
            self.step(&mut state, t);
        }
        state
    }

    pub fn logits_into(&self, state: &[f64], out: &mut [f64]) {
        let h = self.params.dims.hidden;
        for (v, o) in out.iter_mut().enumerate() {
            *o = self.params.b_out[v] + dot(&self.params.w_out[v * h..(v + 1) * h], state);
        }
    }

    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params.dims.vocab];
        self.logits_into(state, &mut out);
        out
    }

    /// Per-token log-probabilities of `response` continuing from `state`.
    pub fn response_logprobs(&self, state: &[f64], response: &[usize], temps: &[f64]) -> Vec<f64> {
        let mut state = state.to_vec();
        let mut logits = vec![0.0; self.params.dims.vocab];
        let mut lp = vec![0.0; self.params.dims.vocab];
        let mut out = Vec::with_capacity(response.len());
        for (t, (&tok, &tau)) in response.iter().zip(temps).enumerate() {
            self.logits_into(&state, &mut logits);
            log_softmax_into(&logits, tau, &mut lp);
            out.push(lp[tok]);
            if t + 1 < response.len() {
                self.step(&mut state, tok);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
