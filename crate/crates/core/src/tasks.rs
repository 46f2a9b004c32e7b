//! Synthetic prompts with rule-based binary verifiers.
//!
//! Token layout (16 ids): digits `0..=9`, then `BOS`, `EOS`, `SEP` and one
//! tag token per task kind. Prompts look like `BOS TAG <payload> SEP`; a
//! response is correct only if it spells the expected answer and then stops
//! with a single `EOS`.
//!
//! | kind       | payload            | correct responses                       |
//! |------------|--------------------|-----------------------------------------|
//! | `SUM_MOD`  | `a b`              | `(a + b) % 10, EOS`                     |
//! | `REVERSE`  | 3..=6 digits       | the digits reversed, `EOS`              |
//! | `ANY_PAIR` | `n / 10, n % 10`   | any `u v EOS` with `u + v = n`, digits  |

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod vocab {
    pub const BOS: usize = 10;
    pub const EOS: usize = 11;
    pub const SEP: usize = 12;
    pub const TAG_SUM_MOD: usize = 13;
    pub const TAG_REVERSE: usize = 14;
    pub const TAG_ANY_PAIR: usize = 15;
    pub const SIZE: usize = 16;

    pub fn name(token: usize) -> String {
        match token {
            0..=9 => token.to_string(),
            BOS => "BOS".into(),
            EOS => "EOS".into(),
            SEP => "SEP".into(),
            TAG_SUM_MOD => "<sum>".into(),
            TAG_REVERSE => "<rev>".into(),
            TAG_ANY_PAIR => "<pair>".into(),
            other => format!("?{other}"),
        }
    }
}

pub const MAX_PROMPT_LEN: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("unknown task kind `{0}`")]
    UnknownKind(String),
    #[error("task mixture is empty or has no positive weight")]
    EmptyMixture,
    #[error("invalid task parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "SUM_MOD")]
    SumMod,
    #[serde(rename = "REVERSE")]
    Reverse,
    #[serde(rename = "ANY_PAIR")]
    AnyPair,
}

impl std::str::FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SUM_MOD" => Ok(TaskKind::SumMod),
            "REVERSE" => Ok(TaskKind::Reverse),
            "ANY_PAIR" => Ok(TaskKind::AnyPair),
            other => Err(TaskError::UnknownKind(other.to_string())),
        }
    }
}

/// The hidden facts a verifier needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSpec {
    SumMod { a: u8, b: u8 },
    Reverse { digits: Vec<u8> },
    AnyPair { n: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<usize>,
    pub spec: TaskSpec,
}

impl TaskInstance {
    pub fn sum_mod(a: u8, b: u8) -> Result<Self, TaskError> {
        if a > 9 || b > 9 {
            return Err(TaskError::InvalidParameters(format!("a={a}, b={b}")));
        }
        Ok(Self {
            prompt: vec![
                vocab::BOS,
                vocab::TAG_SUM_MOD,
                a as usize,
                b as usize,
                vocab::SEP,
            ],
            spec: TaskSpec::SumMod { a, b },
        })
    }

    pub fn reverse(digits: &[u8]) -> Result<Self, TaskError> {
        if !(3..=6).contains(&digits.len()) || digits.iter().any(|&d| d > 9) {
            return Err(TaskError::InvalidParameters(format!("{digits:?}")));
        }
        let mut prompt = vec![vocab::BOS, vocab::TAG_REVERSE];
        prompt.extend(digits.iter().map(|&d| d as usize));
        prompt.push(vocab::SEP);
        Ok(Self {
            prompt,
            spec: TaskSpec::Reverse {
                digits: digits.to_vec(),
            },
        })
    }

    pub fn any_pair(n: u8) -> Result<Self, TaskError> {
        if n > 18 {
            return Err(TaskError::InvalidParameters(format!("n={n}")));
        }
        Ok(Self {
            prompt: vec![
                vocab::BOS,
                vocab::TAG_ANY_PAIR,
                (n / 10) as usize,
                (n % 10) as usize,
                vocab::SEP,
            ],
            spec: TaskSpec::AnyPair { n },
        })
    }

    pub fn kind(&self) -> TaskKind {
        match self.spec {
            TaskSpec::SumMod { .. } => TaskKind::SumMod,
            TaskSpec::Reverse { .. } => TaskKind::Reverse,
            TaskSpec::AnyPair { .. } => TaskKind::AnyPair,
        }
    }
}

/// Canonical extracted answer used for majority voting.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Answer {
    /// The tokens before the first `EOS`.
    Tokens(Vec<usize>),
    /// No `EOS` was produced.
    Invalid,
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Invalid => write!(f, "INVALID"),
            Answer::Tokens(t) => {
                let names: Vec<String> = t.iter().map(|&x| vocab::name(x)).collect();
                write!(f, "[{}]", names.join(" "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    /// Exactly 0.0 or 1.0.
    pub reward: f64,
    pub answer: Answer,
}

impl Verdict {
    pub fn is_correct(&self) -> bool {
        self.reward == 1.0
    }
}

pub fn generate_instance<R: Rng + ?Sized>(kind: TaskKind, rng: &mut R) -> TaskInstance {
    match kind {
        TaskKind::SumMod => {
            let a = rng.random_range(0..10u8);
            let b = rng.random_range(0..10u8);
            TaskInstance::sum_mod(a, b).expect("digits in range")
        }
        TaskKind::Reverse => {
            let len = rng.random_range(3..=6usize);
            let digits: Vec<u8> = (0..len).map(|_| rng.random_range(0..10u8)).collect();
            TaskInstance::reverse(&digits).expect("digits in range")
        }
        TaskKind::AnyPair => TaskInstance::any_pair(rng.random_range(0..=18u8)).expect("n in range"),
    }
}

/// Task kinds with relative sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMixture(pub Vec<(TaskKind, f64)>);

impl TaskMixture {
    pub fn single(kind: TaskKind) -> Self {
        Self(vec![(kind, 1.0)])
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let ok = self.0.iter().all(|(_, w)| w.is_finite() && *w >= 0.0)
            && self.0.iter().any(|(_, w)| *w > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TaskError::EmptyMixture)
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskInstance {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut kind = self.0[0].0;
        for &(k, w) in &self.0 {
            if w <= 0.0 {
                continue;
            }
            kind = k;
            if u < w {
                break;
            }
            u -= w;
        }
        generate_instance(kind, rng)
    }
}

impl Default for TaskMixture {
    fn default() -> Self {
        Self::single(TaskKind::SumMod)
    }
}

pub fn extract_answer(y: &[usize]) -> Answer {
    match y.iter().position(|&t| t == vocab::EOS) {
        Some(end) => Answer::Tokens(y[..end].to_vec()),
        None => Answer::Invalid,
    }
}

pub fn verify(instance: &TaskInstance, y: &[usize]) -> Verdict {
    let answer = extract_answer(y);
    let clean_stop = y.last() == Some(&vocab::EOS) && y.iter().filter(|&&t| t == vocab::EOS).count() == 1;
    let correct = clean_stop
        && match (&answer, &instance.spec) {
            (Answer::Tokens(t), TaskSpec::SumMod { a, b }) => *t == [((a + b) % 10) as usize],
            (Answer::Tokens(t), TaskSpec::Reverse { digits }) => {
                t.len() == digits.len()
                    && t.iter().zip(digits.iter().rev()).all(|(&x, &d)| x == d as usize)
            }
            (Answer::Tokens(t), TaskSpec::AnyPair { n }) => {
                t.len() == 2 && t[0] <= 9 && t[1] <= 9 && t[0] + t[1] == *n as usize
            }
            (Answer::Invalid, _) => false,
        };
    Verdict {
        reward: if correct { 1.0 } else { 0.0 },
        answer,
    }
}
