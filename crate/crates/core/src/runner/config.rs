use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::objectives::ObjectiveConfig;
use crate::policy::{Dims, PolicyParams};
use crate::schedule::Schedule;
use crate::tasks::{vocab, TaskMixture};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Half-width of the uniform init.
    pub init_scale: f64,
    /// Half-width for `w_out` and `b_out`; defaults to `init_scale`.
    pub output_init_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            init_scale: 0.08,
            output_init_scale: None,
        }
    }
}

/// Everything a run needs. Missing JSON keys take the defaults below, and
/// the fully materialized config is written next to the run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: TaskMixture,
    pub model: ModelConfig,
    /// Behavior schedule used for training rollouts.
    pub schedule: Schedule,
    /// Decoding used for evaluation samples.
    pub eval_schedule: Schedule,
    pub objective: ObjectiveConfig,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    pub prompts_per_step: usize,
    /// Sequential optimizer updates per rollout batch; they share one decay step.
    pub minibatches: usize,
    pub lr: f64,
    pub steps: u64,
    pub eval_every: u64,
    /// Samples per evaluation prompt (n).
    pub eval_samples: usize,
    pub eval_prompts: usize,
    pub max_len: usize,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
    /// Evaluation prompts whose samples are dumped to `rollouts.jsonl`.
    pub log_prompts: usize,
    /// Rayon worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: TaskMixture::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            eval_schedule: Schedule::fixed(1.0).expect("valid"),
            objective: ObjectiveConfig::default(),
            group_size: 8,
            prompts_per_step: 64,
            minibatches: 1,
            lr: 1e-3,
            steps: 500,
            eval_every: 25,
            eval_samples: 16,
            eval_prompts: 64,
            max_len: 32,
            checkpoint_every: 0,
            log_prompts: 4,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| RunnerError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn init_params(&self) -> PolicyParams {
        let m = &self.model;
        PolicyParams::init_scaled(self.dims(), self.seed, m.init_scale, m.output_init_scale.unwrap_or(m.init_scale))
    }

    pub fn dims(&self) -> Dims {
        Dims::new(vocab::SIZE, self.model.embed_dim, self.model.hidden_dim)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: &str| Err(RunnerError::InvalidConfig(m.to_string()));
        self.schedule
            .validate()
            .map_err(|e| RunnerError::InvalidConfig(format!("schedule: {e}")))?;
        self.eval_schedule
            .validate()
            .map_err(|e| RunnerError::InvalidConfig(format!("eval_schedule: {e}")))?;
        self.objective
            .validate()
            .map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
        self.tasks
            .validate()
            .map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
        let counts = [
            ("group_size", self.group_size),
            ("prompts_per_step", self.prompts_per_step),
            ("minibatches", self.minibatches),
            ("eval_samples", self.eval_samples),
            ("eval_prompts", self.eval_prompts),
            ("max_len", self.max_len),
            ("model.embed_dim", self.model.embed_dim),
            ("model.hidden_dim", self.model.hidden_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(&format!("{name} must be >= 1"));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.minibatches > self.prompts_per_step {
            return bad("minibatches cannot exceed prompts_per_step");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            return bad("model.init_scale must be finite and >= 0");
        }
        if let Some(s) = self.model.output_init_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("model.output_init_scale must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Output locations inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn rollouts(&self) -> PathBuf {
        self.dir.join("rollouts.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.resolved.json")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{step}.bin"))
    }
}
