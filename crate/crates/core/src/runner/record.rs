use crate::metrics::EntropyProfile;

/// k values reported for pass@k and maj@k, filtered to `k <= n`.
pub const REPORT_KS: [usize; 5] = [1, 2, 4, 8, 16];
const WORST_K: usize = 16;

/// Aggregate over the optimizer updates taken on one rollout batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    /// Mean over mini-batches.
    pub loss: f64,
    /// Token-weighted over mini-batches.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Max over mini-batches.
    pub max_ratio: f64,
    pub mean_tis_weight: f64,
    /// Mean over mini-batches.
    pub grad_norm: f64,
    pub max_grad_norm: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub mean_reward: f64,
    pub mean_response_length: f64,
    /// Mean per-token entropy at temperature 1 along the training rollouts.
    pub entropy: f64,
    /// Mean per-token entropy of the distributions actually sampled.
    pub behavior_entropy: f64,
    /// Groups left after dynamic sampling.
    pub groups_used: usize,
    /// `None` when no group survived filtering and the update was skipped.
    pub update: Option<UpdateStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub pass: Vec<(usize, f64)>,
    pub worst: Vec<(usize, f64)>,
    pub maj: Vec<(usize, f64)>,
    pub mean_reward: f64,
    pub profile: EntropyProfile,
}

impl EvalSummary {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn worst_at(&self, k: usize) -> Option<f64> {
        self.worst.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn maj_at(&self, k: usize) -> Option<f64> {
        self.maj.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// One metrics row. Row `s` holds the evaluation of the parameters after
/// `s` updates (if `s` is an eval step) and the statistics of update `s`.
/// The last row, `s = steps`, carries only the final evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub d_s: f64,
    pub train: Option<TrainStats>,
    pub eval: Option<EvalSummary>,
}

pub(crate) fn report_ks(n: usize) -> Vec<usize> {
    REPORT_KS.iter().copied().filter(|&k| k <= n).collect()
}

pub(crate) fn worst_ks(n: usize) -> Vec<usize> {
    if n >= WORST_K {
        vec![WORST_K]
    } else {
        Vec::new()
    }
}

const TRAIN_COLUMNS: [&str; 14] = [
    "mean_reward",
    "mean_response_length",
    "train_entropy",
    "train_behavior_entropy",
    "groups_used",
    "loss",
    "clip_fraction",
    "mean_ratio",
    "max_ratio",
    "mean_tis_weight",
    "grad_norm",
    "max_grad_norm",
    "kl",
    "eval_reward",
];

pub(crate) fn header(n: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "d_s".to_string()];
    h.extend(TRAIN_COLUMNS.iter().map(|s| s.to_string()));
    h.extend(report_ks(n).iter().map(|k| format!("pass@{k}")));
    h.extend(worst_ks(n).iter().map(|k| format!("worst@{k}")));
    h.extend(report_ks(n).iter().map(|k| format!("maj@{k}")));
    h.extend(
        ["mean_entropy", "behavior_entropy", "entropy_profile"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl RunRecord {
    pub(crate) fn row(&self, n: usize) -> Vec<String> {
        let mut row = vec![self.step.to_string(), num(self.d_s)];
        let t = self.train.as_ref();
        let u = t.and_then(|t| t.update.as_ref());
        row.push(opt(t.map(|t| t.mean_reward)));
        row.push(opt(t.map(|t| t.mean_response_length)));
        row.push(opt(t.map(|t| t.entropy)));
        row.push(opt(t.map(|t| t.behavior_entropy)));
        row.push(t.map(|t| t.groups_used.to_string()).unwrap_or_default());
        row.push(opt(u.map(|u| u.loss)));
        row.push(opt(u.map(|u| u.clip_fraction)));
        row.push(opt(u.map(|u| u.mean_ratio)));
        row.push(opt(u.map(|u| u.max_ratio)));
        row.push(opt(u.map(|u| u.mean_tis_weight)));
        row.push(opt(u.map(|u| u.grad_norm)));
        row.push(opt(u.map(|u| u.max_grad_norm)));
        row.push(opt(u.map(|u| u.kl)));
        let e = self.eval.as_ref();
        row.push(opt(e.map(|e| e.mean_reward)));
        for k in report_ks(n) {
            row.push(opt(e.and_then(|e| e.pass_at(k))));
        }
        for k in worst_ks(n) {
            row.push(opt(e.and_then(|e| e.worst_at(k))));
        }
        for k in report_ks(n) {
            row.push(opt(e.and_then(|e| e.maj_at(k))));
        }
        row.push(opt(e.map(|e| e.profile.mean_entropy)));
        row.push(opt(e.map(|e| e.profile.behavior_entropy)));
        row.push(
            e.map(|e| serde_json::to_string(&e.profile.per_position).expect("floats serialize"))
                .unwrap_or_default(),
        );
        row
    }
}
