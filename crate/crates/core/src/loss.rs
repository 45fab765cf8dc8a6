//! Training objectives and their exact gradients.
//!
//! For binary labels the objective over a batch is
//!
//! ```text
//! Σ CE(y, p̂) + λ₁ Σ_k α_k KL(P_k ‖ Q_k) + λ₂ Σ_k ‖v_k‖²
//! ```
//!
//! where `Q_k` is built from the soft-thresholded mean prediction of the
//! batch members of cluster `k`. Ordinal labels repeat the CE and KL terms
//! for both CORAL sub-tasks; preference pairs use the Bradley–Terry loss
//! and the L2 term only.

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, ClusterStats};
use crate::corpus::{Dataset, LabelValue, Task};
use crate::model::{ModelParams, TrunkPass, Weights};
use crate::{sigmoid, softplus, Error, Result, PROB_EPS};

/// Soft-threshold sharpness `l`.
pub const DEFAULT_SHARPNESS: f64 = 1e4;
pub const DEFAULT_LAMBDA2: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the per-cluster KL term.
    pub lambda1: f64,
    /// Weight of the value-embedding L2 penalty.
    pub lambda2: f64,
    /// Sharpness `l` of the tanh soft threshold.
    pub sharpness: f64,
    /// Smoothing for probabilities inside logarithms.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: default_lambda1(Task::Binary, 1.0),
            lambda2: DEFAULT_LAMBDA2,
            sharpness: DEFAULT_SHARPNESS,
            eps: PROB_EPS,
        }
    }
}

impl LossConfig {
    /// Defaults with `λ₁` derived from the mean number of annotations per
    /// training item.
    pub fn for_task(task: Task, mean_annotations_per_item: f64) -> Self {
        LossConfig {
            lambda1: default_lambda1(task, mean_annotations_per_item),
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::invalid("soft-threshold sharpness must be positive"));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::invalid("smoothing eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// `1 / (7.4 m̄)` for binary labels, half that for ordinal, 0 for preference
/// (which has no KL term).
pub fn default_lambda1(task: Task, mean_annotations_per_item: f64) -> f64 {
    let m = mean_annotations_per_item.max(1.0);
    match task {
        Task::Binary => 1.0 / (7.4 * m),
        Task::Ordinal3 => 1.0 / (2.0 * 7.4 * m),
        Task::Preference => 0.0,
    }
}

/// Binary cross-entropy with `p̂` clamped to `[eps, 1 − eps]`.
pub fn ce_loss(y: f64, p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Soft-thresholded mean `½ · mean(1 + tanh(l (p̂ − ȳ)))`, clamped to
/// `[eps, 1 − eps]`. `None` for an empty member list.
pub fn soft_threshold_mean(preds: &[f64], cluster_mean: f64, sharpness: f64, eps: f64) -> Option<f64> {
    if preds.is_empty() {
        return None;
    }
    let sum: f64 = preds
        .iter()
        .map(|p| 1.0 + (sharpness * (p - cluster_mean)).tanh())
        .sum();
    Some((0.5 * sum / preds.len() as f64).clamp(eps, 1.0 - eps))
}

/// `n · KL(Bernoulli(ȳ) ‖ Bernoulli(q))` with both rates smoothed.
pub fn binomial_kl(n: f64, cluster_mean: f64, q: f64, eps: f64) -> f64 {
    let y = cluster_mean.clamp(eps, 1.0 - eps);
    let q = q.clamp(eps, 1.0 - eps);
    n * (y * (y / q).ln() + (1.0 - y) * ((1.0 - y) / (1.0 - q)).ln())
}

/// One annotation prepared for training: item embedding(s), label, clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub x_b: Option<Vec<f64>>,
    pub label: LabelValue,
    pub clusters: Vec<usize>,
}

/// Annotations of a dataset in training form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub task: Task,
    pub examples: Vec<Example>,
}

impl TrainingSet {
    /// Pairs each record with its cluster set; without an assignment every
    /// example carries an empty set.
    pub fn from_dataset(ds: &Dataset, assignment: Option<&ClusterAssignment>) -> Result<Self> {
        if let Some(a) = assignment {
            if a.len() != ds.len() {
                return Err(Error::invalid(format!(
                    "{} assignments for {} annotations",
                    a.len(),
                    ds.len()
                )));
            }
        }
        let examples = ds
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| Example {
                x: r.embedding.clone(),
                x_b: r.embedding_b.clone(),
                label: r.label,
                clusters: assignment.map(|a| a.get(i).to_vec()).unwrap_or_default(),
            })
            .collect();
        Ok(TrainingSet {
            task: ds.task(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Loss value split into its terms. `total = ce + kl + l2`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Summed cross-entropy (or Bradley–Terry) loss.
    pub ce: f64,
    /// `λ₁ Σ_k α_k KL_k`.
    pub kl: f64,
    /// `λ₂ Σ_k ‖v_k‖²`.
    pub l2: f64,
    pub total: f64,
    /// Unweighted KL per cluster (summed over sub-tasks); 0 when the cluster
    /// has no batch members.
    pub cluster_kl: Vec<f64>,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.ce + self.kl + self.l2;
        self
    }

    /// Adds another breakdown term by term.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.kl += other.kl;
        self.l2 += other.l2;
        self.total += other.total;
        if self.cluster_kl.len() < other.cluster_kl.len() {
            self.cluster_kl.resize(other.cluster_kl.len(), 0.0);
        }
        for (a, b) in self.cluster_kl.iter_mut().zip(&other.cluster_kl) {
            *a += b;
        }
    }
}

enum Pass {
    Single(TrunkPass),
    Pair { a: TrunkPass, b: TrunkPass, temp: f64, z: f64 },
}

/// Composite loss of `params` on `set.examples[batch]`.
///
/// `stats` supplies `n_k`, `ȳ_k` and `α_k`; the KL term is skipped when it is
/// absent, when `λ₁ = 0`, for models without clusters and for preference data.
pub fn composite_loss(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate(params, set, batch, stats, cfg, false).map(|(l, _)| l)
}

/// Composite loss and its gradient with respect to every parameter block.
pub fn composite_loss_and_grad(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Weights)> {
    evaluate(params, set, batch, stats, cfg, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn require_task(params: &ModelParams, set: &TrainingSet, task: Task) -> Result<()> {
    if set.task != task {
        return Err(Error::TaskMismatch { left: set.task, right: task });
    }
    if params.task != task {
        return Err(Error::TaskMismatch { left: params.task, right: task });
    }
    Ok(())
}

/// Binary composite loss (CE + weighted KL + L2).
pub fn composite_loss_binary(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    require_task(params, set, Task::Binary)?;
    composite_loss(params, set, batch, stats, cfg)
}

/// Ordinal composite loss: both CORAL sub-tasks in the CE and KL terms.
pub fn composite_loss_ordinal(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    require_task(params, set, Task::Ordinal3)?;
    composite_loss(params, set, batch, stats, cfg)
}

/// Preference loss: Bradley–Terry plus L2, no KL term.
pub fn composite_loss_preference(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    require_task(params, set, Task::Preference)?;
    composite_loss(params, set, batch, stats, cfg)
}

fn evaluate(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Weights>)> {
    cfg.validate()?;
    if set.task != params.task {
        return Err(Error::TaskMismatch {
            left: set.task,
            right: params.task,
        });
    }
    let task = params.task;
    let k = params.num_clusters();
    let subtasks = task.num_subtasks();
    let w = &params.weights;

    // Forward: per-example passes, sub-task probabilities and CE gradients w.r.t. logits.
    let mut passes = Vec::with_capacity(batch.len());
    let mut probs: Vec<[f64; 2]> = Vec::with_capacity(batch.len());
    let mut d_z: Vec<[f64; 2]> = Vec::with_capacity(batch.len());
    let mut out = LossBreakdown {
        cluster_kl: vec![0.0; k],
        ..LossBreakdown::default()
    };
    for &i in batch {
        let ex = set
            .examples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("batch index {i} out of range")))?;
        if k > 0 && ex.clusters.is_empty() {
            return Err(Error::invalid(format!("example {i} has no cluster assignment")));
        }
        match task {
            Task::Binary => {
                let pass = params.trunk_forward(&ex.x, &ex.clusters)?;
                let z = pass.logit + w.head_bias;
                let y = ex.label.subtask_target(0);
                let p = sigmoid(z);
                out.ce += softplus(z) - y * z;
                probs.push([p, 0.0]);
                d_z.push([p - y, 0.0]);
                passes.push(Pass::Single(pass));
            }
            Task::Ordinal3 => {
                let pass = params.trunk_forward(&ex.x, &ex.clusters)?;
                let z1 = pass.logit + w.head_bias;
                let z2 = z1 - params.delta();
                let (y1, y2) = (ex.label.subtask_target(0), ex.label.subtask_target(1));
                let (p1, p2) = (sigmoid(z1), sigmoid(z2));
                out.ce += softplus(z1) - y1 * z1 + softplus(z2) - y2 * z2;
                probs.push([p1, p2]);
                d_z.push([p1 - y1, p2 - y2]);
                passes.push(Pass::Single(pass));
            }
            Task::Preference => {
                let xb = ex
                    .x_b
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("preference example {i} lacks a second item")))?;
                let a = params.trunk_forward(&ex.x, &ex.clusters)?;
                let b = params.trunk_forward(xb, &ex.clusters)?;
                let temp = params.temperature(&ex.clusters)?;
                let z = (a.logit - b.logit) / temp;
                let y = ex.label.subtask_target(0);
                let p = sigmoid(z);
                out.ce += softplus(z) - y * z;
                probs.push([p, 0.0]);
                d_z.push([p - y, 0.0]);
                passes.push(Pass::Pair { a, b, temp, z });
            }
        }
    }

    // Per-cluster KL between the frozen training rate and the soft-thresholded batch mean.
    let use_kl = cfg.lambda1 > 0.0 && k > 0 && task != Task::Preference;
    if let (true, Some(stats)) = (use_kl, stats) {
        if stats.clusters.len() != k {
            return Err(Error::invalid(format!(
                "cluster stats cover {} clusters, model has {k}",
                stats.clusters.len()
            )));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (pos, &i) in batch.iter().enumerate() {
            for &c in &set.examples[i].clusters {
                members[c].push(pos);
            }
        }
        for c in 0..k {
            let stat = &stats.clusters[c];
            if stat.n == 0 || members[c].is_empty() {
                continue;
            }
            let count = members[c].len() as f64;
            for s in 0..subtasks {
                let ybar = stat.mean[s];
                let y_s = ybar.clamp(cfg.eps, 1.0 - cfg.eps);
                let tanhs: Vec<f64> = members[c]
                    .iter()
                    .map(|&pos| (cfg.sharpness * (probs[pos][s] - ybar)).tanh())
                    .collect();
                let q_raw = 0.5 * tanhs.iter().map(|t| 1.0 + t).sum::<f64>() / count;
                let q = q_raw.clamp(cfg.eps, 1.0 - cfg.eps);
                let kl = count * (y_s * (y_s / q).ln() + (1.0 - y_s) * ((1.0 - y_s) / (1.0 - q)).ln());
                out.cluster_kl[c] += kl;
                out.kl += cfg.lambda1 * stat.alpha * kl;
                if want_grad && q == q_raw {
                    let d_q = cfg.lambda1 * stat.alpha * count * (-y_s / q + (1.0 - y_s) / (1.0 - q));
                    for (&pos, t) in members[c].iter().zip(&tanhs) {
                        let p = probs[pos][s];
                        let d_p = d_q * 0.5 / count * cfg.sharpness * (1.0 - t * t);
                        d_z[pos][s] += d_p * p * (1.0 - p);
                    }
                }
            }
        }
    }

    out.l2 = cfg.lambda2 * w.value_table.iter().map(|v| v * v).sum::<f64>();
    let out = out.finish();
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (ce={}, kl={}, l2={})",
            out.ce, out.kl, out.l2
        )));
    }
    if !want_grad {
        return Ok((out, None));
    }

    let mut g = w.zeros_like();
    for ((pass, dz), &i) in passes.iter().zip(&d_z).zip(batch) {
        let s = &set.examples[i].clusters;
        match pass {
            Pass::Single(p) => {
                let d_logit = dz[0] + dz[1];
                g.head_bias += d_logit;
                if task == Task::Ordinal3 {
                    // z2 = z1 − δ_raw²
                    g.delta_raw += -dz[1] * 2.0 * w.delta_raw;
                }
                params.trunk_backward(p, s, d_logit, &mut g);
            }
            Pass::Pair { a, b, temp, z } => {
                params.trunk_backward(a, s, dz[0] / temp, &mut g);
                params.trunk_backward(b, s, -dz[0] / temp, &mut g);
                if !w.log_temps.is_empty() && k > 0 {
                    // t = mean_k exp(log_t_k); ∂z/∂log_t_k = −z/t · t_k/|S|
                    for &c in s {
                        let t_c = w.log_temps[c].exp();
                        g.log_temps[c] += -dz[0] * z / temp * t_c / s.len() as f64;
                    }
                }
            }
        }
    }
    if task == Task::Preference {
        g.head_bias = 0.0;
    }
    for (gv, v) in g.value_table.iter_mut().zip(&w.value_table) {
        *gv += 2.0 * cfg.lambda2 * v;
    }
    for b in params.active_blocks() {
        if let Some(pos) = g.block(b).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {}[{pos}]", b.name())));
        }
    }
    Ok((out, Some(g)))
}
