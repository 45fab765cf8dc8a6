//! Discrimination, per-group calibration and minority-label predictability.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, ClusterModel};
use crate::corpus::{Dataset, LabelValue, Majority, Task};
use crate::model::ModelParams;
use crate::{Error, Result};

pub const CALIBRATION_BINS: usize = 10;

/// Area under the ROC curve in Mann–Whitney form: the probability that a
/// random positive scores above a random negative, ties counted as ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of one-vs-rest AUCs over classes, scoring each class by
/// its predicted probability. Classes absent from (or the only class in)
/// `labels` are skipped.
pub fn macro_auc(class_probs: &[Vec<f64>], labels: &[LabelValue]) -> Result<f64> {
    if class_probs.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let n_classes = class_probs.first().map(Vec::len).unwrap_or(0);
    if n_classes == 2 {
        let scores: Vec<f64> = class_probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| l.index() == 1).collect();
        return auc(&scores, &pos);
    }
    let per_class: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let scores: Vec<f64> = class_probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|l| l.index() == c).collect();
            auc(&scores, &pos).ok()
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::Undefined("macro-AUC needs at least two label classes".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Fraction of pairs where `p̂ > 0.5` agrees with the label. `p̂ = 0.5` is
/// counted as wrong.
pub fn pairwise_accuracy(preds: &[f64], labels: &[bool]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Undefined("pairwise accuracy of no pairs".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| if l { p > 0.5 } else { p < 0.5 })
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinPoint {
    /// Decile index, `[b/10, (b+1)/10)` (the last bin includes 1.0).
    pub bin: usize,
    pub mean_pred: f64,
    pub mean_label: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub slope: f64,
    pub bias: f64,
    pub points: Vec<BinPoint>,
}

/// Decile-binned (mean prediction, mean label) points and their
/// ordinary-least-squares line. Perfect calibration is slope 1, bias 0.
pub fn calibration_fit(preds: &[f64], labels: &[f64]) -> Result<CalibrationFit> {
    if preds.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let mut sums = [(0.0f64, 0.0f64, 0usize); CALIBRATION_BINS];
    for (&p, &y) in preds.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("prediction {p} outside [0, 1]")));
        }
        let bin = ((p * CALIBRATION_BINS as f64).floor() as usize).min(CALIBRATION_BINS - 1);
        sums[bin].0 += p;
        sums[bin].1 += y;
        sums[bin].2 += 1;
    }
    let points: Vec<BinPoint> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(bin, &(sp, sy, n))| BinPoint {
            bin,
            mean_pred: sp / n as f64,
            mean_label: sy / n as f64,
            count: n,
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::Undefined(format!(
            "calibration line needs at least 2 non-empty bins, found {}",
            points.len()
        )));
    }
    let (slope, bias) = ols(&points);
    Ok(CalibrationFit { slope, bias, points })
}

fn ols(points: &[BinPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.mean_pred).sum::<f64>() / n;
    let my = points.iter().map(|p| p.mean_label).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.mean_pred - mx) * (p.mean_label - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.mean_pred - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// One-dimensional earth mover's distance between a predicted class
/// distribution and a one-hot label: the L1 distance of the two CDFs.
pub fn emd(pred: &[f64], label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let mut target = vec![0.0; pred.len()];
    target[label] = 1.0;
    emd_between(pred, &target)
}

/// EMD between two distributions over the same ordered classes: the L1
/// distance between their cumulative distributions.
pub fn emd_between(p: &[f64], q: &[f64]) -> Result<f64> {
    if !(2..=3).contains(&p.len()) || p.len() != q.len() {
        return Err(Error::invalid(format!(
            "EMD needs two distributions over 2 or 3 classes, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    for d in [p, q] {
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-9 || d.iter().any(|v| *v < -1e-12) {
            return Err(Error::invalid(format!("not a distribution (sums to {total})")));
        }
    }
    let (mut cp, mut cq, mut dist) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        dist += (cp - cq).abs();
    }
    Ok(dist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorityScore {
    /// `1 − mean EMD / (L − 1)` over minority annotations.
    pub score: f64,
    /// Number of minority annotations scored.
    pub count: usize,
}

/// Predictability of annotations that disagree with their item's majority.
///
/// `preds[r]` is the class distribution predicted for record `r`. Items with
/// a tied majority contribute nothing. Returns 1.0 (with a warning) when no
/// minority annotation exists.
pub fn minority_score(ds: &Dataset, preds: &[Vec<f64>]) -> Result<MinorityScore> {
    if preds.len() != ds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} annotations",
            preds.len(),
            ds.len()
        )));
    }
    let l = ds.task().num_classes();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, item) in ds.items().iter().enumerate() {
        let Majority::Label(maj) = ds.item_majority(i) else {
            continue;
        };
        for (&r, oriented) in item.records.iter().zip(ds.oriented_labels(i)) {
            if oriented != maj {
                total += emd(&preds[r], ds.records()[r].label.index())?;
                count += 1;
            }
        }
    }
    if count == 0 {
        log::warn!("no minority annotations; minority score defaults to 1");
        return Ok(MinorityScore { score: 1.0, count: 0 });
    }
    Ok(MinorityScore {
        score: 1.0 - total / ((l - 1) as f64 * count as f64),
        count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub cluster_id: String,
    pub annotations: usize,
    /// `None` when undefined for the group (e.g. a single label class).
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub cluster_id: String,
    /// 0 for binary/preference; 0 or 1 for the ordinal sub-tasks.
    pub subtask: usize,
    pub fit: Option<CalibrationFit>,
}

/// Test-set evaluation of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// `auc` (binary), `macro_auc` (ordinal) or `pairwise_accuracy` (preference).
    pub metric_name: String,
    pub overall: f64,
    pub per_group: Vec<GroupMetric>,
    pub group_mean: Option<f64>,
    pub group_std: Option<f64>,
    pub calibration: Vec<GroupCalibration>,
    pub calibration_mean_slope: Option<f64>,
    pub calibration_std_slope: Option<f64>,
    pub calibration_mean_bias: Option<f64>,
    pub calibration_std_bias: Option<f64>,
    pub one_minus_emd: f64,
    pub minority_annotations: usize,
    pub annotations: usize,
    pub items: usize,
}

impl EvalReport {
    pub fn group(&self, cluster_id: &str) -> Option<&GroupMetric> {
        self.per_group.iter().find(|g| g.cluster_id == cluster_id)
    }

    pub fn calibration_for(&self, cluster_id: &str, subtask: usize) -> Option<&CalibrationFit> {
        self.calibration
            .iter()
            .find(|c| c.cluster_id == cluster_id && c.subtask == subtask)
            .and_then(|c| c.fit.as_ref())
    }

    /// Per-bin calibration points as CSV (`cluster_id,subtask,bin,mean_pred,mean_label,count`).
    pub fn calibration_csv(&self) -> String {
        let mut out = String::from("cluster_id,subtask,bin,mean_pred,mean_label,count\n");
        for c in &self.calibration {
            for p in c.fit.iter().flat_map(|f| &f.points) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.cluster_id, c.subtask, p.bin, p.mean_pred, p.mean_label, p.count
                );
            }
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task: {}", self.task)?;
        writeln!(f, "annotations: {} ({} items)", self.annotations, self.items)?;
        writeln!(f, "overall {}: {:.4}", self.metric_name, self.overall)?;
        writeln!(f, "group {}: {} ± {}", self.metric_name, opt(self.group_mean), opt(self.group_std))?;
        for g in &self.per_group {
            writeln!(f, "  {:<24} n={:<6} {}", g.cluster_id, g.annotations, opt(g.metric))?;
        }
        writeln!(
            f,
            "calibration slope: {} ± {}",
            opt(self.calibration_mean_slope),
            opt(self.calibration_std_slope)
        )?;
        writeln!(
            f,
            "calibration bias: {} ± {}",
            opt(self.calibration_mean_bias),
            opt(self.calibration_std_bias)
        )?;
        for c in &self.calibration {
            match &c.fit {
                Some(fit) => writeln!(
                    f,
                    "  {:<24} subtask {} slope {:.4} bias {:.4}",
                    c.cluster_id, c.subtask, fit.slope, fit.bias
                )?,
                None => writeln!(f, "  {:<24} subtask {} excluded (<2 bins)", c.cluster_id, c.subtask)?,
            }
        }
        writeln!(
            f,
            "1-EMD (minority): {:.4} over {} annotations",
            self.one_minus_emd, self.minority_annotations
        )
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Class distribution predicted for every record of `ds`.
pub fn predict_dataset(ds: &Dataset, assignment: &ClusterAssignment, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    ds.records()
        .iter()
        .zip(assignment.sets())
        .map(|(r, s)| params.class_distribution(&r.embedding, r.embedding_b.as_deref(), s))
        .collect()
}

fn task_metric(task: Task, probs: &[Vec<f64>], labels: &[LabelValue]) -> Result<f64> {
    match task {
        Task::Preference => {
            let p: Vec<f64> = probs.iter().map(|d| d[1]).collect();
            let y: Vec<bool> = labels.iter().map(|l| l.index() == 1).collect();
            pairwise_accuracy(&p, &y)
        }
        _ => macro_auc(probs, labels),
    }
}

/// Full evaluation of `params` on a test set whose annotations have been
/// assigned to the clusters of `cluster_model`.
pub fn evaluate(
    ds: &Dataset,
    assignment: &ClusterAssignment,
    params: &ModelParams,
    cluster_model: &ClusterModel,
) -> Result<EvalReport> {
    let task = ds.task();
    if params.task != task {
        return Err(Error::TaskMismatch {
            left: params.task,
            right: task,
        });
    }
    if let Some(stats) = &cluster_model.stats {
        if stats.task != task {
            return Err(Error::TaskMismatch { left: stats.task, right: task });
        }
    }
    if params.num_clusters() > 0 && params.cluster_ids != cluster_model.cluster_ids {
        return Err(Error::invalid("checkpoint clusters differ from the cluster model"));
    }
    if assignment.len() != ds.len() {
        return Err(Error::invalid("assignment does not cover the dataset"));
    }
    if ds.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let probs = predict_dataset(ds, assignment, params)?;
    let labels: Vec<LabelValue> = ds.records().iter().map(|r| r.label).collect();
    let overall = task_metric(task, &probs, &labels)?;

    let k = cluster_model.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, s) in assignment.sets().iter().enumerate() {
        for &c in s {
            members[c].push(r);
        }
    }

    let mut per_group = Vec::with_capacity(k);
    let mut calibration = Vec::new();
    for (c, idx) in members.iter().enumerate() {
        let id = cluster_model.cluster_ids[c].clone();
        let gp: Vec<Vec<f64>> = idx.iter().map(|&r| probs[r].clone()).collect();
        let gl: Vec<LabelValue> = idx.iter().map(|&r| labels[r]).collect();
        let metric = if idx.is_empty() {
            None
        } else {
            match task_metric(task, &gp, &gl) {
                Ok(v) => Some(v),
                Err(Error::Undefined(why)) => {
                    log::warn!("group {id}: {why}; excluded from group statistics");
                    None
                }
                Err(e) => return Err(e),
            }
        };
        per_group.push(GroupMetric {
            cluster_id: id.clone(),
            annotations: idx.len(),
            metric,
        });
        for s in 0..task.num_subtasks() {
            // P(y > s) recovered from the class distribution.
            let preds: Vec<f64> = gp.iter().map(|d| d[s + 1..].iter().sum::<f64>().clamp(0.0, 1.0)).collect();
            let ys: Vec<f64> = gl.iter().map(|l| l.subtask_target(s)).collect();
            let fit = match calibration_fit(&preds, &ys) {
                Ok(f) => Some(f),
                Err(Error::Undefined(why)) => {
                    log::warn!("group {id} sub-task {s}: {why}; excluded from calibration");
                    None
                }
                Err(e) => return Err(e),
            };
            calibration.push(GroupCalibration {
                cluster_id: id.clone(),
                subtask: s,
                fit,
            });
        }
    }

    let group_values: Vec<f64> = per_group.iter().filter_map(|g| g.metric).collect();
    let (group_mean, group_std) = mean_std(&group_values);
    let slopes: Vec<f64> = calibration.iter().filter_map(|c| c.fit.as_ref().map(|f| f.slope)).collect();
    let biases: Vec<f64> = calibration.iter().filter_map(|c| c.fit.as_ref().map(|f| f.bias)).collect();
    let (calibration_mean_slope, calibration_std_slope) = mean_std(&slopes);
    let (calibration_mean_bias, calibration_std_bias) = mean_std(&biases);
    let minority = minority_score(ds, &probs)?;

    Ok(EvalReport {
        task,
        metric_name: match task {
            Task::Binary => "auc",
            Task::Ordinal3 => "macro_auc",
            Task::Preference => "pairwise_accuracy",
        }
        .to_string(),
        overall,
        per_group,
        group_mean,
        group_std,
        calibration,
        calibration_mean_slope,
        calibration_std_slope,
        calibration_mean_bias,
        calibration_std_bias,
        one_minus_emd: minority.score,
        minority_annotations: minority.count,
        annotations: ds.len(),
        items: ds.num_items(),
    })
}
