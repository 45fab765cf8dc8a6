//! Value clusters: k-means over rationale embeddings, expert taxonomy
//! categories, or sociocultural attribute cross-sections, plus the
//! per-cluster label statistics consumed by the loss.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationRecord, Dataset, Task};
use crate::{Error, Result, PROB_EPS};

/// Upper clamp for the per-cluster KL weight.
pub const ALPHA_MAX: f64 = 10.0;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 300;
/// Independent k-means++ seedings per fit; the lowest-SSE run wins.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    RationaleKmeans,
    Taxonomy,
    Sociocultural,
}

impl fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMode::RationaleKmeans => "rationale",
            ClusterMode::Taxonomy => "taxonomy",
            ClusterMode::Sociocultural => "sociocultural",
        })
    }
}

impl FromStr for ClusterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rationale" | "rationale_kmeans" => Ok(ClusterMode::RationaleKmeans),
            "taxonomy" => Ok(ClusterMode::Taxonomy),
            "sociocultural" => Ok(ClusterMode::Sociocultural),
            other => Err(Error::invalid(format!("unknown cluster mode {other:?}"))),
        }
    }
}

/// Label statistics of one cluster over the training annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    /// Number of annotations whose cluster set contains this cluster.
    pub n: usize,
    /// Histogram over label classes.
    pub label_counts: Vec<usize>,
    /// Mean binary target per sub-task (one entry, or two for ordinal).
    pub mean: Vec<f64>,
    /// KL weight of this cluster.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub task: Task,
    /// Global training label rate per sub-task.
    pub global_mean: Vec<f64>,
    pub clusters: Vec<ClusterStat>,
}

impl ClusterStats {
    /// Indices of clusters with no training annotations.
    pub fn empty_clusters(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&k| self.clusters[k].n == 0)
            .collect()
    }
}

/// The value-cluster structure for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub mode: ClusterMode,
    pub cluster_ids: Vec<String>,
    /// Row-major K×d_r centroids (rationale mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ClusterStats>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cluster_ids.iter().position(|c| c == id)
    }

    /// Categorical model whose clusters are the given ids, in order.
    pub fn categorical(mode: ClusterMode, cluster_ids: Vec<String>) -> Result<Self> {
        if mode == ClusterMode::RationaleKmeans {
            return Err(Error::invalid("rationale clusters are built with kmeans_fit"));
        }
        let model = ClusterModel {
            mode,
            cluster_ids,
            centroids: None,
            stats: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Categorical model over every cluster id (taxonomy) or attribute value
    /// (sociocultural) that occurs in `ds`, sorted lexicographically.
    pub fn categorical_from_dataset(mode: ClusterMode, ds: &Dataset) -> Result<Self> {
        let ids: BTreeSet<String> = match mode {
            ClusterMode::Taxonomy => ds.declared_clusters(),
            ClusterMode::Sociocultural => ds
                .records()
                .iter()
                .flat_map(|r| r.attributes.iter().flatten())
                .map(|(k, v)| attribute_cluster_id(k, v))
                .collect(),
            ClusterMode::RationaleKmeans => {
                return Err(Error::invalid("rationale clusters are built with kmeans_fit"))
            }
        };
        Self::categorical(mode, ids.into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_ids.is_empty() {
            return Err(Error::invalid("a cluster model needs at least one cluster"));
        }
        let unique: HashSet<&String> = self.cluster_ids.iter().collect();
        if unique.len() != self.cluster_ids.len() {
            return Err(Error::invalid("duplicate cluster id"));
        }
        match (&self.centroids, self.mode) {
            (Some(c), ClusterMode::RationaleKmeans) => {
                if c.len() != self.k() {
                    return Err(Error::DimensionMismatch {
                        expected: self.k(),
                        found: c.len(),
                        context: "centroid rows".into(),
                    });
                }
                let d = c[0].len();
                if d == 0 || c.iter().any(|row| row.len() != d) {
                    return Err(Error::invalid("centroid rows must share one positive dimension"));
                }
            }
            (None, ClusterMode::RationaleKmeans) => {
                return Err(Error::invalid("rationale cluster model without centroids"))
            }
            (Some(_), _) => return Err(Error::invalid("centroids are only valid in rationale mode")),
            (None, _) => {}
        }
        if let Some(stats) = &self.stats {
            if stats.clusters.len() != self.k() {
                return Err(Error::invalid("stats length does not match cluster count"));
            }
            if stats.clusters.iter().any(|s| !(s.alpha >= 0.0)) {
                return Err(Error::invalid("negative cluster weight"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ClusterModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Cluster id for one sociocultural attribute value, e.g. `gender=Woman`.
pub fn attribute_cluster_id(key: &str, value: &str) -> String {
    format!("{key}={value}")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        // Strict comparison keeps the lowest index on ties.
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Outcome of a k-means run, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Cluster index of each input point.
    pub labels: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

/// Lloyd's k-means with k-means++ seeding. See [`kmeans_fit_detailed`].
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterModel> {
    kmeans_fit_detailed(points, k, seed, max_iters, tol).map(|f| f.model)
}

/// Lloyd's k-means with k-means++ seeding under Euclidean distance.
///
/// Runs [`KMEANS_RESTARTS`] seedings from one `seed`-derived stream and keeps
/// the run with the lowest final SSE. Each run stops when the largest
/// centroid shift falls below `tol` or after `max_iters` iterations. A
/// cluster that loses all members is re-seeded at the point farthest from
/// its current centroid.
pub fn kmeans_fit_detailed(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("tol must be non-negative"));
    }
    let d = points.first().map(Vec::len).unwrap_or(0);
    if d == 0 {
        return Err(Error::invalid("k-means needs non-empty, non-zero-length embeddings"));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
            context: "k-means input".into(),
        });
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    if k > distinct.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} distinct points",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, &mut rng, max_iters, tol);
        if best.as_ref().map_or(true, |b| run.sse() < b.sse()) {
            best = Some(run);
        }
    }
    let LloydRun {
        centroids,
        labels,
        sse_history,
        iterations,
    } = best.expect("at least one restart");

    let model = ClusterModel {
        mode: ClusterMode::RationaleKmeans,
        cluster_ids: (0..k).map(|c| format!("c{c}")).collect(),
        centroids: Some(centroids),
        stats: None,
    };
    Ok(KMeansFit {
        model,
        labels,
        sse_history,
        iterations,
    })
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sse_history: Vec<f64>,
    iterations: usize,
}

impl LloydRun {
    fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iters: usize, tol: f64) -> LloydRun {
    let d = points[0].len();
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut labels = vec![0usize; points.len()];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(p, &centroids);
            labels[i] = c;
            dists[i] = dist;
        }
        reseed_empty(points, &mut centroids, &mut labels, &mut dists);
        sse_history.push(dists.iter().sum());

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < tol || iterations >= max_iters {
            break;
        }
    }
    // Final assignment against the last centroids.
    let mut dists = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let (c, dist) = nearest(p, &centroids);
        labels[i] = c;
        dists[i] = dist;
    }
    reseed_empty(points, &mut centroids, &mut labels, &mut dists);
    sse_history.push(dists.iter().sum());
    LloydRun {
        centroids,
        labels,
        sse_history,
        iterations,
    }
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            unreachable!("k <= distinct points keeps some distance positive")
        };
        centroids.push(points[next].clone());
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in labels.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // Farthest point among those whose cluster can spare one.
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("k <= distinct points leaves a donor cluster");
        centroids[empty] = points[far].clone();
        labels[far] = empty;
        dists[far] = 0.0;
    }
}

/// Index of the nearest centroid (lowest index on ties).
pub fn assign_rationale(embedding: &[f64], model: &ClusterModel) -> Result<usize> {
    let centroids = match (&model.centroids, model.mode) {
        (Some(c), ClusterMode::RationaleKmeans) => c,
        _ => return Err(Error::invalid("nearest-centroid assignment needs a rationale cluster model")),
    };
    let d = centroids[0].len();
    if embedding.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: embedding.len(),
            context: "rationale embedding".into(),
        });
    }
    Ok(nearest(embedding, centroids).0)
}

/// Cluster set of one record under a taxonomy or sociocultural model.
pub fn assign_categorical(record: &AnnotationRecord, model: &ClusterModel) -> Result<Vec<usize>> {
    let ids: Vec<String> = match model.mode {
        ClusterMode::Taxonomy => record
            .clusters
            .clone()
            .ok_or_else(|| Error::invalid(format!("record for item {} has no clusters", record.item_id)))?,
        ClusterMode::Sociocultural => record
            .attributes
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record for item {} has no attributes", record.item_id)))?
            .iter()
            .map(|(k, v)| attribute_cluster_id(k, v))
            .collect(),
        ClusterMode::RationaleKmeans => {
            return Err(Error::invalid("categorical assignment needs a taxonomy or sociocultural model"))
        }
    };
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "record for item {} maps to no cluster",
            record.item_id
        )));
    }
    let mut out: Vec<usize> = ids
        .iter()
        .map(|id| model.index_of(id).ok_or_else(|| Error::UnknownCluster(id.clone())))
        .collect::<Result<_>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Cluster set S_ij of every record in a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    sets: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn new(sets: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        for s in &sets {
            if s.is_empty() {
                return Err(Error::invalid("annotation without a cluster"));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= k) {
                return Err(Error::ClusterIndexOutOfRange { index: bad, k });
            }
        }
        Ok(ClusterAssignment { sets })
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn get(&self, record: usize) -> &[usize] {
        &self.sets[record]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Assigns every record of `ds` to clusters of `model`.
pub fn assign_dataset(ds: &Dataset, model: &ClusterModel) -> Result<ClusterAssignment> {
    let sets = ds
        .records()
        .iter()
        .map(|r| match model.mode {
            ClusterMode::RationaleKmeans => {
                let e = r.rationale_embedding.as_ref().ok_or_else(|| {
                    Error::invalid(format!("record for item {} has no rationale embedding", r.item_id))
                })?;
                Ok(vec![assign_rationale(e, model)?])
            }
            _ => assign_categorical(r, model),
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterAssignment::new(sets, model.k())
}

/// Bernoulli KL(p ‖ q) with both rates smoothed into [ε, 1−ε].
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()).max(0.0)
}

/// Fills in per-cluster counts, sub-task label means and KL weights from the
/// training annotations.
///
/// Each weight is the per-annotation Bernoulli KL between the cluster's label
/// rate and the global training rate, summed over sub-tasks and clamped to
/// [0, [`ALPHA_MAX`]]. Clusters with no annotations are logged and keep
/// `n = 0`, which excludes them from the KL term.
pub fn compute_stats(train: &Dataset, assignment: &ClusterAssignment, model: &ClusterModel) -> Result<ClusterModel> {
    if assignment.len() != train.len() {
        return Err(Error::invalid(format!(
            "{} assignments for {} annotations",
            assignment.len(),
            train.len()
        )));
    }
    let task = train.task();
    let subtasks = task.num_subtasks();
    let k = model.k();
    let mut counts = vec![0usize; k];
    let mut label_counts = vec![vec![0usize; task.num_classes()]; k];
    let mut sums = vec![vec![0.0; subtasks]; k];
    let mut global = vec![0.0; subtasks];
    for (r, set) in train.records().iter().zip(assignment.sets()) {
        for s in 0..subtasks {
            global[s] += r.label.subtask_target(s);
        }
        for &c in set {
            if c >= k {
                return Err(Error::ClusterIndexOutOfRange { index: c, k });
            }
            counts[c] += 1;
            label_counts[c][r.label.index()] += 1;
            for s in 0..subtasks {
                sums[c][s] += r.label.subtask_target(s);
            }
        }
    }
    let n = train.len().max(1) as f64;
    global.iter_mut().for_each(|g| *g /= n);

    let clusters = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                log::warn!("cluster {} has no training annotations; excluded from the KL term", model.cluster_ids[c]);
                return ClusterStat {
                    n: 0,
                    label_counts: label_counts[c].clone(),
                    mean: global.clone(),
                    alpha: 0.0,
                };
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            let alpha = mean
                .iter()
                .zip(&global)
                .map(|(&m, &g)| if m == g { 0.0 } else { bernoulli_kl(m, g) })
                .sum::<f64>()
                .clamp(0.0, ALPHA_MAX);
            ClusterStat {
                n: counts[c],
                label_counts: label_counts[c].clone(),
                mean,
                alpha,
            }
        })
        .collect();

    let mut out = model.clone();
    out.stats = Some(ClusterStats {
        task,
        global_mean: global,
        clusters,
    });
    Ok(out)
}

/// Mean silhouette coefficient of a hard clustering (0 for K = 1).
pub fn silhouette(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if k < 2 || points.len() < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += sq_dist(p, q).sqrt();
            }
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

/// SSE and silhouette of k-means fits over a range of K, for choosing K by hand.
#[derive(Clone, Debug, Serialize)]
pub struct KScan {
    pub k: usize,
    pub sse: f64,
    pub silhouette: f64,
}

pub fn inspect_k(points: &[Vec<f64>], ks: impl IntoIterator<Item = usize>, seed: u64) -> Result<Vec<KScan>> {
    ks.into_iter()
        .map(|k| {
            let fit = kmeans_fit_detailed(points, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
            Ok(KScan {
                k,
                sse: fit.sse(),
                silhouette: silhouette(points, &fit.labels, k),
            })
        })
        .collect()
}
