//! Seeded synthetic datasets with planted value clusters.
//!
//! Every item has a latent score `z ~ N(0, 1)` that is linearly encoded in
//! its embedding. Each annotation belongs to a planted cluster (or a pair of
//! clusters with probability `mixed_prob`) and its label depends on both:
//! `P(y = 1) = σ(a_k + β z)`, with the intercept `a_k` solved so that the
//! population rate of cluster `k` equals its configured rate. Ordinal labels
//! use two cumulative intercepts per cluster; preference pairs use
//! `σ(c_k + β (z_a − z_b) / √2)`, where `c_k` acts through a style
//! direction that separates the first item of every pair from the second.
//! Rationale embeddings sit near per-cluster anchors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationRecord, Dataset, LabelValue, Task};
use crate::{sigmoid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub k: usize,
    pub items: usize,
    pub annotations_per_item: usize,
    /// Per-cluster label rates: `[θ_k]` for binary/preference, `[π_low, π_neutral, π_high]` for ordinal.
    pub rates: Vec<Vec<f64>>,
    pub dim: usize,
    pub rationale_dim: usize,
    /// Distance scale of the rationale anchors.
    pub separation: f64,
    /// Per-coordinate standard deviation of rationale noise.
    pub rationale_noise: f64,
    /// Per-coordinate standard deviation of item-embedding noise.
    pub embedding_noise: f64,
    /// Probability that an annotation belongs to two clusters.
    pub mixed_prob: f64,
    /// Strength `β` of the item latent score.
    pub latent_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Binary spec with the given per-cluster rates and default geometry.
    pub fn binary(rates: &[f64], items: usize, annotations_per_item: usize, seed: u64) -> Self {
        SynthSpec {
            task: Task::Binary,
            k: rates.len(),
            items,
            annotations_per_item,
            rates: rates.iter().map(|&r| vec![r]).collect(),
            dim: 8,
            rationale_dim: 16,
            separation: 4.0,
            rationale_noise: 0.5,
            embedding_noise: 0.1,
            mixed_prob: 0.0,
            latent_scale: 2.0,
            seed,
        }
    }

    pub fn ordinal(dists: &[[f64; 3]], items: usize, annotations_per_item: usize, seed: u64) -> Self {
        SynthSpec {
            task: Task::Ordinal3,
            k: dists.len(),
            rates: dists.iter().map(|d| d.to_vec()).collect(),
            ..Self::binary(&[], items, annotations_per_item, seed)
        }
    }

    pub fn preference(rates: &[f64], items: usize, annotations_per_item: usize, seed: u64) -> Self {
        SynthSpec {
            task: Task::Preference,
            ..Self::binary(rates, items, annotations_per_item, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.rates.len() != self.k {
            return Err(Error::invalid(format!(
                "need one rate entry per cluster (k = {}, got {})",
                self.k,
                self.rates.len()
            )));
        }
        if self.items == 0 || self.annotations_per_item == 0 || self.dim == 0 || self.rationale_dim == 0 {
            return Err(Error::invalid("items, annotations, and dimensions must be positive"));
        }
        if self.task == Task::Preference && self.dim < 2 {
            return Err(Error::invalid("preference data needs dim >= 2"));
        }
        let width = match self.task {
            Task::Ordinal3 => 3,
            _ => 1,
        };
        for r in &self.rates {
            if r.len() != width || r.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                return Err(Error::invalid(format!("invalid rate entry {r:?}")));
            }
            if width == 3 && (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("category distribution {r:?} does not sum to 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.mixed_prob) {
            return Err(Error::invalid("mixed_prob must lie in [0, 1]"));
        }
        if self.mixed_prob > 0.0 && self.k < 2 {
            return Err(Error::invalid("mixed membership needs k >= 2"));
        }
        if !(self.separation > 0.0 && self.rationale_noise >= 0.0 && self.embedding_noise >= 0.0 && self.latent_scale >= 0.0) {
            return Err(Error::invalid("geometry parameters must be non-negative (separation positive)"));
        }
        Ok(())
    }
}

/// A generated dataset plus the planted cluster of every record.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Planted cluster indices per record (also written to each record's `clusters`).
    pub planted: Vec<Vec<usize>>,
    /// Class distribution each label was drawn from, per record.
    pub true_probs: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<f64>>,
}

/// Cluster id used for planted cluster `k`.
pub fn planted_id(k: usize) -> String {
    format!("c{k}")
}

/// `E_z[σ(a + β z)]` for `z ~ N(0, 1)`, by composite Simpson quadrature on [−10, 10].
pub fn expected_rate(intercept: f64, beta: f64) -> f64 {
    const N: usize = 4000;
    let (lo, hi) = (-10.0f64, 10.0f64);
    let h = (hi - lo) / N as f64;
    let f = |z: f64| sigmoid(intercept + beta * z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(lo) + f(hi);
    for i in 1..N {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Intercept `a` with `E_z[σ(a + β z)] = rate`.
pub fn solve_intercept(rate: f64, beta: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_rate(mid, beta) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * sd
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Orthonormal directions when `count <= dim`, otherwise independent random unit vectors.
fn directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = normal_vec(rng, dim, 1.0);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            out.push(unit(v));
        }
    }
    out
}

/// Generates a dataset from `spec`; deterministic given `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let beta = spec.latent_scale;

    let anchors: Vec<Vec<f64>> = directions(&mut rng, spec.k, spec.rationale_dim)
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * spec.separation).collect())
        .collect();
    let axes = directions(&mut rng, 2, spec.dim);
    let (latent_dir, style_dir) = (&axes[0], &axes[1]);

    // Per-cluster intercepts: one per sub-task threshold.
    let intercepts: Vec<Vec<f64>> = spec
        .rates
        .iter()
        .map(|r| match spec.task {
            Task::Ordinal3 => vec![solve_intercept(r[1] + r[2], beta), solve_intercept(r[2], beta)],
            _ => vec![solve_intercept(r[0], beta)],
        })
        .collect();

    let embed = |rng: &mut ChaCha8Rng, z: f64, style: f64| -> Vec<f64> {
        let noise = normal_vec(rng, spec.dim, spec.embedding_noise);
        (0..spec.dim)
            .map(|i| z * latent_dir[i] + style * style_dir[i] + noise[i])
            .collect()
    };

    let mut records = Vec::with_capacity(spec.items * spec.annotations_per_item);
    let mut planted = Vec::with_capacity(records.capacity());
    let mut true_probs = Vec::with_capacity(records.capacity());
    for item in 0..spec.items {
        let item_id = format!("item-{item:05}");
        let (z, x, x_b) = match spec.task {
            Task::Preference => {
                let za: f64 = StandardNormal.sample(&mut rng);
                let zb: f64 = StandardNormal.sample(&mut rng);
                let xa = embed(&mut rng, za, 1.0);
                let xb = embed(&mut rng, zb, -1.0);
                ((za - zb) / std::f64::consts::SQRT_2, xa, Some(xb))
            }
            _ => {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = embed(&mut rng, z, 0.0);
                (z, x, None)
            }
        };
        for _ in 0..spec.annotations_per_item {
            let first = rng.gen_range(0..spec.k);
            let mut set = vec![first];
            if spec.mixed_prob > 0.0 && rng.gen_bool(spec.mixed_prob) {
                let mut second = rng.gen_range(0..spec.k - 1);
                if second >= first {
                    second += 1;
                }
                set.push(second);
                set.sort_unstable();
            }
            let intercept = |t: usize| set.iter().map(|&c| intercepts[c][t]).sum::<f64>() / set.len() as f64;
            let u: f64 = rng.gen();
            // Cumulative P(y > s) per sub-task; the label counts the thresholds `u` falls under.
            let cumulative: Vec<f64> = (0..spec.task.num_subtasks())
                .map(|t| sigmoid(intercept(t) + beta * z))
                .collect();
            let code = cumulative.iter().filter(|&&p| u < p).count() as i64;
            let probs = match cumulative[..] {
                [p1, p2] => vec![1.0 - p1, p1 - p2, p2],
                _ => vec![1.0 - cumulative[0], cumulative[0]],
            };
            let noise = normal_vec(&mut rng, spec.rationale_dim, spec.rationale_noise);
            let rationale: Vec<f64> = (0..spec.rationale_dim)
                .map(|i| set.iter().map(|&c| anchors[c][i]).sum::<f64>() / set.len() as f64 + noise[i])
                .collect();
            let mut rec = AnnotationRecord::new(
                item_id.clone(),
                LabelValue::new(code, spec.task).expect("generated label in range"),
                x.clone(),
            );
            rec.embedding_b = x_b.clone();
            rec.rationale_embedding = Some(rationale);
            rec.clusters = Some(set.iter().map(|&c| planted_id(c)).collect());
            records.push(rec);
            planted.push(set);
            true_probs.push(probs);
        }
    }
    Ok(SynthOutput {
        dataset: Dataset::new(spec.task, records)?,
        planted,
        true_probs,
        anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_reproduces_rate() {
        for &rate in &[0.2, 0.5, 0.8] {
            let a = solve_intercept(rate, 2.0);
            assert!((expected_rate(a, 2.0) - rate).abs() < 1e-9);
        }
        assert!(solve_intercept(0.5, 2.0).abs() < 1e-9);
        // β = 0 reduces to the plain logit.
        assert!((solve_intercept(0.2, 0.0) - (0.2f64 / 0.8).ln()).abs() < 1e-9);
    }

    #[test]
    fn empirical_rates_match_planted_rates() {
        let spec = SynthSpec::binary(&[0.2, 0.8], 200, 10, 17);
        let out = generate(&spec).unwrap();
        let mut pos = [0.0; 2];
        let mut n = [0.0; 2];
        for (r, set) in out.dataset.records().iter().zip(&out.planted) {
            n[set[0]] += 1.0;
            pos[set[0]] += r.label.subtask_target(0);
        }
        for (c, &theta) in [0.2, 0.8].iter().enumerate() {
            let rate = pos[c] / n[c];
            assert!((rate - theta).abs() <= 0.05, "cluster {c}: {rate}");
        }
    }

    #[test]
    fn byte_identical_for_fixed_seed() {
        let spec = SynthSpec::binary(&[0.3, 0.6], 30, 3, 5);
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate(&spec).unwrap().dataset.write_to(&mut a).unwrap();
        generate(&spec).unwrap().dataset.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 6;
        let mut c = Vec::new();
        generate(&other).unwrap().dataset.write_to(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixed_membership_toggle() {
        let spec = SynthSpec::binary(&[0.3, 0.6, 0.5], 50, 4, 1);
        assert!(generate(&spec).unwrap().planted.iter().all(|s| s.len() == 1));
        let mixed = SynthSpec { mixed_prob: 0.5, ..spec };
        let out = generate(&mixed).unwrap();
        assert!(out.planted.iter().any(|s| s.len() == 2));
        assert!(out.planted.iter().all(|s| s.len() <= 2 && (s.len() == 1 || s[0] != s[1])));
    }

    #[test]
    fn ordinal_and_preference_generate_valid_data() {
        let ord = SynthSpec::ordinal(&[[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]], 40, 5, 2);
        let ds = generate(&ord).unwrap().dataset;
        assert_eq!(ds.task(), Task::Ordinal3);
        assert!(ds.records().iter().any(|r| r.label == LabelValue::NEUTRAL));
        let pref = SynthSpec::preference(&[0.3, 0.7], 40, 5, 2);
        let ds = generate(&pref).unwrap().dataset;
        assert!(ds.records().iter().all(|r| r.embedding_b.is_some()));
    }

    #[test]
    fn true_probs_are_distributions() {
        let ord = SynthSpec::ordinal(&[[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]], 30, 4, 3);
        let out = generate(&ord).unwrap();
        assert_eq!(out.true_probs.len(), out.dataset.len());
        for p in &out.true_probs {
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&SynthSpec::binary(&[1.2], 10, 2, 0)).is_err());
        assert!(generate(&SynthSpec::ordinal(&[[0.5, 0.4, 0.3]], 10, 2, 0)).is_err());
        let mut s = SynthSpec::binary(&[0.5], 10, 2, 0);
        s.mixed_prob = 0.3;
        assert!(generate(&s).is_err());
    }
}
