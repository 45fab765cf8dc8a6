//! Value-embedding conditioned network.
//!
//! An annotation's cluster set S selects rows of a learned value table whose
//! sum is added to the item embedding. The fused vector goes through one
//! tanh hidden layer and a bias-free linear output, giving a shared logit
//! `g`. Task heads then add their own biases:
//!
//! * binary: `σ(g + b)`
//! * ordinal (CORAL): `σ(g + b₁)`, `σ(g + b₁ − δ)` with `δ = δ_raw² ≥ 0`
//! * preference: `σ((g(a) − g(b)) / t(S))`, `t(S)` the mean of `exp(log_tₖ)` over S

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::{sigmoid, Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mcstl-checkpoint/1";
pub const DEFAULT_HIDDEN: usize = 64;

/// A named parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    ValueTable,
    HiddenWeights,
    HiddenBias,
    OutputWeights,
    HeadBias,
    Delta,
    LogTemps,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::ValueTable,
        Block::HiddenWeights,
        Block::HiddenBias,
        Block::OutputWeights,
        Block::HeadBias,
        Block::Delta,
        Block::LogTemps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::ValueTable => "value_table",
            Block::HiddenWeights => "hidden_weights",
            Block::HiddenBias => "hidden_bias",
            Block::OutputWeights => "output_weights",
            Block::HeadBias => "head_bias",
            Block::Delta => "delta",
            Block::LogTemps => "log_temps",
        }
    }
}

/// Every trainable tensor, flat and row-major. Also used for gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// K×d value embeddings.
    pub value_table: Vec<f64>,
    /// h×d hidden layer weights.
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// h output weights; the output layer has no bias.
    pub output_weights: Vec<f64>,
    /// `b` (binary) or `b₁` (ordinal); unused for preference.
    pub head_bias: f64,
    /// Ordinal threshold gap parameter, `δ = delta_raw²`.
    pub delta_raw: f64,
    pub log_temps: Vec<f64>,
}

impl Weights {
    pub fn zeros_like(&self) -> Weights {
        Weights {
            value_table: vec![0.0; self.value_table.len()],
            hidden_weights: vec![0.0; self.hidden_weights.len()],
            hidden_bias: vec![0.0; self.hidden_bias.len()],
            output_weights: vec![0.0; self.output_weights.len()],
            head_bias: 0.0,
            delta_raw: 0.0,
            log_temps: vec![0.0; self.log_temps.len()],
        }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::ValueTable => &self.value_table,
            Block::HiddenWeights => &self.hidden_weights,
            Block::HiddenBias => &self.hidden_bias,
            Block::OutputWeights => &self.output_weights,
            Block::HeadBias => std::slice::from_ref(&self.head_bias),
            Block::Delta => std::slice::from_ref(&self.delta_raw),
            Block::LogTemps => &self.log_temps,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        match b {
            Block::ValueTable => &mut self.value_table,
            Block::HiddenWeights => &mut self.hidden_weights,
            Block::HiddenBias => &mut self.hidden_bias,
            Block::OutputWeights => &mut self.output_weights,
            Block::HeadBias => std::slice::from_mut(&mut self.head_bias),
            Block::Delta => std::slice::from_mut(&mut self.delta_raw),
            Block::LogTemps => &mut self.log_temps,
        }
    }
}

/// Intermediate values of one trunk evaluation, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct TrunkPass {
    /// `e(x) + V(S)`.
    pub input: Vec<f64>,
    /// tanh activations of the hidden layer.
    pub hidden: Vec<f64>,
    pub logit: f64,
}

/// Ordinal head output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdinalPrediction {
    /// `P(y > Low)`.
    pub p1: f64,
    /// `P(y > Neutral)`.
    pub p2: f64,
    /// `[P_Low, P_Neutral, P_High]`.
    pub classes: [f64; 3],
}

impl OrdinalPrediction {
    pub fn from_cumulative(p1: f64, p2: f64) -> Self {
        OrdinalPrediction {
            p1,
            p2,
            classes: [1.0 - p1, p1 - p2, p2],
        }
    }
}

/// Model parameters plus the shape metadata needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub task: Task,
    pub dim: usize,
    pub hidden: usize,
    /// One id per value-table row; empty for models trained without clusters.
    pub cluster_ids: Vec<String>,
    pub weights: Weights,
}

impl ModelParams {
    /// Glorot-uniform trunk weights, zero value table and biases, `δ = 1`,
    /// unit temperatures.
    pub fn init(dim: usize, hidden: usize, cluster_ids: Vec<String>, task: Task, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let k = cluster_ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let hidden_weights = glorot(dim, hidden, hidden * dim);
        let output_weights = glorot(hidden, 1, hidden);
        Ok(ModelParams {
            task,
            dim,
            hidden,
            weights: Weights {
                value_table: vec![0.0; k * dim],
                hidden_weights,
                hidden_bias: vec![0.0; hidden],
                output_weights,
                head_bias: 0.0,
                delta_raw: if task == Task::Ordinal3 { 1.0 } else { 0.0 },
                log_temps: if task == Task::Preference { vec![0.0; k] } else { Vec::new() },
            },
            cluster_ids,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    /// Blocks that carry parameters for this task and cluster count.
    pub fn active_blocks(&self) -> Vec<Block> {
        Block::ALL
            .into_iter()
            .filter(|&b| match b {
                Block::ValueTable => self.num_clusters() > 0,
                Block::HeadBias => self.task != Task::Preference,
                Block::Delta => self.task == Task::Ordinal3,
                Block::LogTemps => self.task == Task::Preference && self.num_clusters() > 0,
                _ => true,
            })
            .collect()
    }

    /// Ordinal threshold gap `b₁ − b₂`.
    pub fn delta(&self) -> f64 {
        self.weights.delta_raw * self.weights.delta_raw
    }

    /// `(b₁, b₂)` for the ordinal head.
    pub fn ordinal_biases(&self) -> (f64, f64) {
        let b1 = self.weights.head_bias;
        (b1, b1 - self.delta())
    }

    pub fn value_row(&self, k: usize) -> &[f64] {
        &self.weights.value_table[k * self.dim..(k + 1) * self.dim]
    }

    fn check_set(&self, s: &[usize]) -> Result<()> {
        if s.is_empty() {
            return Err(Error::invalid("empty cluster set"));
        }
        let k = self.num_clusters();
        match s.iter().find(|&&i| i >= k) {
            Some(&index) => Err(Error::ClusterIndexOutOfRange { index, k }),
            None => Ok(()),
        }
    }

    /// `V(S) = Σ_{k∈S} v_k`.
    pub fn value_embedding_sum(&self, s: &[usize]) -> Result<Vec<f64>> {
        self.check_set(s)?;
        let mut out = vec![0.0; self.dim];
        for &k in s {
            for (o, v) in out.iter_mut().zip(self.value_row(k)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Runs the trunk on `x + V(S)`. Models without clusters ignore `s`.
    pub fn trunk_forward(&self, x: &[f64], s: &[usize]) -> Result<TrunkPass> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
                context: "item embedding".into(),
            });
        }
        let mut input = x.to_vec();
        if self.num_clusters() > 0 {
            for (i, v) in input.iter_mut().zip(self.value_embedding_sum(s)?) {
                *i += v;
            }
        }
        let w = &self.weights;
        let mut hidden = Vec::with_capacity(self.hidden);
        let mut logit = 0.0;
        for j in 0..self.hidden {
            let row = &w.hidden_weights[j * self.dim..(j + 1) * self.dim];
            let pre: f64 = w.hidden_bias[j] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
            let a = pre.tanh();
            logit += w.output_weights[j] * a;
            hidden.push(a);
        }
        Ok(TrunkPass { input, hidden, logit })
    }

    /// Accumulates `d_logit · ∂logit/∂θ` into `grads`.
    pub fn trunk_backward(&self, pass: &TrunkPass, s: &[usize], d_logit: f64, grads: &mut Weights) {
        let w = &self.weights;
        let d = self.dim;
        let mut d_input = vec![0.0; d];
        for j in 0..self.hidden {
            let a = pass.hidden[j];
            grads.output_weights[j] += d_logit * a;
            let d_pre = d_logit * w.output_weights[j] * (1.0 - a * a);
            grads.hidden_bias[j] += d_pre;
            let row = &w.hidden_weights[j * d..(j + 1) * d];
            let g_row = &mut grads.hidden_weights[j * d..(j + 1) * d];
            for i in 0..d {
                g_row[i] += d_pre * pass.input[i];
                d_input[i] += d_pre * row[i];
            }
        }
        if self.num_clusters() > 0 {
            for &k in s {
                for (g, di) in grads.value_table[k * d..(k + 1) * d].iter_mut().zip(&d_input) {
                    *g += di;
                }
            }
        }
    }

    /// Shared logit `o(e(x) + V(S))`.
    pub fn trunk_logit(&self, x: &[f64], s: &[usize]) -> Result<f64> {
        Ok(self.trunk_forward(x, s)?.logit)
    }

    pub fn forward_binary(&self, x: &[f64], s: &[usize]) -> Result<f64> {
        Ok(sigmoid(self.trunk_logit(x, s)? + self.weights.head_bias))
    }

    pub fn forward_ordinal(&self, x: &[f64], s: &[usize]) -> Result<OrdinalPrediction> {
        let z1 = self.trunk_logit(x, s)? + self.weights.head_bias;
        let z2 = z1 - self.delta();
        Ok(OrdinalPrediction::from_cumulative(sigmoid(z1), sigmoid(z2)))
    }

    /// Temperature for a cluster set: mean of `exp(log_tₖ)` over S (1 without clusters).
    pub fn temperature(&self, s: &[usize]) -> Result<f64> {
        if self.num_clusters() == 0 || self.weights.log_temps.is_empty() {
            return Ok(1.0);
        }
        self.check_set(s)?;
        Ok(s.iter().map(|&k| self.weights.log_temps[k].exp()).sum::<f64>() / s.len() as f64)
    }

    /// Probability that item `a` is preferred over item `b`.
    pub fn forward_preference(&self, a: &[f64], b: &[f64], s: &[usize]) -> Result<f64> {
        let gap = self.trunk_logit(a, s)? - self.trunk_logit(b, s)?;
        Ok(sigmoid(gap / self.temperature(s)?))
    }

    /// Class distribution for one annotation (2 or 3 entries).
    pub fn class_distribution(&self, x: &[f64], x_b: Option<&[f64]>, s: &[usize]) -> Result<Vec<f64>> {
        match self.task {
            Task::Binary => {
                let p = self.forward_binary(x, s)?;
                Ok(vec![1.0 - p, p])
            }
            Task::Ordinal3 => Ok(self.forward_ordinal(x, s)?.classes.to_vec()),
            Task::Preference => {
                let b = x_b.ok_or_else(|| Error::invalid("preference prediction needs a second item"))?;
                let p = self.forward_preference(x, b, s)?;
                Ok(vec![1.0 - p, p])
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let rows = |flat: &[f64], width: usize| -> Vec<Vec<f64>> {
            flat.chunks(width.max(1)).map(<[f64]>::to_vec).collect()
        };
        let w = &self.weights;
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            task: self.task,
            dim: self.dim,
            hidden: self.hidden,
            num_clusters: self.num_clusters(),
            cluster_ids: self.cluster_ids.clone(),
            value_table: (self.num_clusters() > 0).then(|| rows(&w.value_table, self.dim)),
            hidden_weights: rows(&w.hidden_weights, self.dim),
            hidden_bias: w.hidden_bias.clone(),
            output_weights: w.output_weights.clone(),
            head_bias: (self.task != Task::Preference).then_some(w.head_bias),
            delta_raw: (self.task == Task::Ordinal3).then_some(w.delta_raw),
            log_temps: (self.task == Task::Preference && self.num_clusters() > 0).then(|| w.log_temps.clone()),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {:?}", c.format)));
        }
        if c.dim == 0 || c.hidden == 0 {
            return Err(Error::invalid("checkpoint dimensions must be positive"));
        }
        if c.cluster_ids.len() != c.num_clusters {
            return Err(Error::DimensionMismatch {
                expected: c.num_clusters,
                found: c.cluster_ids.len(),
                context: "checkpoint cluster_ids".into(),
            });
        }
        let flatten = |rows: Vec<Vec<f64>>, n_rows: usize, width: usize, what: &str| -> Result<Vec<f64>> {
            if rows.len() != n_rows || rows.iter().any(|r| r.len() != width) {
                return Err(Error::invalid(format!(
                    "checkpoint {what} must be {n_rows}x{width}"
                )));
            }
            Ok(rows.into_iter().flatten().collect())
        };
        let exact = |v: Vec<f64>, n: usize, what: &str| -> Result<Vec<f64>> {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: v.len(),
                    context: format!("checkpoint {what}"),
                });
            }
            Ok(v)
        };
        let k = c.num_clusters;
        let value_table = match c.value_table {
            Some(rows) => flatten(rows, k, c.dim, "value_table")?,
            None if k == 0 => Vec::new(),
            None => return Err(Error::invalid("checkpoint with clusters lacks a value_table")),
        };
        let log_temps = match (c.task, c.log_temps) {
            (Task::Preference, Some(t)) => exact(t, k, "log_temps")?,
            (Task::Preference, None) if k == 0 => Vec::new(),
            (Task::Preference, None) => return Err(Error::invalid("preference checkpoint lacks log_temps")),
            (_, Some(_)) => return Err(Error::invalid("log_temps only belong to preference checkpoints")),
            (_, None) => Vec::new(),
        };
        let params = ModelParams {
            task: c.task,
            dim: c.dim,
            hidden: c.hidden,
            cluster_ids: c.cluster_ids,
            weights: Weights {
                value_table,
                hidden_weights: flatten(c.hidden_weights, c.hidden, c.dim, "hidden_weights")?,
                hidden_bias: exact(c.hidden_bias, c.hidden, "hidden_bias")?,
                output_weights: exact(c.output_weights, c.hidden, "output_weights")?,
                head_bias: c.head_bias.unwrap_or(0.0),
                delta_raw: match c.task {
                    Task::Ordinal3 => c
                        .delta_raw
                        .ok_or_else(|| Error::invalid("ordinal checkpoint lacks delta_raw"))?,
                    _ => 0.0,
                },
                log_temps,
            },
        };
        for b in Block::ALL {
            if params.weights.block(b).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint {}", b.name())));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// On-disk checkpoint layout. Matrices are stored as arrays of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub task: Task,
    pub dim: usize,
    pub hidden: usize,
    pub num_clusters: usize,
    pub cluster_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_table: Option<Vec<Vec<f64>>>,
    pub hidden_weights: Vec<Vec<f64>>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_temps: Option<Vec<f64>>,
}
