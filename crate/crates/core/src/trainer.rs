//! Optimizer loop, baseline variants and finite-difference gradient checks.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, ClusterModel, ClusterStats};
use crate::corpus::{majority_filter, Dataset, Task};
use crate::loss::{composite_loss, composite_loss_and_grad, LossBreakdown, LossConfig, TrainingSet};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Block, ModelParams, Weights, DEFAULT_HIDDEN};
use crate::{Error, Result};

/// Which model is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Value-cluster embeddings with the multicalibration loss.
    Mcstl,
    /// Same trunk without any cluster information.
    Phi,
    /// Like `Phi`, trained only on annotations that agree with their item's majority.
    Majority,
}

impl Variant {
    pub fn uses_clusters(self) -> bool {
        self == Variant::Mcstl
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mcstl => "mcstl",
            Variant::Phi => "phi",
            Variant::Majority => "majority",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcstl" => Ok(Variant::Mcstl),
            "phi" => Ok(Variant::Phi),
            "majority" => Ok(Variant::Majority),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate on the held-out set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Use the whole training set as one batch.
    pub full_batch: bool,
}

impl TrainConfig {
    pub fn new(task: Task, variant: Variant) -> Self {
        TrainConfig {
            task,
            variant,
            epochs: 300,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 0,
            full_batch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("invalid optimizer hyperparameters"));
        }
        self.loss.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

/// Headline numbers of a periodic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub overall: f64,
    pub calibration_mean_slope: Option<f64>,
    pub calibration_mean_bias: Option<f64>,
    pub one_minus_emd: f64,
}

impl From<&EvalReport> for EvalSnapshot {
    fn from(r: &EvalReport) -> Self {
        EvalSnapshot {
            overall: r.overall,
            calibration_mean_slope: r.calibration_mean_slope,
            calibration_mean_bias: r.calibration_mean_bias,
            one_minus_emd: r.one_minus_emd,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|r| &r.loss)
    }
}

/// Held-out data for periodic evaluation during training.
pub struct HeldOut<'a> {
    pub dataset: &'a Dataset,
    pub assignment: &'a ClusterAssignment,
    pub cluster_model: &'a ClusterModel,
}

/// Exact gradient of the configured composite loss on one batch.
pub fn compute_gradients(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Weights)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    composite_loss_and_grad(params, set, batch, stats, cfg)
}

struct Adam {
    m: Weights,
    v: Weights,
    step: i32,
}

impl Adam {
    fn new(like: &Weights) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grad: &Weights, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for b in params.active_blocks() {
            let g = grad.block(b);
            let m = self.m.block_mut(b);
            let v = self.v.block_mut(b);
            let theta = params.weights.block_mut(b);
            for i in 0..theta.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Trains a model.
///
/// `mcstl` needs a cluster model with statistics and the training assignment;
/// `phi` and `majority` ignore both and train without a value table
/// (`majority` first drops annotations that disagree with their item's
/// majority label). Batches are reshuffled every epoch from `cfg.seed`.
pub fn train(
    train_ds: &Dataset,
    clusters: Option<(&ClusterModel, &ClusterAssignment)>,
    cfg: &TrainConfig,
    held_out: Option<HeldOut<'_>>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train_ds.task() != cfg.task {
        return Err(Error::TaskMismatch {
            left: train_ds.task(),
            right: cfg.task,
        });
    }
    let filtered;
    let (data, set, stats, cluster_ids) = match cfg.variant {
        Variant::Mcstl => {
            let (model, assignment) = clusters.ok_or_else(|| Error::invalid("mcstl training needs cluster assignments"))?;
            let stats = model
                .stats
                .as_ref()
                .ok_or_else(|| Error::invalid("cluster model has no statistics; run compute_stats first"))?;
            if stats.task != cfg.task {
                return Err(Error::TaskMismatch { left: stats.task, right: cfg.task });
            }
            let set = TrainingSet::from_dataset(train_ds, Some(assignment))?;
            (train_ds, set, Some(stats), model.cluster_ids.clone())
        }
        Variant::Phi => (train_ds, TrainingSet::from_dataset(train_ds, None)?, None, Vec::new()),
        Variant::Majority => {
            filtered = majority_filter(train_ds)?;
            let set = TrainingSet::from_dataset(&filtered, None)?;
            (&filtered, set, None, Vec::new())
        }
    };
    if set.is_empty() {
        return Err(Error::invalid("no training annotations"));
    }

    let mut params = ModelParams::init(data.dim(), cfg.hidden, cluster_ids, cfg.task, cfg.seed)?;
    let mut adam = Adam::new(&params.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let batch_size = if cfg.full_batch { set.len() } else { cfg.batch_size };
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        if !cfg.full_batch {
            order.shuffle(&mut rng);
        }
        let last_good = params.clone();
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(batch_size) {
            let (loss, grad) = match compute_gradients(&params, &set, batch, stats, &cfg.loss) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            epoch_loss.accumulate(&loss);
            adam.update(&mut params, &grad, cfg);
        }
        if !epoch_loss.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        let eval = match &held_out {
            Some(h) if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) => {
                let report = evaluate(h.dataset, h.assignment, &params, h.cluster_model)?;
                Some(EvalSnapshot::from(&report))
            }
            _ => None,
        };
        log::debug!("epoch {epoch}: loss {:.6}", epoch_loss.total);
        log.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            eval,
        });
    }
    Ok((params, log))
}

/// Finite-difference comparison for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: Block,
    pub entries: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub passed: bool,
    /// True for blocks without parameters.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are compared against finite-difference rounding noise
/// rather than against zero.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Central-difference check of the analytic gradient on one batch.
pub fn grad_check(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = compute_gradients(params, set, batch, stats, cfg)?;
    grad_check_against(params, &analytic, set, batch, stats, cfg, step, tolerance)
}

/// Like [`grad_check`] but compares against a caller-supplied gradient.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_against(
    params: &ModelParams,
    analytic: &Weights,
    set: &TrainingSet,
    batch: &[usize],
    stats: Option<&ClusterStats>,
    cfg: &LossConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let active = params.active_blocks();
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    for b in Block::ALL {
        let n = params.weights.block(b).len();
        if !active.contains(&b) || n == 0 {
            blocks.push(BlockCheck {
                block: b,
                entries: 0,
                max_rel_error: 0.0,
                passed: true,
                skipped: true,
            });
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.weights.block(b)[i];
            probe.weights.block_mut(b)[i] = orig + step;
            let plus = composite_loss(&probe, set, batch, stats, cfg)?.total;
            probe.weights.block_mut(b)[i] = orig - step;
            let minus = composite_loss(&probe, set, batch, stats, cfg)?.total;
            probe.weights.block_mut(b)[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.block(b)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
        }
        blocks.push(BlockCheck {
            block: b,
            entries: n,
            max_rel_error: worst,
            passed: worst < tolerance,
            skipped: false,
        });
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        blocks,
    })
}
