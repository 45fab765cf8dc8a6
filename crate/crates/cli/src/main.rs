//! `mcstl`: cluster annotations into value groups, train cluster-conditioned
//! predictors and evaluate them.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcstl_core::clustering::{
    assign_dataset, compute_stats, inspect_k, kmeans_fit_detailed, ClusterAssignment, ClusterMode, ClusterModel,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use mcstl_core::corpus::{load_dataset_with, stratified_split, Dataset, LoadOptions, Task};
use mcstl_core::featurize;
use mcstl_core::loss::{LossConfig, TrainingSet, DEFAULT_LAMBDA2, DEFAULT_SHARPNESS};
use mcstl_core::metrics::evaluate;
use mcstl_core::model::{ModelParams, DEFAULT_HIDDEN};
use mcstl_core::synthgen::{generate, SynthSpec};
use mcstl_core::trainer::{grad_check, train, HeldOut, TrainConfig, Variant};
use mcstl_core::PROB_EPS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::Settings;

#[derive(Parser, Debug)]
#[command(name = "mcstl", version, about = "Value-cluster conditioned learning for subjective labels")]
struct Cli {
    /// Settings file (TOML); explicit flags override its values.
    #[arg(long, global = true, env = "MCSTL_CONFIG")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted value clusters.
    Synth(SynthArgs),
    /// Stratified item-level train/test split.
    Split(SplitArgs),
    /// Fit a cluster model on training annotations and record its statistics.
    Cluster(ClusterArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Report k-means SSE and silhouette for a range of K.
    #[command(name = "inspect-k")]
    InspectK(InspectKArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Cluster(_) => "cluster",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::InspectK(_) => "inspect-k",
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Annotation records (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// binary | ordinal | preference
    #[arg(long)]
    task: Option<String>,
    /// Embedding size for records given as raw text.
    #[arg(long)]
    featurizer_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    task: Option<String>,
    /// Number of clusters; must match the number of rate entries when given.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    /// Annotations per item.
    #[arg(long)]
    annotations: Option<usize>,
    /// Per-cluster rates: `0.2,0.5,0.8`, or for ordinal `0.6,0.3,0.1;0.1,0.3,0.6`.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    rationale_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    rationale_noise: Option<f64>,
    #[arg(long)]
    embedding_noise: Option<f64>,
    #[arg(long)]
    mixed_prob: Option<f64>,
    #[arg(long)]
    latent_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    /// rationale | taxonomy | sociocultural
    #[arg(long)]
    mode: Option<String>,
    /// Number of clusters (rationale mode).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Where to write the cluster model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// mcstl | phi | majority
    #[arg(long)]
    variant: Option<String>,
    /// Cluster model from `cluster` (required for mcstl).
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// KL weight; defaults to the task's rule based on annotations per item.
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Soft-threshold sharpness.
    #[arg(long)]
    sharpness: Option<f64>,
    /// Use the whole training set as one batch (`--full-batch=false` to override a config).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    full_batch: Option<bool>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Held-out set for periodic evaluation (needs --clusters).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Text report path (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Machine-readable report path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-group calibration bin points as CSV.
    #[arg(long)]
    dump_calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check on this dataset instead of a generated one (needs --clusters for mcstl models).
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Start from this checkpoint instead of random parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of random parameter/batch draws.
    #[arg(long)]
    draws: Option<usize>,
    /// Annotations per batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InspectKArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(path) => config::load(path, cli.command.name())?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Synth(a) => run_synth(a, &settings),
        Command::Split(a) => run_split(a, &settings),
        Command::Cluster(a) => run_cluster(a, &settings),
        Command::Train(a) => run_train(a, &settings),
        Command::Eval(a) => run_eval(a, &settings),
        Command::Gradcheck(a) => run_gradcheck(a, &settings),
        Command::InspectK(a) => run_inspect_k(a, &settings),
    }
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("missing --{flag} (flag or config key)"))
}

fn parse_task(flag: Option<&String>, cfg: &Settings) -> Result<Task> {
    let raw = need(flag.or(cfg.task.as_ref()), "task")?;
    Ok(raw.parse()?)
}

fn load_data(a: &DataArgs, cfg: &Settings) -> Result<(Dataset, Task)> {
    let task = parse_task(a.task.as_ref(), cfg)?;
    let path = need(a.data.clone().or(cfg.data.clone()), "data")?;
    let opts = LoadOptions {
        featurizer_dim: a.featurizer_dim.or(cfg.featurizer_dim).unwrap_or(featurize::DEFAULT_DIM),
        ..LoadOptions::default()
    };
    let ds = load_dataset_with(&path, task, &opts)?;
    log::info!("loaded {} annotations over {} items from {}", ds.len(), ds.num_items(), path.display());
    Ok((ds, task))
}

fn load_path_dataset(path: &Path, task: Task, a: &DataArgs, cfg: &Settings) -> Result<Dataset> {
    let opts = LoadOptions {
        featurizer_dim: a.featurizer_dim.or(cfg.featurizer_dim).unwrap_or(featurize::DEFAULT_DIM),
        ..LoadOptions::default()
    };
    Ok(load_dataset_with(path, task, &opts)?)
}

fn parse_rates(raw: &str, task: Task) -> Result<Vec<Vec<f64>>> {
    let parse_list = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad rate {v:?}")))
            .collect()
    };
    match task {
        Task::Ordinal3 => raw.split(';').map(parse_list).collect(),
        _ => Ok(parse_list(raw)?.into_iter().map(|r| vec![r]).collect()),
    }
}

fn run_synth(a: SynthArgs, cfg: &Settings) -> Result<()> {
    let task = parse_task(a.task.as_ref(), cfg)?;
    let rates = parse_rates(&need(a.rates.or(cfg.rates.clone()), "rates")?, task)?;
    if let Some(k) = a.k.or(cfg.k) {
        if k != rates.len() {
            bail!("--k {k} does not match the {} rate entries", rates.len());
        }
    }
    let base = SynthSpec::binary(&[], 0, 0, 0);
    let spec = SynthSpec {
        task,
        k: rates.len(),
        items: need(a.items.or(cfg.items), "items")?,
        annotations_per_item: need(a.annotations.or(cfg.annotations), "annotations")?,
        rates,
        dim: a.dim.or(cfg.dim).unwrap_or(base.dim),
        rationale_dim: a.rationale_dim.or(cfg.rationale_dim).unwrap_or(base.rationale_dim),
        separation: a.separation.or(cfg.separation).unwrap_or(base.separation),
        rationale_noise: a.rationale_noise.or(cfg.rationale_noise).unwrap_or(base.rationale_noise),
        embedding_noise: a.embedding_noise.or(cfg.embedding_noise).unwrap_or(base.embedding_noise),
        mixed_prob: a.mixed_prob.or(cfg.mixed_prob).unwrap_or(base.mixed_prob),
        latent_scale: a.latent_scale.or(cfg.latent_scale).unwrap_or(base.latent_scale),
        seed: a.seed.or(cfg.seed).unwrap_or(0),
    };
    let out = need(a.out.or(cfg.out.clone()), "out")?;
    let generated = generate(&spec)?;
    generated.dataset.save(&out)?;
    println!(
        "wrote {} annotations over {} items ({} clusters) to {}",
        generated.dataset.len(),
        generated.dataset.num_items(),
        spec.k,
        out.display()
    );
    Ok(())
}

fn run_split(a: SplitArgs, cfg: &Settings) -> Result<()> {
    let (ds, _) = load_data(&a.data, cfg)?;
    let fraction = a.test_fraction.or(cfg.test_fraction).unwrap_or(0.2);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let train_out = need(a.train_out.or(cfg.train_out.clone()), "train-out")?;
    let test_out = need(a.test_out.or(cfg.test_out.clone()), "test-out")?;
    let (train_ds, test_ds) = stratified_split(&ds, fraction, seed)?;
    train_ds.save(&train_out)?;
    test_ds.save(&test_out)?;
    println!(
        "train: {} items / {} annotations -> {}\ntest: {} items / {} annotations -> {}",
        train_ds.num_items(),
        train_ds.len(),
        train_out.display(),
        test_ds.num_items(),
        test_ds.len(),
        test_out.display()
    );
    Ok(())
}

fn run_cluster(a: ClusterArgs, cfg: &Settings) -> Result<()> {
    let (ds, _) = load_data(&a.data, cfg)?;
    let mode: ClusterMode = need(a.mode.as_ref().or(cfg.mode.as_ref()), "mode")?.parse()?;
    let out = need(a.out.or(cfg.out.clone()), "out")?;
    let (model, assignment) = match mode {
        ClusterMode::RationaleKmeans => {
            let k = need(a.k.or(cfg.k), "k")?;
            let points = ds
                .records()
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.rationale_embedding
                        .clone()
                        .ok_or_else(|| anyhow!("record {} has no rationale_embedding", i + 1))
                })
                .collect::<Result<Vec<_>>>()?;
            let fit = kmeans_fit_detailed(
                &points,
                k,
                a.seed.or(cfg.seed).unwrap_or(0),
                a.max_iters.or(cfg.max_iters).unwrap_or(DEFAULT_MAX_ITERS),
                a.tol.or(cfg.tol).unwrap_or(DEFAULT_TOL),
            )?;
            log::info!("k-means converged after {} iterations, SSE {:.4}", fit.iterations, fit.sse());
            let assignment = ClusterAssignment::new(fit.labels.iter().map(|&l| vec![l]).collect(), k)?;
            (fit.model, assignment)
        }
        _ => {
            if let Some(k) = a.k.or(cfg.k) {
                log::warn!("--k {k} ignored: {mode} clusters come from the records");
            }
            let model = ClusterModel::categorical_from_dataset(mode, &ds)?;
            let assignment = assign_dataset(&ds, &model)?;
            (model, assignment)
        }
    };
    let model = compute_stats(&ds, &assignment, &model)?;
    model.save(&out)?;
    println!("{mode} cluster model with {} clusters -> {}", model.k(), out.display());
    if let Some(stats) = &model.stats {
        for (id, s) in model.cluster_ids.iter().zip(&stats.clusters) {
            let mean: Vec<String> = s.mean.iter().map(|m| format!("{m:.3}")).collect();
            println!("  {id}: n={} mean=[{}] alpha={:.4}", s.n, mean.join(", "), s.alpha);
        }
    }
    Ok(())
}

fn load_clusters(path: &Path, task: Task) -> Result<ClusterModel> {
    let model = ClusterModel::load(path)?;
    if let Some(stats) = &model.stats {
        if stats.task != task {
            bail!(mcstl_core::Error::TaskMismatch {
                left: stats.task,
                right: task
            });
        }
    }
    Ok(model)
}

fn run_train(a: TrainArgs, cfg: &Settings) -> Result<()> {
    let (ds, task) = load_data(&a.data, cfg)?;
    let variant: Variant = a
        .variant
        .as_ref()
        .or(cfg.variant.as_ref())
        .map(|v| v.parse())
        .transpose()?
        .unwrap_or(Variant::Mcstl);
    let out = need(a.out.clone().or(cfg.out.clone()), "out")?;
    let clusters_path = a.clusters.clone().or(cfg.clusters.clone());

    let mut tc = TrainConfig::new(task, variant);
    tc.epochs = a.epochs.or(cfg.epochs).unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.or(cfg.batch_size).unwrap_or(tc.batch_size);
    tc.learning_rate = a.lr.or(cfg.lr).unwrap_or(tc.learning_rate);
    tc.hidden = a.hidden.or(cfg.hidden).unwrap_or(DEFAULT_HIDDEN);
    tc.seed = a.seed.or(cfg.seed).unwrap_or(0);
    tc.full_batch = a.full_batch.or(cfg.full_batch).unwrap_or(false);
    tc.eval_every = a.eval_every.or(cfg.eval_every).unwrap_or(0);
    let defaults = LossConfig::for_task(task, ds.mean_annotations_per_item());
    tc.loss = LossConfig {
        lambda1: a.lambda1.or(cfg.lambda1).unwrap_or(defaults.lambda1),
        lambda2: a.lambda2.or(cfg.lambda2).unwrap_or(DEFAULT_LAMBDA2),
        sharpness: a.sharpness.or(cfg.sharpness).unwrap_or(DEFAULT_SHARPNESS),
        eps: PROB_EPS,
    };

    let cluster_model = clusters_path.as_deref().map(|p| load_clusters(p, task)).transpose()?;
    let cluster_model = match cluster_model {
        Some(m) if m.stats.is_none() => {
            let assignment = assign_dataset(&ds, &m)?;
            Some(compute_stats(&ds, &assignment, &m)?)
        }
        other => other,
    };
    if variant.uses_clusters() && cluster_model.is_none() {
        bail!("--variant mcstl needs --clusters");
    }
    let train_assignment = cluster_model.as_ref().map(|m| assign_dataset(&ds, m)).transpose()?;

    let eval_path = a.eval_data.clone().or(cfg.eval_data.clone());
    let eval_ds = eval_path.as_deref().map(|p| load_path_dataset(p, task, &a.data, cfg)).transpose()?;
    let eval_assignment = match (&eval_ds, &cluster_model) {
        (Some(e), Some(m)) => Some(assign_dataset(e, m)?),
        (Some(_), None) => bail!("--eval-data needs --clusters for group metrics"),
        _ => None,
    };
    if eval_ds.is_some() && tc.eval_every == 0 {
        tc.eval_every = tc.epochs;
    }
    let held_out = match (&eval_ds, &eval_assignment, &cluster_model) {
        (Some(d), Some(asg), Some(m)) => Some(HeldOut {
            dataset: d,
            assignment: asg,
            cluster_model: m,
        }),
        _ => None,
    };

    let clusters = match (&cluster_model, &train_assignment) {
        (Some(m), Some(asg)) if variant.uses_clusters() => Some((m, asg)),
        _ => None,
    };
    let (params, log) = train(&ds, clusters, &tc, held_out)?;
    params.save(&out)?;
    if let Some(path) = a.log.clone().or(cfg.log.clone()) {
        log.save(&path)?;
    }
    let last = log.final_loss().cloned().unwrap_or_default();
    println!(
        "trained {variant} ({task}) for {} epochs on {} annotations: loss {:.4} (ce {:.4}, kl {:.4}, l2 {:.4}) -> {}",
        tc.epochs,
        ds.len(),
        last.total,
        last.ce,
        last.kl,
        last.l2,
        out.display()
    );
    if let Some(eval) = log.epochs.last().and_then(|e| e.eval.as_ref()) {
        println!("held-out: {}", serde_json::to_string(eval)?);
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f.write_all(contents)?;
    f.flush()?;
    Ok(())
}

fn run_eval(a: EvalArgs, cfg: &Settings) -> Result<()> {
    let task = parse_task(a.data.task.as_ref(), cfg)?;
    let checkpoint = need(a.checkpoint.clone().or(cfg.checkpoint.clone()), "checkpoint")?;
    let params = ModelParams::load(&checkpoint)?;
    if params.task != task {
        bail!(mcstl_core::Error::TaskMismatch {
            left: params.task,
            right: task
        });
    }
    let clusters = load_clusters(&need(a.clusters.clone().or(cfg.clusters.clone()), "clusters")?, task)?;
    let (ds, _) = load_data(&a.data, cfg)?;
    let assignment = assign_dataset(&ds, &clusters)?;
    let report = evaluate(&ds, &assignment, &params, &clusters)?;

    match a.report.or(cfg.report.clone()) {
        Some(path) => write_file(&path, report.to_string().as_bytes())?,
        None => print!("{report}"),
    }
    if let Some(path) = a.json.or(cfg.json.clone()) {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_file(&path, &bytes)?;
    }
    if let Some(path) = a.dump_calibration.or(cfg.dump_calibration.clone()) {
        write_file(&path, report.calibration_csv().as_bytes())?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs, cfg: &Settings) -> Result<()> {
    let task = parse_task(a.data.task.as_ref(), cfg)?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let draws = a.draws.or(cfg.draws).unwrap_or(5);
    let step = a.step.or(cfg.step).unwrap_or(1e-5);
    let tolerance = a.tolerance.or(cfg.tolerance).unwrap_or(1e-4);
    let hidden = a.hidden.or(cfg.hidden).unwrap_or(8);
    let batch_size = a.batch.or(cfg.batch).unwrap_or(16);

    // Data: the given dataset with a cluster model, or a small generated one with its planted clusters.
    let data_path = a.data.data.clone().or(cfg.data.clone());
    let (ds, model) = match data_path {
        Some(path) => {
            let ds = load_path_dataset(&path, task, &a.data, cfg)?;
            let model = match a.clusters.clone().or(cfg.clusters.clone()) {
                Some(p) => load_clusters(&p, task)?,
                None => ClusterModel::categorical_from_dataset(ClusterMode::Taxonomy, &ds)
                    .context("no --clusters given and the records declare no clusters")?,
            };
            (ds, model)
        }
        None => {
            let spec = match task {
                Task::Ordinal3 => SynthSpec::ordinal(&[[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]], 12, 3, seed),
                _ => SynthSpec {
                    task,
                    mixed_prob: 0.3,
                    ..SynthSpec::binary(&[0.3, 0.5, 0.7], 12, 3, seed)
                },
            };
            let ds = generate(&spec)?.dataset;
            let model = ClusterModel::categorical_from_dataset(ClusterMode::Taxonomy, &ds)?;
            (ds, model)
        }
    };
    let assignment = assign_dataset(&ds, &model)?;
    let model = match model.stats {
        Some(_) => model,
        None => compute_stats(&ds, &assignment, &model)?,
    };
    let set = TrainingSet::from_dataset(&ds, Some(&assignment))?;
    let loss = LossConfig {
        lambda1: a.lambda1.or(cfg.lambda1).unwrap_or(0.5),
        lambda2: a.lambda2.or(cfg.lambda2).unwrap_or(DEFAULT_LAMBDA2),
        sharpness: a.sharpness.or(cfg.sharpness).unwrap_or(DEFAULT_SHARPNESS),
        eps: PROB_EPS,
    };
    let base = match a.checkpoint.clone().or(cfg.checkpoint.clone()) {
        Some(p) => {
            let params = ModelParams::load(&p)?;
            if params.task != task {
                bail!(mcstl_core::Error::TaskMismatch {
                    left: params.task,
                    right: task
                });
            }
            Some(params)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_passed = true;
    println!("draw\tblock\tentries\tmax_rel_error\tresult");
    for draw in 0..draws {
        let params = match &base {
            Some(p) => p.clone(),
            None => {
                let mut p = ModelParams::init(ds.dim(), hidden, model.cluster_ids.clone(), task, rng.gen())?;
                for b in p.active_blocks() {
                    for v in p.weights.block_mut(b) {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                }
                p
            }
        };
        let mut batch: Vec<usize> = (0..set.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut batch[..], &mut rng);
        batch.truncate(batch_size.max(1));
        let report = grad_check(&params, &set, &batch, model.stats.as_ref(), &loss, step, tolerance)?;
        for b in &report.blocks {
            let result = if b.skipped {
                "skipped"
            } else if b.passed {
                "ok"
            } else {
                "FAIL"
            };
            println!("{draw}\t{}\t{}\t{:.3e}\t{result}", b.block.name(), b.entries, b.max_rel_error);
        }
        all_passed &= report.passed();
    }
    if !all_passed {
        bail!("gradient check failed (tolerance {tolerance:e})");
    }
    println!("all blocks within {tolerance:e}");
    Ok(())
}

fn run_inspect_k(a: InspectKArgs, cfg: &Settings) -> Result<()> {
    let (ds, _) = load_data(&a.data, cfg)?;
    let k_min = a.k_min.or(cfg.k_min).unwrap_or(2);
    let k_max = a.k_max.or(cfg.k_max).unwrap_or(8);
    if k_min == 0 || k_max < k_min {
        bail!("need 1 <= --k-min <= --k-max");
    }
    let points = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.rationale_embedding
                .clone()
                .ok_or_else(|| anyhow!("record {} has no rationale_embedding", i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let scans = inspect_k(&points, k_min..=k_max, a.seed.or(cfg.seed).unwrap_or(0))?;
    println!("k\tsse\tsilhouette");
    for s in scans {
        println!("{}\t{:.4}\t{:.4}", s.k, s.sse, s.silhouette);
    }
    Ok(())
}
