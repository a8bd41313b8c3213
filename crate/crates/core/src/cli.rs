//! Command-line front end: `prepare`, `train`, `eval`, `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CheckpointMeta};
use crate::config::{load_config, ConfigError, Resolver};
use crate::data::{load_interactions, load_social_edges, preprocess, DataError, PrepareConfig, PreparedDataset, Split};
use crate::evaluation::{evaluate_all, EvalConfig, EvalError, DEFAULT_EVAL_NEGATIVES, DEFAULT_KS};
use crate::exec::Execution;
use crate::model::{TeaModel, Variant};
use crate::training::{train, EpochRecord, TrainConfig, TrainError, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.tea";
pub const CURVE_FILE: &str = "curve.csv";
pub const RUN_FILE: &str = "run.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

/// TEA sequential recommender.
///
/// Settings resolve as: built-in default < `--config` file < TEA_SEED
/// environment variable (seed only) < command-line flag. Config files hold
/// flat `key = value` lines whose keys match the long flag names.
#[derive(Debug, Parser)]
#[command(name = "tea", version, verbatim_doc_comment)]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, split and index a raw interaction log and social graph.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Rank held-out items with a trained checkpoint.
    Eval(EvalArgs),
    /// Train and test several variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub social: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_actions: Option<usize>,
    #[arg(long)]
    pub rating_threshold: Option<f64>,
    #[arg(long)]
    pub tau_days: Option<f64>,
    /// Behavior sequence truncation length.
    #[arg(long)]
    pub ls: Option<usize>,
    /// Neighbor item bucket truncation length.
    #[arg(long)]
    pub ln: Option<usize>,
    #[arg(long)]
    pub max_walks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Hyper {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Sampled negatives per training target.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train on every window position (true) or only the last one.
    #[arg(long)]
    pub all_steps: Option<bool>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Negatives per user in the per-epoch validation ranking.
    #[arg(long)]
    pub eval_negatives: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// tea-s, tea-a, tea-rs or tea-ra.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated cutoffs.
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated variants.
    #[arg(long)]
    pub variants: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[command(flatten)]
    pub hyper: Hyper,
}

/// Failure with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    EmptyOutput(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::EmptyOutput(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Incompatible(_) => 5,
        }
    }
}

fn io_kind_error(kind: io::ErrorKind, msg: String) -> CliError {
    if kind == io::ErrorKind::NotFound {
        CliError::MissingInput(msg)
    } else {
        CliError::Other(msg)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let msg = e.to_string();
        match &e {
            DataError::Io { source, .. } => io_kind_error(source.kind(), msg),
            DataError::EmptyAfterFilter => CliError::EmptyOutput(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match &e {
            ConfigError::Io { source, .. } => io_kind_error(source.kind(), e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } => io_kind_error(source.kind(), e.to_string()),
            _ => CliError::Incompatible(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Eval(v) => v.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::MissingInput(format!("no {what} given (flag --{what} or config key {what})")))
}

fn resolve_path(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    let s = r.get_opt(key, flag.map(|p| p.display().to_string()))?;
    Ok(s.map(PathBuf::from))
}

fn config_line(r: &Resolver) -> String {
    format!("# config {}\n", serde_json::to_string(r.effective()).expect("map serializes"))
}

fn exec_mode(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None => Default::default(),
    };
    let mut r = Resolver::from_env(file);
    let exec = exec_mode(cli.sequential);
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a, &mut r, exec),
        Command::Train(a) => cmd_train(a, &mut r, exec),
        Command::Eval(a) => cmd_eval(a, &mut r, exec),
        Command::Ablate(a) => cmd_ablate(a, &mut r, exec),
    }
}

pub fn cmd_prepare(a: PrepareArgs, r: &mut Resolver, exec: Execution) -> Result<(), CliError> {
    let interactions = require(resolve_path(r, "interactions", a.interactions)?, "interactions")?;
    let social = require(resolve_path(r, "social", a.social)?, "social")?;
    let out = require(resolve_path(r, "out", a.out)?, "out")?;
    let d = PrepareConfig::default();
    let cfg = PrepareConfig {
        min_actions: r.get("min_actions", a.min_actions, d.min_actions)?,
        rating_threshold: r.get("rating_threshold", a.rating_threshold, d.rating_threshold)?,
        tau_days: r.get("tau_days", a.tau_days, d.tau_days)?,
        max_seq_len: r.get("ls", a.ls, d.max_seq_len)?,
        max_bucket_len: r.get("ln", a.ln, d.max_bucket_len)?,
        max_walks: r.get("max_walks", a.max_walks, d.max_walks)?,
        seed: r.get("seed", a.seed, d.seed)?,
    };
    if !social.exists() {
        return Err(CliError::MissingInput(format!("{}: file not found", social.display())));
    }
    let raw = load_interactions(&interactions)?;
    log::info!("read {} interactions", raw.interactions.len());
    let log = preprocess(&raw, cfg.min_actions, cfg.rating_threshold)?;
    let (graph, stats) = load_social_edges(&social, &log.users)?;
    if stats.self_loops > 0 {
        log::warn!("skipped {} self-loop rows", stats.self_loops);
    }
    log::info!(
        "social: {} edges kept, {} duplicates, {} rows with unknown users",
        stats.edges,
        stats.duplicates,
        stats.unknown_users
    );
    let ds = PreparedDataset::build(&log, graph, cfg, exec)?;
    ds.write_snapshot(&out)?;
    let s = ds.stats();
    log::info!(
        "prepared {} users, {} items, {} interactions, {} social links (density {:.6})",
        s.users,
        s.items,
        s.interactions,
        s.social_links,
        s.density
    );
    Ok(())
}

/// Hyperparameters shared by `train` and `ablate`; variant and seed stay at
/// their defaults.
fn resolve_hyper(r: &mut Resolver, h: &Hyper, exec: Execution) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        dim: r.get("dim", h.dim, d.dim)?,
        batch_size: r.get("batch_size", h.batch_size, d.batch_size)?,
        dropout: r.get("dropout", h.dropout, d.dropout)?,
        gamma: r.get("gamma", h.gamma, d.gamma)?,
        n_negatives: r.get("negatives", h.negatives, d.n_negatives)?,
        lr: r.get("lr", h.lr, d.lr)?,
        max_epochs: r.get("max_epochs", h.max_epochs, d.max_epochs)?,
        patience: r.get("patience", h.patience, d.patience)?,
        all_steps: r.get("all_steps", h.all_steps, d.all_steps)?,
        clip_norm: r.get("clip_norm", h.clip_norm, d.clip_norm)?,
        eval_negatives: r.get("eval_negatives", h.eval_negatives, d.eval_negatives)?,
        exec,
        ..d
    })
}

fn load_dataset(dir: &Path) -> Result<PreparedDataset, CliError> {
    if !dir.exists() {
        return Err(CliError::MissingInput(format!("{}: dataset directory not found", dir.display())));
    }
    Ok(PreparedDataset::read_snapshot(dir)?)
}

/// CSV with one row per epoch.
pub fn curve_csv(config_line: &str, curve: &[EpochRecord]) -> String {
    let mut s = String::from(config_line);
    s.push_str("epoch,train_loss,val_hr10,val_ndcg10\n");
    for e in curve {
        writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_hr10, e.val_ndcg10).unwrap();
    }
    s
}

fn run_summary(r: &Resolver, cfg: &TrainConfig, out: &TrainOutcome) -> serde_json::Value {
    serde_json::json!({
        "config": r.effective_json(),
        "variant": cfg.variant,
        "walk_aggregation": cfg.variant.uses_walks(),
        "bipartite_aggregator": if cfg.variant.uses_attention() { "attention" } else { "mean" },
        "epochs_run": out.curve.len(),
        "best_epoch": out.best_epoch,
        "stopped_early": out.stopped_early,
        "selection_metric": "val_ndcg10",
        "patience": cfg.patience,
        "gradient_clip_norm": cfg.clip_norm,
        "final_train_loss": out.curve.last().map(|e| e.train_loss),
    })
}

pub fn cmd_train(a: TrainArgs, r: &mut Resolver, exec: Execution) -> Result<(), CliError> {
    let data = require(resolve_path(r, "data", a.data)?, "data")?;
    let out = require(resolve_path(r, "out", a.out)?, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        variant: r.get("variant", a.variant, d.variant)?,
        seed: r.get("seed", a.seed, d.seed)?,
        ..resolve_hyper(r, &a.hyper, exec)?
    };
    let ds = load_dataset(&data)?;
    log::info!(
        "variant {}: walk aggregation {}, {} bipartite aggregation",
        cfg.variant,
        if cfg.variant.uses_walks() { "enabled" } else { "disabled" },
        if cfg.variant.uses_attention() { "attention" } else { "mean" }
    );
    let outcome = train(&ds, &cfg)?;
    create_dir(&out)?;
    let meta = CheckpointMeta {
        spec: outcome.model.spec,
        config: r.effective_json(),
        epoch: outcome.best_epoch,
    };
    write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.model, &meta)?;
    write_file(&out.join(CURVE_FILE), curve_csv(&config_line(r), &outcome.curve))?;
    let summary = serde_json::to_string_pretty(&run_summary(r, &cfg, &outcome)).expect("summary serializes");
    write_file(&out.join(RUN_FILE), summary + "\n")?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "val" | "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(CliError::Other(format!("unknown split {other:?} (expected val or test)"))),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Validation => "val",
        Split::Test => "test",
    }
}

fn check_compatible(model: &TeaModel, ds: &PreparedDataset) -> Result<(), CliError> {
    let s = model.spec;
    if s.n_users != ds.n_users || s.n_items != ds.n_items || s.max_seq_len != ds.config.max_seq_len {
        return Err(CliError::Incompatible(format!(
            "checkpoint expects {} users, {} items, sequence length {}; dataset has {}, {}, {}",
            s.n_users, s.n_items, s.max_seq_len, ds.n_users, ds.n_items, ds.config.max_seq_len
        )));
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs, r: &mut Resolver, exec: Execution) -> Result<(), CliError> {
    let data = require(resolve_path(r, "data", a.data)?, "data")?;
    let ckpt = require(resolve_path(r, "checkpoint", a.checkpoint)?, "checkpoint")?;
    let split = parse_split(&r.get("split", a.split, "test".to_string())?)?;
    let ks: Vec<usize> = r.get_list("k", a.k.as_deref(), &DEFAULT_KS)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Other("--k needs positive cutoffs".into()));
    }
    let n_neg = r.get("n_neg", a.n_neg, DEFAULT_EVAL_NEGATIVES)?;
    let seed = r.get("seed", a.seed, 42)?;
    let out = match resolve_path(r, "out", a.out)? {
        Some(p) => p,
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let ds = load_dataset(&data)?;
    let (model, meta) = read_checkpoint(&ckpt)?;
    check_compatible(&model, &ds)?;
    let cfg = EvalConfig {
        ks,
        n_negatives: n_neg,
        seed,
        exec,
    };
    let mut report = evaluate_all(&model, &ds, split, &cfg)?;
    report.config = serde_json::json!({ "eval": r.effective_json(), "train": meta.config });
    create_dir(&out)?;
    let name = split_name(split);
    report
        .write_json(&out.join(format!("eval_{name}.json")))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut csv = config_line(r);
    csv.push_str("user_id,rank\n");
    for u in &report.ranks {
        writeln!(csv, "{},{}", ds.user_ids.decode(u.user), u.rank).unwrap();
    }
    write_file(&out.join(format!("eval_{name}_ranks.csv")), csv)?;
    for m in &report.metrics {
        log::info!("{name} HR@{k} {:.4} NDCG@{k} {:.4}", m.hr, m.ndcg, k = m.k);
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ABLATION_COLUMNS: [&str; 8] = ["variant", "seed", "HR@5", "NDCG@5", "HR@10", "NDCG@10", "HR@20", "NDCG@20"];

pub fn cmd_ablate(a: AblateArgs, r: &mut Resolver, exec: Execution) -> Result<(), CliError> {
    let data = require(resolve_path(r, "data", a.data)?, "data")?;
    let out = require(resolve_path(r, "out", a.out)?, "out")?;
    let variants: Vec<Variant> = r.get_list("variants", a.variants.as_deref(), &Variant::ALL)?;
    let seeds: Vec<u64> = r.get_list("seeds", a.seeds.as_deref(), &[42])?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(CliError::Other("ablation needs at least one variant and one seed".into()));
    }
    let n_neg = r.get("n_neg", a.n_neg, DEFAULT_EVAL_NEGATIVES)?;
    let base = resolve_hyper(r, &a.hyper, exec)?;
    let ds = load_dataset(&data)?;

    let mut csv = config_line(r);
    csv.push_str(&ABLATION_COLUMNS.join(","));
    csv.push('\n');
    let mut rows = Vec::new();
    for &variant in &variants {
        let mut per_metric: Vec<Vec<f64>> = vec![Vec::new(); 6];
        for &seed in &seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            log::info!("ablation: {variant} seed {seed}");
            let outcome = train(&ds, &cfg)?;
            let report = evaluate_all(
                &outcome.model,
                &ds,
                Split::Test,
                &EvalConfig {
                    ks: DEFAULT_KS.to_vec(),
                    n_negatives: n_neg,
                    seed,
                    exec,
                },
            )?;
            let mut vals = Vec::with_capacity(6);
            for m in &report.metrics {
                vals.push(m.hr);
                vals.push(m.ndcg);
            }
            for (acc, v) in per_metric.iter_mut().zip(&vals) {
                acc.push(*v);
            }
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(csv, "{variant},{seed},{}", cells.join(",")).unwrap();
            rows.push(serde_json::json!({ "variant": variant, "seed": seed, "metrics": report.metrics, "best_epoch": outcome.best_epoch }));
        }
        let stats: Vec<(f64, f64)> = per_metric.iter().map(|v| mean_std(v)).collect();
        let means: Vec<String> = stats.iter().map(|s| format!("{:.6}", s.0)).collect();
        let stds: Vec<String> = stats.iter().map(|s| format!("{:.6}", s.1)).collect();
        writeln!(csv, "{variant},mean,{}", means.join(",")).unwrap();
        writeln!(csv, "{variant},std,{}", stds.join(",")).unwrap();
    }
    create_dir(&out)?;
    write_file(&out.join(ABLATION_CSV), csv)?;
    let json = serde_json::json!({ "config": r.effective_json(), "runs": rows });
    write_file(&out.join(ABLATION_JSON), serde_json::to_string_pretty(&json).expect("serializes") + "\n")?;
    Ok(())
}
