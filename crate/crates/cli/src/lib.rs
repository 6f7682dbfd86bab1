//! Subcommands of the `cdecf` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use cdecf::checkpoint::{load_checkpoint, save_checkpoint};
use cdecf::config::ExperimentConfig;
use cdecf::dataset::{build_splits, ingest_path, kcore_filter_users, IngestOptions, InteractionDataset, Split};
use cdecf::evaluator::{evaluate_at, format_table, EvalReport};
use cdecf::graph::{NormalizedAdjacency, PropagationOperator};
use cdecf::model::{Model, Variant};
use cdecf::ode::Method;
use cdecf::trainer::{fit, train_epoch, write_log, FitOutcome, OptimizerState};
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "cdecf",
    version,
    about = "Recommendation with embeddings propagated by a weighted graph ODE"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest raw interactions, apply the user k-core and write a dataset file.
    Prepare(PrepareArgs),
    /// Train one model and write checkpoint, log and validation report.
    Train(Overrides),
    /// Evaluate checkpoints on the test split.
    Eval(EvalArgs),
    /// Train and compare all three weight variants.
    Ablation(Overrides),
    /// Time training epochs for several solver step counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Delimited text file: user, item, [...,] timestamp
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    /// The first line is a header.
    #[arg(long)]
    pub header: bool,
    /// Label for the summary table (defaults to the raw file stem).
    #[arg(long)]
    pub name: Option<String>,
}

/// Flags shared by commands that read an experiment config.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub solver: Option<Method>,
    #[arg(long)]
    pub t1: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// May be repeated; one table row per checkpoint.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub steps_list: Vec<usize>,
    /// Timed epochs per setting; the median is reported.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

/// Failure split by exit code: usage/config problems (2) or runtime (1).
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        let e = match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        };
        format!("{e:#}")
    }
}

impl From<cdecf::Error> for CliError {
    fn from(e: cdecf::Error) -> Self {
        match e {
            cdecf::Error::Config(_) | cdecf::Error::InvalidKCore(_) => CliError::Usage(e.into()),
            cdecf::Error::Ingest { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Usage(e.into())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(anyhow!(msg.into()))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(o) => cmd_train(&o).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablation(o) => cmd_ablation(&o),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::NoWeight => "Without weight (W)",
        Variant::DiscreteWeight => "With discrete weight (W)",
        Variant::Controlled => "CDE-CF",
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_prepare(a: &PrepareArgs) -> CliResult<()> {
    require_file(&a.raw, "raw interaction file")?;
    let delimiter = match a.delimiter.as_str() {
        "\\t" | "tab" => b'\t',
        d if d.len() == 1 => d.as_bytes()[0],
        d => return Err(usage(format!("delimiter must be a single byte, got {d:?}"))),
    };
    let opts = IngestOptions {
        delimiter,
        has_header: a.header,
    };
    let (raw, report) = ingest_path(&a.raw, &opts)?;
    info!(
        "read {} records ({} malformed, {} duplicates)",
        report.total, report.malformed, report.duplicates
    );
    let kept = kcore_filter_users(raw, a.k_core)?;
    let ds = build_splits(&kept)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    ds.save(&a.out)?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.raw));
    print!("{}", dataset_summary(&name, &ds));
    Ok(())
}

/// Users, items, split sizes and sparsity in one aligned block.
pub fn dataset_summary(name: &str, ds: &InteractionDataset) -> String {
    let header = [
        "Dataset",
        "#Users",
        "#Items",
        "Training",
        "Validation",
        "Testing",
        "Sparsity",
    ];
    let row = [
        name.to_string(),
        ds.num_users().to_string(),
        ds.num_items().to_string(),
        ds.train().len().to_string(),
        ds.validation().len().to_string(),
        ds.test().len().to_string(),
        format!("{:.4}%", 100.0 * ds.sparsity()),
    ];
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    format!(
        "U = {}, I = {}\n{}\n{}\n",
        ds.num_users(),
        ds.num_items(),
        line(header.to_vec()),
        line(row.iter().map(String::as_str).collect())
    )
}

/// Config file (or defaults) with every flag applied on top.
pub fn resolve_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            require_file(path, "config file")?;
            ExperimentConfig::from_path(path)?
        }
        None => {
            if o.dataset.is_none() {
                return Err(usage("pass --config or --dataset"));
            }
            ExperimentConfig::default()
        }
    };
    if let Some(d) = &o.dataset {
        cfg.dataset = d.clone();
        cfg.dataset_name = stem(d);
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(v) = o.variant {
        cfg.model.variant = v;
    }
    if let Some(m) = o.solver {
        cfg.solver.method = m;
    }
    if let Some(t1) = o.t1 {
        cfg.solver.t1 = t1;
    }
    if let Some(n) = o.steps {
        cfg.solver.steps = n;
    }
    if let Some(k) = &o.k {
        cfg.eval_k = k.clone();
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = o.threads {
        cfg.threads = Some(t);
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    require_file(&cfg.dataset, "dataset file")?;
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Fails only if the pool already exists, which is harmless.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialised; --threads {n} ignored");
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn prepare_run(cfg: &ExperimentConfig) -> CliResult<(InteractionDataset, PropagationOperator)> {
    init_threads(cfg.threads);
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("resolved_config.json"), cfg.to_json() + "\n").context("writing resolved config")?;
    info!(
        "resolved config: {}",
        serde_json::to_string(cfg).expect("config serialises")
    );
    let ds = InteractionDataset::load(&cfg.dataset)?;
    let op = PropagationOperator::new(NormalizedAdjacency::from_dataset(&ds)?, cfg.model.propagation_order)?;
    Ok((ds, op))
}

#[derive(Debug, Serialize)]
struct ValidationSummary<'a> {
    variant: Variant,
    best_epoch: usize,
    best_recall20: f64,
    epochs_run: usize,
    reports: &'a [EvalReport],
}

/// Trains in `dir`, writing checkpoint, log and validation report.
fn train_into(
    cfg: &ExperimentConfig,
    ds: &InteractionDataset,
    op: &PropagationOperator,
    dir: &Path,
) -> CliResult<FitOutcome> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = Model::new(cfg.model_config(), ds.num_users(), ds.num_items())?;
    let outcome = fit(model, ds, op, &cfg.train_config())?;
    save_checkpoint(&outcome.best, &dir.join("checkpoint.bin"))?;
    let mut log = BufWriter::new(File::create(dir.join("training_log.ndjson")).context("creating training log")?);
    write_log(&outcome.log, &mut log)?;
    log.flush().context("writing training log")?;
    let (emb, _) = outcome.best.forward(op)?;
    let reports = evaluate_at(&emb, ds, &cfg.eval_k, Split::Validation);
    write_json(
        &dir.join("validation_report.json"),
        &ValidationSummary {
            variant: cfg.model.variant,
            best_epoch: outcome.best_epoch,
            best_recall20: outcome.best_recall,
            epochs_run: outcome.log.len(),
            reports: &reports,
        },
    )?;
    Ok(outcome)
}

pub fn cmd_train(o: &Overrides) -> CliResult<FitOutcome> {
    let cfg = resolve_config(o)?;
    let (ds, op) = prepare_run(&cfg)?;
    let outcome = train_into(&cfg, &ds, &op, &cfg.out_dir)?;
    println!(
        "{}: best validation Recall@20 {:.5} at epoch {} ({} epochs run); outputs in {}",
        cfg.model.variant,
        outcome.best_recall,
        outcome.best_epoch,
        outcome.log.len(),
        cfg.out_dir.display()
    );
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct EvalEntry {
    checkpoint: PathBuf,
    label: String,
    variant: Variant,
    reports: Vec<EvalReport>,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    require_file(&a.dataset, "dataset file")?;
    for c in &a.checkpoint {
        require_file(c, "checkpoint")?;
    }
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(usage("--k needs at least one cutoff, all ≥ 1"));
    }
    init_threads(a.threads);
    let ds = InteractionDataset::load(&a.dataset)?;
    let mut entries: Vec<EvalEntry> = Vec::new();
    for path in &a.checkpoint {
        let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
            return Err(cdecf::Error::CheckpointMismatch(format!(
                "{} has {} users × {} items, dataset has {} × {}",
                path.display(),
                model.num_users(),
                model.num_items(),
                ds.num_users(),
                ds.num_items()
            ))
            .into());
        }
        let op = PropagationOperator::new(NormalizedAdjacency::from_dataset(&ds)?, model.config.propagation_order)?;
        let (emb, _) = model.forward(&op)?;
        let reports = evaluate_at(&emb, &ds, &a.k, Split::Test);
        let mut label = variant_label(model.config.variant).to_string();
        if entries.iter().any(|e| e.label == label) {
            label = format!("{label} [{}]", path.display());
        }
        entries.push(EvalEntry {
            checkpoint: path.clone(),
            label,
            variant: model.config.variant,
            reports,
        });
    }
    let name = a.name.clone().unwrap_or_else(|| stem(&a.dataset));
    let rows: Vec<(String, Option<Vec<EvalReport>>)> = entries
        .iter()
        .map(|e| (e.label.clone(), Some(e.reports.clone())))
        .collect();
    let table = format_table(&name, &rows);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("eval_report.json"), &entries)?;
        fs::write(out.join("eval_table.txt"), &table).context("writing table")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationEntry {
    variant: Variant,
    label: &'static str,
    reports: Option<Vec<EvalReport>>,
    error: Option<String>,
}

fn ablation_variant(
    cfg: &ExperimentConfig,
    ds: &InteractionDataset,
    op: &PropagationOperator,
) -> CliResult<Vec<EvalReport>> {
    let dir = cfg.out_dir.join(cfg.model.variant.name());
    let outcome = train_into(cfg, ds, op, &dir)?;
    let (emb, trace) = outcome.best.forward(op)?;
    let trajectory = outcome.best.weight_trajectory(op, &trace)?;
    let path = cfg.out_dir.join(format!("weights_{}.csv", cfg.model.variant.name()));
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["time", "node_index", "weight"])
        .context("writing weights")?;
    for (t, weights) in &trajectory {
        for (node, v) in weights.iter().enumerate() {
            w.write_record([t.to_string(), node.to_string(), v.to_string()])
                .context("writing weights")?;
        }
    }
    w.flush().context("writing weights")?;
    Ok(evaluate_at(&emb, ds, &cfg.eval_k, Split::Test))
}

/// Exits nonzero if any variant failed, after reporting all of them.
pub fn cmd_ablation(o: &Overrides) -> CliResult<()> {
    let base = resolve_config(o)?;
    let (ds, op) = prepare_run(&base)?;
    let mut entries = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let started = Instant::now();
        let result = ablation_variant(&cfg, &ds, &op);
        let (reports, err) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => {
                error!("{variant} failed: {}", e.message());
                (None, Some(e.message()))
            }
        };
        info!("{variant} done in {:.1}s", started.elapsed().as_secs_f64());
        entries.push(AblationEntry {
            variant,
            label: variant_label(variant),
            reports,
            error: err,
        });
    }
    let rows: Vec<(String, Option<Vec<EvalReport>>)> = entries
        .iter()
        .map(|e| (e.label.to_string(), e.reports.clone()))
        .collect();
    let table = format_table(&base.dataset_name, &rows);
    print!("{table}");
    write_json(&base.out_dir.join("ablation_report.json"), &entries)?;
    fs::write(base.out_dir.join("ablation_table.txt"), &table).context("writing table")?;
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| e.error.is_some())
        .map(|e| e.variant.name())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("variants failed: {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct BenchRow {
    method: Method,
    steps: usize,
    median_epoch_seconds: f64,
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    if a.repeats == 0 || a.steps_list.is_empty() || a.steps_list.contains(&0) {
        return Err(usage("--repeats and every --steps-list entry must be at least 1"));
    }
    let base = resolve_config(&a.overrides)?;
    let (ds, op) = prepare_run(&base)?;
    let mut rows = Vec::new();
    println!("method,steps,median_epoch_seconds");
    for &steps in &a.steps_list {
        let mut cfg = base.clone();
        cfg.solver.steps = steps;
        let mut model = Model::new(cfg.model_config(), ds.num_users(), ds.num_items())?;
        let tcfg = cfg.train_config();
        let mut opt = OptimizerState::new(tcfg.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let mut times = Vec::with_capacity(a.repeats);
        for epoch in 1..=a.repeats {
            times.push(train_epoch(&mut model, &ds, &op, &tcfg, &mut opt, &mut rng, epoch)?.seconds);
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        println!("{},{steps},{median:.6}", cfg.solver.method.name());
        rows.push(BenchRow {
            method: cfg.solver.method,
            steps,
            median_epoch_seconds: median,
        });
    }
    write_json(&base.out_dir.join("bench.json"), &rows)?;
    Ok(())
}
