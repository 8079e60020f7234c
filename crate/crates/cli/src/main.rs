//! `mtsk`: synthetic connectome generation, bi-level training, linear
//! probing, domain similarity, and region-importance maps.
//!
//! All commands are deterministic given their inputs and `--seed`; rerunning
//! one produces byte-identical checkpoints, logs, and reports (the run
//! manifest carries wall timings and is exempt). Exit codes: 0 success,
//! 2 usage/configuration error, 3 numerical abort.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtsk_core::connectome::{
    connectivity_features, load_dataset, pearson_adjacency, save_dataset, synth_generate, ClassSpec,
    Dataset, GeneratorSpec, MatrixFormat,
};
use mtsk_core::metatrain::{train, TrainConfig, TrainFailure, TrainMode};
use mtsk_core::probe::{
    cross_validate, extract_embeddings, extract_node_embeddings, importance_map, svm_train,
    ClassifierKind, EmbeddingOptions, ProbeOptions,
};
use mtsk_core::stgcn::{load_checkpoint, save_checkpoint, HeadKind, StgcnConfig};
use mtsk_core::transport::{emd, histogram_pair, DEFAULT_BINS, DEFAULT_GAMMA};
use mtsk_core::CoreError;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mtsk", version, about = "Graph representation learning on synthetic connectomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site dataset.
    Synth(SynthArgs),
    /// Train a model (bi-level loop or one of the ablation modes).
    Train(TrainArgs),
    /// Probe a frozen model (or raw connectivity features) with a linear
    /// classifier under stratified cross-validation.
    Probe(ProbeArgs),
    /// Domain similarity between two datasets under a frozen model.
    Similarity(SimilarityArgs),
    /// Per-region importance map from a linear SVM on frozen embeddings.
    Importance(ImportanceArgs),
}

/// Errors mapped onto the exit-code contract.
enum CliError {
    /// exit 2
    Usage(String),
    /// exit 3
    Numerical(String),
    /// exit 1
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } | CoreError::Abort { .. } => CliError::Numerical(e.to_string()),
            CoreError::Io { .. } => CliError::Other(anyhow::anyhow!(e.to_string())),
            other => CliError::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Similarity(args) => cmd_similarity(args),
        Command::Importance(args) => cmd_importance(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical abort: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn wall_timings_enabled() -> bool {
    std::env::var("MTSK_WALL_TIMINGS").map(|v| v == "1").unwrap_or(false)
}

fn worker_threads(folds: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("MTSK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    cap.min(available).min(folds).max(1)
}

fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| CliError::Other(anyhow::anyhow!("reading {}: {e}", out.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)
            .map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", out.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text.as_bytes())
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn load_labeled_dataset(path: &Path) -> CliResult<Dataset> {
    let ds = load_dataset(path)?;
    if !ds.is_labeled() {
        return Err(CliError::Usage(format!(
            "dataset {} must be fully labeled",
            path.display()
        )));
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Generator spec file (JSON). Omitted: the built-in default
    /// (116 regions, 231 time points, two sites, two classes).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Matrix file encoding.
    #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bin,
    Csv,
}

fn default_generator_spec() -> GeneratorSpec {
    GeneratorSpec {
        p: 116,
        t: 231,
        classes: vec![
            ClassSpec {
                label: 0,
                subjects: 20,
                blocks: vec![(0..20).collect(), (40..60).collect()],
                ar: None,
            },
            ClassSpec {
                label: 1,
                subjects: 20,
                blocks: vec![(20..40).collect(), (60..80).collect()],
                ar: None,
            },
        ],
        rho: 0.6,
        ar: 0.3,
        sigma: 0.8,
        coupling_jitter: 0.2,
        // keeps adjacency degrees positive at this region count
        global_coupling: 0.5,
        sites: vec!["site_a".into(), "site_b".into()],
        emit_labels: true,
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let started = Instant::now();
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            GeneratorSpec::from_json(&text)?
        }
        None => default_generator_spec(),
    };
    prepare_out_dir(&args.out, args.force)?;
    let dataset = synth_generate(&spec, args.seed)?;
    let format = match args.format {
        FormatArg::Bin => MatrixFormat::Binary,
        FormatArg::Csv => MatrixFormat::Csv,
    };
    save_dataset(&dataset, &args.out, format)?;

    let mut manifest = RunManifest::new(
        "synth",
        args.seed,
        serde_json::to_value(&spec).unwrap_or(serde_json::Value::Null),
    );
    manifest.add_output(&args.out.join("manifest.json"))?;
    manifest.record_timing("total", started.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    println!(
        "synth: {} subjects ({} regions x {} time points) -> {}",
        dataset.len(),
        spec.p,
        spec.t,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Training mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Flat JSON training config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture JSON; omitted: the built-in default.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    outer_iters: Option<usize>,
    #[arg(long)]
    target_loss_weight: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    total_epochs: Option<usize>,
    #[arg(long)]
    meta_train_size: Option<usize>,
    #[arg(long)]
    meta_val_size: Option<usize>,
    #[arg(long)]
    second_order: Option<bool>,
    #[arg(long)]
    include_positive_in_denominator: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Metsk,
    Ssl,
    Mel,
    Mtl,
    Ft,
    SupervisedSource,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Metsk => TrainMode::Metsk,
            ModeArg::Ssl => TrainMode::Ssl,
            ModeArg::Mel => TrainMode::Mel,
            ModeArg::Mtl => TrainMode::Mtl,
            ModeArg::Ft => TrainMode::Ft,
            ModeArg::SupervisedSource => TrainMode::SupervisedSource,
        }
    }
}

fn effective_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    macro_rules! override_field {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    override_field!(
        seed,
        inner_lr,
        outer_lr,
        inner_steps,
        target_loss_weight,
        temperature,
        window_len,
        batch_size,
        warmup_epochs,
        total_epochs,
        second_order,
        include_positive_in_denominator
    );
    if let Some(v) = args.outer_iters {
        cfg.outer_iters = Some(v);
    }
    if let Some(v) = args.meta_train_size {
        cfg.meta_train_size = Some(v);
    }
    if let Some(v) = args.meta_val_size {
        cfg.meta_val_size = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = effective_train_config(&args)?;
    let model_cfg = match &args.model_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<StgcnConfig>(&text)
                .map_err(|e| CliError::Usage(format!("model config {}: {e}", path.display())))?
        }
        None => {
            let mut m = StgcnConfig::default();
            if cfg.mode == TrainMode::SupervisedSource {
                m.source_head = HeadKind::Classifier;
            }
            m
        }
    };
    model_cfg.validate()?;

    if cfg.mode == TrainMode::Mel && args.source.is_some() {
        eprintln!("warning: --source is ignored in mel mode (no source head, no source loss)");
    }
    let source = match (&args.source, cfg.mode.needs_source()) {
        (Some(path), true) => Some(load_dataset(path)?),
        (_, false) => None,
        (None, true) => {
            return Err(CliError::Usage(format!(
                "mode {:?} requires --source",
                cfg.mode
            )))
        }
    };
    let target = match (&args.target, cfg.mode.needs_target()) {
        (Some(path), true) => Some(load_labeled_dataset(path)?),
        (_, false) => None,
        (None, true) => {
            return Err(CliError::Usage(format!(
                "mode {:?} requires --target",
                cfg.mode
            )))
        }
    };

    prepare_out_dir(&args.out, args.force)?;
    let checkpoint_path = args.out.join("checkpoint.ckpt");
    let log_path = args.out.join("train_log.csv");

    let mut manifest = RunManifest::new(
        "train",
        cfg.seed,
        serde_json::to_value(&cfg).unwrap_or(serde_json::Value::Null),
    );
    if let Some(p) = &args.source {
        if cfg.mode.needs_source() {
            manifest.add_input(p)?;
        }
    }
    if let Some(p) = &args.target {
        if cfg.mode.needs_target() {
            manifest.add_input(p)?;
        }
    }

    match train(source.as_ref(), target.as_ref(), &model_cfg, &cfg) {
        Ok(outcome) => {
            save_checkpoint(&checkpoint_path, &model_cfg, &outcome.params)?;
            write_text(&log_path, &outcome.log.to_csv(wall_timings_enabled()))?;
            manifest.add_output(&checkpoint_path)?;
            manifest.add_output(&log_path)?;
            manifest.record_timing("total", started.elapsed().as_secs_f64());
            manifest.write(&args.out)?;
            println!(
                "train: mode {:?}, {} iterations -> {}",
                cfg.mode,
                outcome.log.records.len(),
                checkpoint_path.display()
            );
            Ok(())
        }
        Err(TrainFailure::Invalid(e)) => Err(e.into()),
        Err(TrainFailure::Aborted { error, params, log }) => {
            // best-effort state dump before reporting the abort
            let abort_ckpt = args.out.join("checkpoint_abort.ckpt");
            if params.all_finite() {
                let _ = save_checkpoint(&abort_ckpt, &model_cfg, &params);
            }
            let _ = write_text(&log_path, &log.to_csv(wall_timings_enabled()));
            Err(CliError::Numerical(format!(
                "{error} (state in {})",
                abort_ckpt.display()
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ProbeArgs {
    /// Model checkpoint; required unless --connectivity.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ClassifierArg::Svm)]
    classifier: ClassifierArg,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// PCA dimension (0 disables). Omitted: automatic for model embeddings,
    /// disabled for connectivity features.
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Probe raw connectivity features instead of model embeddings.
    #[arg(long)]
    connectivity: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Windows averaged per subject when embedding.
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 128)]
    window_len: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Svm,
    Logreg,
}

impl From<ClassifierArg> for ClassifierKind {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Svm => ClassifierKind::Svm,
            ClassifierArg::Logreg => ClassifierKind::Logreg,
        }
    }
}

fn probe_feature_matrix(args: &ProbeArgs, dataset: &Dataset) -> CliResult<Vec<Vec<f64>>> {
    if args.connectivity {
        let mut out = Vec::with_capacity(dataset.len());
        for s in &dataset.subjects {
            out.push(connectivity_features(&pearson_adjacency(&s.series)?)?);
        }
        Ok(out)
    } else {
        let path = args.checkpoint.as_ref().ok_or_else(|| {
            CliError::Usage("--checkpoint is required unless --connectivity is set".into())
        })?;
        let (model_cfg, params) = load_checkpoint(path)?;
        let opts = EmbeddingOptions {
            windows_per_subject: args.windows,
            seed: args.seed,
            ..Default::default()
        };
        let set = extract_embeddings(&params, &model_cfg, dataset, args.window_len, &opts)?;
        Ok(set.features)
    }
}

fn cmd_probe(args: ProbeArgs) -> CliResult<()> {
    let started = Instant::now();
    let dataset = load_labeled_dataset(&args.dataset)?;
    let features = probe_feature_matrix(&args, &dataset)?;
    let labels = dataset.labels()?;

    let pca_dim = match (args.pca_dim, args.connectivity) {
        (Some(d), _) => Some(d),
        (None, true) => Some(0),
        (None, false) => None,
    };
    let opts = ProbeOptions {
        classifier: args.classifier.into(),
        folds: args.folds,
        pca_dim,
        seed: args.seed,
        threads: worker_threads(args.folds),
        ..Default::default()
    };
    let report = cross_validate(&features, &labels, &opts)?;

    prepare_out_dir(&args.out, args.force)?;
    let csv_path = args.out.join("probe_report.csv");
    let summary_path = args.out.join("probe_summary.txt");
    write_text(&csv_path, &report.to_csv())?;
    write_text(&summary_path, &report.summary())?;

    let mut manifest = RunManifest::new(
        "probe",
        args.seed,
        serde_json::json!({
            "classifier": report.classifier.to_string(),
            "folds": args.folds,
            "pca_dim": pca_dim,
            "connectivity": args.connectivity,
            "windows": args.windows,
            "window_len": args.window_len,
        }),
    );
    manifest.add_input(&args.dataset)?;
    if let Some(ckpt) = &args.checkpoint {
        if !args.connectivity {
            manifest.add_input(ckpt)?;
        }
    }
    manifest.add_output(&csv_path)?;
    manifest.add_output(&summary_path)?;
    manifest.record_timing("total", started.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    println!(
        "probe: mean AUC {:.4} +/- {:.4} over {} folds -> {}",
        report.mean,
        report.std,
        args.folds,
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset_a: PathBuf,
    #[arg(long)]
    dataset_b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 128)]
    window_len: usize,
}

/// Flattened mean embedding of a dataset under the frozen model.
fn mean_embedding(
    params: &mtsk_core::ParamTree,
    model_cfg: &StgcnConfig,
    dataset: &Dataset,
    args: &SimilarityArgs,
) -> CliResult<Vec<f64>> {
    let opts = EmbeddingOptions {
        windows_per_subject: args.windows,
        seed: args.seed,
        ..Default::default()
    };
    let set = extract_embeddings(params, model_cfg, dataset, args.window_len, &opts)?;
    if set.features.is_empty() {
        return Err(CliError::Usage("cannot embed an empty dataset".into()));
    }
    let dim = set.dim;
    let mut mean = vec![0.0; dim];
    for f in &set.features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= set.features.len() as f64;
    }
    Ok(mean)
}

fn cmd_similarity(args: SimilarityArgs) -> CliResult<()> {
    let started = Instant::now();
    if args.gamma < 0.0 {
        return Err(CliError::Usage(format!("--gamma must be >= 0, got {}", args.gamma)));
    }
    let (model_cfg, params) = load_checkpoint(&args.checkpoint)?;
    let ds_a = load_dataset(&args.dataset_a)?;
    let ds_b = load_dataset(&args.dataset_b)?;
    let mean_a = mean_embedding(&params, &model_cfg, &ds_a, &args)?;
    let mean_b = mean_embedding(&params, &model_cfg, &ds_b, &args)?;

    let (ha, hb) = histogram_pair(&mean_a, &mean_b, args.bins)?;
    let distance = emd(&ha, &hb)?;
    let ds = (-args.gamma * distance).exp();

    let name = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| p.display().to_string())
    };
    let line = format!("{},{},{},{}\n", name(&args.dataset_a), name(&args.dataset_b), distance, ds);

    prepare_out_dir(&args.out, args.force)?;
    let report_path = args.out.join("domain_similarity.txt");
    write_text(&report_path, &format!("domain_a,domain_b,emd,ds\n{line}"))?;

    let mut manifest = RunManifest::new(
        "similarity",
        args.seed,
        serde_json::json!({
            "gamma": args.gamma,
            "bins": args.bins,
            "windows": args.windows,
            "window_len": args.window_len,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.dataset_a)?;
    manifest.add_input(&args.dataset_b)?;
    manifest.add_output(&report_path)?;
    manifest.record_timing("total", started.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    println!("similarity: emd {distance:.6}, ds {ds:.6} -> {}", report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// importance
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// SVM penalty for the internal fit.
    #[arg(long, default_value_t = 1.0)]
    penalty: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 128)]
    window_len: usize,
    /// Take absolute values before averaging instead of after.
    #[arg(long)]
    abs_first: bool,
}

fn cmd_importance(args: ImportanceArgs) -> CliResult<()> {
    let started = Instant::now();
    let dataset = load_labeled_dataset(&args.dataset)?;
    let (model_cfg, params) = load_checkpoint(&args.checkpoint)?;
    let opts = EmbeddingOptions {
        windows_per_subject: args.windows,
        seed: args.seed,
        ..Default::default()
    };
    let (set, roi_features) =
        extract_node_embeddings(&params, &model_cfg, &dataset, args.window_len, &opts)?;
    let (features, labels) = set.labeled()?;
    let model = svm_train(&features, &labels, args.penalty, 4000)?;
    let roi_names = if dataset.roi_names.is_empty() {
        mtsk_core::connectome::default_roi_names(roi_features.len())
    } else {
        dataset.roi_names.clone()
    };
    let map = importance_map(&model.weights, &roi_features, &roi_names, args.abs_first)?;

    prepare_out_dir(&args.out, args.force)?;
    let csv_path = args.out.join("importance.csv");
    let mut csv = String::from("roi_name,score\n");
    for (name, score) in &map {
        csv.push_str(&format!("{name},{score}\n"));
    }
    write_text(&csv_path, &csv)?;

    let mut manifest = RunManifest::new(
        "importance",
        args.seed,
        serde_json::json!({
            "penalty": args.penalty,
            "windows": args.windows,
            "window_len": args.window_len,
            "abs_first": args.abs_first,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.dataset)?;
    manifest.add_output(&csv_path)?;
    manifest.record_timing("total", started.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    println!("importance: {} regions -> {}", map.len(), csv_path.display());
    Ok(())
}
