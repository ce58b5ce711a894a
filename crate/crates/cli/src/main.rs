//! Command line front end for the NCA classifier.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nca_core::checkpoint::{load_checkpoint, save_checkpoint};
use nca_core::data::{
    load_image_64, load_split, save_dataset, synth_blobs, DatasetManifest, Split, SynthSpec,
};
use nca_core::eval::{cross_domain, evaluate};
use nca_core::explain::{default_epsilon, export_heatmaps, lrp_epsilon, route_to_cells};
use nca_core::model::{classify, rollout, MaskSource, NcaConfig, NcaParams};
use nca_core::rng::stream;
use nca_core::train::{fit, Sample};
use nca_core::Error;

use config::{load_config, RunConfig};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_USAGE }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_RUNTIME }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // config-shaped core errors count as usage problems
        let code = match &e {
            Error::InvalidConfig(_) | Error::ManifestParse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError { message: e.to_string(), code }
    }
}

#[derive(Parser)]
#[command(name = "nca", about = "Neural cellular automata image classifier", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a dataset manifest and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Cross-domain accuracy matrix from per-domain checkpoints and test sets.
    Crossdomain(CrossdomainArgs),
    /// Train and evaluate at several channel counts.
    SweepChannels(SweepArgs),
    /// Explain one prediction with per-channel relevance heatmaps.
    Explain(ExplainArgs),
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest TSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch metrics file; defaults to `<out>.metrics.txt`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rollouts averaged per prediction.
    #[arg(long, default_value_t = 4)]
    mc: usize,
    /// Machine-readable report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossdomainArgs {
    /// Repeatable `domain=path` checkpoint bindings; several checkpoints
    /// per domain are averaged.
    #[arg(long = "checkpoint", value_name = "DOMAIN=PATH")]
    checkpoints: Vec<String>,
    /// Repeatable `domain=path` manifest bindings for the test sets.
    #[arg(long = "manifest", value_name = "DOMAIN=PATH")]
    manifests: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    mc: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated channel counts, e.g. `8,16,32`.
    #[arg(long)]
    channels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    mc: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG/JPEG/TIFF); resized to 64x64.
    #[arg(long)]
    image: PathBuf,
    /// Channels to export, most relevant first.
    #[arg(long, default_value_t = 8)]
    top_k: usize,
    /// Output directory for heatmaps and the relevance sidecar.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relevance stabilizer; derived from the activations when omitted.
    #[arg(long)]
    epsilon: Option<f32>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 13)]
    classes: usize,
    /// Rotates every class hue by this many degrees.
    #[arg(long, default_value_t = 0.0)]
    hue_shift: f64,
    /// Domain name recorded in the manifest.
    #[arg(long, default_value = "synth")]
    domain: String,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Crossdomain(args) => cmd_crossdomain(args),
        Command::SweepChannels(args) => cmd_sweep(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn read_run_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_config(p).map_err(CliError::usage),
        None => Ok(RunConfig::default()),
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("manifest not found: {}", path.display())));
    }
    Ok(DatasetManifest::read_tsv(path)?)
}

fn write_report(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = read_run_config(&args.config)?;
    cfg.model.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let manifest = read_manifest(&args.manifest)?;
    let samples = load_split(&manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(CliError::usage(format!(
            "no train-split entries in {}",
            args.manifest.display()
        )));
    }
    let (params, metrics) = fit(&samples, &cfg.model, &cfg.plan, args.seed)?;
    save_checkpoint(&params, &cfg.model, &args.out)?;

    let mut log = String::new();
    for m in &metrics {
        log.push_str(&m.to_line());
        log.push('\n');
    }
    print!("{log}");
    let metrics_path = args
        .metrics
        .unwrap_or_else(|| args.out.with_extension("metrics.txt"));
    write_report(&metrics_path, &log)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s)
        .ok_or_else(|| CliError::usage(format!("unknown split '{s}' (expected train, val, or test)")))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    if !args.checkpoint.exists() {
        return Err(CliError::usage(format!(
            "checkpoint not found: {}",
            args.checkpoint.display()
        )));
    }
    let (params, config) = load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.manifest)?;
    let samples = load_split(&manifest, split)?;
    if samples.is_empty() {
        return Err(CliError::usage(format!(
            "no {}-split entries in {}",
            split.as_str(),
            args.manifest.display()
        )));
    }
    let report = evaluate(
        &samples,
        &params,
        &config,
        args.seed,
        args.mc,
        &args.checkpoint.display().to_string(),
        split.as_str(),
    )?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        write_report(out, &report.to_lines())?;
    }
    Ok(())
}

fn parse_binding(raw: &str, flag: &str) -> Result<(String, PathBuf), CliError> {
    let Some((domain, path)) = raw.split_once('=') else {
        return Err(CliError::usage(format!(
            "--{flag} expects DOMAIN=PATH, got '{raw}'"
        )));
    };
    if domain.is_empty() || path.is_empty() {
        return Err(CliError::usage(format!(
            "--{flag} expects DOMAIN=PATH, got '{raw}'"
        )));
    }
    Ok((domain.to_string(), PathBuf::from(path)))
}

fn cmd_crossdomain(args: CrossdomainArgs) -> Result<(), CliError> {
    if args.checkpoints.is_empty() {
        return Err(CliError::usage("at least one --checkpoint DOMAIN=PATH is required"));
    }
    // domains keep first-appearance order
    let mut checkpoints: Vec<(String, Vec<(NcaParams<f32>, NcaConfig)>)> = Vec::new();
    for raw in &args.checkpoints {
        let (domain, path) = parse_binding(raw, "checkpoint")?;
        if !path.exists() {
            return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
        }
        let loaded = load_checkpoint(&path)?;
        match checkpoints.iter_mut().find(|(d, _)| *d == domain) {
            Some((_, models)) => models.push(loaded),
            None => checkpoints.push((domain, vec![loaded])),
        }
    }
    let mut test_sets: Vec<(String, Vec<Sample>)> = Vec::new();
    for raw in &args.manifests {
        let (domain, path) = parse_binding(raw, "manifest")?;
        let manifest = read_manifest(&path)?;
        test_sets.push((domain, load_split(&manifest, Split::Test)?));
    }
    let matrix = cross_domain(&checkpoints, &test_sets, args.seed, args.mc)?;
    print!("{}", matrix.to_table());
    if let Some(out) = &args.out {
        write_report(out, &matrix.to_lines())?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = read_run_config(&args.config)?;
    let mut channel_counts = Vec::new();
    for part in args.channels.split(',') {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad channel count '{}'", part.trim())))?;
        channel_counts.push(n);
    }
    if channel_counts.is_empty() {
        return Err(CliError::usage("--channels needs at least one value"));
    }
    // validate every configuration before any training starts
    let mut configs = Vec::new();
    for &n in &channel_counts {
        let mut cfg = base.model;
        cfg.channels = n;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        configs.push(cfg);
    }
    let manifest = read_manifest(&args.manifest)?;
    let train_samples = load_split(&manifest, Split::Train)?;
    let test_samples = load_split(&manifest, Split::Test)?;
    if train_samples.is_empty() || test_samples.is_empty() {
        return Err(CliError::usage(format!(
            "sweep needs both train and test entries in {}",
            args.manifest.display()
        )));
    }
    let mut lines = String::from("channels\ttest_accuracy\n");
    for cfg in &configs {
        let (params, _) = fit(&train_samples, cfg, &base.plan, args.seed)?;
        let report = evaluate(
            &test_samples,
            &params,
            cfg,
            args.seed,
            args.mc,
            "sweep",
            "test",
        )?;
        println!("channels={} test_accuracy={:.4}", cfg.channels, report.accuracy);
        lines.push_str(&format!("{}\t{:.6}\n", cfg.channels, report.accuracy));
    }
    if let Some(out) = &args.out {
        write_report(out, &lines)?;
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<(), CliError> {
    if !args.checkpoint.exists() {
        return Err(CliError::usage(format!(
            "checkpoint not found: {}",
            args.checkpoint.display()
        )));
    }
    let (params, config) = load_checkpoint(&args.checkpoint)?;
    if args.top_k > config.channels {
        return Err(CliError::usage(format!(
            "top_k {} exceeds channel count {}",
            args.top_k, config.channels
        )));
    }
    let image = load_image_64(&args.image)?;
    let mut rng = stream(args.seed, &[0]);
    let r = rollout(&image, &params, &config, MaskSource::Sample(&mut rng))?;
    let trace = classify(&r.features, &params)?;
    let epsilon = args.epsilon.unwrap_or_else(|| default_epsilon(&trace, &params));
    let relevance = lrp_epsilon(&trace, &params, trace.predicted, epsilon)?;
    let map = route_to_cells(&relevance, &r.final_state, &r.argmax_pos);
    let written = export_heatmaps(&map, args.top_k, &args.out)?;
    println!(
        "predicted class {} (p={:.4}), epsilon {:.3e}",
        trace.predicted, trace.probs[trace.predicted], epsilon
    );
    for entry in map.entries.iter().take(args.top_k) {
        println!(
            "channel {:>3} relevance {:>10.6} winner ({}, {})",
            entry.channel, entry.relevance, entry.winner.0, entry.winner.1
        );
    }
    println!("{} files written to {}", written.len(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(CliError::usage(format!(
            "train_fraction must be in (0, 1), got {}",
            args.train_fraction
        )));
    }
    let spec = SynthSpec::new(args.seed, args.per_class, args.classes)
        .map_err(|e| CliError::usage(e.to_string()))?
        .with_hue_shift(args.hue_shift);
    let samples = synth_blobs(&spec);
    let manifest = save_dataset(&args.out, &samples, &args.domain, args.train_fraction)?;
    let train = manifest.of_split(Split::Train).count();
    let test = manifest.of_split(Split::Test).count();
    println!(
        "wrote {} images ({} train, {} test) and manifest to {}",
        manifest.entries.len(),
        train,
        test,
        args.out.display()
    );
    Ok(())
}
