//! `densea`: corpus generation, training, evaluation, sweeps and exports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use densea_core::dataset::{export_features, ActionVocabulary, ManifestEntry, write_manifest, generate_corpus};
use densea_core::derive_seed;
use densea_core::experiment::{
    checkpoint_config, eval_grid, export_attention, export_segments, find_video, load_corpus, prepare,
    run, split_sweep_csv, sweep_seeds, sweep_split, DataSource, ExperimentConfig, ExperimentError,
};
use densea_core::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "densea", version, about = "Weakly-supervised dense action anticipation")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Generate,
    /// Train the configured mode and write a run directory.
    Train,
    /// Evaluate a checkpoint over an observed x predicted grid.
    Eval(EvalArgs),
    /// Attention heat-map of one video as CSV.
    ExportAttention(ExportArgs),
    /// Ground-truth and predicted segments of one video as CSV.
    ExportSegments(ExportArgs),
    /// MoC as a function of the fully-labelled fraction.
    SweepSplit(SweepSplitArgs),
    /// MoC mean and standard deviation over seeds.
    SweepSeeds(SweepSeedsArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observed fractions; defaults to the config's evaluation block.
    #[arg(long, value_delimiter = ',')]
    observed: Vec<f64>,
    /// Predicted fractions; defaults to the config's evaluation block.
    #[arg(long, value_delimiter = ',')]
    predicted: Vec<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: String,
    #[arg(long)]
    observed: Option<f64>,
    #[arg(long)]
    predicted: Option<f64>,
}

#[derive(Args)]
struct SweepSplitArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 3)]
    n_seeds: u64,
}

#[derive(Args)]
struct SweepSeedsArgs {
    /// Defaults to the config's evaluation.n_seeds.
    #[arg(long)]
    n_seeds: Option<u64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<ExperimentError>() {
        if e.is_config() {
            return 2;
        }
        if e.is_numeric() {
            return 3;
        }
        if e.is_io() {
            return 4;
        }
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 4;
    }
    1
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Loads a checkpoint with the config it was trained under, unless `--config` overrides it.
fn load_trained(cli: &Cli, path: &Path) -> Result<(ExperimentConfig, u64, densea_core::model::Framework)> {
    let ckpt = load_checkpoint(path).map_err(ExperimentError::from)?;
    let (stored, stored_seed) = checkpoint_config(&ckpt.header)?;
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => stored,
    };
    let seed = cli.seed.unwrap_or(stored_seed);
    let fw = ckpt.framework;
    if cfg.n_classes() != fw.config.backbone.n_classes {
        return Err(ExperimentError::Config {
            path: "dataset.source.n_classes".into(),
            msg: format!(
                "checkpoint predicts {} classes, config has {}",
                fw.config.backbone.n_classes,
                cfg.n_classes()
            ),
        }
        .into());
    }
    Ok((cfg, seed, fw))
}

fn check_feature_dim(fw: &densea_core::model::Framework, dim: usize) -> Result<()> {
    if fw.config.backbone.feature_dim != dim {
        return Err(ExperimentError::Config {
            path: "dataset.source".into(),
            msg: format!(
                "checkpoint expects feature dim {}, corpus has {dim}",
                fw.config.backbone.feature_dim
            ),
        }
        .into());
    }
    Ok(())
}

fn cmd_generate(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let DataSource::Synthetic { grammar, n_videos } = &cfg.dataset.source else {
        return Err(ExperimentError::Config {
            path: "dataset.source.kind".into(),
            msg: "generate needs a synthetic source".into(),
        }
        .into());
    };
    let vocab = ActionVocabulary::numbered(grammar.n_classes).map_err(ExperimentError::from)?;
    let corpus = generate_corpus(&vocab, grammar, *n_videos, derive_seed(cfg.seed, "corpus")).map_err(ExperimentError::from)?;
    let video_dir = cli.out.join("videos");
    std::fs::create_dir_all(&video_dir).map_err(|e| ExperimentError::Io {
        path: video_dir.display().to_string(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(corpus.len());
    for v in &corpus {
        let rel = PathBuf::from("videos").join(format!("{}.txt", v.id));
        export_features(v, grammar.n_classes, &cli.out.join(&rel)).map_err(ExperimentError::from)?;
        entries.push(ManifestEntry { id: v.id.clone(), path: rel });
    }
    let manifest = cli.out.join("manifest.json");
    write_manifest(&manifest, &entries).map_err(ExperimentError::from)?;
    let frames: f64 = corpus.iter().map(|v| v.features.frames as f64).sum::<f64>() / corpus.len() as f64;
    let segments: f64 = corpus.iter().map(|v| v.segments().len() as f64).sum::<f64>() / corpus.len() as f64;
    println!("videos: {}", corpus.len());
    println!("classes: {}", grammar.n_classes);
    println!("mean frames: {frames:.2}");
    println!("mean duration (s): {:.2}", frames / grammar.fps);
    println!("mean segments: {segments:.2}");
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    log::info!("config {}", cfg.hash());
    let out = run(&cfg, cfg.seed, Some(&cli.out))?;
    println!("mode: {}", cfg.training.mode.name());
    println!("moc: {:.4}", out.metrics.moc);
    println!("run directory: {}", cli.out.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (cfg, seed, fw) = load_trained(cli, &args.checkpoint)?;
    cfg.validate()?;
    let prep = prepare(&cfg, seed)?;
    check_feature_dim(&fw, prep.feature_dim)?;
    let observed = if args.observed.is_empty() { cfg.evaluation.observed.clone() } else { args.observed.clone() };
    let predicted = if args.predicted.is_empty() { cfg.evaluation.predicted.clone() } else { args.predicted.clone() };
    let mut grid = cfg.clone();
    grid.evaluation.observed = observed.clone();
    grid.evaluation.predicted = predicted.clone();
    grid.validate()?;
    let table = eval_grid(&fw, &prep.test, &observed, &predicted, seed)?;
    write(&cli.out.join("metrics.json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn export_window(cfg: &ExperimentConfig, args: &ExportArgs) -> (f64, f64) {
    (
        args.observed.unwrap_or(cfg.dataset.observed_fraction),
        args.predicted.unwrap_or(cfg.dataset.predicted_fraction),
    )
}

fn cmd_export_attention(cli: &Cli, args: &ExportArgs) -> Result<()> {
    let (cfg, seed, fw) = load_trained(cli, &args.checkpoint)?;
    let corpus = load_corpus(&cfg, seed)?;
    let video = find_video(&corpus, &args.video)?;
    check_feature_dim(&fw, video.features.dim)?;
    let (x, y) = export_window(&cfg, args);
    let a = export_attention(&fw, video, x, y)?;
    write(&cli.out.join("attention.csv"), &a.frames_csv())?;
    write(&cli.out.join("attention_pooled.csv"), &a.pooled_csv())?;
    println!("steps: {}", a.frames.len());
    println!("observed frames: {}", a.frames.first().map_or(0, Vec::len));
    Ok(())
}

fn cmd_export_segments(cli: &Cli, args: &ExportArgs) -> Result<()> {
    let (cfg, seed, fw) = load_trained(cli, &args.checkpoint)?;
    let corpus = load_corpus(&cfg, seed)?;
    let video = find_video(&corpus, &args.video)?;
    check_feature_dim(&fw, video.features.dim)?;
    let (x, y) = export_window(&cfg, args);
    let csv = export_segments(&fw, video, x, y)?;
    write(&cli.out.join("segments.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep_split(cli: &Cli, args: &SweepSplitArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let seeds: Vec<u64> = (0..args.n_seeds).map(|i| cfg.seed + i).collect();
    let rows = sweep_split(&cfg, &args.fractions, &seeds)?;
    let csv = split_sweep_csv(&rows);
    write(&cli.out.join("sweep_split.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep_seeds(cli: &Cli, args: &SweepSeedsArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let n = args.n_seeds.unwrap_or(cfg.evaluation.n_seeds as u64);
    let seeds: Vec<u64> = (0..n).map(|i| cfg.seed + i).collect();
    let sweep = sweep_seeds(&cfg, &seeds)?;
    write(&cli.out.join("sweep.csv"), &sweep.to_csv())?;
    println!("moc: {:.4} +/- {:.4} over {} seeds", sweep.mean, sweep.std, seeds.len());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => cmd_generate(cli),
        Command::Train => cmd_train(cli),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::ExportAttention(a) => cmd_export_attention(cli, a),
        Command::ExportSegments(a) => cmd_export_segments(cli, a),
        Command::SweepSplit(a) => cmd_sweep_split(cli, a),
        Command::SweepSeeds(a) => cmd_sweep_seeds(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DENSEA_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
