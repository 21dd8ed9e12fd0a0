//! `leaffew`: run the few-shot pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use leaffew_core::corpus::{index_folder, Background, SetupId};
use leaffew_core::footprint::{footprint_report, measured_ensemble};
use leaffew_core::pipeline::{self, validate_config, PipelineError, RunConfig, RunOptions, Stage};
use leaffew_core::synthetic::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "leaffew", version, about = "Few-shot plant-leaf-disease classification over a MobileNet ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load manifests, split classes and fix the support/query pools.
    Prepare(RunArgs),
    /// Adapt (or wrap) each backbone.
    Finetune(RunArgs),
    /// Embed the meta-test images into feature caches.
    Extract(RunArgs),
    /// Train and score one head per repetition.
    Episodes(RunArgs),
    /// Aggregate repetitions into tables.
    Report(RunArgs),
    /// All stages.
    Run(RunArgs),
    /// Print configuration diagnostics.
    Validate(RunArgs),
    /// Print a preset configuration as JSON.
    Preset {
        #[arg(value_enum)]
        name: PresetName,
    },
    /// Parameter sizes and GFLOPs of the ensemble beside the cited figures.
    Footprint {
        #[arg(long)]
        json: bool,
    },
    /// Write a procedural image corpus and its manifest.
    Synth(SynthArgs),
    /// Write a manifest for a `<dir>/<class folder>/<image>` tree.
    Index(IndexArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    S1,
    S2,
    S3,
    Smoke,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setup preset (used when no config is given; overrides the config's setup otherwise).
    #[arg(long)]
    setup: Option<String>,
    /// Shot counts, e.g. `--k 1,5,15`.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Evaluation manifest (overrides the config).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Adaptation manifest (overrides the config).
    #[arg(long)]
    adapt_manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact cache (default: $LEAFFEW_CACHE_DIR, then <output>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Require an existing run state.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Discard a run state written for a different configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    Smoke,
    Plantvillage,
    Rice,
    Surrogate,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    corpus: Corpus,
    #[arg(long)]
    out: PathBuf,
    /// Images per class (smoke, rice, surrogate).
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Fraction of the reference class counts (plantvillage).
    #[arg(long, default_value_t = 0.05)]
    fraction: f64,
    /// Number of classes (surrogate).
    #[arg(long, default_value_t = 24)]
    classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 74)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IndexArgs {
    /// Folder holding one subfolder per class.
    dir: PathBuf,
    /// Manifest to write; relative image paths are stored when the tree lies below it.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name recorded in the manifest (part of cache keys).
    #[arg(long)]
    name: String,
    /// `lab` or `field`.
    #[arg(long, default_value = "lab")]
    background: String,
    /// Crop for every class (default: folder name up to `___`).
    #[arg(long)]
    crop: Option<String>,
}

// Stdout write that surfaces a closed pipe as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

fn parse_setup(s: &str) -> Result<SetupId> {
    SetupId::parse(s).with_context(|| format!("unknown setup `{s}` (expected s1, s2 or s3)"))
}

fn config_error(e: anyhow::Error) -> anyhow::Error {
    PipelineError::Config(vec![pipeline::Diagnostic {
        path: "arguments".into(),
        message: format!("{e:#}"),
    }])
    .into()
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.setup) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(s)) => RunConfig::preset(parse_setup(s).map_err(config_error)?),
        (None, None) => return Err(config_error(anyhow::anyhow!("give --config or --setup"))),
    };
    if args.config.is_some() {
        if let Some(s) = &args.setup {
            cfg.setup = parse_setup(s).map_err(config_error)?;
        }
    }
    if !args.k.is_empty() {
        cfg.k_shots = args.k.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.repetitions {
        cfg.repetitions = r;
    }
    if let Some(m) = &args.manifest {
        cfg.data.manifest = m.clone();
    }
    if let Some(m) = &args.adapt_manifest {
        cfg.data.adapt_manifest = Some(m.clone());
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run_until(args: &RunArgs, until: Stage) -> Result<()> {
    let cfg = build_config(args)?;
    let opts = RunOptions {
        force: args.force,
        resume: args.resume,
        cache_dir: args.cache_dir.clone(),
        until,
        max_new_episodes: None,
    };
    let outcome = pipeline::run(&cfg, &opts)?;
    for s in &outcome.skipped {
        out!("{s}: up to date");
    }
    for s in &outcome.executed {
        out!("{s}: done");
    }
    if let Some(report) = &outcome.report {
        for r in &report.reports {
            out!(
                "{} {} k={}: {:.2} ± {:.2} over {} repetitions",
                r.setup_id, r.head, r.k_shot, r.mean_accuracy, r.ci95, r.n_reps
            );
        }
        for b in &report.majority_baseline {
            out!("majority baseline k={}: {:.2}", b.k_shot, b.majority_accuracy);
        }
        out!("report: {}", outcome.output_dir.join("report").display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => run_until(&a, Stage::Prepare),
        Command::Finetune(a) => run_until(&a, Stage::Finetune),
        Command::Extract(a) => run_until(&a, Stage::Extract),
        Command::Episodes(a) => run_until(&a, Stage::Episodes),
        Command::Report(a) | Command::Run(a) => run_until(&a, Stage::Report),
        Command::Validate(a) => {
            let cfg = build_config(&a)?;
            let diags = validate_config(&cfg);
            if diags.is_empty() {
                out!("ok");
                Ok(())
            } else {
                Err(PipelineError::Config(diags).into())
            }
        }
        Command::Preset { name } => {
            let cfg = match name {
                PresetName::S1 => RunConfig::preset(SetupId::S1),
                PresetName::S2 => RunConfig::preset(SetupId::S2),
                PresetName::S3 => RunConfig::preset(SetupId::S3),
                PresetName::Smoke => RunConfig::smoke("manifest.csv", "runs/smoke"),
            };
            out!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Footprint { json } => {
            let summary = footprint_report(&measured_ensemble());
            if json {
                out!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.to_markdown());
            }
            Ok(())
        }
        Command::Synth(a) => {
            let spec = match a.corpus {
                Corpus::Smoke => SynthSpec::smoke(a.per_class, a.size, a.seed),
                Corpus::Plantvillage => {
                    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
                        bail!("--fraction must lie in (0, 1]");
                    }
                    SynthSpec::plant_village(a.fraction, 20, a.size, a.seed)
                }
                Corpus::Rice => SynthSpec::rice(a.per_class, a.size, a.seed),
                Corpus::Surrogate => SynthSpec::surrogate(a.classes, a.per_class, a.size, a.seed),
            };
            let m = synthetic::generate(&spec, &a.out)?;
            out!(
                "{} images in {} classes: {}",
                m.len(),
                m.classes.len(),
                a.out.join("manifest.csv").display()
            );
            Ok(())
        }
        Command::Index(a) => {
            let background = Background::parse(&a.background).ok_or_else(|| {
                config_error(anyhow::anyhow!("unknown background `{}` (expected lab or field)", a.background))
            })?;
            let mut m = index_folder(&a.dir, &a.name, background, a.crop.as_deref())?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            m.root = std::fs::canonicalize(out_dir)?;
            m.write(&a.out)?;
            for c in &m.classes {
                out!("{}: {}", c.name, c.count);
            }
            out!("{} images in {} classes: {}", m.len(), m.classes.len(), a.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(3, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
