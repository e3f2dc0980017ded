use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use facepipe::cli::{self, ConfigFile, RunConfig};
use facepipe::pipeline::Condition;
use facepipe::synth;
use facepipe::trainer::ClassWeighting;

/// Exit status when some samples failed but the command otherwise completed.
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "facepipe",
    version,
    about = "Face normalization, half-face masking and expression classification"
)]
struct Cli {
    /// JSON file with default settings; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize every face of a manifest (full, top and bottom variants).
    Normalize(Opts),
    /// Mask a PNG, or every PNG in a directory, to its top and/or bottom half.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Halves::Both)]
        half: Halves,
    },
    /// Write a stratified k-fold plan (folds.json) for the filtered manifest.
    Split(Opts),
    /// Train one model on all filtered records of a condition.
    Train(Opts),
    /// Cross-validate one condition and write its metrics report.
    Eval(Opts),
    /// Merge report JSON files into one table and chart.
    Report {
        /// Report files (`report_<run>.json`).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// normalize, split, eval for full/top/bottom, report.
    RunAll(Opts),
    /// Write a synthetic XOR face corpus (images/ plus manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Halves {
    Top,
    Bottom,
    Both,
}

#[derive(Args, Default)]
struct Opts {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory the manifest image paths are relative to.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    condition: Option<Condition>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    k: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    zoom: Option<f64>,
    /// Output edge length of normalized faces.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    bs: Option<usize>,
    #[arg(long)]
    epochs_a: Option<usize>,
    #[arg(long)]
    epochs_b: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weighting: Option<ClassWeighting>,
    #[arg(long)]
    patience: Option<usize>,
    /// Edge length images are resized to before entering the classifier.
    #[arg(long)]
    input_edge: Option<u32>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

impl Opts {
    fn into_config(self) -> ConfigFile {
        ConfigFile {
            manifest: self.manifest,
            images: self.images,
            out: self.out,
            condition: self.condition,
            k: self.k.map(|k| k as usize),
            seed: self.seed,
            zoom: self.zoom,
            size: self.size,
            bs: self.bs,
            epochs_a: self.epochs_a,
            epochs_b: self.epochs_b,
            rho: self.rho,
            lr: self.lr,
            weighting: self.weighting,
            patience: self.patience,
            input_edge: self.input_edge,
            hidden: self.hidden,
            val_fraction: self.val_fraction,
        }
    }
}

fn resolve(config: Option<&PathBuf>, opts: Opts) -> anyhow::Result<RunConfig> {
    let file = match config {
        Some(p) => {
            ConfigFile::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    Ok(RunConfig::resolve(file.overridden_by(opts.into_config()))?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = cli.config.as_ref();
    match cli.command {
        Command::Normalize(opts) => {
            let summary = cli::cmd_normalize(&resolve(config, opts)?)?;
            println!("{}", summary.line());
            if !summary.failed.is_empty() {
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Mask { input, out, half } => {
            let halves: &[Condition] = match half {
                Halves::Top => &[Condition::Top],
                Halves::Bottom => &[Condition::Bottom],
                Halves::Both => &[Condition::Top, Condition::Bottom],
            };
            let n = cli::cmd_mask(&input, &out, halves)?;
            println!("mask: {n} images");
        }
        Command::Split(opts) => {
            let cfg = resolve(config, opts)?;
            let plan = cli::cmd_split(&cfg)?;
            for (i, fold) in plan.folds().iter().enumerate() {
                println!("fold {i}: {}", fold.len());
            }
        }
        Command::Train(opts) => {
            let path = cli::cmd_train(&resolve(config, opts)?)?;
            println!("model: {}", path.display());
        }
        Command::Eval(opts) => {
            let cfg = resolve(config, opts)?;
            let report = cli::cmd_train_eval(&cfg)?;
            print!(
                "{}",
                facepipe::metrics::render_table_text(&[(cfg.condition.name().to_string(), report)])
            );
        }
        Command::Report { reports, out } => {
            print!("{}", cli::cmd_report(&reports, &out)?);
        }
        Command::RunAll(opts) => {
            let summary = cli::cmd_run_all(&resolve(config, opts)?)?;
            print!("{}", summary.table);
            if !summary.normalize.failed.is_empty() {
                eprintln!(
                    "run-all: {} samples could not be normalized and were left out",
                    summary.normalize.failed.len()
                );
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Synth { out, n, size, seed } => {
            let m = synth::write_xor_corpus(&out, n, size, seed)?;
            println!("synth: {} records in {}", m.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
