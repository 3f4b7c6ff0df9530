mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lidsn::data::{Protocol, RpsdParams, SynthSpec};

use commands::Subset;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "lidsn", version, about = "Dual-stream EEG decoding: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (seed, fold) job of a run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a snapshot on one subset of a fold.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic epoch file.
    Synth {
        /// JSON synthetic recipe; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Euclidean-align an epoch file per subject.
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative band-power features of an epoch file.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        outer_s: f64,
        #[arg(long, default_value_t = 0.8)]
        outer_overlap: f64,
        #[arg(long, default_value_t = 2.0)]
        inner_s: f64,
        #[arg(long, default_value_t = 0.75)]
        inner_overlap: f64,
    },
    /// Print the folds of an evaluation protocol as JSON.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// Use small random configurations.
        #[arg(long, required = true)]
        tiny: bool,
        #[arg(long, default_value_t = 20)]
        configs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter and FLOP counts of the model section.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write attention tables, heatmaps and saliency maps.
    ExportViz {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        trials: Vec<usize>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seeds, print_config } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(o) = out {
                cfg.output = o;
            }
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            if print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let out = cfg.output.clone();
            commands::train(&cfg, &out)
        }
        Command::Eval { config, model, fold, subset, out } => {
            commands::eval(&RunConfig::load(config.as_deref())?, &model, fold, subset, out.as_deref())
        }
        Command::Synth { spec, seed, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SynthSpec::default(),
            };
            commands::synth(&spec, seed, &out)
        }
        Command::Align { input, out } => commands::align(&input, &out),
        Command::Features { input, out, outer_s, outer_overlap, inner_s, inner_overlap } => {
            commands::features(&input, &RpsdParams { outer_s, outer_overlap, inner_s, inner_overlap }, &out)
        }
        Command::Split { input, protocol, out } => commands::split(&input, protocol, out.as_ref()),
        Command::GradCheck { tiny: _, configs, seed } => commands::grad_check(configs, seed),
        Command::Count { config } => commands::count(&RunConfig::load(config.as_deref())?),
        Command::ExportViz { config, model, out, fold, subset, trials } => {
            commands::export_viz(&RunConfig::load(config.as_deref())?, &model, fold, subset, &trials, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {first}");
            let usage: Vec<String> = e.render().to_string().lines().skip(1).map(str::to_string).collect();
            eprintln!("{}", usage.join("\n").trim());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
