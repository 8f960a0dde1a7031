use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use flowscale_cli::*;
use flowscale_climate::{DisaggregationMode, Variable};

#[derive(Parser)]
#[command(name = "flowscale", version, about = "Unsupervised statistical downscaling with aligned normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariableArg {
    Tmax,
    Precip,
}

impl From<VariableArg> for Variable {
    fn from(v: VariableArg) -> Self {
        match v {
            VariableArg::Tmax => Variable::MaxTemperature,
            VariableArg::Precip => Variable::Precipitation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Additive,
    Multiplicative,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthArg {
    Bumps,
    Bias,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Map low-resolution fields to the high-resolution domain.
    Downscale {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw joint samples from the shared latent space.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short = 'n', default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Interpolate between two high-resolution fields through the latent space.
    Interpolate {
        #[arg(long)]
        model: PathBuf,
        /// High-resolution grid file holding both endpoints.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Score predictions against truth.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Both)]
        format: FormatArg,
        /// Report files are written as `<output>.metrics.csv` and so on.
        #[arg(long, default_value = "report")]
        output: PathBuf,
    },
    /// Quantile-mapping baseline.
    Bcsd {
        #[command(subcommand)]
        action: BcsdCommand,
    },
    /// Write a synthetic low/high pair.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthArg::Bumps)]
        kind: SynthArg,
        /// JSON generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of steps.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum)]
        variable: Option<VariableArg>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Convert `time,row,col,value` CSV to a grid file.
    ConvertCsv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        variable: VariableArg,
        #[arg(long)]
        units: Option<String>,
        /// Date of time index 0.
        #[arg(long, default_value = "2000-01-01")]
        start: NaiveDate,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum BcsdCommand {
    Fit {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        high: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BCSD_QUANTILES)]
        quantiles: usize,
        /// Defaults follow the variable.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        output: PathBuf,
    },
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, resume } => {
            let out = cmd_train(&config, seed, resume.as_deref())?;
            println!("{} ({} loss records)", out.model_path.display(), out.records);
        }
        Command::Downscale { model, input, output, temperature, samples, seed } => {
            for p in cmd_downscale(&model, &input, &output, temperature, samples, seed)? {
                println!("{}", p.display());
            }
        }
        Command::Sample { model, count, seed, temperature, output_dir } => {
            let (x, y) = cmd_sample(&model, count, seed, temperature, &output_dir)?;
            println!("{}\n{}", x.display(), y.display());
        }
        Command::Interpolate { model, data, from, to, steps, output_dir } => {
            let (y, x) = cmd_interpolate(&model, &data, from, to, steps, &output_dir)?;
            println!("{}\n{}", y.display(), x.display());
        }
        Command::Evaluate { pred, truth, format, output } => {
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Both => ReportFormat::Both,
            };
            for p in cmd_evaluate(&pred, &truth, format, &output)? {
                println!("{}", p.display());
            }
        }
        Command::Bcsd { action } => match action {
            BcsdCommand::Fit { low, high, quantiles, mode, output } => {
                let mode = mode.map(|m| match m {
                    ModeArg::Additive => DisaggregationMode::Additive,
                    ModeArg::Multiplicative => DisaggregationMode::Multiplicative,
                });
                println!("{}", cmd_bcsd_fit(&low, &high, quantiles, mode, &output)?.display());
            }
            BcsdCommand::Apply { model, input, output } => {
                println!("{}", cmd_bcsd_apply(&model, &input, &output)?.display());
            }
        },
        Command::Synth { kind, config, seed, samples, variable, output_dir } => {
            let kind = match kind {
                SynthArg::Bumps => SynthKind::Bumps,
                SynthArg::Bias => SynthKind::Bias,
            };
            let overrides = SynthOverrides { seed, samples, variable: variable.map(Variable::from) };
            for p in cmd_synth(kind, config.as_deref(), &overrides, &output_dir)? {
                println!("{}", p.display());
            }
        }
        Command::ConvertCsv { input, variable, units, start, output } => {
            println!("{}", cmd_convert_csv(&input, variable.into(), units.as_deref(), start, &output)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
