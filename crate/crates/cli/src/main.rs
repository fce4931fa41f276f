use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvee::rates::LogBase;
use cvee_cli::commands::{self, CertifyInput, RateArgs};
use cvee_cli::config::parse_sigmas;
use cvee_cli::{CliError, Completion, RunConfig};

#[derive(Parser)]
#[command(name = "cvee", version, about = "Effective-entanglement certification for fading CV links")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for certification and sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated σ-levels, e.g. 0,1,2,3.
    #[arg(long, global = true)]
    sigma: Option<String>,
    /// Logarithm base for log-negativity: 2 or e.
    #[arg(long = "log-base", global = true)]
    log_base: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate detection records and the transmission histogram.
    Simulate,
    /// Bin a record file into per-bin, per-state moments.
    Ingest {
        /// Defaults to records.csv in the output directory.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Certify moments at each σ-level.
    Certify {
        /// Defaults to moments.csv in the output directory.
        #[arg(long, conflicts_with = "expected")]
        moments: Option<PathBuf>,
        /// Certify the noise-free model moments at this transmission instead.
        #[arg(long)]
        expected: Option<f64>,
    },
    /// Theoretical negativity curves over amplitude and excess noise.
    Sweep,
    /// Aggregate certified bins into a transfer rate.
    Rate {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// States per second; overrides the config.
        #[arg(long = "state-rate")]
        state_rate: Option<f64>,
    },
    /// Summarize a run directory.
    Report {
        /// Defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Histogram, moments, certification and rate in one pass.
    Run,
}

fn log_base(s: &Option<String>) -> Result<Option<LogBase>, CliError> {
    s.as_deref()
        .map(|v| LogBase::parse(v).ok_or_else(|| CliError::Validation(format!("--log-base: expected 2 or e, got {v:?}"))))
        .transpose()
}

fn load(cli: &Cli, required: bool) -> Result<Option<RunConfig>, CliError> {
    let Some(path) = &cli.config else {
        return if required {
            Err(CliError::Validation("--config is required for this command".into()))
        } else {
            Ok(None)
        };
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = &cli.sigma {
        cfg.certify.sigma = parse_sigmas(s)?;
    }
    if let Some(b) = log_base(&cli.log_base)? {
        cfg.certify.log_base = b;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    Ok(Some(cfg))
}

fn dispatch(cli: &Cli) -> Result<Completion, CliError> {
    if cli.workers == 0 {
        return Err(CliError::Validation("--workers must be positive".into()));
    }
    let needs_config = !matches!(cli.command, Command::Rate { .. } | Command::Report { .. });
    let cfg = load(cli, needs_config)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let cfg_ref = cfg.as_ref();
    match &cli.command {
        Command::Simulate => commands::simulate(cfg_ref.unwrap(), &out),
        Command::Ingest { records } => {
            let records = records.clone().unwrap_or_else(|| out.join(commands::RECORDS_FILE));
            commands::ingest(cfg_ref.unwrap(), &records, &out)
        }
        Command::Certify { moments, expected } => {
            let default = out.join(commands::MOMENTS_FILE);
            let input = match expected {
                Some(t) => CertifyInput::Expected(*t),
                None => CertifyInput::Moments(moments.as_deref().unwrap_or(&default)),
            };
            commands::certify(cfg_ref.unwrap(), input, &out, cli.workers)
        }
        Command::Sweep => commands::sweep(cfg_ref.unwrap(), &out, cli.workers),
        Command::Rate {
            results,
            histogram,
            state_rate,
        } => {
            let results = results.clone().unwrap_or_else(|| out.join(commands::RESULTS_FILE));
            let histogram = histogram.clone().unwrap_or_else(|| out.join(commands::HISTOGRAM_FILE));
            let args = RateArgs {
                results: &results,
                histogram: &histogram,
                state_rate: *state_rate,
                log_base: log_base(&cli.log_base)?,
            };
            commands::rate(cfg_ref, args, &out)
        }
        Command::Report { run } => commands::report(run.as_deref().unwrap_or(&out)),
        Command::Run => commands::run(cfg_ref.unwrap(), &out, cli.workers),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(c) => {
            if c == Completion::NonOptimal {
                eprintln!("warning: some solves did not reach an optimal status");
            }
            ExitCode::from(c.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
