use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use platform_gp_cli::commands::{
    analyze, diagnose, parse_methods, render_analyze, render_diagnose, simulate, weights_csv, SimulateArgs,
};
use platform_gp_cli::config::AnalysisConfig;
use platform_gp_cli::dataset::read_dataset;
use platform_gp_cli::error::{io_error, CliError};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "platform-gp",
    version,
    about = "Gaussian-process treatment effects for platform trials"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct DataArgs {
    /// Subject-level CSV.
    #[arg(long)]
    data: PathBuf,
    /// TOML analysis config.
    #[arg(long)]
    config: PathBuf,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Format of the report on stdout.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the ECE-averaged treatment effect.
    Analyze {
        #[command(flatten)]
        io: DataArgs,
        /// Write the full weight matrix (ECE rows by outcome columns) as CSV.
        #[arg(long)]
        dump_weights: Option<PathBuf>,
    },
    /// Weight diagnostics and the variance-reduction certificate.
    Diagnose {
        #[command(flatten)]
        io: DataArgs,
    },
    /// Run a simulation study on a built-in scenario.
    Simulate {
        #[arg(long)]
        scenario: u8,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated method labels, or `all`.
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        /// Optimizer restarts per fit.
        #[arg(long)]
        restarts: Option<usize>,
        /// Write the metrics table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the metrics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn emit<T: Serialize>(report: &T, text: String, io: &DataArgs, cfg: &AnalysisConfig) -> Result<(), CliError> {
    let json = to_json(report);
    for path in io.json.iter().chain(cfg.output.json.iter()) {
        write(path, &json)?;
    }
    match io.format {
        Format::Text => print!("{text}"),
        Format::Json => print!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Fit(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Analyze { io, dump_weights } => {
            let cfg = AnalysisConfig::read(&io.config)?;
            let ds = read_dataset(&io.data)?;
            let a = analyze(&cfg, &ds)?;
            for path in dump_weights.iter().chain(cfg.output.weights.iter()) {
                write(path, &weights_csv(&a)?)?;
            }
            emit(&a.report, render_analyze(&a.report), &io, &cfg)
        }
        Command::Diagnose { io } => {
            let cfg = AnalysisConfig::read(&io.config)?;
            let ds = read_dataset(&io.data)?;
            let r = diagnose(&cfg, &ds)?;
            emit(&r, render_diagnose(&r), &io, &cfg)
        }
        Command::Simulate {
            scenario,
            replicates,
            n,
            seed,
            methods,
            bootstrap,
            restarts,
            csv,
            json,
        } => {
            let args = SimulateArgs {
                scenario,
                replicates,
                n,
                seed,
                methods: parse_methods(&methods)?,
                bootstrap,
                restarts,
                threads: cli.threads,
            };
            let r = simulate(&args)?;
            if let Some(p) = csv {
                write(&p, &r.csv)?;
            }
            if let Some(p) = json {
                write(&p, &to_json(&r))?;
            }
            print!("{}", r.text);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // --help and --version come through here too
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let err = CliError::Input(first.to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
