//! Benchmark CLI: `run` executes a configured pipeline and writes a JSON
//! report, `compare` diffs two reports over the same workload, and
//! `gen-workload` writes a binary visual-embedding file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsetok::harness::config::{BackendConfig, ConfigError};
use sparsetok::harness::embeddings::write_embeddings;
use sparsetok::harness::workload::generate_embedding_matrices;
use sparsetok::harness::{
    compare_reports, load_config, load_preset, run_to_report_path, RunReport,
};

#[derive(Parser)]
#[command(
    name = "sparsetok",
    version,
    about = "Text-guided visual-token sparsification benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a benchmark run and emit a JSON report.
    Run(RunArgs),
    /// Diff two reports that share a workload.
    Compare(CompareArgs),
    /// Generate a binary visual-embedding workload file.
    GenWorkload(GenWorkloadArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a JSON run config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a built-in preset (retain192, retain128, retain64).
    #[arg(long)]
    preset: Option<String>,
    /// Where to write the report (defaults to the config's report_path, or
    /// stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Attention backend override.
    #[arg(long, value_parser = ["dense", "blockwise"])]
    backend: Option<String>,
    /// Block size for the blockwise backend override.
    #[arg(long)]
    block_size: Option<usize>,
    /// Seed override (applies to model and workload).
    #[arg(long)]
    seed: Option<u64>,
    /// Repetition count override.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Measure and report prefill wall times.
    #[arg(long)]
    measure_time: bool,
}

#[derive(Args)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    /// Where to write the diff (stdout when unset).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenWorkloadArgs {
    #[arg(long)]
    output: PathBuf,
    /// Number of matrices in the file.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Visual tokens per matrix.
    #[arg(long, default_value_t = 64)]
    l_v: usize,
    /// Embedding width; must match the model's hidden_dim at run time.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not errors.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::GenWorkload(args) => cmd_gen_workload(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError {
            code,
            message,
            report_stub,
        }) => {
            eprintln!("error: {message}");
            if let Some(path) = report_stub {
                let stub = serde_json::json!({ "error": message });
                let _ = std::fs::write(
                    &path,
                    format!("{}\n", serde_json::to_string_pretty(&stub).unwrap()),
                );
            }
            ExitCode::from(code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
    report_stub: Option<PathBuf>,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
            report_stub: None,
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
            report_stub: None,
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => load_config(path).map_err(|e| CliError::config(e.to_string()))?,
        (None, Some(name)) => load_preset(name).map_err(|e| CliError::config(e.to_string()))?,
        (None, None) => return Err(CliError::config("run needs --config PATH or --preset NAME")),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    if let Some(seed) = args.seed {
        config.seed = Some(seed);
        // Re-derive the workload seed from the override.
        match &mut config.workload {
            sparsetok::harness::config::WorkloadConfig::Synthetic(w) => w.seed = None,
            sparsetok::harness::config::WorkloadConfig::File(w) => w.seed = None,
        }
    }
    if let Some(backend) = &args.backend {
        config.attention_backend = match backend.as_str() {
            "dense" => BackendConfig::Dense,
            "blockwise" => {
                let block_size = args.block_size.unwrap_or(match config.attention_backend {
                    BackendConfig::Blockwise { block_size } => block_size,
                    BackendConfig::Dense => 16,
                });
                BackendConfig::Blockwise { block_size }
            }
            other => return Err(CliError::config(format!("unknown backend {other:?}"))),
        };
    } else if let Some(block_size) = args.block_size {
        config.attention_backend = BackendConfig::Blockwise { block_size };
    }
    if let Some(repetitions) = args.repetitions {
        config.repetitions = repetitions;
    }
    if args.measure_time {
        config.measure_time = true;
    }
    if let Some(report) = &args.report {
        config.report_path = Some(report.clone());
    }
    let config = config
        .resolve()
        .map_err(|e: ConfigError| CliError::config(e.to_string()))?;

    let report_path = config.report_path.clone();
    match run_to_report_path(&config) {
        Ok(report) => {
            match &config.report_path {
                None => print!("{}", report.to_json()),
                Some(path) => {
                    let seqs = report.aggregate.num_sequences;
                    eprintln!(
                        "report written to {} ({seqs} sequence{})",
                        path.display(),
                        if seqs == 1 { "" } else { "s" }
                    );
                }
            }
            Ok(())
        }
        Err(err) => {
            let code = err.exit_code() as u8;
            Err(CliError {
                code,
                message: err.to_string(),
                report_stub: if code == 2 { report_path } else { None },
            })
        }
    }
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let a = RunReport::from_path(&args.report_a).map_err(|e| CliError::config(e.to_string()))?;
    let b = RunReport::from_path(&args.report_b).map_err(|e| CliError::config(e.to_string()))?;
    let diff = compare_reports(&a, &b).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&diff).expect("diff serializes");
    text.push('\n');
    match &args.report {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_workload(args: GenWorkloadArgs) -> Result<(), CliError> {
    if args.count == 0 || args.l_v == 0 || args.dim == 0 {
        return Err(CliError::config(
            "count, l_v, and dim must all be at least 1",
        ));
    }
    let matrices = generate_embedding_matrices(args.count, args.l_v, args.dim, args.seed);
    write_embeddings(&args.output, &matrices).map_err(|e| CliError::runtime(e.to_string()))?;
    eprintln!(
        "wrote {} matrix(es) of {}x{} to {}",
        args.count,
        args.l_v,
        args.dim,
        args.output.display()
    );
    Ok(())
}
