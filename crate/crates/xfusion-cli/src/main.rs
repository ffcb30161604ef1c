//! Pipeline CLI: corpus generation, training, sampling, evaluation.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training
//! divergence. Failures print one machine-parsable JSON line to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xfusion::config::RunConfig;
use xfusion::error::Error;
use xfusion::pipeline;

#[derive(Parser)]
#[command(name = "xfusion", version, about = "Multi-modal anomaly synthesis pipeline")]
struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration with one value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured procedural corpus.
    GenCorpus {
        /// Output directory for manifest, images and masks.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory.
    Train {
        /// Corpus directory (or its manifest.jsonl).
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for model.ckpt and loss.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample generated defects from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a generated corpus against a held-out corpus.
    Eval {
        /// Generated corpus directory (or manifest.jsonl).
        #[arg(long)]
        generated: PathBuf,
        /// Held-out corpus directory (or manifest.jsonl).
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Accept either a corpus directory or a path to its manifest file.
fn corpus_dir(path: &Path) -> PathBuf {
    if path.file_name().map(|n| n == xfusion::corpus::MANIFEST_NAME) == Some(true) {
        path.parent().unwrap_or(path).to_path_buf()
    } else {
        path.to_path_buf()
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Json { context, .. } if context == "config" => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config { .. } => "config",
        Error::Json { context, .. } if context == "config" => "config",
        Error::Diverged { .. } => "divergence",
        _ => "data",
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    config.validate()?;

    match &cli.command {
        Command::GenCorpus { out } => {
            let result = pipeline::gen_corpus(&config, out)?;
            if !cli.quiet {
                println!("manifest: {}", result.manifest.display());
                println!("samples: {}", result.count);
                if result.count == 0 {
                    println!("warning: corpus size is 0; wrote an empty manifest");
                }
                for (keyword, count) in &result.stats {
                    println!("keyword {keyword}: {count}");
                }
            }
        }
        Command::Train { corpus, out } => {
            let result = pipeline::train_cmd(&config, &corpus_dir(corpus), out)?;
            if !cli.quiet {
                println!("checkpoint: {}", result.checkpoint_path.display());
                println!("loss_log: {}", result.loss_log_path.display());
                println!(
                    "loss first/last window: {:.6} / {:.6}",
                    result.first_window_mean, result.last_window_mean
                );
            }
        }
        Command::Sample { checkpoint, n, out } => {
            let result = pipeline::sample_cmd(&config, checkpoint, *n, out)?;
            if !cli.quiet {
                println!("manifest: {}", result.manifest.display());
                println!("samples: {}", result.count);
            }
        }
        Command::Eval {
            generated,
            heldout,
            out,
        } => {
            let result = pipeline::eval_cmd(
                &config,
                &corpus_dir(generated),
                &corpus_dir(heldout),
                out,
            )?;
            if !cli.quiet {
                println!("report: {}", result.report_path.display());
                print!("{}", result.report.render_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": error_kind(&err),
                "message": err.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
