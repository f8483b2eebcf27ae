//! Thin CLI over the pipeline functions. Exit codes: 0 success, 1 usage
//! error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqcvae::config::{Overrides, RunConfig};
use seqcvae::model::ModelVariant;
use seqcvae::pipeline;

#[derive(Parser)]
#[command(name = "seqcvae", version, about = "Sequential conditional VAE for diverse caption generation")]
struct Cli {
    /// Run configuration JSON; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model variant override (seq_cvae, seq_cvae_brnn, seq_cvae_prior_nox,
    /// seq_cvae_const_prior, cvae_single_z, zforcing_shared).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Samples per condition override.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits under the output directory.
    GenCorpus,
    /// Pretrain the backward language model; writes blm.sqcv.
    PretrainBlm,
    /// Train the model; writes metrics.csv and latest.sqcv.
    Train,
    /// Sample and consensus-rerank captions; writes samples.jsonl.
    Sample,
    /// Interpolate between two latent trajectories; writes interpolations.jsonl.
    Interpolate,
    /// Score samples.jsonl against the test split; writes report.json.
    Evaluate,
    /// Export intention-prior means with a 2D PCA projection.
    ExportLatents,
    /// Finite-difference gradient check on a toy instance.
    Gradcheck,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown variant: {s}"))
}

fn run(cli: Cli) -> seqcvae::Result<()> {
    let variant = match &cli.variant {
        Some(s) => Some(parse_variant(s).map_err(seqcvae::Error::Config)?),
        None => None,
    };
    let ov = Overrides {
        seed: cli.seed,
        variant,
        k: cli.k,
        out: cli.out.map(|p| p.to_string_lossy().into_owned()),
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::GenCorpus => pipeline::cmd_gen_corpus(&cfg)?,
        Command::PretrainBlm => {
            let history = pipeline::cmd_pretrain_blm(&cfg)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("pretrain loss {first:.4} -> {last:.4}");
            }
        }
        Command::Train => {
            let summary = pipeline::cmd_train(&cfg)?;
            println!(
                "trained {} steps, final loss {:.4} (recon {:.4}, kl {:.4})",
                summary.steps_run, summary.final_loss, summary.final_recon, summary.final_kl
            );
        }
        Command::Sample => {
            let sets = pipeline::cmd_sample(&cfg)?;
            let total: usize = sets.iter().map(|s| s.k()).sum();
            println!("sampled {total} captions over {} conditions", sets.len());
        }
        Command::Interpolate => pipeline::cmd_interpolate(&cfg)?,
        Command::Evaluate => {
            let report = pipeline::cmd_evaluate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ExportLatents => {
            let rows = pipeline::cmd_export_latents(&cfg)?;
            println!("exported {rows} latent rows");
        }
        Command::Gradcheck => {
            let err = pipeline::cmd_gradcheck(&cfg)?;
            println!("max relative gradient error: {err:.3e}");
            if err >= 1e-4 {
                return Err(seqcvae::Error::Config(format!(
                    "gradient check failed: max relative error {err:.3e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
