use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grff::experiment::{
    apply_model_normalization, emit_pca, load_data_file, run_experiment, ExperimentConfig, ExperimentKind, RunOutput,
};
use grff::io::{csv_bytes, write_atomic};
use grff::model::{accuracy, Variant};
use grff::serialize::load_model;
use grff::{GrffError, Result};

/// Generative random Fourier features: experiments, attacks and model tools.
#[derive(Parser)]
#[command(name = "grff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config (or a run manifest).
    Run { config: PathBuf },
    /// Run a robustness config: attack, then fixed versus resampled noise.
    Attack { config: PathBuf },
    /// Top-3 principal components of one layer's features, as CSV.
    Pca {
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy of a saved model on a labelled data file.
    Eval {
        model: PathBuf,
        data: PathBuf,
        /// Also write per-row predictions (`index,true,pred`).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("GRFF_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| GrffError::Config(format!("GRFF_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn report(out: &RunOutput) {
    print!("{}", grff::experiment::summary_table(&out.summary));
    eprintln!("results written to {}", out.output_dir.display());
}

fn load_for(model: &grff::model::GrffNetwork, path: &Path) -> Result<grff::data::Dataset> {
    let dim = match model.variant {
        Variant::Vector { dim } => Some(dim),
        Variant::Image { .. } => None,
    };
    let data = load_data_file(path, dim)?;
    apply_model_normalization(model, &data)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => report(&run_experiment(&config, env_seed()?)?),
        Command::Attack { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.experiment.kind != ExperimentKind::Robustness {
                return Err(GrffError::Config("experiment.kind: `grff attack` needs kind = \"robustness\"".into()));
            }
            report(&grff::experiment::run_config(cfg, env_seed()?)?);
        }
        Command::Pca {
            model,
            data,
            layer,
            out,
            seed,
        } => {
            let net = load_model(&model)?;
            let ds = load_for(&net, &data)?;
            let bytes = emit_pca(&net, &ds, layer, seed)?;
            match out {
                Some(p) => write_atomic(&p, &bytes)?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
        }
        Command::Eval {
            model,
            data,
            predictions,
            seed,
        } => {
            let net = load_model(&model)?;
            let ds = load_for(&net, &data)?;
            let pred = net.predict(&ds.x, seed)?;
            println!("n={} accuracy={}", ds.len(), accuracy(&pred, &ds.y));
            if let Some(p) = predictions {
                let rows = pred
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| [i.to_string(), ds.y[i].to_string(), c.to_string()]);
                write_atomic(&p, &csv_bytes(&["index", "true", "pred"], rows)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
