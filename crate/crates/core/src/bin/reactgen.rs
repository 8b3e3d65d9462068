use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reactgen::config::RunConfig;
use reactgen::pipeline::{self, GenerateRequest, Workspace};
use reactgen::Result;

/// Generate human reactions to video from discrete motion tokens.
#[derive(Parser)]
#[command(name = "reactgen", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in toy profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Work directory; overrides the config and REACTGEN_WORK_DIR.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic video-motion corpus and its manifest.
    SynthData,
    /// Split the manifest 4:1 within every subcategory.
    Split,
    /// Train the residual-quantized motion tokenizer.
    TrainTokenizer,
    /// Train the masked base-layer transformer.
    TrainBase,
    /// Train the residual-layer transformer.
    TrainResidual,
    /// Generate one reaction from a video feature file.
    Generate {
        /// Frame feature file (.rgvf).
        #[arg(long)]
        features: PathBuf,
        /// Output length in frames (multiple of 4).
        #[arg(long)]
        length: usize,
        /// Parallel decoding iterations; defaults to the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling temperature; defaults to the config.
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output motion file (.rgmo).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with FID, Diversity and MultiModality.
    Evaluate,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    }
    .with_env_overrides();
    if let Some(dir) = cli.work_dir {
        cfg.paths.work_dir = dir;
    }
    let ws = Workspace::new(&cfg.paths.work_dir);
    let force = cli.force;
    match cli.command {
        Command::SynthData => {
            let m = pipeline::synth_data(&cfg, &ws, force)?;
            println!("wrote {} pairs to {}", m.len(), ws.manifest().display());
        }
        Command::Split => {
            let m = pipeline::split(&cfg, &ws, force)?;
            println!("wrote {} entries to {}", m.len(), ws.split().display());
        }
        Command::TrainTokenizer => report("tokenizer", &ws.tokenizer(), pipeline::train_tokenizer(&cfg, &ws, force)?),
        Command::TrainBase => report("base transformer", &ws.base(), pipeline::train_base(&cfg, &ws, force)?),
        Command::TrainResidual => report("residual transformer", &ws.residual(), pipeline::train_residual(&cfg, &ws, force)?),
        Command::Generate {
            features,
            length,
            steps,
            temperature,
            seed,
            out,
        } => {
            let req = GenerateRequest {
                features,
                frames: length,
                iterations: steps,
                temperature,
                seed,
                out,
            };
            let m = pipeline::generate(&cfg, &ws, &req, force)?;
            println!("wrote {} frames to {}", m.frames(), req.out.display());
        }
        Command::Evaluate => {
            let outcome = pipeline::evaluate(&cfg, &ws, force)?;
            print!("{}", outcome.to_table());
            println!("report: {}", ws.report_json().display());
        }
    }
    Ok(())
}

fn report(what: &str, path: &std::path::Path, s: pipeline::TrainSummary) {
    println!(
        "trained {what} for {} iterations (final loss {:.5}); saved {}",
        s.iterations,
        s.final_loss,
        path.display()
    );
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
