use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vqdiff::config::RunConfig;
use vqdiff::{pipeline, Error, Result};
use vqdiff_core::diffusion::InitMode;

/// Symbolic music generation with a VQ-VAE tokenizer and a discrete diffusion denoiser.
#[derive(Debug, Parser)]
#[command(name = "vqdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    /// Start from an all-MASK sequence.
    Mask,
    /// Start from uniformly random tokens.
    Random,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment `midi_dir/<label>/*.mid` into the training corpus.
    Ingest(Common),
    /// Train the pianoroll tokenizer.
    TrainVqvae(Common),
    /// Train the style-conditioned denoiser on tokenized segments.
    TrainDiffusion(Common),
    /// Sample pieces and write them as MIDI and PGM.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Style index; all styles when omitted.
        #[arg(long)]
        style: Option<usize>,
        /// Pieces per style.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Mode::Mask)]
        mode: Mode,
    },
    /// Score generated pieces for feature overlap and style accuracy.
    Evaluate(Common),
    /// Write the noise schedule as CSV.
    DumpSchedule(Common),
    /// Print the fully resolved configuration.
    ShowConfig(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    log::info!("resolved configuration:\n{}", cfg.to_text());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => {
            let s = pipeline::ingest(&resolve(&c)?)?;
            for (name, n) in s.labels.iter().zip(&s.segments_per_label) {
                println!("{name}: {n} segments");
            }
            println!("{} files parsed, {} skipped", s.files_parsed, s.skipped.len());
        }
        Command::TrainVqvae(c) => {
            let s = pipeline::train_vqvae_stage(&resolve(&c)?)?;
            println!(
                "final loss {:.5}, reconstruction accuracy {:.4} train / {:.4} held-out ({} segments), held-out note recall {:.4}, {} codes used",
                s.final_loss, s.train_accuracy, s.heldout_accuracy, s.heldout_segments, s.heldout_recall, s.codes_used
            );
        }
        Command::TrainDiffusion(c) => {
            let history = pipeline::train_diffusion_stage(&resolve(&c)?)?;
            println!("final loss {:.5}", history.last().copied().unwrap_or(f64::NAN));
        }
        Command::Generate { common, style, count, mode } => {
            if count == 0 {
                return Err(Error::Config("--count must be at least 1".into()));
            }
            let mode = match mode {
                Mode::Mask => InitMode::AllMask,
                Mode::Random => InitMode::Random,
            };
            for p in pipeline::generate(&resolve(&common)?, style, count, mode)? {
                println!("{} (style {})", p.midi.display(), p.style);
            }
        }
        Command::Evaluate(c) => {
            let e = pipeline::evaluate(&resolve(&c)?)?;
            println!("overlap average {:.4}", e.overlap.average());
            println!("style accuracy {:.4}", e.style.overall);
            println!("classifier held-out accuracy {:.4}", e.classifier_holdout_accuracy);
        }
        Command::DumpSchedule(c) => {
            println!("{}", pipeline::dump_schedule(&resolve(&c)?)?.display());
        }
        Command::ShowConfig(c) => print!("{}", resolve(&c)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
