use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use neurodecode_cli::{execute, init_threads, resolve_config, Command, ConfigArgs, Preset, Run};

#[derive(Parser)]
#[command(name = "neurodecode", version, about = "Two-stage image reconstruction from synthetic fMRI betas")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config, used when no config file is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Smoke,
    Desk,
    PaperDimsShapes,
}

#[derive(Clone, Copy, Subcommand)]
enum Cmd {
    /// Generate stimuli, BOLD runs and the pretraining image pool.
    Synth,
    /// Estimate, average and z-score betas; split train and test.
    Glm,
    /// Train the hierarchical VAE on the image pool.
    TrainHvae,
    /// Fit the betas-to-latents regressor and its ridge comparison row.
    TrainStage1,
    /// Train the dual encoder and the evaluation classifier.
    TrainEmbed,
    /// Map betas to vision and text embeddings with ridge regression.
    FitRidgeEmbed,
    /// Train the latent codec and the denoiser.
    TrainLdm,
    /// Decode test betas to guesses and refine them with the diffusion model.
    Reconstruct,
    /// Refine noise-perturbed guesses at each configured amplitude.
    NoiseSweep,
    /// Summary tables and montages from the run's artifacts.
    Report,
    /// All stages in order.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let preset = cli.preset.map(|p| match p {
        PresetArg::Smoke => Preset::Smoke,
        PresetArg::Desk => Preset::Desk,
        PresetArg::PaperDimsShapes => Preset::PaperDimsShapes,
    });
    let cmd = match cli.command {
        Cmd::Synth => Command::Synth,
        Cmd::Glm => Command::Glm,
        Cmd::TrainHvae => Command::TrainHvae,
        Cmd::TrainStage1 => Command::TrainStage1,
        Cmd::TrainEmbed => Command::TrainEmbed,
        Cmd::FitRidgeEmbed => Command::FitRidgeEmbed,
        Cmd::TrainLdm => Command::TrainLdm,
        Cmd::Reconstruct => Command::Reconstruct,
        Cmd::NoiseSweep => Command::NoiseSweep,
        Cmd::Report => Command::Report,
        Cmd::Run => Command::Run,
    };
    let args = ConfigArgs { config: cli.config, preset, seed: cli.seed, out: cli.out };
    let result = init_threads().and_then(|_| resolve_config(&args)).and_then(|cfg| execute(&Run::new(cfg), cmd));
    match result {
        Ok(manifests) => {
            for m in manifests {
                eprintln!("{}: {} outputs in {:.1} s", m.stage, m.outputs.len(), m.wall_time_s);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
