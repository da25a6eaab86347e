//! Orchestration of the decoding pipeline: configuration, stage commands
//! over a run directory, the noise-sensitivity sweep and reports.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};

pub use artifacts::{Run, RunManifest};
pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Glm,
    TrainHvae,
    TrainStage1,
    TrainEmbed,
    FitRidgeEmbed,
    TrainLdm,
    Reconstruct,
    NoiseSweep,
    Report,
    /// Every stage in order, or the shape contracts for a shape-only config.
    Run,
}

/// Stages executed by `Command::Run`, in order.
pub const PIPELINE: [Command; 10] = [
    Command::Synth,
    Command::Glm,
    Command::TrainHvae,
    Command::TrainStage1,
    Command::TrainEmbed,
    Command::FitRidgeEmbed,
    Command::TrainLdm,
    Command::Reconstruct,
    Command::NoiseSweep,
    Command::Report,
];

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Glm => "glm",
            Command::TrainHvae => "train-hvae",
            Command::TrainStage1 => "train-stage1",
            Command::TrainEmbed => "train-embed",
            Command::FitRidgeEmbed => "fit-ridge-embed",
            Command::TrainLdm => "train-ldm",
            Command::Reconstruct => "reconstruct",
            Command::NoiseSweep => "noise-sweep",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

/// Runs one command and returns the manifests it wrote.
pub fn execute(run: &Run, cmd: Command) -> CliResult<Vec<RunManifest>> {
    let one = |m: CliResult<RunManifest>| m.map(|m| vec![m]);
    match cmd {
        Command::Synth => one(stages::synth(run)),
        Command::Glm => one(stages::glm(run)),
        Command::TrainHvae => one(stages::train_hvae_stage(run)),
        Command::TrainStage1 => one(stages::train_stage1(run)),
        Command::TrainEmbed => one(stages::train_embed(run)),
        Command::FitRidgeEmbed => one(stages::fit_ridge_embed(run)),
        Command::TrainLdm => one(stages::train_ldm(run)),
        Command::Reconstruct => one(stages::reconstruct(run)),
        Command::NoiseSweep => one(stages::noise_sweep(run)),
        Command::Report => one(report::report(run)),
        Command::Run if run.cfg.shapes_only => one(report::shapes(run)),
        Command::Run => PIPELINE.iter().map(|&c| stages_one(run, c)).collect(),
    }
}

fn stages_one(run: &Run, cmd: Command) -> CliResult<RunManifest> {
    Ok(execute(run, cmd)?.remove(0))
}

/// Config sources in order of precedence: an explicit file, a preset, the
/// config stored in the output directory, then the smoke preset. `seed` and
/// `out` override the chosen config.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn resolve_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let stored = |dir: &Path| dir.join("config.json");
    let mut cfg = if let Some(p) = &args.config {
        ExperimentConfig::load(p)?
    } else if let Some(p) = args.preset {
        ExperimentConfig::preset(p)
    } else if let Some(dir) = args.out.as_deref().filter(|d| stored(d).is_file()) {
        ExperimentConfig::load(&stored(dir))?
    } else {
        ExperimentConfig::smoke()
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Caps the worker pool from `NEURODECODE_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NEURODECODE_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| neurodecode_core::Error::Config(format!("NEURODECODE_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(neurodecode_core::Error::Config("NEURODECODE_THREADS must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    Ok(())
}
