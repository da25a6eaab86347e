//! Experiment configuration, presets and derived dimensions.

use std::fs;
use std::path::{Path, PathBuf};

use neurodecode_core::{Error, Result};
use neurodecode_data::{GlmConfig, SynthConfig, Vocab};
use neurodecode_metrics::SsimConfig;
use neurodecode_models::diffusion::AMPLITUDES;
use neurodecode_models::{
    ClassifierConfig, ClassifierTrainConfig, CodecConfig, CodecTrainConfig, DenoiserTrainConfig, DiffusionConfig, DualEncoderConfig,
    DualTrainConfig, GruRegressorConfig, HvaeConfig, HvaeTrainConfig, Stage1Kind, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Smoke,
    Desk,
    PaperDimsShapes,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Preset::Smoke),
            "desk" => Ok(Preset::Desk),
            "paper-dims-shapes" => Ok(Preset::PaperDimsShapes),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected smoke, desk or paper-dims-shapes)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Fraction of stimuli used for training; the rest is the test set.
    pub train_fraction: f64,
    /// Procedural images the generative and embedding models are trained on,
    /// disjoint from the fMRI stimuli.
    pub pool_images: usize,
    /// Fraction of training records held out for early stopping.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), train_fraction: 0.9, pool_images: 1024, val_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub kind: Stage1Kind,
    pub model: GruRegressorConfig,
    pub train: TrainConfig,
    /// Ridge penalties searched by cross-validation for the ridge variant and
    /// the baseline comparison row.
    pub ridge_alphas: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { kind: Stage1Kind::Gru, model: GruRegressorConfig::default(), train: TrainConfig::default(), ridge_alphas: alpha_grid(), cv_folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub encoder: DualEncoderConfig,
    pub train: DualTrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub ridge_alphas: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            encoder: DualEncoderConfig::default(),
            train: DualTrainConfig::default(),
            classifier: ClassifierConfig::default(),
            classifier_train: ClassifierTrainConfig::default(),
            ridge_alphas: alpha_grid(),
            cv_folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct LdmConfig {
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub diffusion: DiffusionConfig,
    pub train: DenoiserTrainConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub ssim: SsimConfig,
    pub amplitudes: Vec<u32>,
    /// Output width of the random-projection feature extractor.
    pub projection_dim: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { ssim: SsimConfig::default(), amplitudes: AMPLITUDES.to_vec(), projection_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Only shape contracts are evaluated; nothing is trained.
    pub shapes_only: bool,
    pub data: DataConfig,
    pub glm: GlmConfig,
    pub hvae: HvaeConfig,
    pub hvae_train: HvaeTrainConfig,
    pub stage1: Stage1Config,
    pub embed: EmbedConfig,
    pub ldm: LdmConfig,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Smoke)
    }
}

/// `10^0 … 10^6` in decades.
pub fn alpha_grid() -> Vec<f64> {
    (0..=6).map(|k| 10f64.powi(k)).collect()
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Smoke => Self::smoke(),
            Preset::Desk => Self::desk(),
            Preset::PaperDimsShapes => Self::paper_dims_shapes(),
        }
    }

    fn base() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            shapes_only: false,
            data: DataConfig::default(),
            glm: GlmConfig::default(),
            hvae: HvaeConfig::default(),
            hvae_train: HvaeTrainConfig::default(),
            stage1: Stage1Config::default(),
            embed: EmbedConfig::default(),
            ldm: LdmConfig::default(),
            metrics: MetricConfig::default(),
        }
    }

    /// 64 stimuli, 200 voxels, 16×16 images and short training.
    pub fn smoke() -> Self {
        let mut c = Self::base();
        c.out = PathBuf::from("runs/smoke");
        c.data.synth = SynthConfig { n_stimuli: 64, image_size: 16, voxels: 200, ..SynthConfig::default() };
        c.data.pool_images = 384;
        c.hvae_train.epochs = 8;
        c.embed.train.epochs = 12;
        c.embed.classifier_train.epochs = 8;
        c.ldm.codec_train.epochs = 15;
        c.ldm.train.epochs = 12;
        c.resolve()
    }

    /// A few hundred stimuli and fuller training on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::base();
        c.out = PathBuf::from("runs/desk");
        c.data.synth = SynthConfig { n_stimuli: 320, image_size: 16, voxels: 500, ..SynthConfig::default() };
        c.data.pool_images = 1024;
        c.hvae_train.epochs = 15;
        c.embed.train.epochs = 30;
        c.embed.classifier_train.epochs = 10;
        c.ldm.codec_train.epochs = 20;
        c.ldm.train.epochs = 30;
        c.resolve()
    }

    /// Full-size dimensions for shape checks only.
    pub fn paper_dims_shapes() -> Self {
        let mut c = Self::base();
        c.out = PathBuf::from("runs/paper-dims-shapes");
        c.shapes_only = true;
        c.data.synth = SynthConfig { image_size: 64, voxels: 15_724, ..SynthConfig::default() };
        c.hvae = HvaeConfig::paper_dims(15);
        c.stage1.model = GruRegressorConfig::paper();
        c.embed.encoder = DualEncoderConfig::paper_dims(Vocab::default().len());
        c
    }

    /// Fills every dimension that follows from another part of the config.
    pub fn resolve(mut self) -> Self {
        if self.shapes_only {
            return self;
        }
        let size = self.data.synth.image_size;
        self.hvae.image_size = size;
        self.stage1.model.input_len = self.data.synth.voxels;
        self.stage1.model.output_len = self.hvae.injected_len();
        self.embed.encoder.image_size = size;
        self.embed.encoder.vocab = Vocab::default().len();
        self.embed.classifier.image_size = size;
        self.embed.classifier.classes = self.data.synth.n_classes;
        self.ldm.codec.image_size = size;
        let [c, s, _] = self.ldm.codec.latent_shape();
        self.ldm.diffusion.latent_channels = c;
        self.ldm.diffusion.latent_size = s;
        self.ldm.diffusion.cond_dim = self.embed.encoder.d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.hvae.validate()?;
        self.stage1.model.validate()?;
        self.embed.encoder.validate()?;
        if self.shapes_only {
            return Ok(());
        }
        self.embed.classifier.validate()?;
        self.ldm.codec.validate()?;
        self.ldm.diffusion.validate()?;
        let size = self.data.synth.image_size;
        let sizes = [self.hvae.image_size, self.embed.encoder.image_size, self.embed.classifier.image_size, self.ldm.codec.image_size];
        if sizes.iter().any(|&s| s != size) {
            return Err(Error::Config(format!("model image sizes {sizes:?} differ from the stimulus size {size}")));
        }
        if self.stage1.model.output_len != self.hvae.injected_len() {
            return Err(Error::Config(format!(
                "stage-1 output {} does not match the {} injected HVAE values",
                self.stage1.model.output_len,
                self.hvae.injected_len()
            )));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction must be in (0, 1), got {}", self.data.val_fraction)));
        }
        if self.data.pool_images < 16 {
            return Err(Error::Config(format!("the pretraining pool needs at least 16 images, got {}", self.data.pool_images)));
        }
        if self.embed.cv_folds < 2 || self.stage1.cv_folds < 2 || self.embed.ridge_alphas.is_empty() || self.stage1.ridge_alphas.is_empty() {
            return Err(Error::Config("ridge selection needs at least 2 folds and a non-empty penalty grid".into()));
        }
        if self.metrics.amplitudes.first() != Some(&0) {
            return Err(Error::Config(format!("the noise sweep must start at amplitude 0, got {:?}", self.metrics.amplitudes)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
