//! Trainable models of the decoding pipeline: stage-1 beta→latent
//! regressors, a hierarchical VAE with latent injection, dual-encoder
//! image/text embeddings, ridge embedding predictors and a conditional
//! latent diffusion model, plus a small classifier used for evaluation
//! features.

pub mod benchmark;
pub mod classifier;
pub mod codec;
pub mod contrastive;
pub mod diffusion;
pub mod hvae;
pub mod ridge;
pub mod stage1;
pub mod util;

pub use ridge::{normalize_rows, select_alpha, RidgeModel, RowLayout};
pub use stage1::{param_count, ridge_baseline, train_regressor, GruRegressorConfig, Stage1Kind, Stage1Model, TrainConfig, TrainReport};
pub use contrastive::{contrastive_loss, train_dual_encoder, ContrastiveFeatures, DualEncoder, DualEncoderConfig, DualTrainConfig, RetrievalReport};
pub use hvae::{train_hvae, Hvae, HvaeConfig, HvaeLatent, HvaeReport, HvaeTrainConfig};
pub use classifier::{train_classifier, ClassifierConfig, ClassifierFeatures, ClassifierReport, ClassifierTrainConfig, ConvClassifier, Tap};
pub use codec::{train_codec, CodecConfig, CodecFeatures, CodecReport, CodecTrainConfig, LatentCodec};
pub use diffusion::{
    img2img_refine, perturb_guess, reverse_generate, train_denoiser, Conditioning, Denoiser, DenoiserReport, DenoiserTrainConfig, DiffusionConfig,
    NoiseSchedule, PerturbConfig,
};
