//! Synthetic stimuli and fMRI data with known ground truth, and single-trial
//! beta estimation from BOLD timeseries.

pub mod glm;
pub mod hrf;
pub mod legendre;
pub mod linalg;
pub mod scene;
pub mod synth;

pub use glm::{condition_betas, fit_glmsingle, fractional_ridge, DesignMatrix, GlmConfig, GlmFit};
pub use hrf::HrfLibrary;
pub use linalg::{ols_solve, pca_components};
pub use scene::{Stimulus, Vocab};
pub use synth::{generate_dataset, split_dataset, zscore_betas, BetaRecord, SessionSchedule, SynthConfig, SynthDataset};
