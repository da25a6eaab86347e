//! Evaluation metrics for reconstructed images: MSE/MAE, SSIM, pixel
//! correlation, two-way identification over feature extractors and spatial
//! distance correlation.

pub mod identification;
pub mod report;
pub mod ssim;
pub mod stats;

pub use identification::{two_way_from_similarity, two_way_identification, two_way_scores, FeatureExtractor, RandomProjection};
pub use report::{evaluate, MetricReport, SampleMetrics};
pub use ssim::{ssim, ssim_plane, SsimConfig, Window};
pub use stats::{mae, mse, pearson, pixcorr, sdc};
