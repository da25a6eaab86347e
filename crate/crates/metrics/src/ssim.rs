//! Structural similarity on the luminance plane.

use neurodecode_core::image::{dims, luminance};
use neurodecode_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Window {
    /// `size × size` box window.
    Uniform { size: usize },
    /// `size × size` Gaussian window with standard deviation `sigma`.
    Gaussian { size: usize, sigma: f64 },
}

impl Window {
    pub fn size(&self) -> usize {
        match *self {
            Window::Uniform { size } | Window::Gaussian { size, .. } => size,
        }
    }

    /// Normalized weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let k = self.size();
        let raw: Vec<f64> = match *self {
            Window::Uniform { .. } => vec![1.0; k * k],
            Window::Gaussian { sigma, .. } => {
                let c = (k as f64 - 1.0) / 2.0;
                let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
                (0..k * k).map(|i| g[i / k] * g[i % k]).collect()
            }
        };
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: Window,
    pub k1: f64,
    pub k2: f64,
    /// Bits per pixel; the dynamic range is `L = 2^bits − 1`.
    pub bits: u32,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: Window::Uniform { size: 7 }, k1: 0.01, k2: 0.03, bits: 8 }
    }
}

impl SsimConfig {
    /// 11×11 Gaussian window with σ = 1.5.
    pub fn gaussian() -> Self {
        Self { window: Window::Gaussian { size: 11, sigma: 1.5 }, ..Self::default() }
    }

    pub fn dynamic_range(&self) -> f64 {
        2f64.powi(self.bits as i32) - 1.0
    }
}

/// SSIM of two planes given in the `[0, L]` range, averaged over all valid
/// window positions (stride 1, no padding).
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::Dim(format!("ssim: planes of length {} and {} for a {h}×{w} image", x.len(), y.len())));
    }
    let k = cfg.window.size();
    if k == 0 || h < k || w < k {
        return Err(Error::Config(format!("ssim: {h}×{w} image is smaller than the {k}×{k} window")));
    }
    let l = cfg.dynamic_range();
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let wts = cfg.window.weights();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let p = (i + a) * w + j + b;
                    mx += wts[a * k + b] * x[p];
                    my += wts[a * k + b] * y[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let p = (i + a) * w + j + b;
                    let (dx, dy) = (x[p] - mx, y[p] - my);
                    let wt = wts[a * k + b];
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM between two `[C, H, W]` images with values in `[0, 1]`. Color images
/// are compared on luminance; both are rescaled to the `[0, L]` range.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Dim(format!("ssim: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    let (_, h, w) = dims(x)?;
    let l = cfg.dynamic_range();
    let gx: Vec<f64> = luminance(x)?.into_iter().map(|v| v * l).collect();
    let gy: Vec<f64> = luminance(y)?.into_iter().map(|v| v * l).collect();
    ssim_plane(&gx, &gy, h, w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_constant_images_score_one() {
        let x = vec![3.0; 64];
        assert!((ssim_plane(&x, &x, 8, 8, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_larger_than_image_is_config_error() {
        let x = vec![0.0; 25];
        assert!(matches!(ssim_plane(&x, &x, 5, 5, &SsimConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_weights_are_normalized_and_peaked() {
        let w = SsimConfig::gaussian().window.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(w[60] > w[0]);
    }
}
