//! Library of double-gamma hemodynamic response functions.

use neurodecode_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

/// Peak times of the positive lobe, seconds.
pub const PEAK_TIMES: [f64; 5] = [4.0, 5.0, 6.0, 7.0, 8.0];
/// Undershoot amplitude relative to the positive gamma term.
pub const UNDERSHOOT_RATIOS: [f64; 4] = [0.1, 1.0 / 6.0, 0.25, 1.0 / 3.0];
/// The undershoot lobe peaks this many seconds after the response peak.
pub const UNDERSHOOT_DELAY: f64 = 10.0;
/// Kernel support, seconds.
pub const KERNEL_SECONDS: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    pub peak: f64,
    pub undershoot: f64,
}

fn ln_gamma_int(a: f64) -> f64 {
    // shapes in the library are integers: ln Γ(a) = ln (a−1)!
    (1..a.round() as u64).map(|k| (k as f64).ln()).sum()
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t - ln_gamma_int(shape)).exp()
}

/// Double-gamma curve with unit scale: `g(t; p+1) − r · g(t; p+1+d)`.
pub fn double_gamma(t: f64, p: HrfParams) -> f64 {
    gamma_pdf(t, p.peak + 1.0) - p.undershoot * gamma_pdf(t, p.peak + 1.0 + UNDERSHOOT_DELAY)
}

#[derive(Clone, Debug)]
pub struct HrfLibrary {
    pub tr: f64,
    pub params: Vec<HrfParams>,
    /// One kernel per entry, sampled at `0, TR, 2 TR, …`, unit peak.
    pub kernels: Vec<Tensor>,
}

impl HrfLibrary {
    /// The 20-kernel grid: every peak time crossed with every undershoot ratio.
    pub fn standard(tr: f64) -> Result<Self> {
        let params = PEAK_TIMES
            .iter()
            .flat_map(|&peak| UNDERSHOOT_RATIOS.iter().map(move |&undershoot| HrfParams { peak, undershoot }))
            .collect();
        Self::from_params(tr, params)
    }

    pub fn from_params(tr: f64, params: Vec<HrfParams>) -> Result<Self> {
        if !(tr > 0.0) {
            return Err(Error::Config(format!("TR must be positive, got {tr}")));
        }
        let len = (KERNEL_SECONDS / tr).ceil() as usize + 1;
        let kernels = params
            .iter()
            .map(|&p| {
                let raw: Vec<f64> = (0..len).map(|i| double_gamma(i as f64 * tr, p)).collect();
                let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
                Tensor::from_vec(raw.into_iter().map(|v| v / peak).collect())
            })
            .collect();
        Ok(Self { tr, params, kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Causal convolution of each column of a row-major `[T, S]` matrix with a
/// kernel, truncated to `T` rows.
pub fn convolve_columns(x: &[f64], t: usize, s: usize, kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t * s];
    for i in 0..t {
        for (lag, &h) in kernel.iter().enumerate().take(i + 1) {
            if h == 0.0 {
                continue;
            }
            let src = &x[(i - lag) * s..(i - lag + 1) * s];
            let dst = &mut out[i * s..(i + 1) * s];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += h * v;
            }
        }
    }
    out
}
