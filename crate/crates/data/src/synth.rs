//! Synthetic fMRI experiment with a known voxel forward model.
//!
//! Each stimulus is summarized by a fixed feature vector (block-averaged
//! luminance on a 4×4 grid, block-averaged edge energy on the same grid and
//! the three mean color channels). Voxel amplitudes are linear in the
//! standardized features; the BOLD signal is the sum of event impulses
//! convolved with a per-voxel library HRF, plus Legendre drift, shared
//! low-dimensional noise and white noise.

use neurodecode_core::image::{dims, luminance};
use neurodecode_core::{Error, Result, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::hrf::{convolve_columns, HrfLibrary};
use crate::legendre::legendre_basis;
use crate::scene::{generate_stimuli, Stimulus, Vocab};

pub const FEATURE_GRID: usize = 4;
pub const FEATURE_LEN: usize = 2 * FEATURE_GRID * FEATURE_GRID + 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_stimuli: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub voxels: usize,
    pub sessions: usize,
    /// Repetition time, seconds.
    pub tr: f64,
    /// Inter-stimulus interval, seconds; a multiple of `tr`.
    pub isi: f64,
    pub lead_in: f64,
    pub tail: f64,
    /// Ratio of the evoked-signal standard deviation to the white-noise
    /// standard deviation, per voxel. When absent `noise_sd` is used as is.
    pub snr: Option<f64>,
    pub noise_sd: f64,
    pub drift_sd: f64,
    /// Shared-noise standard deviation relative to the white noise.
    pub structured_noise: f64,
    pub structured_components: usize,
    /// Fraction of voxels with no stimulus response.
    pub null_voxel_fraction: f64,
    /// Amplitude shared by every stimulus in responsive voxels.
    pub response_offset: f64,
    /// Trial-to-trial amplitude variability relative to the amplitude spread.
    pub trial_jitter: f64,
    /// Use one library HRF for every voxel instead of drawing per voxel.
    pub hrf_index: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stimuli: 200,
            image_size: 64,
            n_classes: 16,
            voxels: 500,
            sessions: 4,
            tr: 1.0,
            isi: 8.0,
            lead_in: 4.0,
            tail: 24.0,
            snr: Some(1.0),
            noise_sd: 1.0,
            drift_sd: 1.0,
            structured_noise: 0.5,
            structured_components: 3,
            null_voxel_fraction: 0.2,
            response_offset: 0.0,
            trial_jitter: 0.0,
            hrf_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub session: usize,
    pub tr: f64,
    pub duration: f64,
    /// `(stimulus_id, onset seconds)`, ascending in time.
    pub onsets: Vec<(usize, f64)>,
}

impl SessionSchedule {
    pub fn timepoints(&self) -> usize {
        (self.duration / self.tr).round() as usize
    }

    /// Onset row of each trial on the TR grid.
    pub fn onset_rows(&self) -> Vec<usize> {
        self.onsets.iter().map(|&(_, t)| (t / self.tr).round() as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timepoints();
        let mut last: Option<f64> = None;
        for (k, &(_, on)) in self.onsets.iter().enumerate() {
            let grid = on / self.tr;
            if (grid - grid.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("session {}: onset {on} s is not on the TR grid", self.session)));
            }
            if let Some(prev) = last {
                if on - prev < self.tr - 1e-9 {
                    return Err(Error::Config(format!(
                        "session {}: trials {} and {k} are closer than one TR; infeasible schedule",
                        self.session,
                        k - 1
                    )));
                }
            }
            if grid.round() as usize >= t {
                return Err(Error::Config(format!("session {}: onset {on} s falls after the session end", self.session)));
            }
            last = Some(on);
        }
        Ok(())
    }

    /// Event indicator matrix, row-major `[T, S]`.
    pub fn indicator(&self) -> Tensor {
        let (t, s) = (self.timepoints(), self.onsets.len());
        let mut x = vec![0.0; t * s];
        for (j, r) in self.onset_rows().into_iter().enumerate() {
            x[r * s + j] = 1.0;
        }
        Tensor::new(&[t, s], x).expect("consistent shape")
    }
}

/// Builds one schedule per session; each session shows every stimulus once
/// in a seeded random order.
pub fn make_schedules(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<SessionSchedule>> {
    if cfg.isi < cfg.tr {
        return Err(Error::Config(format!("inter-stimulus interval {} s is shorter than the TR {} s", cfg.isi, cfg.tr)));
    }
    let duration = cfg.lead_in + cfg.n_stimuli as f64 * cfg.isi + cfg.tail;
    (0..cfg.sessions)
        .map(|s| {
            let order = rng.derive(s as u64).permutation(cfg.n_stimuli);
            let onsets = order.into_iter().enumerate().map(|(k, id)| (id, cfg.lead_in + k as f64 * cfg.isi)).collect();
            let sched = SessionSchedule { session: s, tr: cfg.tr, duration, onsets };
            sched.validate()?;
            Ok(sched)
        })
        .collect()
}

/// The documented stimulus feature vector of length `FEATURE_LEN`.
pub fn voxel_features(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = dims(image)?;
    if c != 3 || h < FEATURE_GRID || w < FEATURE_GRID {
        return Err(Error::Dim(format!("features need a [3, H, W] image with H, W ≥ {FEATURE_GRID}, got {:?}", image.shape())));
    }
    let g = luminance(image)?;
    let mut edge = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let dx = if j + 1 < w { (g[i * w + j + 1] - g[i * w + j]).abs() } else { 0.0 };
            let dy = if i + 1 < h { (g[(i + 1) * w + j] - g[i * w + j]).abs() } else { 0.0 };
            edge[i * w + j] = dx + dy;
        }
    }
    let block = |plane: &[f64], bi: usize, bj: usize| {
        let (r0, r1) = (bi * h / FEATURE_GRID, (bi + 1) * h / FEATURE_GRID);
        let (c0, c1) = (bj * w / FEATURE_GRID, (bj + 1) * w / FEATURE_GRID);
        let mut s = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                s += plane[i * w + j];
            }
        }
        s / ((r1 - r0) * (c1 - c0)) as f64
    };
    let mut f = Vec::with_capacity(FEATURE_LEN);
    for plane in [&g, &edge] {
        for bi in 0..FEATURE_GRID {
            for bj in 0..FEATURE_GRID {
                f.push(block(plane, bi, bj));
            }
        }
    }
    let d = image.data();
    for ch in 0..3 {
        f.push(d[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64);
    }
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct VoxelForwardModel {
    /// `[V, FEATURE_LEN]`; zero rows are non-responsive voxels.
    pub weights: Tensor,
    /// Standardization applied to features before weighting.
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub hrf_index: Vec<usize>,
    pub noise_sd: Vec<f64>,
    /// Per-voxel amplitude added to every stimulus.
    pub offset: Vec<f64>,
}

impl VoxelForwardModel {
    pub fn voxels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Amplitudes `[V, N]` for a list of feature vectors.
    pub fn amplitudes(&self, features: &[Vec<f64>]) -> Tensor {
        let (v, f) = (self.weights.shape()[0], self.weights.shape()[1]);
        let w = self.weights.data();
        let n = features.len();
        let mut out = vec![0.0; v * n];
        for (m, feat) in features.iter().enumerate() {
            let z: Vec<f64> = (0..f).map(|k| (feat[k] - self.feature_mean[k]) / self.feature_sd[k]).collect();
            for vi in 0..v {
                out[vi * n + m] = self.offset[vi] + w[vi * f..(vi + 1) * f].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Tensor::new(&[v, n], out).expect("consistent shape")
    }
}

/// Noiseless BOLD `[V, T]` for one session from per-trial amplitudes
/// `[V, S]`, each voxel using its own kernel.
pub fn noiseless_bold(sched: &SessionSchedule, trial_amps: &Tensor, hrfs: &HrfLibrary, hrf_index: &[usize]) -> Result<Tensor> {
    let (v, s) = (trial_amps.shape()[0], trial_amps.shape()[1]);
    if s != sched.onsets.len() || hrf_index.len() != v {
        return Err(Error::Dim(format!("amplitudes {:?} do not match {} trials and {} voxels", trial_amps.shape(), sched.onsets.len(), hrf_index.len())));
    }
    let t = sched.timepoints();
    let rows = sched.onset_rows();
    let a = trial_amps.data();
    let mut out = vec![0.0; v * t];
    for vi in 0..v {
        let mut impulses = vec![0.0; t];
        for (j, &r) in rows.iter().enumerate() {
            impulses[r] += a[vi * s + j];
        }
        let y = convolve_columns(&impulses, t, 1, hrfs.kernels[hrf_index[vi]].data());
        out[vi * t..(vi + 1) * t].copy_from_slice(&y);
    }
    Tensor::new(&[v, t], out)
}

/// Smooth unit-variance noise courses from an AR(1) process.
fn smooth_noise(t: usize, rng: &mut Rng) -> Vec<f64> {
    let phi: f64 = 0.9;
    let mut x = vec![0.0; t];
    let mut prev = rng.normal();
    for v in x.iter_mut() {
        prev = phi * prev + (1.0 - phi * phi).sqrt() * rng.normal();
        *v = prev;
    }
    x
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub stimuli: Vec<Stimulus>,
    pub schedules: Vec<SessionSchedule>,
    pub forward: VoxelForwardModel,
    /// Per session `[V, T_s]`.
    pub bold: Vec<Tensor>,
    /// Per session noiseless evoked signal `[V, T_s]`.
    pub evoked: Vec<Tensor>,
    /// Stimulus-level ground-truth amplitudes `[V, N]`.
    pub amplitudes: Tensor,
    /// Per session ground-truth trial amplitudes `[V, S_s]`.
    pub trial_amplitudes: Vec<Tensor>,
}

pub fn generate_dataset(cfg: &SynthConfig, rng: &mut Rng) -> Result<SynthDataset> {
    if cfg.voxels == 0 || cfg.n_stimuli == 0 || cfg.sessions == 0 {
        return Err(Error::Config("voxels, stimuli and sessions must be positive".into()));
    }
    let vocab = Vocab::default();
    let stimuli = generate_stimuli(cfg.n_stimuli, cfg.n_classes, cfg.image_size, &vocab, &mut rng.derive(1))?;
    let features = stimuli.iter().map(|s| voxel_features(&s.image)).collect::<Result<Vec<_>>>()?;
    generate_responses(cfg, stimuli, &features, rng)
}

/// BOLD generation for given stimuli and their feature vectors.
pub fn generate_responses(cfg: &SynthConfig, stimuli: Vec<Stimulus>, features: &[Vec<f64>], rng: &mut Rng) -> Result<SynthDataset> {
    let hrfs = HrfLibrary::standard(cfg.tr)?;
    if let Some(k) = cfg.hrf_index {
        if k >= hrfs.len() {
            return Err(Error::Config(format!("hrf_index {k} outside the {}-kernel library", hrfs.len())));
        }
    }
    let schedules = make_schedules(&SynthConfig { n_stimuli: stimuli.len(), ..cfg.clone() }, &mut rng.derive(2))?;
    let n = stimuli.len();
    let v = cfg.voxels;
    let f = features.first().map_or(0, |x| x.len());

    let mut feature_mean = vec![0.0; f];
    let mut feature_sd = vec![0.0; f];
    for k in 0..f {
        let m = features.iter().map(|x| x[k]).sum::<f64>() / n as f64;
        let var = features.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / n as f64;
        feature_mean[k] = m;
        feature_sd[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let mut wrng = rng.derive(3);
    let n_null = (cfg.null_voxel_fraction * v as f64).round() as usize;
    let mut weights = vec![0.0; v * f];
    for vi in n_null..v {
        for k in 0..f {
            weights[vi * f + k] = wrng.normal() / (f as f64).sqrt();
        }
    }
    let hrf_index: Vec<usize> = (0..v).map(|_| cfg.hrf_index.unwrap_or_else(|| wrng.below(hrfs.len()))).collect();
    let mut forward = VoxelForwardModel {
        weights: Tensor::new(&[v, f], weights)?,
        feature_mean,
        feature_sd,
        hrf_index: hrf_index.clone(),
        noise_sd: vec![cfg.noise_sd; v],
        offset: (0..v).map(|vi| if vi >= n_null { cfg.response_offset } else { 0.0 }).collect(),
    };
    let amplitudes = forward.amplitudes(features);

    let mut jrng = rng.derive(4);
    let mut trial_amplitudes = Vec::with_capacity(schedules.len());
    let mut evoked = Vec::with_capacity(schedules.len());
    for sched in &schedules {
        let s = sched.onsets.len();
        let a = amplitudes.data();
        let mut ta = vec![0.0; v * s];
        for vi in 0..v {
            for (j, &(id, _)) in sched.onsets.iter().enumerate() {
                let base = a[vi * n + id];
                ta[vi * s + j] = if cfg.trial_jitter > 0.0 && vi >= n_null { base + cfg.trial_jitter * jrng.normal() } else { base };
            }
        }
        let ta = Tensor::new(&[v, s], ta)?;
        evoked.push(noiseless_bold(sched, &ta, &hrfs, &hrf_index)?);
        trial_amplitudes.push(ta);
    }

    if let Some(snr) = cfg.snr {
        if !(snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {snr}")));
        }
        let mut sds = Vec::with_capacity(v);
        for vi in 0..v {
            let vals: Vec<f64> = evoked.iter().flat_map(|e| e.row(vi).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            sds.push((vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt());
        }
        let mut responsive: Vec<f64> = sds[n_null..].to_vec();
        responsive.sort_by(f64::total_cmp);
        let fallback = if responsive.is_empty() { cfg.noise_sd } else { responsive[responsive.len() / 2] / snr };
        forward.noise_sd = (0..v).map(|vi| if vi >= n_null && sds[vi] > 0.0 { sds[vi] / snr } else { fallback }).collect();
    }

    let mut bold = Vec::with_capacity(schedules.len());
    for (si, sched) in schedules.iter().enumerate() {
        let t = sched.timepoints();
        let mut nrng = rng.derive(100 + si as u64);
        let degree = crate::legendre::drift_degree(sched.duration);
        let basis = legendre_basis(t, degree.min(2));
        let comps: Vec<Vec<f64>> = (0..cfg.structured_components).map(|_| smooth_noise(t, &mut nrng)).collect();
        let mut y = evoked[si].to_vec();
        for vi in 0..v {
            let sd = forward.noise_sd[vi];
            let coefs: Vec<f64> = (0..basis.ncols()).map(|_| cfg.drift_sd * nrng.normal()).collect();
            let loads: Vec<f64> = comps.iter().map(|_| nrng.normal() * cfg.structured_noise * sd / (comps.len().max(1) as f64).sqrt()).collect();
            for ti in 0..t {
                let mut val = 0.0;
                for (d, c) in coefs.iter().enumerate() {
                    val += c * basis[(ti, d)];
                }
                for (comp, l) in comps.iter().zip(&loads) {
                    val += l * comp[ti];
                }
                if sd > 0.0 {
                    val += sd * nrng.normal();
                }
                y[vi * t + ti] += val;
            }
        }
        bold.push(Tensor::new(&[v, t], y)?);
    }

    Ok(SynthDataset { stimuli, schedules, forward, bold, evoked, amplitudes, trial_amplitudes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaRecord {
    pub beta: Tensor,
    pub stimulus_id: usize,
    pub subject_id: usize,
    pub normalized: bool,
}

/// Per-voxel standardization over the whole dataset. Returns the records
/// and the number of zero-variance voxels, which are set to 0.
pub fn zscore_betas(records: &[BetaRecord]) -> Result<(Vec<BetaRecord>, usize)> {
    if records.len() < 2 {
        return Err(Error::Config(format!("z-scoring needs at least 2 records, got {}", records.len())));
    }
    let v = records[0].beta.len();
    if let Some(r) = records.iter().find(|r| r.beta.len() != v) {
        return Err(Error::Dim(format!("record for stimulus {} has {} voxels, expected {v}", r.stimulus_id, r.beta.len())));
    }
    let n = records.len() as f64;
    let mut mean = vec![0.0; v];
    for r in records {
        for (m, x) in mean.iter_mut().zip(r.beta.data()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; v];
    for r in records {
        for ((s, x), m) in var.iter_mut().zip(r.beta.data()).zip(&mean) {
            *s += (x - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = var.iter().map(|s| s.sqrt()).collect();
    let zero = sd.iter().filter(|&&s| s <= 1e-300).count();
    let out = records
        .iter()
        .map(|r| BetaRecord {
            beta: Tensor::from_vec(r.beta.data().iter().enumerate().map(|(k, x)| if sd[k] <= 1e-300 { 0.0 } else { (x - mean[k]) / sd[k] }).collect()),
            normalized: true,
            ..r.clone()
        })
        .collect();
    Ok((out, zero))
}

/// Test-set size for a train fraction: `floor((1 − fraction) · N)`, with a
/// small guard so that e.g. 0.9 of 10 yields exactly one test record.
pub fn test_count(n: usize, fraction: f64) -> usize {
    ((1.0 - fraction) * n as f64 + 1e-9).floor() as usize
}

/// Seeded disjoint split; each side keeps the input order.
pub fn split_dataset<T: Clone>(records: &[T], fraction: f64, rng: &mut Rng) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let n = records.len();
    let n_test = test_count(n, fraction);
    if n_test == 0 || n_test == n {
        return Err(Error::Config(format!("fraction {fraction} of {n} records leaves one side empty")));
    }
    let perm = rng.permutation(n);
    let mut is_test = vec![false; n];
    for &i in &perm[..n_test] {
        is_test[i] = true;
    }
    let train = records.iter().zip(&is_test).filter(|(_, &t)| !t).map(|(r, _)| r.clone()).collect();
    let test = records.iter().zip(&is_test).filter(|(_, &t)| t).map(|(r, _)| r.clone()).collect();
    Ok((train, test))
}
