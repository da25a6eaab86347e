//! Single-trial beta estimation.
//!
//! The fit runs in three steps:
//!
//! 1. every voxel is fitted by least squares with each library HRF
//!    convolved with the event indicators, plus polynomial drift
//!    regressors; the HRF with the best fit is kept;
//! 2. voxels whose leave-one-session-out R² is negative form a noise pool;
//!    principal components of the pool's timeseries are appended as
//!    nuisance regressors, with the count picked by the same
//!    cross-validation;
//! 3. trial betas are shrunk by fractional ridge regression, the fraction
//!    picked per voxel by cross-validation.
//!
//! Sessions are separate runs, so the design is block diagonal and every
//! fit decomposes into independent per-session fits. Nuisance regressors are
//! handled by projecting them out of both design and data, which yields the
//! same trial betas as the joint least-squares fit.
//!
//! Cross-validated R² for held-out session `s` predicts each of its trials by
//! the mean beta of the same stimulus over the other sessions, convolves
//! with the voxel's HRF, and scores the prediction against the session's
//! data after removing that session's nuisance regressors from both.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use neurodecode_core::{Error, Result, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::hrf::{convolve_columns, HrfLibrary};
use crate::legendre::{drift_degree, legendre_basis};
use crate::linalg::{from_mat, orthonormalize, pca_mat, project_out, LeastSquares};
use crate::synth::SessionSchedule;

#[derive(Clone, Debug)]
pub struct SessionDesign {
    /// Event indicators `[T, S]`, one column per trial.
    pub x: Tensor,
    /// Stimulus shown in each trial.
    pub stimulus: Vec<usize>,
    /// Orthonormalized Legendre drift regressors `[T, p]`.
    pub p: Tensor,
    /// Noise regressors `[T, g]`; empty before the noise step.
    pub g: Tensor,
}

#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub sessions: Vec<SessionDesign>,
}

impl DesignMatrix {
    pub fn from_schedules(schedules: &[SessionSchedule]) -> Self {
        let sessions = schedules
            .iter()
            .map(|s| {
                let t = s.timepoints();
                SessionDesign {
                    x: s.indicator(),
                    stimulus: s.onsets.iter().map(|&(id, _)| id).collect(),
                    p: from_mat(&legendre_basis(t, drift_degree(s.duration))),
                    g: Tensor::zeros(&[t, 0]),
                }
            })
            .collect();
        Self { sessions }
    }

    /// Negative control: trial-to-stimulus labels permuted independently in
    /// every session, event timing unchanged.
    pub fn shuffled(&self, rng: &mut Rng) -> Self {
        let mut out = self.clone();
        for s in &mut out.sessions {
            rng.shuffle(&mut s.stimulus);
        }
        out
    }

    pub fn trials(&self) -> usize {
        self.sessions.iter().map(|s| s.stimulus.len()).sum()
    }

    /// Block-diagonal event indicator matrix over all sessions, `[ΣT, ΣS]`.
    pub fn full_x(&self) -> Tensor {
        let t: usize = self.sessions.iter().map(|s| s.x.shape()[0]).sum();
        let n = self.trials();
        let mut data = vec![0.0; t * n];
        let (mut r0, mut c0) = (0, 0);
        for s in &self.sessions {
            let (ts, ss) = (s.x.shape()[0], s.x.shape()[1]);
            for i in 0..ts {
                for j in 0..ss {
                    data[(r0 + i) * n + c0 + j] = s.x.data()[i * ss + j];
                }
            }
            r0 += ts;
            c0 += ss;
        }
        Tensor::new(&[t, n], data).expect("consistent shape")
    }
}

/// Shrinkage grid `{0, 0.05, …, 0.95}`: the fraction of the least-squares
/// beta norm removed by ridge regularization.
pub fn default_ridge_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmConfig {
    /// Largest number of noise-pool principal components tried.
    pub max_pcs: usize,
    pub noise_regressors: bool,
    pub ridge: bool,
    pub ridge_grid: Vec<f64>,
}

impl Default for GlmConfig {
    fn default() -> Self {
        Self { max_pcs: 8, noise_regressors: true, ridge: true, ridge_grid: default_ridge_grid() }
    }
}

#[derive(Clone, Debug)]
pub struct GlmFit {
    /// Trial betas `[V, S]`, sessions concatenated in order.
    pub betas: Tensor,
    pub trial_stimulus: Vec<usize>,
    pub trial_session: Vec<usize>,
    pub chosen_hrf: Vec<usize>,
    /// In-sample R² of the chosen HRF after step 1.
    pub fit_r2: Vec<f64>,
    /// Cross-validated R² after step 1.
    pub r2_cv_initial: Vec<f64>,
    /// Cross-validated R² of the unregularized model after steps 1 and 2.
    pub r2_cv: Tensor,
    /// Cross-validated R² at the chosen ridge shrinkage. The same folds pick
    /// the shrinkage, so this score is optimistically biased.
    pub r2_ridge: Vec<f64>,
    pub noise_pool: Vec<usize>,
    pub n_pcs: usize,
    pub step2_skipped: bool,
    /// Chosen shrinkage per voxel.
    pub ridge_fraction: Vec<f64>,
    /// Drift regressor weights per session, `[V, p]`.
    pub u: Vec<Tensor>,
    /// Noise regressor weights per session, `[V, g]`.
    pub v: Vec<Tensor>,
}

fn convolve(x: &DMatrix<f64>, kernel: &[f64]) -> DMatrix<f64> {
    let (t, s) = x.shape();
    // DMatrix is column-major, so the transpose's storage is row-major [T, S]
    let rows: Vec<f64> = x.transpose().as_slice().to_vec();
    let y = convolve_columns(&rows, t, s, kernel);
    DMatrix::from_row_slice(t, s, &y)
}

struct Session {
    /// `[T, V]`
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    p: DMatrix<f64>,
    stimulus: Vec<usize>,
}

/// Normal equations are used only when the Cholesky factor is far from
/// singular; otherwise the pivoted QR path reports the rank deficiency.
fn well_conditioned(ch: &Cholesky<f64, nalgebra::Dyn>) -> bool {
    let d = ch.l_dirty().diagonal();
    let (lo, hi) = (d.min(), d.max());
    lo > 1e-6 * hi
}

/// Per-session quantities for one HRF and one voxel group.
struct GroupSession {
    gram: DMatrix<f64>,
    /// `X̃ᵀỹ`, `[S, Vg]`
    xty: DMatrix<f64>,
    /// `‖ỹ‖²` per voxel
    yy: Vec<f64>,
    /// least-squares betas `[S, Vg]`
    ols: DMatrix<f64>,
}

fn group_session(sess: &Session, q: &DMatrix<f64>, kernel: &[f64], voxels: &[usize]) -> Result<GroupSession> {
    let xk = convolve(&sess.x, kernel);
    let xres = project_out(q, &xk);
    let ysub = sess.y.select_columns(voxels);
    let yres = project_out(q, &ysub);
    let gram = xres.transpose() * &xres;
    let xty = xres.transpose() * &yres;
    let ols = match gram.clone().cholesky().filter(well_conditioned) {
        Some(ch) => ch.solve(&xty),
        None => LeastSquares::new(xres)?.solve(&yres)?,
    };
    let yy = yres.column_iter().map(|c| c.norm_squared()).collect();
    Ok(GroupSession { gram, xty, yy, ols })
}

/// Leave-one-session-out predictions: for every session, each trial's beta
/// predicted by the mean over other sessions' trials of the same stimulus
/// (zero when the stimulus appears nowhere else).
pub fn condition_predictions(stimuli: &[Vec<usize>], betas: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let nv = betas.first().map_or(0, |b| b.ncols());
    let max_id = stimuli.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut sum = vec![DMatrix::<f64>::zeros(max_id, nv); stimuli.len()];
    let mut count = vec![vec![0usize; max_id]; stimuli.len()];
    for (s, (st, b)) in stimuli.iter().zip(betas).enumerate() {
        for (j, &id) in st.iter().enumerate() {
            let mut row = sum[s].row_mut(id);
            row += b.row(j);
            count[s][id] += 1;
        }
    }
    stimuli
        .iter()
        .enumerate()
        .map(|(held, st)| {
            let mut pred = DMatrix::zeros(st.len(), nv);
            for (j, &id) in st.iter().enumerate() {
                let mut acc = DVector::<f64>::zeros(nv);
                let mut n = 0;
                for other in (0..stimuli.len()).filter(|&o| o != held) {
                    acc += sum[other].row(id).transpose();
                    n += count[other][id];
                }
                if n > 0 {
                    pred.set_row(j, &(acc / n as f64).transpose());
                }
            }
            pred
        })
        .collect()
}

/// Cross-validated R² per voxel of a group from per-session betas.
fn cv_r2(stats: &[GroupSession], stimuli: &[Vec<usize>], betas: &[DMatrix<f64>]) -> Vec<f64> {
    let preds = condition_predictions(stimuli, betas);
    let nv = betas[0].ncols();
    let mut sse = vec![0.0; nv];
    let mut sst = vec![0.0; nv];
    for (gs, pred) in stats.iter().zip(&preds) {
        let gp = &gs.gram * pred;
        for v in 0..nv {
            let b = pred.column(v);
            sse[v] += gs.yy[v] - 2.0 * b.dot(&gs.xty.column(v)) + b.dot(&gp.column(v));
            sst[v] += gs.yy[v];
        }
    }
    sse.iter().zip(&sst).map(|(e, t)| if *t > 0.0 { 1.0 - e.max(0.0) / t } else { 0.0 }).collect()
}

/// Fractional ridge path for a single design `A[T, q]` and data `y[T]`:
/// for each shrinkage `c` the penalty `α` with `‖β(α)‖ = (1 − c)‖β_ols‖`
/// and the matching `β(α) = (AᵀA + αI)⁻¹Aᵀy`.
pub fn fractional_ridge(a: &Tensor, y: &Tensor, fractions: &[f64]) -> Result<Vec<(f64, Tensor)>> {
    let am = crate::linalg::to_mat(a)?;
    if y.rank() != 1 || y.len() != am.nrows() {
        return Err(Error::Dim(format!("ridge: design {:?} with data {:?}", a.shape(), y.shape())));
    }
    if let Some(c) = fractions.iter().find(|c| !(0.0..1.0).contains(*c)) {
        return Err(Error::Config(format!("shrinkage fraction must be in [0, 1), got {c}")));
    }
    let ym = DMatrix::from_column_slice(y.len(), 1, y.data());
    let ols = LeastSquares::new(am.clone())?.solve(&ym)?;
    let gram = am.transpose() * &am;
    let gs = GroupSession { xty: am.transpose() * &ym, yy: vec![ym.norm_squared()], ols, gram: gram.clone() };
    let eig = SymmetricEigen::new(gram);
    Ok(fractions
        .iter()
        .map(|&c| {
            let (alpha, b) = ridge_betas(&gs, &eig, c);
            (alpha[0], Tensor::from_vec(b.column(0).iter().copied().collect()))
        })
        .collect())
}

/// Ridge solution with the given shrinkage for each voxel of a session,
/// from the eigen-decomposition of `X̃ᵀX̃`, with the penalty per voxel.
fn ridge_betas(gs: &GroupSession, eig: &SymmetricEigen<f64, nalgebra::Dyn>, shrink: f64) -> (Vec<f64>, DMatrix<f64>) {
    if shrink <= 0.0 {
        return (vec![0.0; gs.ols.ncols()], gs.ols.clone());
    }
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    let d = eig.eigenvectors.transpose() * &gs.xty;
    let target = 1.0 - shrink;
    let lmax = lam.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = DMatrix::zeros(gs.ols.nrows(), gs.ols.ncols());
    let mut alphas = vec![0.0; d.ncols()];
    for v in 0..d.ncols() {
        let dv = d.column(v);
        let norm2 = |alpha: f64| -> f64 {
            lam.iter().zip(dv.iter()).map(|(l, x)| if l + alpha > 0.0 { (x / (l + alpha)).powi(2) } else { 0.0 }).sum()
        };
        let ols_norm = gs.ols.column(v).norm();
        if ols_norm == 0.0 {
            continue;
        }
        // bisection on log α for ‖β(α)‖ = target · ‖β_ols‖
        let goal = (target * ols_norm).powi(2);
        let (mut lo, mut hi) = ((lmax * 1e-12).ln(), (lmax * 1e12).ln());
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if norm2(mid.exp()) > goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let alpha = (0.5 * (lo + hi)).exp();
        alphas[v] = alpha;
        let coef = DVector::from_iterator(lam.len(), lam.iter().zip(dv.iter()).map(|(l, x)| x / (l + alpha)));
        out.set_column(v, &(&eig.eigenvectors * coef));
    }
    (alphas, out)
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Voxels grouped by chosen kernel.
fn groups(chosen: &[usize], n_kernels: usize) -> Vec<(usize, Vec<usize>)> {
    (0..n_kernels)
        .map(|k| (k, chosen.iter().enumerate().filter(|(_, &c)| c == k).map(|(v, _)| v).collect::<Vec<_>>()))
        .filter(|(_, vs)| !vs.is_empty())
        .collect()
}

#[derive(Clone)]
struct PassResult {
    /// Per session `[S, V]`
    betas: Vec<DMatrix<f64>>,
    r2: Vec<f64>,
    shrink: Vec<f64>,
}

/// Least-squares (and optionally ridge) fit with fixed HRF choices and
/// nuisance bases; returns betas and cross-validated R² for every voxel.
fn fit_pass(sessions: &[Session], q: &[DMatrix<f64>], hrfs: &HrfLibrary, chosen: &[usize], grid: Option<&[f64]>) -> Result<PassResult> {
    let nv = chosen.len();
    let stimuli: Vec<Vec<usize>> = sessions.iter().map(|s| s.stimulus.clone()).collect();
    let mut betas: Vec<DMatrix<f64>> = sessions.iter().map(|s| DMatrix::zeros(s.stimulus.len(), nv)).collect();
    let mut r2 = vec![0.0; nv];
    let mut shrink = vec![0.0; nv];
    for (k, voxels) in groups(chosen, hrfs.len()) {
        let stats = sessions
            .iter()
            .zip(q)
            .map(|(s, qs)| group_session(s, qs, hrfs.kernels[k].data(), &voxels))
            .collect::<Result<Vec<_>>>()?;
        let ols: Vec<DMatrix<f64>> = stats.iter().map(|g| g.ols.clone()).collect();
        let mut best_b = ols.clone();
        let mut best_r2 = cv_r2(&stats, &stimuli, &ols);
        let mut best_shrink = vec![0.0; voxels.len()];
        if let Some(grid) = grid {
            let eigs: Vec<_> = stats.iter().map(|g| SymmetricEigen::new(g.gram.clone())).collect();
            for &c in grid.iter().filter(|&&c| c > 0.0) {
                let b: Vec<DMatrix<f64>> = stats.iter().zip(&eigs).map(|(g, e)| ridge_betas(g, e, c).1).collect();
                let r = cv_r2(&stats, &stimuli, &b);
                for (i, &ri) in r.iter().enumerate() {
                    if ri > best_r2[i] {
                        best_r2[i] = ri;
                        best_shrink[i] = c;
                        for (bb, bs) in best_b.iter_mut().zip(&b) {
                            bb.set_column(i, &bs.column(i));
                        }
                    }
                }
            }
        }
        for (i, &v) in voxels.iter().enumerate() {
            r2[v] = best_r2[i];
            shrink[v] = best_shrink[i];
            for (s, bb) in best_b.iter().enumerate() {
                betas[s].set_column(v, &bb.column(i));
            }
        }
    }
    Ok(PassResult { betas, r2, shrink })
}

pub fn fit_glmsingle(bold: &[Tensor], design: &DesignMatrix, hrfs: &HrfLibrary, cfg: &GlmConfig) -> Result<GlmFit> {
    if bold.len() != design.sessions.len() {
        return Err(Error::Dim(format!("{} BOLD sessions for a {}-session design", bold.len(), design.sessions.len())));
    }
    if bold.len() < 2 {
        return Err(Error::Config("cross-validation needs at least 2 sessions; leave-one-session-out is undefined for one".into()));
    }
    let nv = bold[0].shape()[0];
    let mut sessions = Vec::with_capacity(bold.len());
    for (si, (b, d)) in bold.iter().zip(&design.sessions).enumerate() {
        let (v, t) = match b.shape() {
            [v, t] => (*v, *t),
            s => return Err(Error::Dim(format!("session {si}: BOLD must be [V, T], got {s:?}"))),
        };
        if v != nv || t != d.x.shape()[0] {
            return Err(Error::Dim(format!("session {si}: BOLD {:?} vs design with {} timepoints and {nv} voxels", b.shape(), d.x.shape()[0])));
        }
        sessions.push(Session {
            y: DMatrix::from_row_slice(v, t, b.data()).transpose(),
            x: DMatrix::from_row_slice(t, d.x.shape()[1], d.x.data()),
            p: DMatrix::from_row_slice(t, d.p.shape()[1], d.p.data()),
            stimulus: d.stimulus.clone(),
        });
    }
    let qp: Vec<DMatrix<f64>> = sessions.iter().map(|s| orthonormalize(&s.p)).collect();

    // Step 1: HRF selection by in-sample fit.
    let mut best_sse = vec![f64::INFINITY; nv];
    let mut chosen = vec![0usize; nv];
    let all: Vec<usize> = (0..nv).collect();
    for k in 0..hrfs.len() {
        let mut sse = vec![0.0; nv];
        for (s, q) in sessions.iter().zip(&qp) {
            let gs = group_session(s, q, hrfs.kernels[k].data(), &all)?;
            for v in 0..nv {
                sse[v] += gs.yy[v] - gs.ols.column(v).dot(&gs.xty.column(v));
            }
        }
        for v in 0..nv {
            if sse[v] < best_sse[v] {
                best_sse[v] = sse[v];
                chosen[v] = k;
            }
        }
    }
    let mut sst = vec![0.0; nv];
    for s in &sessions {
        for v in 0..nv {
            let c = s.y.column(v);
            let m = c.mean();
            sst[v] += c.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        }
    }
    let fit_r2: Vec<f64> = (0..nv).map(|v| if sst[v] > 0.0 { 1.0 - best_sse[v].max(0.0) / sst[v] } else { 0.0 }).collect();
    let initial = fit_pass(&sessions, &qp, hrfs, &chosen, None)?;

    // Step 2: noise regressors from the pool of voxels with negative CV R².
    let noise_pool: Vec<usize> = (0..nv).filter(|&v| initial.r2[v] < 0.0).collect();
    let step2_skipped = !cfg.noise_regressors || noise_pool.is_empty();
    let mut q = qp.clone();
    let mut gmats: Vec<DMatrix<f64>> = sessions.iter().map(|s| DMatrix::zeros(s.y.nrows(), 0)).collect();
    let mut n_pcs = 0;
    if !step2_skipped {
        let signal: Vec<usize> = (0..nv).filter(|v| !noise_pool.contains(v)).collect();
        let score = |r2: &[f64]| if signal.is_empty() { median(r2) } else { median(&signal.iter().map(|&v| r2[v]).collect::<Vec<_>>()) };
        let max_g = sessions.iter().map(|s| s.y.nrows()).min().unwrap_or(0).min(noise_pool.len()).min(cfg.max_pcs);
        let pcs: Vec<DMatrix<f64>> = sessions
            .iter()
            .zip(&qp)
            .map(|(s, qs)| pca_mat(&project_out(qs, &s.y.select_columns(&noise_pool)), max_g))
            .collect();
        let mut best = score(&initial.r2);
        for g in 1..=max_g {
            let qg: Vec<DMatrix<f64>> = sessions
                .iter()
                .zip(&pcs)
                .map(|(s, pc)| orthonormalize(&DMatrix::from_fn(s.y.nrows(), s.p.ncols() + g, |i, j| if j < s.p.ncols() { s.p[(i, j)] } else { pc[(i, j - s.p.ncols())] })))
                .collect();
            let pass = fit_pass(&sessions, &qg, hrfs, &chosen, None)?;
            let sc = score(&pass.r2);
            if sc > best {
                best = sc;
                n_pcs = g;
            }
        }
        if n_pcs > 0 {
            for (si, s) in sessions.iter().enumerate() {
                let pc = pcs[si].columns(0, n_pcs).into_owned();
                q[si] = orthonormalize(&DMatrix::from_fn(s.y.nrows(), s.p.ncols() + n_pcs, |i, j| if j < s.p.ncols() { s.p[(i, j)] } else { pc[(i, j - s.p.ncols())] }));
                gmats[si] = pc;
            }
        }
    }

    // Step 3: fractional ridge with per-voxel shrinkage chosen by CV.
    let unregularized = fit_pass(&sessions, &q, hrfs, &chosen, None)?;
    let fin = if cfg.ridge { fit_pass(&sessions, &q, hrfs, &chosen, Some(&cfg.ridge_grid))? } else { unregularized.clone() };

    // Nuisance weights from the joint model given the trial betas.
    let mut u = Vec::with_capacity(sessions.len());
    let mut vw = Vec::with_capacity(sessions.len());
    for (si, s) in sessions.iter().enumerate() {
        let np = s.p.ncols();
        let ng = gmats[si].ncols();
        let nuis = DMatrix::from_fn(s.y.nrows(), np + ng, |i, j| if j < np { s.p[(i, j)] } else { gmats[si][(i, j - np)] });
        let mut resid = s.y.clone();
        for v in 0..nv {
            let xk = convolve(&s.x, hrfs.kernels[chosen[v]].data());
            let fitted = xk * fin.betas[si].column(v);
            let mut col = resid.column_mut(v);
            col -= fitted;
        }
        let w = LeastSquares::new(nuis)?.solve(&resid)?;
        u.push(from_mat(&w.rows(0, np).transpose()));
        vw.push(from_mat(&w.rows(np, ng).transpose()));
    }

    let total: usize = sessions.iter().map(|s| s.stimulus.len()).sum();
    let mut betas = vec![0.0; nv * total];
    let mut trial_stimulus = Vec::with_capacity(total);
    let mut trial_session = Vec::with_capacity(total);
    let mut c0 = 0;
    for (si, s) in sessions.iter().enumerate() {
        for (j, &id) in s.stimulus.iter().enumerate() {
            for v in 0..nv {
                betas[v * total + c0 + j] = fin.betas[si][(j, v)];
            }
            trial_stimulus.push(id);
            trial_session.push(si);
        }
        c0 += s.stimulus.len();
    }
    Ok(GlmFit {
        betas: Tensor::new(&[nv, total], betas)?,
        trial_stimulus,
        trial_session,
        chosen_hrf: chosen,
        fit_r2,
        r2_cv_initial: initial.r2,
        r2_cv: Tensor::from_vec(unregularized.r2),
        r2_ridge: fin.r2,
        noise_pool,
        n_pcs,
        step2_skipped,
        ridge_fraction: fin.shrink,
        u,
        v: vw,
    })
}

/// Averages trial betas over repetitions: `[V, n_stimuli]` and the number of
/// trials per stimulus.
pub fn condition_betas(fit: &GlmFit, n_stimuli: usize) -> Result<(Tensor, Vec<usize>)> {
    let (nv, total) = (fit.betas.shape()[0], fit.betas.shape()[1]);
    let mut sum = vec![0.0; nv * n_stimuli];
    let mut count = vec![0usize; n_stimuli];
    for (j, &id) in fit.trial_stimulus.iter().enumerate() {
        if id >= n_stimuli {
            return Err(Error::Dim(format!("trial {j} refers to stimulus {id} of {n_stimuli}")));
        }
        count[id] += 1;
        for v in 0..nv {
            sum[v * n_stimuli + id] += fit.betas.data()[v * total + j];
        }
    }
    for v in 0..nv {
        for m in 0..n_stimuli {
            if count[m] > 0 {
                sum[v * n_stimuli + m] /= count[m] as f64;
            }
        }
    }
    Ok((Tensor::new(&[nv, n_stimuli], sum)?, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_ignore_the_held_out_session() {
        let stimuli = vec![vec![0, 1, 2], vec![2, 0, 1], vec![1, 2, 0]];
        let mut rng = Rng::new(1);
        let betas: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(3, 2, |_, _| rng.normal())).collect();
        let p = condition_predictions(&stimuli, &betas);
        let mut altered = betas.clone();
        altered[1] *= 7.0;
        let q = condition_predictions(&stimuli, &altered);
        assert_eq!(p[1], q[1]);
        assert_ne!(p[0], q[0]);
        // stimulus 0 in session 0 is predicted by session 1 trial 1 and session 2 trial 2
        let expect = (betas[1].row(1) + betas[2].row(2)) / 2.0;
        assert!((p[0].row(0) - expect).norm() < 1e-15);
    }
}
