use nalgebra::DMatrix;
use neurodecode_core::{Error, Rng, Tensor};
use neurodecode_data::legendre::legendre_basis;
use neurodecode_data::*;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// Symmetric eigenproblem by cyclic Jacobi rotations, eigenpairs sorted by
/// descending eigenvalue.
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = DMatrix::<f64>::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * &a * &r;
                v = &v * &r;
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = idx.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_columns(&idx.iter().map(|&i| v.column(i).into_owned()).collect::<Vec<_>>());
    (vals, vecs)
}

#[test]
fn ols_identity_design_returns_data() {
    let y = Tensor::from_vec(vec![3.0, -1.5, 0.25, 7.0]);
    let x = ols_solve(&Tensor::eye(4), &y).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn ols_exact_span_leaves_zero_residual() {
    let mut rng = Rng::new(3);
    let a = Tensor::randn(&[30, 4], 1.0, &mut rng);
    let w = Tensor::new(&[4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let y = a.matmul(&w).unwrap().reshape(&[30]).unwrap();
    let x = ols_solve(&a, &y).unwrap();
    let fitted = a.matmul(&x.reshape(&[4, 1]).unwrap()).unwrap().reshape(&[30]).unwrap();
    assert!(fitted.sub(&y).unwrap().max_abs() <= 1e-10);
}

#[test]
fn ols_matches_explicit_inverse() {
    let mut rng = Rng::new(11);
    let a = Tensor::randn(&[50, 5], 1.0, &mut rng);
    let y = Tensor::randn(&[50], 1.0, &mut rng);
    let x = ols_solve(&a, &y).unwrap();
    let am = mat(&a);
    let ym = DMatrix::from_column_slice(50, 1, y.data());
    let oracle = (am.transpose() * &am).try_inverse().unwrap() * am.transpose() * &ym;
    for (i, v) in x.data().iter().enumerate() {
        assert!((v - oracle[(i, 0)]).abs() < 1e-9, "{i}: {v} vs {}", oracle[(i, 0)]);
    }
    // residual orthogonal to every column of A
    let r = &ym - &am * DMatrix::from_column_slice(5, 1, x.data());
    let g = am.transpose() * &r;
    assert!(g.amax() <= 1e-8 * am.norm() * ym.norm());
}

#[test]
fn ols_rank_deficient_names_dependent_columns() {
    let mut rng = Rng::new(5);
    let base = Tensor::randn(&[20, 3], 1.0, &mut rng);
    let mut d = Vec::new();
    for i in 0..20 {
        let r = base.row(i);
        let r = r.data();
        d.extend_from_slice(&[r[0], r[1], r[2], r[0] + r[1], 2.0 * r[2]]);
    }
    let a = Tensor::new(&[20, 5], d).unwrap();
    match ols_solve(&a, &Tensor::zeros(&[20])) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("2 of 5"), "{msg}"),
        other => panic!("expected a rank error, got {other:?}"),
    }
}

#[test]
fn pca_rank_one_recovers_direction() {
    let mut rng = Rng::new(8);
    let u: Vec<f64> = (0..25).map(|_| rng.normal()).collect();
    let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let mu = u.iter().sum::<f64>() / 25.0;
    let d: Vec<f64> = u.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect();
    let pc = pca_components(&Tensor::new(&[25, 6], d).unwrap(), 1).unwrap();
    let uc: Vec<f64> = u.iter().map(|a| a - mu).collect();
    let nu = uc.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos: f64 = pc.data().iter().zip(&uc).map(|(a, b)| a * b).sum::<f64>() / nu;
    assert!(cos.abs() > 1.0 - 1e-10, "{cos}");
}

#[test]
fn pca_matches_covariance_eigenvectors() {
    let mut rng = Rng::new(13);
    let x = Tensor::randn(&[40, 8], 1.0, &mut rng);
    let pcs = pca_components(&x, 8).unwrap();
    let mut c = mat(&x);
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let (vals, vecs) = jacobi_eigen(&(c.transpose() * &c));
    let pm = mat(&pcs);
    let mut var = Vec::new();
    for k in 0..8 {
        // time course of direction k: C v / ‖C v‖
        let tc = &c * vecs.column(k);
        let tc = &tc / tc.norm();
        let p = pm.column(k);
        assert!((p.norm() - 1.0).abs() < 1e-10);
        let sign = p.dot(&tc).signum();
        assert!((p - sign * &tc).amax() < 1e-8, "component {k}");
        var.push((c.transpose() * p).norm_squared());
        assert!((var[k] - vals[k]).abs() < 1e-8 * vals[0]);
    }
    assert!(var.windows(2).all(|w| w[0] >= w[1]), "{var:?}");
}

#[test]
fn pca_rejects_too_many_components() {
    let x = Tensor::zeros(&[10, 4]);
    assert!(matches!(pca_components(&x, 5), Err(Error::Dim(_))));
}

#[test]
fn legendre_columns_are_orthogonal() {
    for (t, deg) in [(50, 1), (200, 3), (437, 4)] {
        let p = legendre_basis(t, deg);
        let g = p.transpose() * &p;
        assert_eq!(g.nrows(), deg + 1);
        assert!((g - DMatrix::<f64>::identity(deg + 1, deg + 1)).amax() < 1e-10);
    }
}

fn small_config() -> SynthConfig {
    SynthConfig {
        n_stimuli: 12,
        image_size: 16,
        voxels: 24,
        sessions: 3,
        ..SynthConfig::default()
    }
}

#[test]
fn design_indicator_columns_mark_onsets() {
    let ds = generate_dataset(&small_config(), &mut Rng::new(1)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    for (sd, sched) in design.sessions.iter().zip(&ds.schedules) {
        let x = mat(&sd.x);
        assert_eq!(x.ncols(), sched.onsets.len());
        for (j, &(_, onset)) in sched.onsets.iter().enumerate() {
            let col = x.column(j);
            assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(col.sum(), 1.0);
            assert_eq!(col[(onset / sched.tr).round() as usize], 1.0);
        }
        let p = mat(&sd.p);
        assert!((p.transpose() * &p - DMatrix::<f64>::identity(p.ncols(), p.ncols())).amax() < 1e-10);
    }
}

fn noiseless_config() -> SynthConfig {
    SynthConfig { snr: None, noise_sd: 0.0, null_voxel_fraction: 0.0, ..small_config() }
}

#[test]
fn noiseless_data_recovers_betas_and_hrf() {
    let cfg = noiseless_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(2)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let fit = fit_glmsingle(&ds.bold, &design, &lib, &GlmConfig::default()).unwrap();
    assert_eq!(fit.chosen_hrf, ds.forward.hrf_index);
    let mut c0 = 0;
    for truth in &ds.trial_amplitudes {
        let s = truth.shape()[1];
        for v in 0..cfg.voxels {
            for j in 0..s {
                let est = fit.betas.at(&[v, c0 + j]);
                assert!((est - truth.at(&[v, j])).abs() < 1e-6, "voxel {v} trial {j}: {est} vs {}", truth.at(&[v, j]));
            }
        }
        c0 += s;
    }
    assert!(fit.step2_skipped, "no voxel should enter the noise pool");
    assert!(fit.noise_pool.is_empty());
    assert!(fit.r2_cv.data().iter().all(|&r| r <= 1.0 && r > 0.99));
}

fn snr_config() -> SynthConfig {
    SynthConfig {
        n_stimuli: 40,
        image_size: 16,
        voxels: 60,
        sessions: 8,
        isi: 10.0,
        snr: Some(0.5),
        ..SynthConfig::default()
    }
}

#[test]
fn snr_half_recovers_condition_betas() {
    let cfg = snr_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(21)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let fit = fit_glmsingle(&ds.bold, &design, &lib, &GlmConfig::default()).unwrap();
    assert!(fit.betas.all_finite());
    assert!(fit.r2_cv.data().iter().all(|&r| r <= 1.0));
    let (cb, counts) = condition_betas(&fit, cfg.n_stimuli).unwrap();
    assert!(counts.iter().all(|&c| c == cfg.sessions));
    let responsive: Vec<usize> = (0..cfg.voxels).filter(|&v| ds.forward.weights.row(v).max_abs() > 0.0).collect();
    let rs: Vec<f64> = responsive.iter().map(|&v| pearson(cb.row(v).data(), ds.amplitudes.row(v).data())).collect();
    assert!(median(&rs) >= 0.95, "median r {}", median(&rs));
}

#[test]
fn shuffled_design_has_no_predictive_power() {
    let cfg = snr_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(21)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules).shuffled(&mut Rng::new(5));
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let fit = fit_glmsingle(&ds.bold, &design, &lib, &GlmConfig::default()).unwrap();
    let m = median(fit.r2_cv.data());
    assert!(m <= 0.0, "median cross-validated R² {m}");
}

#[test]
fn constant_offset_only_moves_drift_weights() {
    let cfg = small_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(4)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let glm = GlmConfig::default();
    let base = fit_glmsingle(&ds.bold, &design, &lib, &glm).unwrap();
    let shifted: Vec<Tensor> = ds.bold.iter().map(|b| b.map(|x| x + 250.0)).collect();
    let fit = fit_glmsingle(&shifted, &design, &lib, &glm).unwrap();
    assert!(fit.betas.sub(&base.betas).unwrap().max_abs() < 1e-8);
    assert_eq!(fit.chosen_hrf, base.chosen_hrf);
    let moved = fit.u[0].sub(&base.u[0]).unwrap();
    assert!(moved.max_abs() > 1.0);
}

#[test]
fn scaling_bold_scales_betas_without_ridge() {
    let cfg = small_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(6)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let glm = GlmConfig { ridge: false, ..GlmConfig::default() };
    let base = fit_glmsingle(&ds.bold, &design, &lib, &glm).unwrap();
    let c = 3.5;
    let scaled: Vec<Tensor> = ds.bold.iter().map(|b| b.scale(c)).collect();
    let fit = fit_glmsingle(&scaled, &design, &lib, &glm).unwrap();
    let diff = fit.betas.sub(&base.betas.scale(c)).unwrap().max_abs();
    assert!(diff < 1e-9 * base.betas.max_abs() * c, "{diff}");
}

#[test]
fn voxel_order_does_not_change_results() {
    let cfg = small_config();
    let ds = generate_dataset(&cfg, &mut Rng::new(9)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let glm = GlmConfig::default();
    let base = fit_glmsingle(&ds.bold, &design, &lib, &glm).unwrap();
    let nv = cfg.voxels;
    let reversed: Vec<Tensor> = ds
        .bold
        .iter()
        .map(|b| Tensor::stack(&(0..nv).rev().map(|v| b.row(v)).collect::<Vec<_>>()).unwrap())
        .collect();
    let fit = fit_glmsingle(&reversed, &design, &lib, &glm).unwrap();
    for v in 0..nv {
        let a = base.betas.row(v);
        let b = fit.betas.row(nv - 1 - v);
        assert!(a.sub(&b).unwrap().max_abs() < 1e-8, "voxel {v}");
        assert_eq!(base.chosen_hrf[v], fit.chosen_hrf[nv - 1 - v]);
    }
}

#[test]
fn ridge_shrinkage_is_monotone_and_matches_penalized_solve() {
    let mut rng = Rng::new(17);
    let a = Tensor::randn(&[60, 12], 1.0, &mut rng);
    let y = Tensor::randn(&[60], 1.0, &mut rng);
    let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
    let path = fractional_ridge(&a, &y, &grid).unwrap();
    let ols = ols_solve(&a, &y).unwrap();
    let am = mat(&a);
    let aty = am.transpose() * DMatrix::from_column_slice(60, 1, y.data());
    let mut last = f64::INFINITY;
    for (&c, (alpha, b)) in grid.iter().zip(&path) {
        let n = b.norm();
        assert!(n <= last + 1e-12);
        last = n;
        assert!((n - (1.0 - c) * ols.norm()).abs() < 1e-8 * ols.norm(), "fraction {c}");
        let oracle = (am.transpose() * &am + DMatrix::<f64>::identity(12, 12) * *alpha).cholesky().unwrap().solve(&aty);
        for (i, v) in b.data().iter().enumerate() {
            assert!((v - oracle[(i, 0)]).abs() < 1e-9, "fraction {c} coefficient {i}");
        }
    }
}

#[test]
fn single_session_is_rejected() {
    let cfg = SynthConfig { sessions: 1, ..small_config() };
    let ds = generate_dataset(&cfg, &mut Rng::new(1)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    match fit_glmsingle(&ds.bold, &design, &lib, &GlmConfig::default()) {
        Err(Error::Config(msg)) => assert!(msg.contains("at least 2 sessions"), "{msg}"),
        other => panic!("expected a config error, got {:?}", other.map(|f| f.n_pcs)),
    }
}

#[test]
fn noisy_data_builds_a_noise_pool() {
    let cfg = SynthConfig { structured_noise: 1.0, ..small_config() };
    let ds = generate_dataset(&cfg, &mut Rng::new(12)).unwrap();
    let design = DesignMatrix::from_schedules(&ds.schedules);
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let fit = fit_glmsingle(&ds.bold, &design, &lib, &GlmConfig::default()).unwrap();
    assert!(!fit.step2_skipped);
    assert!(!fit.noise_pool.is_empty());
    assert!(fit.noise_pool.iter().all(|&v| fit.r2_cv_initial[v] < 0.0));
    assert_eq!(fit.v[0].shape()[1], fit.n_pcs);
    assert!(fit.ridge_fraction.iter().all(|c| (0.0..1.0).contains(c)));
}
