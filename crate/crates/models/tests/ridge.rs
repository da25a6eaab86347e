use nalgebra::DMatrix;
use neurodecode_core::{Error, Rng, Tensor};
use neurodecode_models::*;
use proptest::prelude::*;

fn mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// Least squares with an intercept column through the explicit inverse of
/// the normal equations: returns (weights [V, D], bias [D]).
fn ols_oracle(x: &Tensor, y: &Tensor) -> (DMatrix<f64>, Vec<f64>) {
    let (n, v) = (x.shape()[0], x.shape()[1]);
    let a = DMatrix::from_fn(n, v + 1, |i, j| if j < v { x.at(&[i, j]) } else { 1.0 });
    let sol = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * mat(y);
    (sol.rows(0, v).into_owned(), sol.row(v).iter().copied().collect())
}

fn col_means(y: &Tensor) -> Vec<f64> {
    let m = mat(y);
    m.column_iter().map(|c| c.mean()).collect()
}

#[test]
fn huge_alpha_predicts_column_means() {
    let (x, y) = (randn(&[30, 5], 1), randn(&[30, 3], 2));
    let m = RidgeModel::fit(&x, &y, 1e14).unwrap();
    assert!(m.weights.max_abs() < 1e-11);
    let means = col_means(&y);
    let p = m.predict(&randn(&[5], 3)).unwrap();
    for (a, b) in p.data().iter().zip(&means) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_alpha_matches_normal_equations() {
    let (x, y) = (randn(&[60, 7], 4), randn(&[60, 4], 5));
    let m = RidgeModel::fit(&x, &y, 0.0).unwrap();
    let (w, b) = ols_oracle(&x, &y);
    assert!((mat(&m.weights) - w).abs().max() < 1e-8);
    for (a, e) in m.bias.data().iter().zip(&b) {
        assert!((a - e).abs() < 1e-8);
    }
}

#[test]
fn dual_form_matches_primal_oracle() {
    let (x, y) = (randn(&[12, 40], 6), randn(&[12, 3], 7));
    let alpha = 2.5;
    let m = RidgeModel::fit(&x, &y, alpha).unwrap();
    let xm = mat(&x);
    let means: Vec<f64> = xm.column_iter().map(|c| c.mean()).collect();
    let xc = DMatrix::from_fn(12, 40, |i, j| xm[(i, j)] - means[j]);
    let ym = mat(&y);
    let ymeans: Vec<f64> = ym.column_iter().map(|c| c.mean()).collect();
    let yc = DMatrix::from_fn(12, 3, |i, j| ym[(i, j)] - ymeans[j]);
    let w = (xc.transpose() * &xc + DMatrix::identity(40, 40) * alpha).try_inverse().unwrap() * xc.transpose() * yc;
    assert!((mat(&m.weights) - w).abs().max() < 1e-8);
}

#[test]
fn prediction_norm_shrinks_with_alpha() {
    let x = randn(&[50, 8], 8);
    let y = randn(&[50, 5], 9);
    let probe = randn(&[20, 8], 10);
    let mut last = f64::INFINITY;
    for e in 0..=6 {
        let m = RidgeModel::fit(&x, &y, 10f64.powi(e)).unwrap();
        let centered = probe.sub(&Tensor::new(&[20, 8], (0..20).flat_map(|_| col_means(&x)).collect()).unwrap()).unwrap();
        let norm = centered.matmul(&m.weights).unwrap().norm();
        assert!(norm <= last * (1.0 + 1e-12), "alpha 1e{e}: {norm} > {last}");
        last = norm;
    }
}

#[test]
fn exact_linear_targets_are_reproduced() {
    let x = randn(&[40, 6], 11);
    let b = randn(&[6, 3], 12);
    let y = x.matmul(&b).unwrap().map(|v| v + 0.75);
    let m = RidgeModel::fit(&x, &y, 0.0).unwrap();
    assert!(m.predict_batch(&x).unwrap().sub(&y).unwrap().max_abs() < 1e-6);
}

#[test]
fn mean_input_predicts_target_means() {
    let (x, y) = (randn(&[25, 4], 13), randn(&[25, 6], 14));
    let m = RidgeModel::fit(&x, &y, 3.0).unwrap();
    let p = m.predict(&Tensor::from_vec(col_means(&x))).unwrap();
    for (a, b) in p.data().iter().zip(col_means(&y)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn singular_design_without_shrinkage_is_an_error() {
    let base = randn(&[20, 3], 15);
    let dup: Vec<f64> = (0..20).flat_map(|i| [base.at(&[i, 0]), base.at(&[i, 1]), base.at(&[i, 2]), base.at(&[i, 0])]).collect();
    let x = Tensor::new(&[20, 4], dup).unwrap();
    let err = RidgeModel::fit(&x, &randn(&[20, 2], 16), 0.0).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(RidgeModel::fit(&x, &randn(&[20, 2], 16), 1.0).is_ok());
}

#[test]
fn invalid_inputs_are_rejected() {
    let (x, y) = (randn(&[10, 3], 17), randn(&[10, 2], 18));
    assert!(matches!(RidgeModel::fit(&x, &y, -1.0), Err(Error::Config(_))));
    assert!(matches!(RidgeModel::fit(&randn(&[1, 3], 1), &randn(&[1, 2], 1), 1.0), Err(Error::Config(_))));
    assert!(matches!(RidgeModel::fit(&x, &randn(&[9, 2], 1), 1.0), Err(Error::Dim(_))));
    let m = RidgeModel::fit(&x, &y, 1.0).unwrap();
    assert!(matches!(m.predict(&randn(&[4], 1)), Err(Error::Dim(_))));
    assert!(matches!(m.predict_rows(&randn(&[3], 1), RowLayout { rows: 3, d: 1 }), Err(Error::Dim(_))));
}

#[test]
fn full_size_embedding_layouts() {
    let x = randn(&[4, 3], 19);
    for (rows, d) in [(77, 768), (257, 768)] {
        let y = randn(&[4, rows * d], 20);
        let m = RidgeModel::fit(&x, &y, 1.0).unwrap();
        let p = m.predict_rows(&randn(&[3], 21), RowLayout { rows, d }).unwrap();
        assert_eq!(p.shape(), [rows, d]);
        for r in 0..rows {
            assert!((p.row(r).norm() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn predictions_beat_permuted_pairs() {
    let n = 120;
    let x = randn(&[n, 20], 22);
    let b = randn(&[20, 16], 23);
    let y = x.matmul(&b).unwrap().add(&randn(&[n, 16], 24).scale(3.0)).unwrap();
    let (train_x, test_x) = (neurodecode_models::util::gather(&x, &(0..80).collect::<Vec<_>>()), neurodecode_models::util::gather(&x, &(80..n).collect::<Vec<_>>()));
    let (train_y, test_y) = (neurodecode_models::util::gather(&y, &(0..80).collect::<Vec<_>>()), neurodecode_models::util::gather(&y, &(80..n).collect::<Vec<_>>()));
    let m = RidgeModel::fit(&train_x, &train_y, 10.0).unwrap();
    let p = m.predict_batch(&test_x).unwrap();
    let cos = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>() / (a.norm() * b.norm());
    let k = n - 80;
    let matched = (0..k).map(|i| cos(&p.row(i), &test_y.row(i))).sum::<f64>() / k as f64;
    let shifted = (0..k).map(|i| cos(&p.row(i), &test_y.row((i + 7) % k))).sum::<f64>() / k as f64;
    assert!(matched > shifted + 0.3, "matched {matched}, permuted {shifted}");
}

#[test]
fn archive_round_trip_and_determinism() {
    let (x, y) = (randn(&[15, 4], 25), randn(&[15, 3], 26));
    let m = RidgeModel::fit(&x, &y, 0.5).unwrap();
    let again = RidgeModel::fit(&x, &y, 0.5).unwrap();
    assert_eq!(m.weights, again.weights);
    let back = RidgeModel::from_named(&m.to_named()).unwrap();
    assert_eq!(back.weights, m.weights);
    assert_eq!(back.bias, m.bias);
    assert_eq!(back.alpha, 0.5);
}

#[test]
fn alpha_selection_prefers_shrinkage_on_pure_noise() {
    let (x, y) = (randn(&[40, 10], 27), randn(&[40, 2], 28));
    let grid = [1e-2, 1.0, 1e2, 1e6];
    assert_eq!(select_alpha(&x, &y, &grid, 5).unwrap(), 1e6);
    let b = randn(&[10, 2], 29);
    let clean = x.matmul(&b).unwrap();
    assert_eq!(select_alpha(&x, &clean, &grid, 5).unwrap(), 1e-2);
    assert!(select_alpha(&x, &y, &grid, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn row_normalization_gives_unit_rows(seed in 0u64..1000, rows in 1usize..6, d in 1usize..9) {
        let t = randn(&[rows, d], seed);
        let n = normalize_rows(&t);
        for r in 0..rows {
            prop_assert!((n.row(r).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_is_equivariant_to_target_scaling(seed in 0u64..1000, c in 0.1f64..10.0) {
        let (x, y) = (randn(&[20, 4], seed), randn(&[20, 2], seed + 1));
        let a = RidgeModel::fit(&x, &y, 1.5).unwrap();
        let b = RidgeModel::fit(&x, &y.scale(c), 1.5).unwrap();
        prop_assert!(b.weights.sub(&a.weights.scale(c)).unwrap().max_abs() < 1e-9 * c.max(1.0));
    }
}
