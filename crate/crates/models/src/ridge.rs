//! Closed-form multi-output ridge regression.
//!
//! `W = (XcᵀXc + αI)⁻¹ XcᵀYc` on column-centered data, with the intercept
//! restoring the means. When there are more input columns than samples the
//! equivalent dual form `W = Xcᵀ (XcXcᵀ + αI)⁻¹ Yc` is solved instead.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use neurodecode_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

/// Smallest eigenvalue, relative to the largest, treated as nonzero.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RidgeModel {
    /// `[V, D]`
    pub weights: Tensor,
    /// `[D]`; prediction is `x W + bias`.
    pub bias: Tensor,
    pub alpha: f64,
}

/// Shape of a flattened multi-row target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLayout {
    pub rows: usize,
    pub d: usize,
}

fn mat(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [n, m] => Ok(DMatrix::from_row_slice(*n, *m, t.data())),
        s => Err(Error::Dim(format!("expected a matrix, got {s:?}"))),
    }
}

fn tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::new(&[r, c], m.transpose().as_slice().to_vec()).expect("consistent shape")
}

fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let means: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}

/// Solves `G A = B` for symmetric positive semi-definite `G`: Cholesky first,
/// symmetric eigendecomposition when the factorization fails or is
/// numerically singular.
pub fn solve_spd(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = g.diagonal().iter().cloned().fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(Error::Numeric("ridge system is identically zero".into()));
    }
    if let Some(ch) = Cholesky::new(g.clone()) {
        let l = ch.l_dirty();
        let min_pivot = (0..g.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > SINGULAR_TOL * scale {
            return Ok(ch.solve(b));
        }
    }
    let eig = SymmetricEigen::new(g.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let deficient = eig.eigenvalues.iter().filter(|&&l| l <= SINGULAR_TOL * top).count();
    if deficient > 0 {
        return Err(Error::Numeric(format!(
            "singular ridge system: {deficient} of {} directions have no variance; use a positive alpha",
            g.nrows()
        )));
    }
    let inv: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 / l).collect();
    let proj = eig.eigenvectors.transpose() * b;
    let scaled = DMatrix::from_fn(proj.nrows(), proj.ncols(), |i, j| proj[(i, j)] * inv[i]);
    Ok(&eig.eigenvectors * scaled)
}

impl RidgeModel {
    pub fn fit(x: &Tensor, y: &Tensor, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("ridge alpha must be finite and non-negative, got {alpha}")));
        }
        let (xm, ym) = (mat(x)?, mat(y)?);
        let (n, v) = xm.shape();
        if ym.nrows() != n {
            return Err(Error::Dim(format!("ridge: {n} input rows but {} target rows", ym.nrows())));
        }
        if n < 2 {
            return Err(Error::Config(format!("ridge needs at least 2 samples, got {n}")));
        }
        let (xc, x_mean) = center(&xm);
        let (yc, y_mean) = center(&ym);
        let w = if v <= n {
            let g = xc.transpose() * &xc + DMatrix::identity(v, v) * alpha;
            solve_spd(&g, &(xc.transpose() * &yc))?
        } else {
            let k = &xc * xc.transpose() + DMatrix::identity(n, n) * alpha;
            xc.transpose() * solve_spd(&k, &yc)?
        };
        let xw = DMatrix::from_row_slice(1, v, &x_mean) * &w;
        let bias: Vec<f64> = y_mean.iter().zip(xw.iter()).map(|(m, p)| m - p).collect();
        let weights = tensor(&w);
        if !weights.all_finite() {
            return Err(Error::Numeric("ridge weights are not finite".into()));
        }
        Ok(Self { weights, bias: Tensor::from_vec(bias), alpha })
    }

    pub fn input_len(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_len(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Predictions for a batch `[N, V]`.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.input_len() {
            return Err(Error::Dim(format!("ridge model takes [N, {}], got {:?}", self.input_len(), x.shape())));
        }
        let p = x.matmul(&self.weights)?;
        let d = self.output_len();
        let mut data = p.into_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(self.bias.data()).for_each(|(a, b)| *a += b);
        }
        Tensor::new(&[x.shape()[0], d], data)
    }

    pub fn predict(&self, beta: &Tensor) -> Result<Tensor> {
        if beta.len() != self.input_len() {
            return Err(Error::Dim(format!("ridge model takes {} inputs, got {}", self.input_len(), beta.len())));
        }
        let p = self.predict_batch(&beta.reshape(&[1, beta.len()])?)?;
        p.reshape(&[self.output_len()])
    }

    /// Prediction reshaped to `[rows, d]` with every row rescaled to unit L2
    /// norm.
    pub fn predict_rows(&self, beta: &Tensor, layout: RowLayout) -> Result<Tensor> {
        if layout.rows * layout.d != self.output_len() {
            return Err(Error::Dim(format!("layout {}×{} does not match {} outputs", layout.rows, layout.d, self.output_len())));
        }
        let p = self.predict(beta)?;
        Ok(normalize_rows(&p.reshape(&[layout.rows, layout.d])?))
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        vec![("weights".into(), self.weights.clone()), ("bias".into(), self.bias.clone()), ("alpha".into(), Tensor::scalar(self.alpha))]
    }

    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let get = |k: &str| {
            named.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone()).ok_or_else(|| Error::Format(format!("ridge archive lacks `{k}`")))
        };
        Ok(Self { weights: get("weights")?, bias: get("bias")?, alpha: get("alpha")?.item() })
    }
}

/// Rows of a `[rows, d]` tensor rescaled to unit L2 norm (zero rows stay zero).
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap_or(&1);
    let mut data = t.to_vec();
    for row in data.chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Picks `alpha` from `grid` by `folds`-fold cross-validated mean squared
/// error, folds being contiguous blocks of rows. Ties go to the larger alpha.
pub fn select_alpha(x: &Tensor, y: &Tensor, grid: &[f64], folds: usize) -> Result<f64> {
    let n = x.shape()[0];
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} samples into {folds} folds")));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty alpha grid".into()));
    }
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    let mut best = (f64::INFINITY, grid[0]);
    for &alpha in grid {
        let mut sse = 0.0;
        for f in 0..folds {
            let test: Vec<usize> = (bounds[f]..bounds[f + 1]).collect();
            let train: Vec<usize> = (0..n).filter(|i| *i < bounds[f] || *i >= bounds[f + 1]).collect();
            let m = RidgeModel::fit(&crate::util::gather(x, &train), &crate::util::gather(y, &train), alpha)?;
            let p = m.predict_batch(&crate::util::gather(x, &test))?;
            sse += p.sub(&crate::util::gather(y, &test))?.data().iter().map(|e| e * e).sum::<f64>();
        }
        if sse <= best.0 {
            best = (sse, alpha);
        }
    }
    Ok(best.1)
}
