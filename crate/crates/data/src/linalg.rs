//! Dense least squares and PCA on top of nalgebra.

use nalgebra::{ColPivQR, DMatrix, SymmetricEigen};
use neurodecode_core::{Error, Result, Tensor};

/// Row-major `[m, n]` tensor to a matrix.
pub fn to_mat(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [m, n] => Ok(DMatrix::from_row_slice(*m, *n, t.data())),
        [m] => Ok(DMatrix::from_column_slice(*m, 1, t.data())),
        s => Err(Error::Dim(format!("expected a matrix, got shape {s:?}"))),
    }
}

pub fn from_mat(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(m.row(i).iter());
    }
    Tensor::new(&[r, c], data).expect("consistent shape")
}

/// Relative threshold on the pivoted-QR diagonal below which a column counts
/// as linearly dependent.
const RANK_TOL: f64 = 1e-10;

/// Column-pivoted QR factorization of a tall design, reusable across many
/// right-hand sides.
pub struct LeastSquares {
    qr: ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
    rows: usize,
    cols: usize,
}

impl LeastSquares {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = a.shape();
        if rows < cols {
            return Err(Error::Dim(format!("least squares needs at least as many rows as columns, got {rows}×{cols}")));
        }
        let qr = ColPivQR::new(a);
        let r = qr.r();
        let diag: Vec<f64> = (0..cols).map(|i| r[(i, i)].abs()).collect();
        let top = diag.iter().cloned().fold(0.0, f64::max);
        let deficient = diag.iter().filter(|&&d| d <= RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
        if deficient > 0 {
            return Err(Error::Numeric(format!("rank-deficient design: {deficient} of {cols} columns are linearly dependent")));
        }
        Ok(Self { qr, r, rows, cols })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Minimizes `‖A x − y‖` for every column of `y`.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.rows {
            return Err(Error::Dim(format!("right-hand side has {} rows, design has {}", y.nrows(), self.rows)));
        }
        let mut qty = y.clone();
        self.qr.q_tr_mul(&mut qty);
        let top = qty.rows(0, self.cols).into_owned();
        let mut x = self
            .r
            .solve_upper_triangular(&top)
            .ok_or_else(|| Error::Numeric("singular triangular factor".into()))?;
        self.qr.p().inv_permute_rows(&mut x);
        Ok(x)
    }
}

/// Ordinary least squares `argmin_x ‖A x − y‖²` for `A[T, q]`, `y[T]`.
pub fn ols_solve(a: &Tensor, y: &Tensor) -> Result<Tensor> {
    let am = to_mat(a)?;
    if y.rank() != 1 || y.len() != am.nrows() {
        return Err(Error::Dim(format!("ols: design {:?} with data {:?}", a.shape(), y.shape())));
    }
    let x = LeastSquares::new(am)?.solve(&DMatrix::from_column_slice(y.len(), 1, y.data()))?;
    Ok(Tensor::from_vec(x.column(0).iter().copied().collect()))
}

/// Orthonormal basis of the column span via Gram–Schmidt with
/// re-orthogonalization. Columns that are dependent on earlier ones are
/// dropped.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    for j in 0..a.ncols() {
        let mut v = a.column(j).into_owned();
        let n0 = v.norm();
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&v);
                v.axpy(-d, b, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-10 * n0.max(f64::MIN_POSITIVE) {
            basis.push(v / n);
        }
    }
    if basis.is_empty() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    DMatrix::from_columns(&basis)
}

/// Removes the span of the orthonormal columns `q` from every column of `m`.
pub fn project_out(q: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    if q.ncols() == 0 {
        return m.clone();
    }
    m - q * (q.transpose() * m)
}

/// Top-`n` principal components of the column-centered `Xn[T, k]`, returned
/// as unit-norm time courses `[T, n]` ordered by descending variance.
pub fn pca_components(xn: &Tensor, n: usize) -> Result<Tensor> {
    let x = to_mat(xn)?;
    let (t, k) = x.shape();
    if n > t.min(k) {
        return Err(Error::Dim(format!("requested {n} components from a {t}×{k} matrix")));
    }
    Ok(from_mat(&pca_mat(&x, n)))
}

pub(crate) fn pca_mat(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (t, _) = x.shape();
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    // eigen-decompose the smaller Gram matrix; time courses are C v / ‖C v‖
    // when working in feature space
    let time_side = t <= c.ncols();
    let gram = if time_side { &c * c.transpose() } else { c.transpose() * &c };
    let eig = SymmetricEigen::new(gram);
    let m = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(t, n);
    for (j, &i) in order.iter().take(n).enumerate() {
        let ev = eig.eigenvectors.column(i).into_owned();
        let mut v = if time_side { ev } else { &c * ev };
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        // sign convention: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        out.set_column(j, &v);
    }
    out
}
