//! Dense kernels: truncated SVD with a fixed sign convention, Gram matrices,
//! the Hadamard product and a minimum-norm symmetric solver.
//!
//! The SVD is a one-sided Jacobi iteration on the triangular factor of a
//! Householder QR. The symmetric solve uses `nalgebra`'s eigendecomposition.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Truncated SVD of one task matrix.
///
/// Columns of `left` (m x r) and `right` (n x r) are the retained singular
/// vectors, paired with `sigmas` in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBundle {
    pub task_id: String,
    pub sigmas: Vec<f64>,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub shape: (usize, usize),
}

impl SvdBundle {
    /// An empty bundle (rank 0) for an `m x n` matrix.
    pub fn empty(task_id: impl Into<String>, shape: (usize, usize)) -> Self {
        Self {
            task_id: task_id.into(),
            sigmas: Vec::new(),
            left: DMatrix::zeros(shape.0, 0),
            right: DMatrix::zeros(shape.1, 0),
            shape,
        }
    }

    pub fn rank(&self) -> usize {
        self.sigmas.len()
    }

    /// `sum_k sigma_k u_k v_k^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.left.clone();
        for (k, s) in self.sigmas.iter().enumerate() {
            scaled.column_mut(k).scale_mut(*s);
        }
        &scaled * self.right.transpose()
    }

    /// Keeps the triplets whose indices fall in `range`, preserving order.
    pub fn select(&self, range: core::ops::Range<usize>) -> Self {
        let len = range.end - range.start;
        Self {
            task_id: self.task_id.clone(),
            sigmas: self.sigmas[range.clone()].to_vec(),
            left: self.left.columns(range.start, len).into_owned(),
            right: self.right.columns(range.start, len).into_owned(),
            shape: self.shape,
        }
    }
}

fn ensure_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite entries")))
    }
}

const JACOBI_EPS: f64 = 4.0 * f64::EPSILON;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Orthogonalises the columns of `b` in place by plane rotations and returns
/// the accumulated right factor, so that `b_in = b_out * v^T`.
fn one_sided_jacobi(b: &mut DMatrix<f64>) -> DMatrix<f64> {
    let n = b.ncols();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = b.column(p).norm_squared();
                let beta = b.column(q).norm_squared();
                let gamma = b.column(p).dot(&b.column(q));
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(b, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let x = m[(i, p)];
        let y = m[(i, q)];
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Unsorted thin SVD `(u, sigma, v)` with `k = min(m, n)` triplets.
fn thin_svd(matrix: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = matrix.shape();
    if m < n {
        let (u, s, v) = thin_svd(&matrix.transpose());
        return (v, s, u);
    }
    // m >= n: A = Q R, R = (R V) V^T, columns of R V are sigma_j * w_j
    let qr = matrix.clone().qr();
    let q = qr.q();
    let mut r = qr.r();
    let v = one_sided_jacobi(&mut r);
    let mut w = DMatrix::zeros(n, n);
    let mut sigmas = Vec::with_capacity(n);
    for j in 0..n {
        let norm = r.column(j).norm();
        sigmas.push(norm);
        if norm > 0.0 {
            w.set_column(j, &(r.column(j) / norm));
        }
    }
    (q * w, sigmas, v)
}

/// Thin SVD of `matrix`, keeping triplets with `sigma > rank_tol * sigma_max`.
///
/// Within every retained left vector the entry of largest magnitude is made
/// positive (the first such entry on ties) and the paired right vector is
/// flipped with it, so the output is a deterministic function of the input.
pub fn truncated_svd(task_id: impl Into<String>, matrix: &DMatrix<f64>, rank_tol: f64) -> Result<SvdBundle> {
    let (m, n) = matrix.shape();
    let task_id = task_id.into();
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!("cannot decompose an empty {m}x{n} matrix")));
    }
    if !(0.0..1.0).contains(&rank_tol) {
        return Err(Error::Config(format!("rank_tol must lie in [0, 1), got {rank_tol}")));
    }
    ensure_finite(matrix.iter().copied(), "task matrix")?;

    let (u, values, v) = thin_svd(matrix);

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| values[i]);
    if top <= 0.0 {
        return Ok(SvdBundle::empty(task_id, (m, n)));
    }
    let cutoff = rank_tol * top;
    let kept: Vec<usize> = order.into_iter().filter(|&i| values[i] > cutoff).collect();

    let r = kept.len();
    let mut left = DMatrix::zeros(m, r);
    let mut right = DMatrix::zeros(n, r);
    let mut sigmas = Vec::with_capacity(r);
    for (k, &idx) in kept.iter().enumerate() {
        let mut ucol = u.column(idx).into_owned();
        let mut vcol = v.column(idx).into_owned();
        let mut pivot = 0;
        for (j, x) in ucol.iter().enumerate() {
            if x.abs() > ucol[pivot].abs() {
                pivot = j;
            }
        }
        if ucol[pivot] < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        left.set_column(k, &ucol);
        right.set_column(k, &vcol);
        sigmas.push(values[idx]);
    }

    Ok(SvdBundle { task_id, sigmas, left, right, shape: (m, n) })
}

/// Cross inner products between two families of column sets.
///
/// The columns of each family are concatenated in order; entry `(p, q)` is
/// the dot product of column `p` of `a` with column `q` of `b`.
pub fn gram(a: &[&DMatrix<f64>], b: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let ra: usize = a.iter().map(|s| s.ncols()).sum();
    let rb: usize = b.iter().map(|s| s.ncols()).sum();
    if ra == 0 || rb == 0 {
        return Ok(DMatrix::zeros(ra, rb));
    }
    let dim = a.iter().chain(b.iter()).find(|s| s.ncols() > 0).map_or(0, |s| s.nrows());
    if let Some(bad) = a.iter().chain(b.iter()).find(|s| s.ncols() > 0 && s.nrows() != dim) {
        return Err(Error::Shape(format!("column dimension {} does not match {dim}", bad.nrows())));
    }
    let stack = |sets: &[&DMatrix<f64>], r: usize| {
        let mut out = DMatrix::zeros(dim, r);
        let mut at = 0;
        for s in sets {
            out.columns_mut(at, s.ncols()).copy_from(*s);
            at += s.ncols();
        }
        out
    };
    let lhs = stack(a, ra);
    let rhs = stack(b, rb);
    Ok(lhs.tr_mul(&rhs))
}

/// Elementwise product of two equally shaped matrices.
pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("hadamard of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.component_mul(b))
}

/// Minimum-norm least-squares solution of a symmetric system.
///
/// Eigen-directions of `coeff` whose eigenvalue magnitude is at most
/// `solver_tol` times the largest magnitude are discarded. Returns the weights
/// and `||coeff * weights - rhs||_2`.
pub fn solve_sym(coeff: &DMatrix<f64>, rhs: &DVector<f64>, solver_tol: f64) -> Result<(DVector<f64>, f64)> {
    let r = coeff.nrows();
    if coeff.ncols() != r || rhs.len() != r {
        return Err(Error::Shape(format!("system {:?} with right-hand side of length {}", coeff.shape(), rhs.len())));
    }
    if !(0.0..1.0).contains(&solver_tol) {
        return Err(Error::Config(format!("solver_tol must lie in [0, 1), got {solver_tol}")));
    }
    ensure_finite(coeff.iter().copied(), "system matrix")?;
    ensure_finite(rhs.iter().copied(), "right-hand side")?;
    if r == 0 {
        return Ok((DVector::zeros(0), 0.0));
    }

    let scale = coeff.amax().max(f64::MIN_POSITIVE);
    let asym = (coeff - coeff.transpose()).amax();
    if asym > 1e-6 * scale.max(1.0) {
        return Err(Error::Numeric(format!("system matrix is not symmetric (deviation {asym:e})")));
    }
    let sym = (coeff + coeff.transpose()) * 0.5;

    let eig = sym.symmetric_eigen();
    let largest = eig.eigenvalues.amax();
    let cutoff = solver_tol * largest;
    let projected = eig.eigenvectors.tr_mul(rhs);
    let mut scaled = DVector::zeros(r);
    for j in 0..r {
        let lambda = eig.eigenvalues[j];
        if lambda.abs() > cutoff && lambda != 0.0 {
            scaled[j] = projected[j] / lambda;
        }
    }
    let weights = &eig.eigenvectors * scaled;
    let residual = (coeff * &weights - rhs).norm();
    ensure_finite(weights.iter().copied(), "solution")?;
    Ok((weights, residual))
}
