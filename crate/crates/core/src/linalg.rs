//! Dense matrix helpers, a Jacobi eigensolver used as ground truth, and the
//! power method with deflation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Dense row-major matrix of `f64`.
pub type Mat = Array2<f64>;
/// Dense column vector.
pub type Vector = Array1<f64>;

const SYM_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-10;
const ZERO_IMAGE: f64 = 1e-14;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max |A - A^T| = {0:e})")]
    NonSymmetric(f64),
    #[error("k = {k} exceeds dimension d = {d}")]
    KTooLarge { k: usize, d: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("A v vanished (norm below 1e-14); v lies in the kernel")]
    ZeroImage,
    #[error("initial vector {index} is not unit norm (norm = {norm})")]
    NotUnit { index: usize, norm: f64 },
    #[error("expected {expected} initial vectors, got {got}")]
    InitCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Top-k eigenpairs. `eigvecs` is d x k with unit columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub eigvals: Vec<f64>,
    pub eigvecs: Mat,
}

impl SpectralResult {
    pub fn k(&self) -> usize {
        self.eigvals.len()
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.eigvecs.column(i)
    }

    /// Smallest pairwise distance between the returned eigenvalues.
    /// Infinite when only one eigenvalue is present.
    pub fn gap(&self) -> f64 {
        let mut g = f64::INFINITY;
        for i in 0..self.eigvals.len() {
            for j in i + 1..self.eigvals.len() {
                g = g.min((self.eigvals[i] - self.eigvals[j]).abs());
            }
        }
        g
    }

    /// Copy with pairs reordered by descending eigenvalue.
    pub fn sorted(&self) -> SpectralResult {
        let mut idx: Vec<usize> = (0..self.k()).collect();
        idx.sort_by(|&a, &b| self.eigvals[b].total_cmp(&self.eigvals[a]));
        let eigvals = idx.iter().map(|&i| self.eigvals[i]).collect();
        let eigvecs = self.eigvecs.select(Axis(1), &idx);
        SpectralResult { eigvals, eigvecs }
    }
}

/// Flip each column so its largest-magnitude entry is nonnegative.
/// Ties go to the lowest index.
pub fn apply_sign_convention(v: &mut Mat) {
    for mut col in v.columns_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col.len() > 0 && col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_asymmetry(a: ArrayView2<'_, f64>) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    m
}

/// A = X X^T. The lower triangle is mirrored so the result is exactly symmetric.
pub fn symmetrize(x: ArrayView2<'_, f64>) -> Mat {
    let mut a = x.dot(&x.t());
    let d = a.nrows();
    for i in 0..d {
        for j in 0..i {
            a[[i, j]] = a[[j, i]];
        }
    }
    a
}

/// Top-k eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
pub fn eigh_oracle(a: ArrayView2<'_, f64>, k: usize) -> Result<SpectralResult, LinalgError> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(LinalgError::DimMismatch(format!("{}x{} is not square", d, a.ncols())));
    }
    if k == 0 {
        return Err(LinalgError::KZero);
    }
    if k > d {
        return Err(LinalgError::KTooLarge { k, d });
    }
    let asym = max_asymmetry(a);
    if asym > SYM_TOL {
        return Err(LinalgError::NonSymmetric(asym));
    }
    let (vals, vecs) = jacobi(a);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    idx.truncate(k);
    let eigvals = idx.iter().map(|&i| vals[i]).collect();
    let mut eigvecs = vecs.select(Axis(1), &idx);
    apply_sign_convention(&mut eigvecs);
    Ok(SpectralResult { eigvals, eigvecs })
}

/// Full eigendecomposition; returns unsorted eigenvalues and the matching
/// eigenvector columns.
fn jacobi(a: ArrayView2<'_, f64>) -> (Vec<f64>, Mat) {
    let d = a.nrows();
    let mut m = a.to_owned();
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    let mut v = Mat::eye(d);
    let scale = frobenius(m.view());
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..d {
                    let mrp = m[[r, p]];
                    let mrq = m[[r, q]];
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[r, q]] = s * mrp + c * mrq;
                }
                for r in 0..d {
                    let mpr = m[[p, r]];
                    let mqr = m[[q, r]];
                    m[[p, r]] = c * mpr - s * mqr;
                    m[[q, r]] = s * mpr + c * mqr;
                }
                for r in 0..d {
                    let vrp = v[[r, p]];
                    let vrq = v[[r, q]];
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..d).map(|i| m[[i, i]]).collect(), v)
}

/// One power step: Av / ||Av||.
pub fn power_iterate(a: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> Result<Vector, LinalgError> {
    if a.ncols() != v.len() {
        return Err(LinalgError::DimMismatch(format!(
            "matrix has {} columns, vector has {} entries",
            a.ncols(),
            v.len()
        )));
    }
    let w = a.dot(&v);
    let n = norm(w.view());
    if n < ZERO_IMAGE {
        return Err(LinalgError::ZeroImage);
    }
    Ok(w / n)
}

/// A - lambda v v^T, re-symmetrized.
pub fn deflate(a: ArrayView2<'_, f64>, lambda: f64, v: ArrayView1<'_, f64>) -> Mat {
    let d = a.nrows();
    let mut b = a.to_owned();
    for i in 0..d {
        for j in 0..d {
            b[[i, j]] -= lambda * v[i] * v[j];
        }
    }
    (&b + &b.t()) * 0.5
}

fn check_inits(d: usize, init: &[Vector]) -> Result<(), LinalgError> {
    for (index, v) in init.iter().enumerate() {
        if v.len() != d {
            return Err(LinalgError::DimMismatch(format!(
                "initial vector {index} has length {}, expected {d}",
                v.len()
            )));
        }
        let n = norm(v.view());
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(LinalgError::NotUnit { index, norm: n });
        }
    }
    Ok(())
}

/// Power method with deflation on the Gram matrix of `x` (left singular vectors).
pub fn power_method(
    x: ArrayView2<'_, f64>,
    tau: usize,
    k: usize,
    init: &[Vector],
) -> Result<SpectralResult, LinalgError> {
    let a = symmetrize(x);
    power_method_sym(a.view(), tau, k, init)
}

/// Power method with deflation applied to a symmetric matrix directly.
/// Pairs are returned in recovery order.
pub fn power_method_sym(
    a: ArrayView2<'_, f64>,
    tau: usize,
    k: usize,
    init: &[Vector],
) -> Result<SpectralResult, LinalgError> {
    let d = a.nrows();
    if k == 0 {
        return Err(LinalgError::KZero);
    }
    if k > d {
        return Err(LinalgError::KTooLarge { k, d });
    }
    if init.len() != k {
        return Err(LinalgError::InitCount { expected: k, got: init.len() });
    }
    check_inits(d, init)?;
    let mut al = a.to_owned();
    let mut eigvals = Vec::with_capacity(k);
    let mut eigvecs = Mat::zeros((d, k));
    for (l, v0) in init.iter().enumerate() {
        let mut v = v0.clone();
        for _ in 0..tau {
            v = power_iterate(al.view(), v.view())?;
        }
        let lambda = norm(al.dot(&v).view());
        al = deflate(al.view(), lambda, v.view());
        eigvals.push(lambda);
        eigvecs.column_mut(l).assign(&v);
    }
    apply_sign_convention(&mut eigvecs);
    Ok(SpectralResult { eigvals, eigvecs })
}

/// Uniform draw from the unit sphere in R^d.
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    loop {
        let g: Vector = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(g.view());
        if n >= 1e-12 {
            return g / n;
        }
    }
}
