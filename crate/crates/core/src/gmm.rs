//! Two-cluster spectral clustering, the Bayes rule, and the split-size rule.

use crate::linalg::{power_method_sym, sample_unit_sphere, LinalgError, Mat, Vector};
use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

pub use crate::metrics::gmm_loss;

pub const DEFAULT_TAU: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("bad split N1 = {n1} (allowed {lo}..={hi})")]
    BadSplit { n1: usize, lo: usize, hi: usize },
    #[error("covariance is degenerate; no dominant direction")]
    DegenerateData,
    #[error("the two means are identical")]
    IdenticalMeans,
    #[error("N = {n} too small for d = {d} (need N >= d + 4)")]
    NTooSmall { n: usize, d: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Binary cluster labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<u8>,
}

impl ClusterAssignment {
    pub fn as_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// Covariance and mean of the first `n1` columns.
pub fn empirical_cov(x: ArrayView2<'_, f64>, n1: usize) -> Result<(Mat, Vector), GmmError> {
    let n = x.ncols();
    if n1 == 0 || n1 > n {
        return Err(GmmError::BadSplit { n1, lo: 1, hi: n });
    }
    let head = x.slice(ndarray::s![.., ..n1]);
    let mean = head.mean_axis(Axis(1)).expect("n1 >= 1");
    let centered = &head - &mean.view().insert_axis(Axis(1));
    let mut cov = centered.dot(&centered.t()) / n1 as f64;
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..i {
            cov[[i, j]] = cov[[j, i]];
        }
    }
    Ok((cov, mean))
}

fn check_split(d: usize, n: usize, n1: usize) -> Result<(), GmmError> {
    let lo = d + 2;
    let hi = n.saturating_sub(1);
    if n1 < lo || n1 > hi {
        return Err(GmmError::BadSplit { n1, lo, hi });
    }
    Ok(())
}

/// Label by the sign of the projection on `v` relative to `mean`; ties go to 0.
pub fn project_labels(x: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>, mean: ArrayView1<'_, f64>) -> ClusterAssignment {
    let offset = v.dot(&mean);
    let proj = v.dot(&x);
    ClusterAssignment { labels: proj.iter().map(|p| u8::from(p - offset > 0.0)).collect() }
}

/// Spectral clustering with a random start drawn from `rng`.
pub fn spectral_cluster<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    n1: usize,
    tau: usize,
    rng: &mut R,
) -> Result<ClusterAssignment, GmmError> {
    check_split(x.nrows(), x.ncols(), n1)?;
    let v0 = sample_unit_sphere(x.nrows(), rng);
    spectral_cluster_with_init(x, n1, tau, &v0)
}

/// Spectral clustering from a given unit start vector.
pub fn spectral_cluster_with_init(
    x: ArrayView2<'_, f64>,
    n1: usize,
    tau: usize,
    v0: &Vector,
) -> Result<ClusterAssignment, GmmError> {
    let v = leading_direction(x, n1, tau, v0)?;
    let (_, mean) = empirical_cov(x, n1)?;
    Ok(project_labels(x, v.view(), mean.view()))
}

/// Leading eigenvector of the split covariance via the power method (k = 1).
pub fn leading_direction(x: ArrayView2<'_, f64>, n1: usize, tau: usize, v0: &Vector) -> Result<Vector, GmmError> {
    check_split(x.nrows(), x.ncols(), n1)?;
    let (cov, _) = empirical_cov(x, n1)?;
    match power_method_sym(cov.view(), tau, 1, std::slice::from_ref(v0)) {
        Ok(res) => Ok(res.eigvecs.column(0).to_owned()),
        Err(LinalgError::ZeroImage) => Err(GmmError::DegenerateData),
        Err(e) => Err(e.into()),
    }
}

/// Optimal rule for known means: the hyperplane through the midpoint,
/// orthogonal to mu1 - mu0.
pub fn bayes_cluster(
    x: ArrayView2<'_, f64>,
    mu0: ArrayView1<'_, f64>,
    mu1: ArrayView1<'_, f64>,
) -> Result<ClusterAssignment, GmmError> {
    let w = &mu1 - &mu0;
    if w.iter().all(|&v| v == 0.0) {
        return Err(GmmError::IdenticalMeans);
    }
    let mid = (&mu0 + &mu1) * 0.5;
    Ok(project_labels(x, w.view(), mid.view()))
}

/// Split size from the rate analysis with unit constant, clamped to
/// [d + 2, N / 2].
pub fn choose_n1(d: usize, n: usize, sep_est: f64) -> Result<usize, GmmError> {
    if n < d + 4 {
        return Err(GmmError::NTooSmall { n, d });
    }
    let raw = (d as f64).cbrt() * (n as f64).powf(2.0 / 3.0) * (sep_est + (n as f64).ln()).powf(2.0 / 3.0);
    let lo = d + 2;
    let hi = n / 2;
    Ok((raw.round() as usize).clamp(lo, hi.max(lo)))
}
