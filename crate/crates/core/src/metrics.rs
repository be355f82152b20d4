//! Evaluation losses and clustering scores.

use crate::linalg::Mat;
use ndarray::ArrayView2;
use thiserror::Error;

const EPS: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("columns are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("k = {0} is too large for permutation enumeration (max 8)")]
    KTooLarge(usize),
    #[error("label {label} is outside [0, {k})")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("empty input")]
    Empty,
}

/// Relative eigenvalue error. `squared` averages the squared relative errors;
/// otherwise the signed relative errors are averaged.
pub fn rmse_eigvals(truth: &[f64], pred: &[f64], squared: bool) -> Result<f64, MetricError> {
    if truth.len() != pred.len() {
        return Err(MetricError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = truth
        .iter()
        .zip(pred)
        .map(|(l, lh)| {
            let r = (l - lh) / (l + EPS);
            if squared {
                r * r
            } else {
                r
            }
        })
        .sum();
    Ok(sum / truth.len() as f64)
}

fn check_shape(v: ArrayView2<'_, f64>, vh: ArrayView2<'_, f64>) -> Result<(), MetricError> {
    if v.dim() != vh.dim() {
        return Err(MetricError::ShapeMismatch(v.dim(), vh.dim()));
    }
    Ok(())
}

/// Mean over columns of 1 - cos(v_i, vhat_i).
pub fn cos_loss(v: ArrayView2<'_, f64>, vh: ArrayView2<'_, f64>) -> Result<f64, MetricError> {
    check_shape(v, vh)?;
    let k = v.ncols();
    if k == 0 {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for i in 0..k {
        let a = v.column(i);
        let b = vh.column(i);
        let denom = (a.dot(&a).sqrt() * b.dot(&b).sqrt()).max(EPS);
        total += 1.0 - a.dot(&b) / denom;
    }
    Ok(total / k as f64)
}

fn ortho_deviation(v: ArrayView2<'_, f64>) -> f64 {
    let g = v.t().dot(&v);
    let mut m: f64 = 0.0;
    for ((i, j), x) in g.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        m = m.max((x - target).abs());
    }
    m
}

/// Half the squared Frobenius distance between the two column-space projectors.
pub fn eigenspace_loss(v: ArrayView2<'_, f64>, vh: ArrayView2<'_, f64>) -> Result<f64, MetricError> {
    check_shape(v, vh)?;
    for m in [v, vh] {
        let dev = ortho_deviation(m);
        if dev > ORTHO_TOL {
            return Err(MetricError::NotOrthonormal(dev));
        }
    }
    Ok(0.5 * projector_distance_sq(v, vh))
}

/// ||V V^T - W W^T||_F^2 without orthonormality checks.
pub fn projector_distance_sq(v: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> f64 {
    let diff: Mat = v.dot(&v.t()) - w.dot(&w.t());
    diff.iter().map(|x| x * x).sum()
}

fn check_binary(z: &[u8]) {
    debug_assert!(z.iter().all(|&x| x <= 1));
}

/// Two-class misclustering rate, minimized over the label complement.
pub fn gmm_loss(zhat: &[u8], z: &[u8]) -> Result<f64, MetricError> {
    if zhat.len() != z.len() {
        return Err(MetricError::LengthMismatch(zhat.len(), z.len()));
    }
    if z.is_empty() {
        return Err(MetricError::Empty);
    }
    check_binary(zhat);
    check_binary(z);
    let n = z.len() as f64;
    let same = zhat.iter().zip(z).filter(|(a, b)| a != b).count() as f64 / n;
    let flipped = zhat.iter().zip(z).filter(|(a, b)| a == b).count() as f64 / n;
    Ok(same.min(flipped))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// k-class misclustering rate, minimized over all relabelings of `z`.
pub fn gmm_loss_k(zhat: &[usize], z: &[usize], k: usize) -> Result<f64, MetricError> {
    if zhat.len() != z.len() {
        return Err(MetricError::LengthMismatch(zhat.len(), z.len()));
    }
    if z.is_empty() {
        return Err(MetricError::Empty);
    }
    if k > 8 {
        return Err(MetricError::KTooLarge(k));
    }
    if let Some(&label) = zhat.iter().chain(z).find(|&&x| x >= k) {
        return Err(MetricError::LabelOutOfRange { label, k });
    }
    let counts = contingency(z, zhat).counts;
    let n = z.len() as f64;
    let best = permutations(k)
        .iter()
        .map(|pi| (0..k).map(|i| counts.get(i).and_then(|r| r.get(pi[i])).copied().unwrap_or(0)).sum::<usize>())
        .max()
        .unwrap_or(0);
    // Counted matches are exact integers, so this equals the two-class loss bit for bit.
    let mismatches = z.len() - best;
    Ok(mismatches as f64 / n)
}

/// Co-occurrence counts between two labelings; rows index `a`, columns index `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
}

impl ContingencyTable {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
    pub fn col_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, |r| r.len());
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

fn compress(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    let idx = labels.iter().map(|l| seen.binary_search(l).unwrap()).collect();
    (idx, seen.len())
}

pub fn contingency(a: &[usize], b: &[usize]) -> ContingencyTable {
    let (ai, ka) = compress(a);
    let (bi, kb) = compress(b);
    let mut counts = vec![vec![0usize; kb]; ka];
    for (x, y) in ai.iter().zip(&bi) {
        counts[*x][*y] += 1;
    }
    ContingencyTable { counts }
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Two identical trivial partitions score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let t = contingency(a, b);
    let index: f64 = t.counts.iter().flatten().map(|&n| choose2(n)).sum();
    let sa: f64 = t.row_sums().into_iter().map(choose2).sum();
    let sb: f64 = t.col_sums().into_iter().map(choose2).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // Both partitions are all-singletons or a single cluster.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNorm {
    #[default]
    Geometric,
    Arithmetic,
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information (natural log), 0/0 treated as 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, MetricError> {
    nmi_with(a, b, NmiNorm::Geometric)
}

pub fn nmi_with(a: &[usize], b: &[usize], norm: NmiNorm) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let t = contingency(a, b);
    let n = a.len() as f64;
    let ra = t.row_sums();
    let cb = t.col_sums();
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (c as f64 * n / (ra[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    let ha = entropy(&ra, n);
    let hb = entropy(&cb, n);
    let denom = match norm {
        NmiNorm::Geometric => (ha * hb).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (ha + hb),
    };
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}
