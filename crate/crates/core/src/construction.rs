//! Auxiliary input blocks and explicit transformer weights whose forward pass
//! runs the power method (PCA variant) or two-cluster spectral clustering
//! (GMM variant).
//!
//! Every constructed layer uses pairs of heads with opposite score signs so
//! that `x * relu(s) - x * relu(-s) = x * s`, which turns ReLU attention into
//! exact bilinear updates. Scalar maps (`1/sqrt(q)`, `sqrt(q)`, `tanh`) are
//! piecewise-linear interpolants written as sums of ReLU ridges, one head or
//! hidden unit per knot.

use crate::linalg::{sample_unit_sphere, LinalgError, Mat, SpectralResult, Vector};
use ndarray::ArrayView2;
use crate::transformer::{Activation, AttnHead, AttnLayer, Episode, FcLayer, TransformerParams, TransformerError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest knot table the builders will emit.
pub const MAX_KNOTS: usize = 1 << 20;
/// Readout saturation level for the tanh approximation.
pub const TANH_SATURATION: f64 = 1.0 - 1e-9;
/// Half-width of the interval on which tanh is interpolated.
pub const TANH_RANGE: f64 = 20.0;
/// Magnitude used to switch attention scores off in inactive columns. The
/// gated terms are multiplied by exact zeros in active columns, so the value
/// never touches the arithmetic that matters.
const GATE: f64 = 1e6;
/// Slack applied on both ends of every approximation interval.
const RANGE_SLACK: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error("N = {n} is smaller than d = {d}")]
    NTooSmall { n: usize, d: usize },
    #[error("k = {k} must lie in 1..={d}")]
    KTooLarge { k: usize, d: usize },
    #[error("bad split N1 = {n1}; need {lo} <= N1 < {n}")]
    BadSplit { n1: usize, lo: usize, n: usize },
    #[error("bad interval [{a}, {b}]")]
    BadInterval { a: f64, b: f64 },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("layout does not match the requested network: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Placeholder,
    Identity,
    Sphere,
    Indicator,
}

/// One block of P; `offset` counts rows from the top of P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub offset: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum AuxVariant {
    Pca,
    Gmm { n1: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxLayout {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub variant: AuxVariant,
    pub blocks: Vec<Block>,
}

impl AuxLayout {
    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows).sum()
    }

    /// Embedding dimension of H = [X; P].
    pub fn embed_dim(&self) -> usize {
        self.d + self.rows()
    }

    fn find(&self, kind: BlockKind, nth: usize) -> Block {
        *self
            .blocks
            .iter()
            .filter(|b| b.kind == kind)
            .nth(nth)
            .expect("layout block present")
    }
}

/// Build P for the PCA network: a zero placeholder, [I_d | 0], k unit
/// vectors in the first k columns of the sphere block, then k zero
/// placeholders.
pub fn build_aux_pca<R: Rng + ?Sized>(d: usize, n: usize, k: usize, rng: &mut R) -> Result<(Mat, AuxLayout), ConstructionError> {
    if n < d {
        return Err(ConstructionError::NTooSmall { n, d });
    }
    if k == 0 || k > d {
        return Err(ConstructionError::KTooLarge { k, d });
    }
    let mut blocks = vec![
        Block { kind: BlockKind::Placeholder, offset: 0, rows: d },
        Block { kind: BlockKind::Identity, offset: d, rows: d },
        Block { kind: BlockKind::Sphere, offset: 2 * d, rows: d },
    ];
    for i in 0..k {
        blocks.push(Block { kind: BlockKind::Placeholder, offset: (3 + i) * d, rows: d });
    }
    let layout = AuxLayout { d, n, k, variant: AuxVariant::Pca, blocks };
    let mut p = Mat::zeros((layout.rows(), n));
    for r in 0..d {
        p[[d + r, r]] = 1.0;
    }
    for c in 0..k {
        let u = sample_unit_sphere(d, rng);
        for r in 0..d {
            p[[2 * d + r, c]] = u[r];
        }
    }
    Ok((p, layout))
}

/// Start vectors stored in the sphere block of P.
pub fn sphere_inits(p: &Mat, layout: &AuxLayout) -> Vec<Vector> {
    let b = layout.find(BlockKind::Sphere, 0);
    (0..layout.k).map(|c| p.slice(ndarray::s![b.offset..b.offset + b.rows, c]).to_owned()).collect()
}

/// As [`build_aux_pca`], redrawing each start vector until its overlap with
/// the matching eigenvector of X X^T is at least `delta`.
pub fn build_aux_pca_with_overlap<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    k: usize,
    delta: f64,
    rng: &mut R,
) -> Result<(Mat, AuxLayout), ConstructionError> {
    const MAX_DRAWS: usize = 10_000;
    let (d, n) = x.dim();
    let (mut p, layout) = build_aux_pca(d, n, k, rng)?;
    let a = crate::linalg::symmetrize(x);
    let oracle = crate::linalg::eigh_oracle(a.view(), k)?;
    let b = layout.find(BlockKind::Sphere, 0);
    for c in 0..k {
        let target = oracle.vector(c);
        let mut draws = 0;
        loop {
            let u = p.slice(ndarray::s![b.offset..b.offset + b.rows, c]).to_owned();
            if u.dot(&target).abs() >= delta {
                break;
            }
            draws += 1;
            if draws > MAX_DRAWS {
                return Err(ConstructionError::ConfigError(format!("no start vector with overlap >= {delta} after {MAX_DRAWS} draws")));
            }
            let u = sample_unit_sphere(d, rng);
            p.slice_mut(ndarray::s![b.offset..b.offset + b.rows, c]).assign(&u);
        }
    }
    Ok((p, layout))
}

/// Build P for the GMM network: a leading d-row block whose first row is all
/// ones (the only source of a constant in columns beyond N1), N1 indicator
/// rows, [I_d | 0], one unit vector, and one zero placeholder.
pub fn build_aux_gmm<R: Rng + ?Sized>(d: usize, n: usize, n1: usize, rng: &mut R) -> Result<(Mat, AuxLayout), ConstructionError> {
    if n1 < d + 2 || n1 >= n {
        return Err(ConstructionError::BadSplit { n1, lo: d + 2, n });
    }
    let blocks = vec![
        Block { kind: BlockKind::Placeholder, offset: 0, rows: d },
        Block { kind: BlockKind::Indicator, offset: d, rows: n1 },
        Block { kind: BlockKind::Identity, offset: d + n1, rows: d },
        Block { kind: BlockKind::Sphere, offset: 2 * d + n1, rows: d },
        Block { kind: BlockKind::Placeholder, offset: 3 * d + n1, rows: d },
    ];
    let layout = AuxLayout { d, n, k: 1, variant: AuxVariant::Gmm { n1 }, blocks };
    let mut p = Mat::zeros((layout.rows(), n));
    for c in 0..n {
        p[[0, c]] = 1.0;
    }
    for j in 0..n1 {
        p[[d + j, j]] = 1.0;
    }
    for r in 0..d {
        p[[d + n1 + r, r]] = 1.0;
    }
    let u = sample_unit_sphere(d, rng);
    for r in 0..d {
        p[[2 * d + n1 + r, 0]] = u[r];
    }
    Ok((p, layout))
}

/// Piecewise-linear interpolant of a scalar function on increasing knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn interpolate(knots: Vec<f64>, f: impl Fn(f64) -> f64) -> Self {
        let values = knots.iter().map(|&t| f(t)).collect();
        PiecewiseLinear { knots, values }
    }

    fn slopes(&self) -> Vec<f64> {
        self.knots
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| (v[1] - v[0]) / (t[1] - t[0]))
            .collect()
    }

    /// `c0 + sum_i c_i relu(x - t_i)`, flat outside the knot range.
    pub fn right_facing(&self) -> (f64, Vec<(f64, f64)>) {
        let s = self.slopes();
        let mut terms = Vec::with_capacity(s.len() + 1);
        let mut prev = 0.0;
        for (i, &m) in s.iter().enumerate() {
            terms.push((self.knots[i], m - prev));
            prev = m;
        }
        terms.push((*self.knots.last().unwrap(), -prev));
        (self.values[0], terms)
    }

    /// `c0 + sum_i c_i relu(t_i - x)`, flat to the right of the last knot.
    /// For convex decreasing or concave increasing functions every c_i has
    /// the same sign, so the sum has no cancellation.
    pub fn left_facing(&self) -> (f64, Vec<(f64, f64)>) {
        let s = self.slopes();
        let n = s.len();
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { s[i + 1] } else { 0.0 };
            terms.push((self.knots[i + 1], next - s[i]));
        }
        (*self.values.last().unwrap(), terms)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = &self.knots;
        if x <= t[0] {
            return self.values[0];
        }
        if x >= *t.last().unwrap() {
            return *self.values.last().unwrap();
        }
        let i = t.partition_point(|&k| k <= x) - 1;
        let w = (x - t[i]) / (t[i + 1] - t[i]);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// Sup of |g - f| (or |g - f| / |f| when `relative`) on a dense grid
    /// with `per_segment` points inside every knot interval.
    pub fn sup_error(&self, f: impl Fn(f64) -> f64, relative: bool, per_segment: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.knots.windows(2) {
            for s in 0..=per_segment {
                let x = w[0] + (w[1] - w[0]) * s as f64 / per_segment as f64;
                let fx = f(x);
                let e = (self.eval(x) - fx).abs();
                worst = worst.max(if relative { e / fx.abs() } else { e });
            }
        }
        worst
    }
}

/// Geometrically spaced knots on [a, b].
pub fn geometric_knots(a: f64, b: f64, count: usize) -> Vec<f64> {
    let r = (b / a).ln();
    let mut k: Vec<f64> = (0..count).map(|i| a * (r * i as f64 / (count - 1) as f64).exp()).collect();
    k[0] = a;
    k[count - 1] = b;
    k
}

pub fn uniform_knots(a: f64, b: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| a + (b - a) * i as f64 / (count - 1) as f64).collect()
}

/// Interpolation table for 1/sqrt(x) on [a, b].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluTable {
    pub interval: [f64; 2],
    /// `g(x) = c0 + sum_i coeffs[i] * relu(x - knots[i])`
    pub c0: f64,
    pub knots: Vec<f64>,
    pub coeffs: Vec<f64>,
    /// Dense-grid sup of |g - 1/sqrt(x)| on [a, b].
    pub sup_error: f64,
    /// Dense-grid sup of |g - 1/sqrt(x)| * sqrt(x) on [a, b].
    pub sup_rel_error: f64,
    pub interp: PiecewiseLinear,
}

fn recip_sqrt(x: f64) -> f64 {
    1.0 / x.sqrt()
}

/// ReLU-ridge interpolant of 1/sqrt(x) with `knots` geometrically spaced
/// points on [a, b].
pub fn relu_recip_sqrt(interval: [f64; 2], knots: usize) -> Result<ReluTable, ConstructionError> {
    let [a, b] = interval;
    if !(a > 0.0 && b > a && a.is_finite() && b.is_finite()) {
        return Err(ConstructionError::BadInterval { a, b });
    }
    if knots < 2 {
        return Err(ConstructionError::ConfigError("at least two knots are needed".into()));
    }
    let interp = PiecewiseLinear::interpolate(geometric_knots(a, b, knots), recip_sqrt);
    let (c0, terms) = interp.right_facing();
    let per = (200_000 / knots).clamp(8, 256);
    Ok(ReluTable {
        interval,
        c0,
        knots: terms.iter().map(|t| t.0).collect(),
        coeffs: terms.iter().map(|t| t.1).collect(),
        sup_error: interp.sup_error(recip_sqrt, false, per),
        sup_rel_error: interp.sup_error(recip_sqrt, true, per),
        interp,
    })
}

/// Fewest knots (from `make`) whose dense-grid sup error is at most `eps`.
fn calibrate(eps: f64, make: impl Fn(usize) -> (PiecewiseLinear, f64)) -> Result<PiecewiseLinear, ConstructionError> {
    let mut hi = 2;
    loop {
        if hi > MAX_KNOTS {
            return Err(ConstructionError::ConfigError(format!(
                "eps = {eps} needs more than {MAX_KNOTS} knots"
            )));
        }
        if make(hi).1 <= eps {
            break;
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if make(mid).1 <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(make(hi).0)
}

/// Relative-accuracy interpolant of `f` on [a, b] with geometric knots.
fn calibrated_geometric(a: f64, b: f64, eps: f64, f: fn(f64) -> f64) -> Result<PiecewiseLinear, ConstructionError> {
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(ConstructionError::BadInterval { a, b });
    }
    calibrate(eps, |n| {
        let p = PiecewiseLinear::interpolate(geometric_knots(a, b, n), f);
        let e = p.sup_error(f, true, 16);
        (p, e)
    })
}

/// Odd interpolant of tanh on [0, TANH_RANGE], values capped at the
/// saturation level, with sup error at most `eps`.
pub fn tanh_table(eps: f64) -> Result<PiecewiseLinear, ConstructionError> {
    let capped = |x: f64| x.tanh().min(TANH_SATURATION);
    calibrate(eps, |n| {
        let p = PiecewiseLinear::interpolate(uniform_knots(0.0, TANH_RANGE, n), capped);
        let e = p.sup_error(f64::tanh, false, 16);
        (p, e)
    })
}

/// Parameters of the constructed networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructionConfig {
    pub tau: usize,
    /// Relative accuracy of every scalar map (normalization, square root, tanh).
    pub eps: f64,
    /// Iteration accuracy budget; reported, not used by the builders.
    pub eps0: f64,
    /// Interval containing the top-k eigenvalues of the matrix being iterated
    /// (X X^T for PCA, the split covariance for GMM).
    pub lambda_range: [f64; 2],
    pub beta: f64,
    /// Lower bound on the overlap between each start vector and its target.
    pub delta: f64,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        ConstructionConfig { tau: 8, eps: 1e-2, eps0: 1e-2, lambda_range: [0.1, 100.0], beta: 5.0, delta: 0.2 }
    }
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<(), ConstructionError> {
        let bad = |m: &str| Err(ConstructionError::ConfigError(m.to_string()));
        let [lo, hi] = self.lambda_range;
        if self.tau == 0 {
            return bad("tau must be at least 1");
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("lambda_range must satisfy 0 < lo < hi");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.eps0 > 0.0 && self.eps0 < 1.0) {
            return bad("eps and eps0 must lie in (0, 1)");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must lie in (0, 1]");
        }
        Ok(())
    }

    fn lambda_ref(&self) -> f64 {
        (self.lambda_range[0] * self.lambda_range[1]).sqrt()
    }
}

/// One attention head assembled from bilinear score terms.
struct HeadBuilder {
    head: AttnHead,
    terms: usize,
}

impl HeadBuilder {
    fn new(dim: usize) -> Self {
        HeadBuilder { head: AttnHead::zeros(dim), terms: 0 }
    }

    /// Add `(sum q) * (sum k)` to the score, where both sums are linear
    /// functionals given as (row, coefficient) lists on source and target.
    fn term(&mut self, q: &[(usize, f64)], k: &[(usize, f64)]) {
        let t = self.terms;
        assert!(t < self.head.q.nrows(), "score rank exceeds embedding dimension");
        for &(r, c) in q {
            self.head.q[[t, r]] += c;
        }
        for &(r, c) in k {
            self.head.k[[t, r]] += c;
        }
        self.terms += 1;
    }

    /// Add `sum_r src_r(j) * dst_r(i)` for two d-row slots.
    fn inner(&mut self, src: usize, dst: usize, d: usize, sign: f64) {
        for r in 0..d {
            self.term(&[(src + r, sign)], &[(dst + r, 1.0)]);
        }
    }

    /// Write `coef * source rows` into target rows.
    fn value(&mut self, from: usize, to: usize, rows: usize, coef: f64) {
        for r in 0..rows {
            self.head.v[[to + r, from + r]] += coef;
        }
    }

    fn value_row(&mut self, from: usize, to: usize, coef: f64) {
        self.head.v[[to, from]] += coef;
    }

    fn build(self) -> AttnHead {
        self.head
    }
}

/// Column selectors built from the identity block.
#[derive(Clone, Copy)]
struct Ids {
    /// First row of the identity block.
    id: usize,
    d: usize,
}

impl Ids {
    /// Indicator of column `l`.
    fn col(&self, l: usize) -> Vec<(usize, f64)> {
        vec![(self.id + l, 1.0)]
    }
    /// Indicator of columns 0..d.
    fn any(&self, c: f64) -> Vec<(usize, f64)> {
        (0..self.d).map(|r| (self.id + r, c)).collect()
    }
    /// Indicator of columns 0..d other than `l`.
    fn others(&self, l: usize, c: f64) -> Vec<(usize, f64)> {
        (0..self.d).filter(|&r| r != l).map(|r| (self.id + r, c)).collect()
    }
}

/// Layers being assembled for one network.
struct Program {
    dim: usize,
    n: usize,
    layers: Vec<(AttnLayer, FcLayer)>,
}

impl Program {
    fn new(dim: usize, n: usize) -> Self {
        Program { dim, n, layers: Vec::new() }
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    fn push(&mut self, heads: Vec<HeadBuilder>, fc: Option<FcLayer>) {
        let heads: Vec<AttnHead> = if heads.is_empty() {
            vec![AttnHead::zeros(self.dim)]
        } else {
            heads.into_iter().map(HeadBuilder::build).collect()
        };
        let fc = fc.unwrap_or_else(|| FcLayer::identity(self.dim));
        self.layers.push((AttnLayer { heads, activation: Activation::Relu }, fc));
    }

    fn pad_to(&mut self, total: usize) {
        while self.layers.len() < total {
            self.push(Vec::new(), None);
        }
    }

    /// dst(i) += scale * M cur(i), with M stored column-wise in `mat`.
    /// `cur_gate` switches off every column other than `only` when the
    /// source slot holds data in other columns.
    fn matvec_heads(&self, ids: Ids, mat: usize, cur: usize, dst: usize, scale: f64, only: Option<usize>) -> Vec<HeadBuilder> {
        let d = ids.d;
        [1.0, -1.0]
            .into_iter()
            .map(|sign| {
                let mut h = HeadBuilder::new(self.dim);
                h.value(mat, dst, d, sign * self.nf() * scale);
                for r in 0..d {
                    h.term(&[(ids.id + r, sign)], &[(cur + r, 1.0)]);
                }
                if let Some(l) = only {
                    h.term(&ids.any(-GATE), &ids.others(l, 1.0));
                }
                h
            })
            .collect()
    }

    /// Head adding `coef * src(l)` to `dst(l)` only in column `l`.
    fn self_head(&self, ids: Ids, l: usize, src: usize, dst: usize, rows: usize, coef: f64) -> HeadBuilder {
        let mut h = HeadBuilder::new(self.dim);
        h.value(src, dst, rows, self.nf() * coef);
        h.term(&ids.col(l), &ids.col(l));
        h
    }

    /// Heads computing `dst(l) += coef * src(l) * g(||q_slot(l)||^2)` for a
    /// left-facing table `g`. The quadratic form is gated off outside column
    /// `l`: erasure leaves roundoff there that the steep table would amplify.
    fn scalar_map_heads(
        &self,
        ids: Ids,
        l: usize,
        q_slot: usize,
        src: usize,
        dst: usize,
        coef: f64,
        table: &PiecewiseLinear,
    ) -> Vec<HeadBuilder> {
        let d = ids.d;
        let (c0, terms) = table.left_facing();
        // The gate must dominate every knot, or the gated columns leak through.
        let gate2 = (GATE * GATE).max(GATE * terms.iter().fold(0.0f64, |m, &(t, _)| m.max(t.abs())));
        let mut heads = Vec::with_capacity(terms.len() + 1);
        for (t, c) in terms {
            if c == 0.0 {
                continue;
            }
            let mut h = HeadBuilder::new(self.dim);
            h.value(src, dst, d, self.nf() * coef * c);
            h.term(&ids.col(l), &[(ids.id + l, t)]);
            h.inner(q_slot, q_slot, d, -1.0);
            h.term(&ids.any(-gate2), &ids.others(l, 1.0));
            h.term(&ids.others(l, -gate2), &ids.any(1.0));
            heads.push(h);
        }
        heads.push(self.self_head(ids, l, src, dst, d, coef * c0));
        heads
    }
}

/// How the PCA network spends its layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcaSchedule {
    /// Stored power used by the iteration steps (1 = plain A).
    pub power: usize,
    /// Matrix-vector steps per eigenvector.
    pub matvec_steps: usize,
    /// Normalization stages per eigenvector.
    pub normalizations: Vec<usize>,
    /// Zero-weight layers appended to reach the target count.
    pub padding: usize,
    pub layers: usize,
}

fn pca_layer_target(tau: usize, k: usize) -> usize {
    2 * tau + 4 * k + 1
}

/// Pick the smallest stored power that fits in 2 tau + 4k + 1 layers and
/// spend the remaining layers on extra normalizations.
pub fn pca_schedule(tau: usize, k: usize) -> Result<PcaSchedule, ConstructionError> {
    let target = pca_layer_target(tau, k);
    let power_slot = k >= 3;
    for p in 1..=tau {
        if p > 1 && !power_slot {
            break;
        }
        let steps = tau / p + tau % p;
        let build = p - 1;
        let minimal = 1 + k * (build + steps + 1) + 3 * (k - 1);
        if minimal > target {
            continue;
        }
        let mut extra = target - minimal;
        let mut norms = vec![1usize; k];
        let mut progress = true;
        while extra > 0 && progress {
            progress = false;
            for nl in norms.iter_mut() {
                if extra > 0 && *nl < steps {
                    *nl += 1;
                    extra -= 1;
                    progress = true;
                }
            }
        }
        return Ok(PcaSchedule { power: p, matvec_steps: steps, normalizations: norms, padding: extra, layers: target });
    }
    Err(ConstructionError::ConfigError(format!(
        "tau = {tau}, k = {k}: the power method does not fit in {target} layers"
    )))
}

/// Interval for ||(M / lambda_ref)^s v||^2 after `s` unnormalized powers of A.
fn iterate_range(cfg: &ConstructionConfig, s: usize) -> (f64, f64) {
    let [lo, hi] = cfg.lambda_range;
    let r = cfg.lambda_ref();
    let e = 2.0 * s as f64;
    let slack = (1.0 + 4.0 * cfg.eps).powi(2) * RANGE_SLACK;
    let qlo = cfg.delta * cfg.delta * (lo / r).powf(e) / slack;
    let qhi = (hi / r).powf(e) * slack;
    (qlo, qhi)
}

fn recip_sqrt_table(cfg: &ConstructionConfig, q: (f64, f64)) -> Result<PiecewiseLinear, ConstructionError> {
    calibrated_geometric(q.0, q.1, cfg.eps, recip_sqrt)
}

/// Transformer whose output columns approximate the power method's
/// eigenvectors (recovery order, raw signs) for inputs [X; P].
pub fn build_pca_network(d: usize, n: usize, k: usize, cfg: &ConstructionConfig, layout: &AuxLayout) -> Result<TransformerParams, ConstructionError> {
    cfg.validate()?;
    if layout.variant != AuxVariant::Pca || layout.d != d || layout.n != n || layout.k != k {
        return Err(ConstructionError::LayoutMismatch(format!("{layout:?}")));
    }
    let sched = pca_schedule(cfg.tau, k)?;
    let dim = layout.embed_dim();
    let at = |b: Block| d + b.offset;
    let a_slot = at(layout.find(BlockKind::Placeholder, 0));
    let ids = Ids { id: at(layout.find(BlockKind::Identity, 0)), d };
    let s_slot = at(layout.find(BlockKind::Sphere, 0));
    let t_slot = at(layout.find(BlockKind::Placeholder, 1));
    let w_slot = if k >= 2 { at(layout.find(BlockKind::Placeholder, 2)) } else { t_slot };
    let p_slot = if sched.power > 1 { Some(at(layout.find(BlockKind::Placeholder, 3))) } else { None };
    let lref = cfg.lambda_ref();
    let mut prog = Program::new(dim, n);
    let nf = n as f64;

    // Gram matrix into the first placeholder, column j holding (X X^T) e_j.
    let sym: Vec<HeadBuilder> = [1.0, -1.0]
        .into_iter()
        .map(|sign| {
            let mut h = HeadBuilder::new(dim);
            h.value(0, a_slot, d, sign * nf);
            for r in 0..d {
                h.term(&[(r, sign)], &[(ids.id + r, 1.0)]);
            }
            h
        })
        .collect();
    prog.push(sym, None);

    let power = sched.power;
    for l in 0..k {
        // Rebuild the stored power from the (deflated) matrix.
        if let Some(ps) = p_slot {
            for step in 0..power - 1 {
                let src = if step == 0 { a_slot } else { ps };
                let mut heads = prog.matvec_heads(ids, a_slot, src, ps, 1.0 / lref, None);
                let mut erase = HeadBuilder::new(dim);
                erase.value(ps, ps, d, -nf);
                erase.inner(ids.id, ids.id, d, 1.0);
                heads.push(erase);
                prog.push(heads, None);
            }
        }
        // Matrix-vector steps: stored powers first, then plain A for the remainder.
        let mut mats: Vec<(usize, usize)> = Vec::new();
        for _ in 0..cfg.tau / power {
            mats.push((p_slot.unwrap_or(a_slot), power));
        }
        for _ in 0..cfg.tau % power {
            mats.push((a_slot, 1));
        }
        let steps = mats.len();
        let nn = sched.normalizations[l];
        let norm_after: Vec<usize> = (1..=nn).map(|i| (i * steps).div_ceil(nn)).collect();
        let mut cur = s_slot;
        let mut since = 0usize;
        for (idx, &(mat, e)) in mats.iter().enumerate() {
            let dst = if cur == s_slot { t_slot } else { s_slot };
            let gate = (cur == s_slot).then_some(l);
            let mut heads = prog.matvec_heads(ids, mat, cur, dst, 1.0 / lref, gate);
            let mut erase = HeadBuilder::new(dim);
            erase.value(cur, cur, d, -nf);
            erase.term(&ids.col(l), &ids.col(l));
            heads.push(erase);
            prog.push(heads, None);
            cur = dst;
            since += e;
            if norm_after.contains(&(idx + 1)) {
                let table = recip_sqrt_table(cfg, iterate_range(cfg, since))?;
                let mut heads = prog.scalar_map_heads(ids, l, cur, cur, s_slot, 1.0, &table);
                heads.push(prog.self_head(ids, l, cur, cur, d, -1.0));
                prog.push(heads, None);
                cur = s_slot;
                since = 0;
            }
        }
        debug_assert_eq!(cur, s_slot);
        if l + 1 == k {
            break;
        }
        // lambda_hat = ||A_l v||: W = A v / lambda_ref.
        prog.push(prog.matvec_heads(ids, a_slot, s_slot, w_slot, 1.0 / lref, Some(l)), None);
        // Z = v * lambda_ref * ||W||, written over W.
        let [lo, hi] = cfg.lambda_range;
        let slack = (1.0 + 4.0 * cfg.eps).powi(2) * RANGE_SLACK;
        let sqrt_table = calibrated_geometric((lo / lref).powi(2) / slack, (hi / lref).powi(2) * slack, cfg.eps, f64::sqrt)?;
        let mut heads = prog.scalar_map_heads(ids, l, w_slot, s_slot, w_slot, lref, &sqrt_table);
        heads.push(prog.self_head(ids, l, w_slot, w_slot, d, -1.0));
        prog.push(heads, None);
        // A <- A - Z v^T, then clear Z.
        let mut heads: Vec<HeadBuilder> = [1.0, -1.0]
            .into_iter()
            .map(|sign| {
                let mut h = HeadBuilder::new(dim);
                h.value(w_slot, a_slot, d, -sign * nf);
                h.inner(s_slot, ids.id, d, sign);
                h
            })
            .collect();
        heads.push(prog.self_head(ids, l, w_slot, w_slot, d, -1.0));
        prog.push(heads, None);
    }
    prog.pad_to(sched.layers);
    debug_assert_eq!(prog.layers.len(), sched.layers);

    let mut w0 = Mat::zeros((d, dim));
    for r in 0..d {
        w0[[r, s_slot + r]] = 1.0;
    }
    let mut w1 = Mat::zeros((n, k));
    for l in 0..k {
        w1[[l, l]] = 1.0;
    }
    Ok(TransformerParams { layers: prog.layers, w0_out: w0, w1_out: w1 })
}

fn gmm_layer_target(tau: usize) -> usize {
    2 * tau + 7
}

/// FC layer applying a columnwise linear map `h += sum coef * h[from]` into
/// row `to`, written as relu(x) - relu(-x) pairs.
fn linear_fc(dim: usize, moves: &[(usize, usize, f64)]) -> FcLayer {
    let mut w1 = Mat::zeros((2 * moves.len().max(1), dim));
    let mut w2 = Mat::zeros((dim, 2 * moves.len().max(1)));
    for (u, &(from, to, c)) in moves.iter().enumerate() {
        w1[[2 * u, from]] = 1.0;
        w1[[2 * u + 1, from]] = -1.0;
        w2[[to, 2 * u]] += c;
        w2[[to, 2 * u + 1]] -= c;
    }
    FcLayer { w1, w2 }
}

/// Transformer whose 1 x N output is tanh(beta * v^T (X_i - mean)) with v
/// the power-method direction of the split covariance.
pub fn build_gmm_network(d: usize, n: usize, n1: usize, cfg: &ConstructionConfig, layout: &AuxLayout) -> Result<TransformerParams, ConstructionError> {
    cfg.validate()?;
    if layout.variant != (AuxVariant::Gmm { n1 }) || layout.d != d || layout.n != n {
        return Err(ConstructionError::LayoutMismatch(format!("{layout:?}")));
    }
    let dim = layout.embed_dim();
    let at = |b: Block| d + b.offset;
    let lead = at(layout.find(BlockKind::Placeholder, 0));
    let one = lead;
    let ind = at(layout.find(BlockKind::Indicator, 0));
    let ids = Ids { id: at(layout.find(BlockKind::Identity, 0)), d };
    let s_slot = at(layout.find(BlockKind::Sphere, 0));
    let a_slot = at(layout.find(BlockKind::Placeholder, 1));
    // The indicator rows are free once the covariance is formed.
    let t_slot = ind;
    let p_row = ind + d;
    let y_row = ind + d + 1;
    let nf = n as f64;
    let n1f = n1 as f64;
    let lref = cfg.lambda_ref();
    let ind_sum: Vec<(usize, f64)> = (0..n1).map(|r| (ind + r, 1.0)).collect();
    let mut prog = Program::new(dim, n);

    // Mean of the first N1 columns into every column, then centre X.
    let mut mean = HeadBuilder::new(dim);
    mean.value(0, a_slot, d, nf / n1f);
    mean.term(&ind_sum, &[(one, 1.0)]);
    let moves: Vec<(usize, usize, f64)> = (0..d).flat_map(|r| [(a_slot + r, r, -1.0), (a_slot + r, a_slot + r, -1.0)]).collect();
    prog.push(vec![mean], Some(linear_fc(dim, &moves)));

    // Split covariance into the placeholder; clear the indicator rows.
    let outside: Vec<(usize, f64)> = std::iter::once((one, -GATE)).chain(ind_sum.iter().map(|&(r, _)| (r, GATE))).collect();
    let cov: Vec<HeadBuilder> = [1.0, -1.0]
        .into_iter()
        .map(|sign| {
            let mut h = HeadBuilder::new(dim);
            h.value(0, a_slot, d, sign * nf / n1f);
            for r in 0..d {
                h.term(&[(r, sign)], &[(ids.id + r, 1.0)]);
            }
            h.term(&outside, &[(one, 1.0)]);
            h
        })
        .collect();
    let clear: Vec<(usize, usize, f64)> = (0..n1).map(|r| (ind + r, ind + r, -1.0)).collect();
    prog.push(cov, Some(linear_fc(dim, &clear)));

    // Power iterations on the stored covariance, normalizing every step.
    for _ in 0..cfg.tau {
        let mut heads = prog.matvec_heads(ids, a_slot, s_slot, t_slot, 1.0 / lref, None);
        heads.push(prog.self_head(ids, 0, s_slot, s_slot, d, -1.0));
        prog.push(heads, None);
        let table = recip_sqrt_table(cfg, iterate_range(cfg, 1))?;
        let mut heads = prog.scalar_map_heads(ids, 0, t_slot, t_slot, s_slot, 1.0, &table);
        heads.push(prog.self_head(ids, 0, t_slot, t_slot, d, -1.0));
        prog.push(heads, None);
    }

    // Projection of the centred data on v, then the tanh readout.
    let proj: Vec<HeadBuilder> = [1.0, -1.0]
        .into_iter()
        .map(|sign| {
            let mut h = HeadBuilder::new(dim);
            h.value_row(ids.id, p_row, sign * nf);
            h.inner(s_slot, 0, d, sign);
            h
        })
        .collect();
    let table = tanh_table(cfg.eps)?;
    let (_, terms) = table.right_facing();
    let units = 2 * terms.len();
    let mut w1 = Mat::zeros((units, dim));
    let mut w2 = Mat::zeros((dim, units));
    for (u, &(t, c)) in terms.iter().enumerate() {
        w1[[2 * u, p_row]] = cfg.beta;
        w1[[2 * u, one]] = -t;
        w1[[2 * u + 1, p_row]] = -cfg.beta;
        w1[[2 * u + 1, one]] = -t;
        w2[[y_row, 2 * u]] = c;
        w2[[y_row, 2 * u + 1]] = -c;
    }
    prog.push(proj, Some(FcLayer { w1, w2 }));
    prog.pad_to(gmm_layer_target(cfg.tau));

    let mut w0 = Mat::zeros((1, dim));
    w0[[0, y_row]] = 1.0;
    Ok(TransformerParams { layers: prog.layers, w0_out: w0, w1_out: Mat::eye(n) })
}

/// Measurements of a constructed PCA network against a reference result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    /// |cos| between each output column and the reference vector.
    pub cos_sim: Vec<f64>,
    /// min over the sign s of the l2 distance between the output column and s times the reference.
    pub vec_error: Vec<f64>,
    pub max_vec_error: f64,
    /// Relative error of the Rayleigh quotient of each output column on X X^T.
    pub eigval_rel_err: Vec<f64>,
    pub layer_count: usize,
    pub max_heads: usize,
    pub total_heads: usize,
}

pub fn verify_construction(params: &TransformerParams, ep: &Episode, reference: &SpectralResult) -> Result<ConstructionReport, ConstructionError> {
    let out = crate::transformer::tf_forward(params, ep)?;
    let x = ep.x();
    let a = x.dot(&x.t());
    let k = reference.k().min(out.ncols());
    let mut cos_sim = Vec::with_capacity(k);
    let mut vec_error = Vec::with_capacity(k);
    let mut eigval_rel_err = Vec::with_capacity(k);
    for i in 0..k {
        let v = out.column(i);
        let r = reference.vector(i);
        let nv = v.dot(&v).sqrt();
        cos_sim.push(if nv > 0.0 { (v.dot(&r) / (nv * r.dot(&r).sqrt())).abs() } else { 0.0 });
        // Sign-invariant: a fixed sign convention is discontinuous near ties.
        let minus = &v - &r;
        let plus = &v + &r;
        vec_error.push(minus.dot(&minus).min(plus.dot(&plus)).sqrt());
        let rq = if nv > 0.0 { v.dot(&a.dot(&v)) / (nv * nv) } else { 0.0 };
        let lam = reference.eigvals[i];
        eigval_rel_err.push((rq - lam).abs() / lam.abs().max(1e-12));
    }
    Ok(ConstructionReport {
        max_vec_error: vec_error.iter().copied().fold(0.0, f64::max),
        cos_sim,
        vec_error,
        eigval_rel_err,
        layer_count: params.num_layers(),
        max_heads: params.max_heads(),
        total_heads: params.total_heads(),
    })
}

/// Iteration accuracy implied by tau through tau = ln(1 / (eps0 delta)) / eps0.
pub fn implied_eps0(tau: usize, delta: f64) -> f64 {
    let f = |e: f64| (1.0 / (e * delta)).ln() / e - tau as f64;
    let (mut lo, mut hi) = (1e-12_f64, 1.0_f64);
    if f(hi) > 0.0 {
        return 1.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}
