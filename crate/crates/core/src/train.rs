//! Reverse-mode gradients, finite-difference checking and the SGD loop.

use crate::construction::{build_aux_gmm, build_aux_pca, ConstructionError};
use crate::datasets::{gen_gmm, gen_synthetic_pca};
use crate::gmm::choose_n1;
use crate::linalg::{eigh_oracle, symmetrize, Mat};
use crate::transformer::{
    relu, softmax_columns, Activation, Arch, Episode, TransformerError, TransformerParams,
};
use ndarray::{s, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const COS_EPS: f64 = 1e-8;
const REL_EPS: f64 = 1e-8;

/// Gradients share the parameter layout.
pub type Gradients = TransformerParams;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize, history: Vec<f64> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
}

struct HeadCache {
    qh: Mat,
    kh: Mat,
    vh: Mat,
    scores: Mat,
    act: Mat,
}

struct LayerCache {
    input: Mat,
    heads: Vec<HeadCache>,
    mid: Mat,
    pre: Mat,
}

/// Forward pass keeping what the backward pass needs.
struct Trace {
    layers: Vec<LayerCache>,
    hidden: Mat,
    output: Mat,
}

fn forward_trace(params: &TransformerParams, h: &Mat) -> Result<Trace, TrainError> {
    let n = h.ncols() as f64;
    let mut cur = h.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (attn, fc) in &params.layers {
        let mut acc = Mat::zeros(cur.dim());
        let mut heads = Vec::with_capacity(attn.heads.len());
        for head in &attn.heads {
            let qh = head.q.dot(&cur);
            let kh = head.k.dot(&cur);
            let vh = head.v.dot(&cur);
            let scores = qh.t().dot(&kh);
            let act = match attn.activation {
                Activation::Relu => scores.mapv(relu),
                Activation::Softmax => softmax_columns(&scores),
            };
            acc += &vh.dot(&act);
            heads.push(HeadCache { qh, kh, vh, scores, act });
        }
        let c = match attn.activation {
            Activation::Relu => 1.0 / n,
            Activation::Softmax => 1.0,
        };
        let mid = &cur + &(acc * c);
        let pre = fc.w1.dot(&mid);
        let out = &mid + &fc.w2.dot(&pre.mapv(relu));
        layers.push(LayerCache { input: cur, heads, mid, pre });
        cur = out;
    }
    let output = params.w0_out.dot(&cur).dot(&params.w1_out);
    Ok(Trace { layers, hidden: cur, output })
}

/// Output of the network and its gradients for an upstream gradient `gy`.
pub fn forward_backward(params: &TransformerParams, ep: &Episode, gy: &Mat) -> Result<(Mat, Gradients), TrainError> {
    let h = &ep.h;
    if params.w0_out.ncols() != h.nrows() || params.w1_out.nrows() != h.ncols() {
        return Err(TrainError::ShapeMismatch("adapters do not match the episode".into()));
    }
    let tr = forward_trace(params, h)?;
    if gy.dim() != tr.output.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "upstream gradient {:?}, output {:?}",
            gy.dim(),
            tr.output.dim()
        )));
    }
    let n = h.ncols() as f64;
    let mut grads = params.clone();
    grads.scale(0.0);
    let hw1 = tr.hidden.dot(&params.w1_out);
    grads.w0_out = gy.dot(&hw1.t());
    grads.w1_out = params.w0_out.dot(&tr.hidden).t().dot(gy);
    let mut g = params.w0_out.t().dot(gy).dot(&params.w1_out.t());
    for (li, cache) in tr.layers.iter().enumerate().rev() {
        let (attn, fc) = &params.layers[li];
        let (gattn, gfc) = &mut grads.layers[li];
        let r = cache.pre.mapv(relu);
        gfc.w2 = g.dot(&r.t());
        let mut dz = fc.w2.t().dot(&g);
        dz.zip_mut_with(&cache.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        gfc.w1 = dz.dot(&cache.mid.t());
        g = &g + &fc.w1.t().dot(&dz);

        let c = match attn.activation {
            Activation::Relu => 1.0 / n,
            Activation::Softmax => 1.0,
        };
        let mut gin = g.clone();
        for (m, hc) in cache.heads.iter().enumerate() {
            let head = &attn.heads[m];
            let dvh = g.dot(&hc.act.t()) * c;
            let da = hc.vh.t().dot(&g) * c;
            let ds = match attn.activation {
                Activation::Relu => {
                    let mut ds = da;
                    ds.zip_mut_with(&hc.scores, |d, &s| {
                        if s <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    ds
                }
                Activation::Softmax => {
                    let mut ds = Mat::zeros(da.dim());
                    for i in 0..da.ncols() {
                        let a = hc.act.column(i);
                        let gcol = da.column(i);
                        let dot = a.dot(&gcol);
                        for j in 0..da.nrows() {
                            ds[[j, i]] = a[j] * (gcol[j] - dot);
                        }
                    }
                    ds
                }
            };
            let dqh = hc.kh.dot(&ds.t());
            let dkh = hc.qh.dot(&ds);
            let gh = &mut gattn.heads[m];
            gh.v = dvh.dot(&cache.input.t());
            gh.q = dqh.dot(&cache.input.t());
            gh.k = dkh.dot(&cache.input.t());
            gin = gin + head.v.t().dot(&dvh) + head.q.t().dot(&dqh) + head.k.t().dot(&dkh);
        }
        g = gin;
    }
    Ok((tr.output, grads))
}

/// Gradients of `<gy, tf_forward(params, ep)>` with respect to every parameter.
pub fn backward(params: &TransformerParams, ep: &Episode, gy: &Mat) -> Result<Gradients, TrainError> {
    forward_backward(params, ep, gy).map(|(_, g)| g)
}

/// Smallest |pre-activation| over every ReLU in the forward pass.
pub fn min_relu_margin(params: &TransformerParams, ep: &Episode) -> Result<f64, TrainError> {
    let tr = forward_trace(params, &ep.h)?;
    let mut m = f64::INFINITY;
    for (li, cache) in tr.layers.iter().enumerate() {
        if params.layers[li].0.activation == Activation::Relu {
            for hc in &cache.heads {
                m = hc.scores.iter().fold(m, |acc, s| acc.min(s.abs()));
            }
        }
        m = cache.pre.iter().fold(m, |acc, p| acc.min(p.abs()));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VecLoss {
    Cos,
    Eigenspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Task {
    EigVec { k: usize, loss: VecLoss },
    EigVal { k: usize },
    Gmm { beta: f64 },
}

impl Task {
    /// Output adapter shapes (d1, d2).
    pub fn output_shape(&self, d: usize, n: usize) -> (usize, usize) {
        match *self {
            Task::EigVec { k, .. } => (d, k),
            Task::EigVal { k } => (1, k),
            Task::Gmm { .. } => (1, n),
        }
    }
}

/// Supervision for one episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Vectors(Mat),
    Values(Vec<f64>),
    Labels(Vec<u8>),
}

/// Cosine loss with each target column flipped towards the prediction.
pub fn cos_loss_aligned(y: &Mat, v: &Mat) -> (f64, Mat) {
    let k = y.ncols() as f64;
    let mut loss = 0.0;
    let mut g = Mat::zeros(y.dim());
    for i in 0..y.ncols() {
        let yc = y.column(i);
        let mut vc = v.column(i).to_owned();
        if yc.dot(&vc) < 0.0 {
            vc.mapv_inplace(|x| -x);
        }
        let ny = yc.dot(&yc).sqrt();
        let nv = vc.dot(&vc).sqrt();
        let dot = yc.dot(&vc);
        let denom = ny * nv;
        if denom > COS_EPS {
            loss += 1.0 - dot / denom;
            let grad = (&vc / denom - &(&yc * (dot / (ny * ny * denom)))) * (-1.0 / k);
            g.column_mut(i).assign(&grad);
        } else {
            loss += 1.0 - dot / COS_EPS;
            g.column_mut(i).assign(&(&vc * (-1.0 / (k * COS_EPS))));
        }
    }
    (loss / k, g)
}

/// Loss and its gradient with respect to the network output.
pub fn task_loss(task: &Task, y: &Mat, target: &Target) -> Result<(f64, Mat), TrainError> {
    match (task, target) {
        (Task::EigVec { loss: VecLoss::Cos, .. }, Target::Vectors(v)) => {
            check(y, v.dim())?;
            Ok(cos_loss_aligned(y, v))
        }
        (Task::EigVec { loss: VecLoss::Eigenspace, .. }, Target::Vectors(v)) => {
            check(y, v.dim())?;
            let diff = y.dot(&y.t()) - v.dot(&v.t());
            let loss = 0.5 * diff.iter().map(|x| x * x).sum::<f64>();
            Ok((loss, diff.dot(y) * 2.0))
        }
        (Task::EigVal { .. }, Target::Values(l)) => {
            check(y, (1, l.len()))?;
            let k = l.len() as f64;
            let mut g = Mat::zeros(y.dim());
            let mut loss = 0.0;
            for (i, &lam) in l.iter().enumerate() {
                let den = lam + REL_EPS;
                let r = (lam - y[[0, i]]) / den;
                loss += r * r / k;
                g[[0, i]] = -2.0 * r / (den * k);
            }
            Ok((loss, g))
        }
        (Task::Gmm { beta }, Target::Labels(z)) => {
            check(y, (1, z.len()))?;
            let n = z.len() as f64;
            let s = y.mapv(|v| (beta * v).tanh());
            let zhat: Vec<f64> = s.iter().map(|s| (s + 1.0) / 2.0).collect();
            let direct: f64 = zhat.iter().zip(z).map(|(a, &b)| (a - b as f64).abs()).sum::<f64>() / n;
            let flipped: f64 = zhat.iter().zip(z).map(|(a, &b)| (a - (1 - b) as f64).abs()).sum::<f64>() / n;
            let flip = flipped < direct;
            let mut g = Mat::zeros(y.dim());
            for i in 0..z.len() {
                let t = if flip { (1 - z[i]) as f64 } else { z[i] as f64 };
                let diff = zhat[i] - t;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[[0, i]] = sign / n * 0.5 * beta * (1.0 - s[[0, i]] * s[[0, i]]);
            }
            Ok((direct.min(flipped), g))
        }
        _ => Err(TrainError::ShapeMismatch("target does not match the task".into())),
    }
}

fn check(y: &Mat, dim: (usize, usize)) -> Result<(), TrainError> {
    if y.dim() != dim {
        return Err(TrainError::ShapeMismatch(format!("output {:?}, target {:?}", y.dim(), dim)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    /// Index into [`TransformerParams::matrices`].
    pub matrix: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Coordinate>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Multiply the analytic gradient by this factor (detector test hook).
    pub corrupt: Option<f64>,
    /// Seed of the 1% coordinate subset used above 10^4 parameters.
    pub subset_seed: u64,
    /// Accept steps above 1e-2 (the check then measures truncation error too).
    pub allow_coarse: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { corrupt: None, subset_seed: 0, allow_coarse: false }
    }
}

/// Central-difference check of [`backward`] for a scalar loss of the output.
pub fn grad_check(
    params: &TransformerParams,
    ep: &Episode,
    loss_fn: &dyn Fn(&Mat) -> (f64, Mat),
    h: f64,
) -> Result<GradCheckReport, TrainError> {
    grad_check_with(params, ep, loss_fn, h, GradCheckOptions::default())
}

pub fn grad_check_with(
    params: &TransformerParams,
    ep: &Episode,
    loss_fn: &dyn Fn(&Mat) -> (f64, Mat),
    h: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if !(h > 0.0 && h.is_finite() && (h <= 1e-2 || opts.allow_coarse)) {
        return Err(TrainError::Config(format!("step h = {h} must lie in (0, 1e-2]")));
    }
    let y = crate::transformer::tf_forward(params, ep)?;
    let (_, gy) = loss_fn(&y);
    let mut grads = backward(params, ep, &gy)?;
    if let Some(c) = opts.corrupt {
        grads.scale(c);
    }
    let coords: Vec<Coordinate> = {
        let all: Vec<Coordinate> = params
            .matrices()
            .iter()
            .enumerate()
            .flat_map(|(mi, m)| {
                let (r, c) = m.dim();
                (0..r).flat_map(move |row| (0..c).map(move |col| Coordinate { matrix: mi, row, col }))
            })
            .collect();
        if all.len() > 10_000 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.subset_seed);
            let take = all.len().div_ceil(100);
            let mut idx = sample(&mut rng, all.len(), take).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        } else {
            all
        }
    };
    let gmats = grads.matrices();
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, analytic: 0.0, numeric: 0.0, checked: coords.len() };
    for c in coords {
        let orig = params.matrices()[c.matrix][[c.row, c.col]];
        let mut eval = |v: f64| -> Result<f64, TrainError> {
            work.matrices_mut()[c.matrix][[c.row, c.col]] = v;
            let y = crate::transformer::tf_forward(&work, ep)?;
            Ok(loss_fn(&y).0)
        };
        let fp = eval(orig + h)?;
        let fm = eval(orig - h)?;
        eval(orig)?;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = gmats[c.matrix][[c.row, c.col]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel;
            report.worst = Some(c);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Training run description. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    /// Dataset size when `fixed_dataset` is set.
    pub n_instances: usize,
    pub fixed_dataset: bool,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub hidden: usize,
    pub d: usize,
    pub n: usize,
    pub init_scale: f64,
    /// Each sampled X is rescaled to this Frobenius norm (0 keeps it raw).
    pub input_norm: f64,
    pub sep_range: [f64; 2],
    pub sigma2_range: [f64; 2],
    pub use_aux: bool,
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::EigVec { k: 1, loss: VecLoss::Cos },
            n_instances: 1000,
            fixed_dataset: false,
            steps: 20_000,
            lr: 1e-3,
            seed: 0,
            layers: 2,
            heads: 2,
            embed: 32,
            hidden: 64,
            d: 4,
            n: 8,
            init_scale: 0.5,
            input_norm: 12.0,
            sep_range: [2.0, 6.0],
            sigma2_range: [1.0, 1.0],
            use_aux: false,
            eval_every: 500,
            eval_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be a finite nonnegative number", self.lr));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.d == 0 || self.n == 0 {
            return bad("layers, heads, hidden, d and n must be positive".into());
        }
        if self.embed <= self.d {
            return bad(format!("embed = {} must exceed d = {}", self.embed, self.d));
        }
        match self.task {
            Task::EigVec { k, .. } | Task::EigVal { k } if k == 0 || k > self.d => {
                return bad(format!("k = {k} must lie in 1..={}", self.d));
            }
            Task::Gmm { beta } if !(beta > 0.0) => return bad("beta must be positive".into()),
            _ => {}
        }
        if self.fixed_dataset && self.n_instances == 0 {
            return bad("fixed dataset needs n_instances >= 1".into());
        }
        if self.use_aux && self.aux_rows() + self.d > self.embed {
            return bad(format!(
                "embed = {} is too small for the auxiliary block ({} rows)",
                self.embed,
                self.aux_rows()
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let (d1, d2) = self.task.output_shape(self.d, self.n);
        Arch { layers: self.layers, heads: self.heads, embed: self.embed, hidden: self.hidden, d_out0: d1, d_out1: d2, n: self.n }
    }

    fn aux_rows(&self) -> usize {
        match self.task {
            Task::EigVec { k, .. } | Task::EigVal { k } => (k + 3) * self.d,
            Task::Gmm { .. } => choose_n1(self.d, self.n, 0.0).map_or(usize::MAX / 2, |n1| n1 + 4 * self.d),
        }
    }
}

/// Draw one training episode and its target.
pub fn sample_episode<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<(Episode, Target), TrainError> {
    let (mut x, target, aux) = match cfg.task {
        Task::EigVec { k, .. } | Task::EigVal { k } => {
            let mut x = gen_synthetic_pca(cfg.d, cfg.n, rng);
            rescale(&mut x, cfg.input_norm);
            let a = symmetrize(x.view());
            let res = eigh_oracle(a.view(), k).map_err(|e| TrainError::Config(e.to_string()))?;
            let target = match cfg.task {
                Task::EigVal { .. } => Target::Values(res.eigvals),
                _ => Target::Vectors(res.eigvecs),
            };
            let aux = if cfg.use_aux { Some(build_aux_pca(cfg.d, cfg.n, k, rng)?) } else { None };
            (x, target, aux)
        }
        Task::Gmm { .. } => {
            let sep = uniform(rng, cfg.sep_range);
            let sigma2 = uniform(rng, cfg.sigma2_range);
            let inst = gen_gmm(cfg.d, cfg.n, sep, sigma2, rng);
            let aux = if cfg.use_aux {
                let n1 = choose_n1(cfg.d, cfg.n, 0.0).map_err(|e| TrainError::Config(e.to_string()))?;
                Some(build_aux_gmm(cfg.d, cfg.n, n1, rng)?)
            } else {
                None
            };
            (inst.x, Target::Labels(inst.z), aux)
        }
    };
    if matches!(cfg.task, Task::Gmm { .. }) {
        rescale(&mut x, cfg.input_norm);
    }
    let ep = match aux {
        Some((p, layout)) => {
            let pad = cfg.embed - cfg.d - p.nrows();
            let p = ndarray::concatenate(Axis(0), &[p.view(), Mat::zeros((pad, cfg.n)).view()]).expect("same columns");
            Episode::new(x.view(), p.view(), Some(layout))?
        }
        None => Episode::padded(x.view(), cfg.embed)?,
    };
    Ok((ep, target))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn rescale(x: &mut Mat, target: f64) {
    if target > 0.0 {
        let f = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if f > 0.0 {
            *x *= target / f;
        }
    }
}

/// Task-specific quality on held-out episodes: mean |cos| for eigenvectors,
/// mean squared relative error for eigenvalues, mean misclustering for GMM.
pub fn evaluate(params: &TransformerParams, cfg: &TrainConfig, set: &[(Episode, Target)]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (ep, target) in set {
        let y = crate::transformer::tf_forward(params, ep)?;
        total += match (&cfg.task, target) {
            (Task::EigVec { .. }, Target::Vectors(v)) => {
                let (loss, _) = cos_loss_aligned(&y, v);
                1.0 - loss
            }
            (Task::EigVal { .. }, Target::Values(l)) => {
                let pred: Vec<f64> = y.row(0).to_vec();
                crate::metrics::rmse_eigvals(l, &pred, true).map_err(|e| TrainError::Config(e.to_string()))?
            }
            (Task::Gmm { beta }, Target::Labels(z)) => {
                let zhat: Vec<u8> = y.iter().map(|v| u8::from((beta * v).tanh() > 0.0)).collect();
                crate::metrics::gmm_loss(&zhat, z).map_err(|e| TrainError::Config(e.to_string()))?
            }
            _ => return Err(TrainError::ShapeMismatch("target does not match the task".into())),
        };
    }
    Ok(total / set.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: TransformerParams,
    pub history: Vec<f64>,
    /// (step, held-out metric) pairs.
    pub evals: Vec<(usize, f64)>,
}

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn held_out(cfg: &TrainConfig) -> Result<Vec<(Episode, Target)>, TrainError> {
    let mut rng = stream(cfg.seed, 2);
    (0..cfg.eval_size).map(|_| sample_episode(cfg, &mut rng)).collect()
}

pub fn initial_params(cfg: &TrainConfig) -> TransformerParams {
    crate::transformer::init_params(&cfg.arch(), cfg.init_scale, &mut stream(cfg.seed, 0))
}

/// Plain SGD on freshly sampled episodes (or a fixed dataset when requested).
pub fn train_loop(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_loop_with(cfg, |_, _| {})
}

/// As [`train_loop`], calling `on_eval(step, metric)` after each evaluation.
pub fn train_loop_with(cfg: &TrainConfig, mut on_eval: impl FnMut(usize, f64)) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut params = initial_params(cfg);
    let mut data_rng = stream(cfg.seed, 1);
    let dataset: Vec<(Episode, Target)> = if cfg.fixed_dataset {
        (0..cfg.n_instances).map(|_| sample_episode(cfg, &mut data_rng)).collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let eval_set = if cfg.eval_every > 0 && cfg.eval_size > 0 { held_out(cfg)? } else { Vec::new() };
    let mut history = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let fresh;
        let (ep, target) = if cfg.fixed_dataset {
            let (e, t) = &dataset[data_rng.random_range(0..dataset.len())];
            (e, t)
        } else {
            fresh = sample_episode(cfg, &mut data_rng)?;
            (&fresh.0, &fresh.1)
        };
        let y = crate::transformer::tf_forward(&params, ep)?;
        let (loss, gy) = task_loss(&cfg.task, &y, target)?;
        history.push(loss);
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { step, history });
        }
        let grads = backward(&params, ep, &gy)?;
        if cfg.lr > 0.0 {
            for (p, g) in params.matrices_mut().into_iter().zip(grads.matrices()) {
                p.scaled_add(-cfg.lr, g);
            }
        }
        if !eval_set.is_empty() && (step + 1) % cfg.eval_every == 0 {
            let m = evaluate(&params, cfg, &eval_set)?;
            evals.push((step + 1, m));
            on_eval(step + 1, m);
        }
    }
    Ok(TrainOutcome { params, history, evals })
}

/// Slice helper used by tests: the X rows of a hidden state.
pub fn x_rows(h: &Mat, d: usize) -> Mat {
    h.slice(s![..d, ..]).to_owned()
}
