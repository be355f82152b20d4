//! ReLU-attention transformer: multi-head attention with a 1/N-scaled head
//! sum, residual FC layers and linear output adapters.

use crate::construction::AuxLayout;
use crate::linalg::{norm, Mat, Vector};
use ndarray::{ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn mismatch(msg: impl Into<String>) -> TransformerError {
    TransformerError::DimMismatch(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnHead {
    pub v: Mat,
    pub q: Mat,
    pub k: Mat,
}

impl AttnHead {
    pub fn zeros(d: usize) -> Self {
        AttnHead { v: Mat::zeros((d, d)), q: Mat::zeros((d, d)), k: Mat::zeros((d, d)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub heads: Vec<AttnHead>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub w1: Mat,
    pub w2: Mat,
}

impl FcLayer {
    /// FC layer whose output equals its input.
    pub fn identity(d: usize) -> Self {
        FcLayer { w1: Mat::zeros((1, d)), w2: Mat::zeros((d, 1)) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub layers: Vec<(AttnLayer, FcLayer)>,
    pub w0_out: Mat,
    pub w1_out: Mat,
}

impl TransformerParams {
    pub fn embed_dim(&self) -> usize {
        self.w0_out.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Largest number of heads in any layer.
    pub fn max_heads(&self) -> usize {
        self.layers.iter().map(|(a, _)| a.heads.len()).max().unwrap_or(0)
    }

    pub fn total_heads(&self) -> usize {
        self.layers.iter().map(|(a, _)| a.heads.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.w0_out.len() + self.w1_out.len();
        for (a, f) in &self.layers {
            n += a.heads.iter().map(|h| h.v.len() + h.q.len() + h.k.len()).sum::<usize>();
            n += f.w1.len() + f.w2.len();
        }
        n
    }

    /// All parameter matrices in canonical order: per layer V, Q, K of every
    /// head then W1, W2; finally the two adapters.
    pub fn matrices(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for (a, f) in &self.layers {
            for h in &a.heads {
                out.extend([&h.v, &h.q, &h.k]);
            }
            out.extend([&f.w1, &f.w2]);
        }
        out.extend([&self.w0_out, &self.w1_out]);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for (a, f) in &mut self.layers {
            for h in &mut a.heads {
                out.push(&mut h.v);
                out.push(&mut h.q);
                out.push(&mut h.k);
            }
            out.push(&mut f.w1);
            out.push(&mut f.w2);
        }
        out.push(&mut self.w0_out);
        out.push(&mut self.w1_out);
        out
    }

    pub fn scale(&mut self, c: f64) {
        for m in self.matrices_mut() {
            m.mapv_inplace(|x| x * c);
        }
    }
}

/// Network input: H = [X; P] with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub h: Mat,
    pub d: usize,
    pub aux_layout: Option<AuxLayout>,
}

impl Episode {
    /// Stack `x` over `p`.
    pub fn new(x: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, layout: Option<AuxLayout>) -> Result<Self, TransformerError> {
        if x.ncols() != p.ncols() {
            return Err(mismatch(format!("X has {} columns, P has {}", x.ncols(), p.ncols())));
        }
        let h = ndarray::concatenate(Axis(0), &[x, p]).map_err(|e| mismatch(e.to_string()))?;
        Ok(Episode { h, d: x.nrows(), aux_layout: layout })
    }

    /// X zero-padded to `embed` rows, no auxiliary block.
    pub fn padded(x: ArrayView2<'_, f64>, embed: usize) -> Result<Self, TransformerError> {
        if embed <= x.nrows() {
            return Err(mismatch(format!("embedding {embed} must exceed d = {}", x.nrows())));
        }
        let p = Mat::zeros((embed - x.nrows(), x.ncols()));
        Self::new(x, p.view(), None)
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.h.slice(ndarray::s![..self.d, ..])
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Column-wise softmax (each column sums to one).
pub fn softmax_columns(s: &Mat) -> Mat {
    let mut out = s.clone();
    for mut col in out.columns_mut() {
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|x| (x - m).exp());
        let z: f64 = col.sum();
        col.mapv_inplace(|x| x / z);
    }
    out
}

/// Scores (QH)^T (KH) for one head; entry (j, i) couples source j to target i.
pub fn head_scores(head: &AttnHead, h: &Mat) -> Mat {
    head.q.dot(h).t().dot(&head.k.dot(h))
}

pub fn attn_forward(layer: &AttnLayer, h: &Mat) -> Result<Mat, TransformerError> {
    let d = h.nrows();
    let n = h.ncols() as f64;
    let mut acc = Mat::zeros(h.dim());
    for (m, head) in layer.heads.iter().enumerate() {
        for (name, w) in [("V", &head.v), ("Q", &head.q), ("K", &head.k)] {
            if w.dim() != (d, d) {
                return Err(mismatch(format!("head {m} {name} is {:?}, expected {d}x{d}", w.dim())));
            }
        }
        let s = head_scores(head, h);
        let a = match layer.activation {
            Activation::Relu => s.mapv(relu),
            Activation::Softmax => softmax_columns(&s),
        };
        acc += &head.v.dot(h).dot(&a);
    }
    let scale = match layer.activation {
        Activation::Relu => 1.0 / n,
        Activation::Softmax => 1.0,
    };
    Ok(h + &(acc * scale))
}

pub fn fc_forward(layer: &FcLayer, h: &Mat) -> Result<Mat, TransformerError> {
    if layer.w1.ncols() != h.nrows() || layer.w2.nrows() != h.nrows() || layer.w2.ncols() != layer.w1.nrows() {
        return Err(mismatch(format!(
            "FC W1 {:?}, W2 {:?} against input with {} rows",
            layer.w1.dim(),
            layer.w2.dim(),
            h.nrows()
        )));
    }
    Ok(h + &layer.w2.dot(&layer.w1.dot(h).mapv(relu)))
}

/// Hidden state after all layers, before the adapters.
pub fn tf_hidden(params: &TransformerParams, h: &Mat) -> Result<Mat, TransformerError> {
    let mut cur = h.clone();
    for (attn, fc) in &params.layers {
        cur = attn_forward(attn, &cur)?;
        cur = fc_forward(fc, &cur)?;
    }
    Ok(cur)
}

pub fn tf_forward(params: &TransformerParams, ep: &Episode) -> Result<Mat, TransformerError> {
    let hidden = tf_hidden(params, &ep.h)?;
    if params.w0_out.ncols() != hidden.nrows() || params.w1_out.nrows() != hidden.ncols() {
        return Err(mismatch(format!(
            "adapters {:?} / {:?} against hidden state {:?}",
            params.w0_out.dim(),
            params.w1_out.dim(),
            hidden.dim()
        )));
    }
    Ok(params.w0_out.dot(&hidden).dot(&params.w1_out))
}

/// Largest singular value by power iteration on W^T W.
pub fn spectral_norm(w: &Mat) -> f64 {
    if w.is_empty() || w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vector = (0..w.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    v /= norm(v.view());
    let mut sigma = 0.0;
    for _ in 0..300 {
        let u = w.t().dot(&w.dot(&v));
        let nu = norm(u.view());
        if nu == 0.0 {
            return 0.0;
        }
        let next = nu.sqrt();
        v = u / nu;
        let done = (next - sigma).abs() <= 1e-10 * next;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

/// Parameter norm: the largest per-layer sum of spectral norms, where each
/// layer counts max(||Q||, ||K||) over heads, the sum of ||V||, both FC
/// matrices and both adapters.
pub fn op_norm(params: &TransformerParams) -> f64 {
    let adapters = spectral_norm(&params.w0_out) + spectral_norm(&params.w1_out);
    params
        .layers
        .iter()
        .map(|(a, f)| {
            let qk = a
                .heads
                .iter()
                .map(|h| spectral_norm(&h.q).max(spectral_norm(&h.k)))
                .fold(0.0, f64::max);
            let v: f64 = a.heads.iter().map(|h| spectral_norm(&h.v)).sum();
            qk + v + spectral_norm(&f.w1) + spectral_norm(&f.w2) + adapters
        })
        .fold(0.0, f64::max)
}

/// Lipschitz constant of `tf_forward` (Frobenius norms, ReLU attention) over
/// inputs with Frobenius norm at most `radius`.
pub fn local_lipschitz_bound(params: &TransformerParams, radius: f64) -> f64 {
    let n = params.w1_out.nrows() as f64;
    let mut r = radius;
    let mut c = spectral_norm(&params.w0_out) * spectral_norm(&params.w1_out);
    for (a, f) in &params.layers {
        let cubic: f64 = a
            .heads
            .iter()
            .map(|h| spectral_norm(&h.v) * spectral_norm(&h.q) * spectral_norm(&h.k))
            .sum::<f64>()
            / n;
        c *= 1.0 + 3.0 * cubic * r * r;
        r *= 1.0 + cubic * r * r;
        let fc = spectral_norm(&f.w2) * spectral_norm(&f.w1);
        c *= 1.0 + fc;
        r *= 1.0 + fc;
    }
    c
}

/// Shape of a trainable network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub hidden: usize,
    pub d_out0: usize,
    pub d_out1: usize,
    pub n: usize,
}

pub fn init_params<R: Rng + ?Sized>(arch: &Arch, scale: f64, rng: &mut R) -> TransformerParams {
    let std = scale / (arch.embed as f64).sqrt();
    let mut draw = |r: usize, c: usize| Mat::from_shape_simple_fn((r, c), || std * rng.sample::<f64, _>(StandardNormal));
    let d = arch.embed;
    let mut layers = Vec::with_capacity(arch.layers);
    for _ in 0..arch.layers {
        let heads = (0..arch.heads)
            .map(|_| AttnHead { v: draw(d, d), q: draw(d, d), k: draw(d, d) })
            .collect();
        let fc = FcLayer { w1: draw(arch.hidden, d), w2: draw(d, arch.hidden) };
        layers.push((AttnLayer { heads, activation: Activation::Relu }, fc));
    }
    let w0_out = draw(arch.d_out0, d);
    let w1_out = draw(arch.n, arch.d_out1);
    TransformerParams { layers, w0_out, w1_out }
}

const MAGIC: &[u8; 8] = b"SPTFPARM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    activation: Activation,
    heads: usize,
    embed: usize,
    hidden: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    version: u32,
    layers: Vec<LayerHeader>,
    w0_out: [usize; 2],
    w1_out: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

/// Write the parameter container. Layout:
/// 8-byte magic `SPTFPARM`, u32 LE format version, u64 LE header length,
/// UTF-8 JSON header, then every matrix of [`TransformerParams::matrices`]
/// as row-major f64 LE values.
pub fn write_params<W: Write>(mut w: W, params: &TransformerParams, extra: Option<serde_json::Value>) -> Result<(), TransformerError> {
    let header = ParamHeader {
        format: "spectral-tf-params".into(),
        version: FORMAT_VERSION,
        layers: params
            .layers
            .iter()
            .map(|(a, f)| LayerHeader {
                activation: a.activation,
                heads: a.heads.len(),
                embed: f.w1.ncols(),
                hidden: f.w1.nrows(),
            })
            .collect(),
        w0_out: [params.w0_out.nrows(), params.w0_out.ncols()],
        w1_out: [params.w1_out.nrows(), params.w1_out.ncols()],
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_params() * 8);
    for m in params.matrices() {
        for x in m.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(TransformerParams, Option<serde_json::Value>), TransformerError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TransformerError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(TransformerError::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: ParamHeader = serde_json::from_slice(&json)?;
    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat, TransformerError> {
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Mat::from_shape_vec((rows, cols), data).map_err(|e| TransformerError::Format(e.to_string()))
    };
    let mut layers = Vec::new();
    for lh in &header.layers {
        let mut heads = Vec::with_capacity(lh.heads);
        for _ in 0..lh.heads {
            let v = read_mat(lh.embed, lh.embed)?;
            let q = read_mat(lh.embed, lh.embed)?;
            let k = read_mat(lh.embed, lh.embed)?;
            heads.push(AttnHead { v, q, k });
        }
        let w1 = read_mat(lh.hidden, lh.embed)?;
        let w2 = read_mat(lh.embed, lh.hidden)?;
        layers.push((AttnLayer { heads, activation: lh.activation }, FcLayer { w1, w2 }));
    }
    let w0_out = read_mat(header.w0_out[0], header.w0_out[1])?;
    let w1_out = read_mat(header.w1_out[0], header.w1_out[1])?;
    Ok((TransformerParams { layers, w0_out, w1_out }, header.extra))
}

pub fn save_params(path: impl AsRef<Path>, params: &TransformerParams, extra: Option<serde_json::Value>) -> Result<(), TransformerError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(f, params, extra)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(TransformerParams, Option<serde_json::Value>), TransformerError> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
