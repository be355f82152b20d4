//! Experiment runner: every pipeline as a subcommand with JSON configs, CSV
//! results and SVG plots.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
//! 5 gradient check failure.

pub mod svg;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::s;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spectral_tf::construction::{
    build_aux_gmm, build_aux_pca_with_overlap, build_gmm_network, build_pca_network, implied_eps0, pca_schedule,
    sphere_inits, verify_construction, ConstructionConfig, ConstructionError, ConstructionReport, PcaSchedule,
};
use spectral_tf::datasets::{fmt_f64, gen_gmm, gen_synthetic_pca, gen_synthetic_pca_identity, load_csv_matrix};
use spectral_tf::gmm::{
    bayes_cluster, choose_n1, empirical_cov, gmm_loss, leading_direction, spectral_cluster, spectral_cluster_with_init, GmmError,
};
use spectral_tf::linalg::{eigh_oracle, power_method, sample_unit_sphere, symmetrize, Mat, Vector};
use spectral_tf::metrics::{ari, cos_loss, nmi, projector_distance_sq, rmse_eigvals};
use spectral_tf::train::{
    grad_check_with, initial_params, min_relu_margin, sample_episode, stream, task_loss, train_loop, GradCheckOptions,
    Task, TrainConfig, TrainError, VecLoss,
};
use spectral_tf::transformer::{op_norm, save_params, tf_forward, Activation, Episode, TransformerParams};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;
use svg::{emit_svg_plot, PlotOptions, Series};
use thiserror::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPECTRAL_TF_OUT";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub const PCA_FIXED_HEADER: [&str; 3] = ["trial", "eigenspace_loss", "rmse_eigvals"];
pub const GMM_HEADER: [&str; 7] = ["sep", "trial", "n1", "gmm_loss_spectral", "gmm_loss_bayes", "ari", "nmi"];
pub const HISTORY_HEADER: [&str; 2] = ["step", "loss"];
pub const EVAL_HEADER: [&str; 2] = ["step", "metric"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {0}")]
    Divergence(usize),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn construction_err(e: ConstructionError) -> CliError {
    match e {
        ConstructionError::Linalg(_) | ConstructionError::Transformer(_) => data_err(e),
        _ => config_err(e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "spectral-tf", version, about = "Spectral algorithms, constructed transformers and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Power method against the reference eigensolver.
    Pca(PcaArgs),
    /// Two-cluster spectral clustering against the Bayes rule.
    Gmm(GmmArgs),
    /// Build a transformer that runs the power method and verify it.
    Construct(ConstructArgs),
    /// Train a transformer with SGD.
    Train(TrainArgs),
    /// Compare backpropagation with finite differences.
    Gradcheck(GradcheckArgs),
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Pca(a) => cmd_pca(a),
        Command::Gmm(a) => cmd_gmm(a),
        Command::Construct(a) => cmd_construct(a),
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn default_out(name: &str) -> PathBuf {
    let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    dir.join(name)
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

/// Path of the resolved config written next to an output file.
pub fn config_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data_err)?;
    std::fs::write(path, text + "\n").map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let io = |e: csv::Error| data_err(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| data_err(format!("{}: {e}", path.display())))
}

macro_rules! override_fields {
    ($cfg:expr, $args:expr, [$($f:ident),*]) => {
        $(if let Some(v) = $args.$f.clone() { $cfg.$f = v; })*
    };
}

// ---------------------------------------------------------------- pca

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub tau: usize,
    pub trials: usize,
    pub seed: u64,
    /// Real data instead of synthetic instances (d x N unless `transpose`).
    pub csv_in: Option<PathBuf>,
    pub transpose: bool,
    /// Use X = Z instead of X = L Z.
    pub identity: bool,
    /// Add a wall_ms column (not reproducible byte for byte).
    pub timing: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { d: 4, n: 10, k: 1, tau: 200, trials: 10, seed: 0, csv_in: None, transpose: false, identity: false, timing: false }
    }
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// JSON config; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Numeric CSV with covariates as rows and samples as columns.
    #[arg(long)]
    pub csv_in: Option<PathBuf>,
    /// Read the CSV as samples-as-rows.
    #[arg(long)]
    pub transpose: bool,
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn resolve_pca(a: &PcaArgs) -> Result<PcaConfig, CliError> {
    let mut c: PcaConfig = load_config(a.config.as_deref())?;
    override_fields!(c, a, [d, n, k, tau, trials, seed]);
    if a.csv_in.is_some() {
        c.csv_in = a.csv_in.clone();
    }
    c.transpose |= a.transpose;
    c.identity |= a.identity;
    c.timing |= a.timing;
    Ok(c)
}

fn validate_pca(c: &PcaConfig, d: usize, n: usize) -> Result<(), CliError> {
    if d == 0 || n == 0 {
        return Err(config_err("d and n must be positive"));
    }
    if c.k == 0 {
        return Err(config_err("k must be at least 1"));
    }
    if c.k > d {
        return Err(config_err(format!("k exceeds d ({} > {d})", c.k)));
    }
    if c.tau == 0 || c.trials == 0 {
        return Err(config_err("tau and trials must be at least 1"));
    }
    Ok(())
}

fn pca_trial(c: &PcaConfig, data: Option<&Mat>, trial: usize) -> Result<Vec<String>, CliError> {
    let mut rng = stream(c.seed, trial as u64);
    let x = match data {
        Some(x) => x.clone(),
        None if c.identity => gen_synthetic_pca_identity(c.d, c.n, &mut rng),
        None => gen_synthetic_pca(c.d, c.n, &mut rng),
    };
    let d = x.nrows();
    let inits: Vec<Vector> = (0..c.k).map(|_| sample_unit_sphere(d, &mut rng)).collect();
    let start = Instant::now();
    let pm = power_method(x.view(), c.tau, c.k, &inits).map_err(data_err)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let a = symmetrize(x.view());
    let oracle = eigh_oracle(a.view(), c.k).map_err(data_err)?;
    let mut row = vec![trial.to_string()];
    for i in 0..c.k {
        let l = cos_loss(oracle.eigvecs.slice(s![.., i..i + 1]), pm.eigvecs.slice(s![.., i..i + 1])).map_err(data_err)?;
        row.push(fmt_f64(l));
    }
    row.push(fmt_f64(0.5 * projector_distance_sq(oracle.eigvecs.view(), pm.eigvecs.view())));
    row.push(fmt_f64(rmse_eigvals(&oracle.eigvals, &pm.eigvals, true).map_err(data_err)?));
    if c.timing {
        row.push(fmt_f64(wall_ms));
    }
    Ok(row)
}

pub fn pca_header(k: usize, timing: bool) -> Vec<String> {
    let mut h = vec![PCA_FIXED_HEADER[0].to_string()];
    h.extend((1..=k).map(|i| format!("cos_loss_{i}")));
    h.extend(PCA_FIXED_HEADER[1..].iter().map(|s| s.to_string()));
    if timing {
        h.push("wall_ms".into());
    }
    h
}

pub fn cmd_pca(a: PcaArgs) -> Result<(), CliError> {
    let c = resolve_pca(&a)?;
    let data = match &c.csv_in {
        Some(p) => Some(load_csv_matrix(p, c.transpose).map_err(|e| data_err(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let (d, n) = data.as_ref().map_or((c.d, c.n), |x| x.dim());
    validate_pca(&c, d, n)?;
    let rows = (0..c.trials)
        .into_par_iter()
        .map(|t| pca_trial(&c, data.as_ref(), t))
        .collect::<Result<Vec<_>, _>>()?;
    let out = a.out.unwrap_or_else(|| default_out("pca.csv"));
    write_csv(&out, &pca_header(c.k, c.timing), &rows)?;
    write_json(&config_path(&out), &c)
}

// ---------------------------------------------------------------- gmm

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub d: usize,
    pub n: usize,
    /// One or more separations ||mu1 - mu0||; several values form a sweep.
    pub sep: Vec<f64>,
    pub sigma2: f64,
    pub trials: usize,
    pub seed: u64,
    /// Split size; `None` picks it with the rate rule.
    pub n1: Option<usize>,
    pub tau: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { d: 2, n: 1000, sep: vec![4.0], sigma2: 1.0, trials: 50, seed: 0, n1: None, tau: spectral_tf::gmm::DEFAULT_TAU }
    }
}

#[derive(Debug, Args)]
pub struct GmmArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Separation, or a comma-separated list for a sweep.
    #[arg(long, value_delimiter = ',')]
    pub sep: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "auto_n1")]
    pub n1: Option<usize>,
    /// Choose N1 with the rate rule (the default when --n1 is absent).
    #[arg(long)]
    pub auto_n1: bool,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG chart of the per-separation means.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

pub fn resolve_gmm(a: &GmmArgs) -> Result<GmmConfig, CliError> {
    let mut c: GmmConfig = load_config(a.config.as_deref())?;
    override_fields!(c, a, [d, n, sep, sigma2, trials, seed, tau]);
    if a.n1.is_some() {
        c.n1 = a.n1;
    }
    if a.auto_n1 {
        c.n1 = None;
    }
    Ok(c)
}

fn gmm_split(c: &GmmConfig, sep: f64) -> Result<usize, CliError> {
    let n1 = match c.n1 {
        Some(n1) => n1,
        None => choose_n1(c.d, c.n, sep).map_err(config_err)?,
    };
    let (lo, hi) = (c.d + 2, c.n.saturating_sub(1));
    if n1 < lo || n1 > hi {
        return Err(config_err(GmmError::BadSplit { n1, lo, hi }));
    }
    Ok(n1)
}

fn validate_gmm(c: &GmmConfig) -> Result<(), CliError> {
    if c.d == 0 || c.trials == 0 || c.tau == 0 {
        return Err(config_err("d, trials and tau must be positive"));
    }
    if c.sep.is_empty() || c.sep.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(config_err("sep must be a non-empty list of finite values >= 0"));
    }
    if !(c.sigma2 > 0.0 && c.sigma2.is_finite()) {
        return Err(config_err("sigma2 must be positive"));
    }
    Ok(())
}

/// Per-trial metrics: spectral loss, Bayes loss, ARI, NMI.
fn gmm_trial(c: &GmmConfig, si: usize, n1: usize, trial: usize) -> Result<[f64; 4], CliError> {
    let mut rng = stream(c.seed, ((si as u64) << 32) | trial as u64);
    let inst = gen_gmm(c.d, c.n, c.sep[si], c.sigma2, &mut rng);
    let spectral = spectral_cluster(inst.x.view(), n1, c.tau, &mut rng).map_err(data_err)?;
    let loss = gmm_loss(&spectral.labels, &inst.z).map_err(data_err)?;
    // Identical means leave the Bayes rule undefined.
    let bayes = match bayes_cluster(inst.x.view(), inst.mu0.view(), inst.mu1.view()) {
        Ok(b) => gmm_loss(&b.labels, &inst.z).map_err(data_err)?,
        Err(GmmError::IdenticalMeans) => f64::NAN,
        Err(e) => return Err(data_err(e)),
    };
    let truth: Vec<usize> = inst.z.iter().map(|&z| z as usize).collect();
    let pred = spectral.as_usize();
    Ok([loss, bayes, ari(&truth, &pred).map_err(data_err)?, nmi(&truth, &pred).map_err(data_err)?])
}

pub fn cmd_gmm(a: GmmArgs) -> Result<(), CliError> {
    let c = resolve_gmm(&a)?;
    validate_gmm(&c)?;
    let splits: Vec<usize> = c.sep.iter().map(|&s| gmm_split(&c, s)).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..c.sep.len()).flat_map(|si| (0..c.trials).map(move |t| (si, t))).collect();
    let results = jobs
        .par_iter()
        .map(|&(si, t)| gmm_trial(&c, si, splits[si], t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(results.len() + c.sep.len());
    let mut means = Vec::with_capacity(c.sep.len());
    for (si, chunk) in results.chunks(c.trials).enumerate() {
        let sep = fmt_f64(c.sep[si]);
        let n1 = splits[si].to_string();
        for (t, m) in chunk.iter().enumerate() {
            let mut row = vec![sep.clone(), t.to_string(), n1.clone()];
            row.extend(m.iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
        let mut mean = [0.0; 4];
        for m in chunk {
            for (acc, v) in mean.iter_mut().zip(m) {
                *acc += v / c.trials as f64;
            }
        }
        let mut row = vec![sep, "mean".to_string(), n1];
        row.extend(mean.iter().map(|v| fmt_f64(*v)));
        rows.push(row);
        means.push(mean);
    }
    let out = a.out.unwrap_or_else(|| default_out("gmm.csv"));
    let header: Vec<String> = GMM_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(&out, &header, &rows)?;
    write_json(&config_path(&out), &c)?;
    if let Some(plot) = a.plot {
        let series: Vec<Series> = GMM_HEADER[3..]
            .iter()
            .enumerate()
            .map(|(j, name)| Series {
                name: name.to_string(),
                points: c.sep.iter().zip(&means).map(|(&s, m)| (s, m[j])).filter(|p| p.1.is_finite()).collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        let opts = PlotOptions {
            title: format!("two-cluster GMM, d = {}, N = {}", c.d, c.n),
            x_label: "separation".into(),
            y_label: "mean over trials".into(),
            ..PlotOptions::default()
        };
        emit_svg_plot(&series, &opts, &plot).map_err(data_err)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- construct

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pca,
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructConfig {
    pub variant: Variant,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub tau: usize,
    pub eps: f64,
    pub beta: f64,
    /// Minimum overlap between each PCA start vector and its target.
    pub delta: f64,
    /// Number of verification instances.
    pub instances: usize,
    pub seed: u64,
    /// Eigenvalue interval the network is built for; derived from the
    /// instances when absent.
    pub lambda_range: Option<[f64; 2]>,
    pub sep: f64,
    pub sigma2: f64,
    pub n1: Option<usize>,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        ConstructConfig {
            variant: Variant::Pca,
            d: 4,
            n: 10,
            k: 1,
            tau: 8,
            eps: 1e-2,
            beta: 5.0,
            delta: 0.2,
            instances: 5,
            seed: 0,
            lambda_range: None,
            sep: 4.0,
            sigma2: 1.0,
            n1: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Eigenvalue interval as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub lambda_range: Option<Vec<f64>>,
    #[arg(long)]
    pub sep: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub out_params: Option<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
}

pub fn resolve_construct(a: &ConstructArgs) -> Result<ConstructConfig, CliError> {
    let mut c: ConstructConfig = load_config(a.config.as_deref())?;
    override_fields!(c, a, [variant, d, n, k, tau, eps, beta, delta, instances, seed, sep, sigma2]);
    if let Some(r) = &a.lambda_range {
        c.lambda_range = Some([r[0], r[1]]);
    }
    if a.n1.is_some() {
        c.n1 = a.n1;
    }
    Ok(c)
}

/// Per-instance fidelity of the GMM network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmInstanceReport {
    /// Fraction of points whose output sign matches spectral clustering
    /// (up to a global label swap).
    pub agreement: f64,
    /// max_i |s_i - tanh(beta v^T (x_i - mean))|, up to a global sign.
    pub max_output_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructSummary {
    pub variant: Variant,
    pub layer_count: usize,
    pub expected_layer_count: usize,
    pub max_heads: usize,
    pub total_heads: usize,
    pub num_params: usize,
    pub op_norm: f64,
    pub lambda_range: [f64; 2],
    pub implied_eps0: f64,
    pub schedule: Option<PcaSchedule>,
    pub n1: Option<usize>,
    pub max_vec_error: Option<f64>,
    pub pca_instances: Vec<ConstructionReport>,
    pub min_agreement: Option<f64>,
    pub gmm_instances: Vec<GmmInstanceReport>,
}

fn interval(values: &[f64]) -> [f64; 2] {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [0.5 * lo, 2.0 * hi]
}

fn construct_pca(c: &ConstructConfig) -> Result<(TransformerParams, ConstructSummary), CliError> {
    let mut instances = Vec::with_capacity(c.instances);
    for i in 0..c.instances {
        let mut rng = stream(c.seed, i as u64);
        let x = gen_synthetic_pca(c.d, c.n, &mut rng);
        let (p, layout) = build_aux_pca_with_overlap(x.view(), c.k, c.delta, &mut rng).map_err(construction_err)?;
        instances.push((x, p, layout));
    }
    let mut tops = Vec::new();
    let mut bottoms = Vec::new();
    for (x, _, _) in &instances {
        let a = symmetrize(x.view());
        let o = eigh_oracle(a.view(), c.k).map_err(data_err)?;
        tops.push(o.eigvals[0]);
        bottoms.push(o.eigvals[c.k - 1]);
    }
    let lambda_range = c.lambda_range.unwrap_or_else(|| [interval(&bottoms)[0], interval(&tops)[1]]);
    let cfg = ConstructionConfig { tau: c.tau, eps: c.eps, lambda_range, beta: c.beta, delta: c.delta, ..Default::default() };
    let layout = &instances[0].2;
    let params = build_pca_network(c.d, c.n, c.k, &cfg, layout).map_err(construction_err)?;
    let mut reports = Vec::with_capacity(instances.len());
    for (x, p, layout) in &instances {
        let reference = power_method(x.view(), c.tau, c.k, &sphere_inits(p, layout)).map_err(data_err)?;
        let ep = Episode::new(x.view(), p.view(), Some(layout.clone())).map_err(data_err)?;
        reports.push(verify_construction(&params, &ep, &reference).map_err(construction_err)?);
    }
    let summary = ConstructSummary {
        variant: Variant::Pca,
        layer_count: params.num_layers(),
        expected_layer_count: 2 * c.tau + 4 * c.k + 1,
        max_heads: params.max_heads(),
        total_heads: params.total_heads(),
        num_params: params.num_params(),
        op_norm: op_norm(&params),
        lambda_range,
        implied_eps0: implied_eps0(c.tau, c.delta),
        schedule: Some(pca_schedule(c.tau, c.k).map_err(construction_err)?),
        n1: None,
        max_vec_error: Some(reports.iter().map(|r| r.max_vec_error).fold(0.0, f64::max)),
        pca_instances: reports,
        min_agreement: None,
        gmm_instances: Vec::new(),
    };
    Ok((params, summary))
}

fn construct_gmm(c: &ConstructConfig) -> Result<(TransformerParams, ConstructSummary), CliError> {
    let n1 = match c.n1 {
        Some(n1) => n1,
        None => choose_n1(c.d, c.n, c.sep).map_err(config_err)?,
    };
    let mut instances = Vec::with_capacity(c.instances);
    let mut tops = Vec::new();
    for i in 0..c.instances {
        let mut rng = stream(c.seed, i as u64);
        let inst = gen_gmm(c.d, c.n, c.sep, c.sigma2, &mut rng);
        let (p, layout) = build_aux_gmm(c.d, c.n, n1, &mut rng).map_err(construction_err)?;
        let (cov, _) = empirical_cov(inst.x.view(), n1).map_err(data_err)?;
        tops.push(eigh_oracle(cov.view(), 1).map_err(data_err)?.eigvals[0]);
        instances.push((inst.x, p, layout));
    }
    let lambda_range = c.lambda_range.unwrap_or_else(|| interval(&tops));
    let cfg = ConstructionConfig { tau: c.tau, eps: c.eps, lambda_range, beta: c.beta, delta: c.delta, ..Default::default() };
    let params = build_gmm_network(c.d, c.n, n1, &cfg, &instances[0].2).map_err(construction_err)?;
    let mut reports = Vec::with_capacity(instances.len());
    for (x, p, layout) in &instances {
        let v0 = sphere_inits(p, layout).remove(0);
        let ep = Episode::new(x.view(), p.view(), Some(layout.clone())).map_err(data_err)?;
        let out = tf_forward(&params, &ep).map_err(data_err)?;
        let labels = spectral_cluster_with_init(x.view(), n1, c.tau, &v0).map_err(data_err)?.labels;
        let same = out.iter().zip(&labels).filter(|(s, &l)| u8::from(**s > 0.0) == l).count() as f64 / c.n as f64;
        let v = leading_direction(x.view(), n1, c.tau, &v0).map_err(data_err)?;
        let (_, mean) = empirical_cov(x.view(), n1).map_err(data_err)?;
        let proj = v.dot(x) - v.dot(&mean);
        let err = |sign: f64| out.iter().zip(&proj).map(|(s, p)| (s - (sign * c.beta * p).tanh()).abs()).fold(0.0, f64::max);
        reports.push(GmmInstanceReport { agreement: same.max(1.0 - same), max_output_error: err(1.0).min(err(-1.0)) });
    }
    let summary = ConstructSummary {
        variant: Variant::Gmm,
        layer_count: params.num_layers(),
        expected_layer_count: 2 * c.tau + 7,
        max_heads: params.max_heads(),
        total_heads: params.total_heads(),
        num_params: params.num_params(),
        op_norm: op_norm(&params),
        lambda_range,
        implied_eps0: implied_eps0(c.tau, c.delta),
        schedule: None,
        n1: Some(n1),
        max_vec_error: None,
        min_agreement: Some(reports.iter().map(|r| r.agreement).fold(1.0, f64::min)),
        pca_instances: Vec::new(),
        gmm_instances: reports,
    };
    Ok((params, summary))
}

pub fn cmd_construct(a: ConstructArgs) -> Result<(), CliError> {
    let c = resolve_construct(&a)?;
    if c.instances == 0 {
        return Err(config_err("instances must be at least 1"));
    }
    if c.d == 0 {
        return Err(config_err("d must be positive"));
    }
    let (params, summary) = match c.variant {
        Variant::Pca => construct_pca(&c)?,
        Variant::Gmm => construct_gmm(&c)?,
    };
    let out_params = a.out_params.unwrap_or_else(|| default_out("construct.params"));
    let out_report = a.out_report.unwrap_or_else(|| default_out("construct_report.json"));
    let extra = serde_json::to_value(&c).map_err(data_err)?;
    save_params(&out_params, &params, Some(extra)).map_err(|e| data_err(format!("{}: {e}", out_params.display())))?;
    write_json(&out_report, &summary)?;
    write_json(&config_path(&out_report), &c)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Eigvec,
    Eigval,
    Gmm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    /// Eigenvector loss.
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub input_norm: Option<f64>,
    #[arg(long)]
    pub use_aux: bool,
    /// Cycle through a fixed set of --n-instances episodes.
    #[arg(long)]
    pub fixed_dataset: bool,
    #[arg(long)]
    pub n_instances: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out_history: Option<PathBuf>,
    /// Held-out evaluation rows; defaults to `<history>.eval.csv`.
    #[arg(long)]
    pub out_eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Cos,
    Eigenspace,
}

pub fn resolve_train(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut c: TrainConfig = load_config(a.config.as_deref())?;
    override_fields!(c, a, [layers, heads, embed, hidden, steps, lr, seed, d, n, init_scale, input_norm, n_instances, eval_every, eval_size]);
    c.use_aux |= a.use_aux;
    c.fixed_dataset |= a.fixed_dataset;
    let (mut k, mut loss, mut beta) = match c.task {
        Task::EigVec { k, loss } => (k, loss, 5.0),
        Task::EigVal { k } => (k, VecLoss::Cos, 5.0),
        Task::Gmm { beta } => (1, VecLoss::Cos, beta),
    };
    k = a.k.unwrap_or(k);
    beta = a.beta.unwrap_or(beta);
    if let Some(l) = a.loss {
        loss = match l {
            LossKind::Cos => VecLoss::Cos,
            LossKind::Eigenspace => VecLoss::Eigenspace,
        };
    }
    let kind = a.task.unwrap_or(match c.task {
        Task::EigVec { .. } => TaskKind::Eigvec,
        Task::EigVal { .. } => TaskKind::Eigval,
        Task::Gmm { .. } => TaskKind::Gmm,
    });
    c.task = match kind {
        TaskKind::Eigvec => Task::EigVec { k, loss },
        TaskKind::Eigval => Task::EigVal { k },
        TaskKind::Gmm => Task::Gmm { beta },
    };
    c.validate().map_err(config_err)?;
    Ok(c)
}

/// 64-bit FNV-1a, used to fingerprint configs in checkpoints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn history_rows(history: &[f64]) -> Vec<Vec<String>> {
    history.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]).collect()
}

fn header(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let c = resolve_train(&a)?;
    let out_history = a.out_history.clone().unwrap_or_else(|| default_out("history.csv"));
    let out_eval = a.out_eval.clone().unwrap_or_else(|| {
        let mut s = out_history.as_os_str().to_owned();
        s.push(".eval.csv");
        PathBuf::from(s)
    });
    let out_ckpt = a.out_ckpt.clone().unwrap_or_else(|| default_out("model.params"));
    write_json(&config_path(&out_history), &c)?;
    let outcome = match train_loop(&c) {
        Ok(o) => o,
        Err(TrainError::DivergenceDetected { step, history }) => {
            write_csv(&out_history, &header(&HISTORY_HEADER), &history_rows(&history))?;
            return Err(CliError::Divergence(step));
        }
        Err(e @ TrainError::Config(_)) => return Err(config_err(e)),
        Err(e) => return Err(data_err(e)),
    };
    write_csv(&out_history, &header(&HISTORY_HEADER), &history_rows(&outcome.history))?;
    let evals: Vec<Vec<String>> = outcome.evals.iter().map(|(s, m)| vec![s.to_string(), fmt_f64(*m)]).collect();
    write_csv(&out_eval, &header(&EVAL_HEADER), &evals)?;
    let cfg_json = serde_json::to_string(&c).map_err(data_err)?;
    let extra = serde_json::json!({
        "step": c.steps,
        "seed": c.seed,
        "cfg_hash": format!("{:016x}", fnv1a(cfg_json.as_bytes())),
        "config": c,
    });
    save_params(&out_ckpt, &outcome.params, Some(extra)).map_err(|e| data_err(format!("{}: {e}", out_ckpt.display())))?;
    if let Some((step, m)) = outcome.evals.last() {
        println!("step {step}: held-out metric {m}");
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Softmax,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "eigvec")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, value_enum, default_value = "relu")]
    pub activation: ActivationKind,
    /// Test hook: scale the analytic gradient before comparing.
    #[arg(long, hide = true)]
    pub corrupt_factor: Option<f64>,
}

/// Small network and episode for gradient checks. Draws are repeated until no
/// ReLU input lies within 10h of its kink; if none qualifies, the draw with
/// the widest margin is used.
pub fn gradcheck_problem(
    task: TaskKind,
    activation: ActivationKind,
    seed: u64,
    h: f64,
) -> Result<(TrainConfig, TransformerParams, Episode, spectral_tf::train::Target), CliError> {
    const ATTEMPTS: u64 = 200;
    let task = match task {
        TaskKind::Eigvec => Task::EigVec { k: 2, loss: VecLoss::Cos },
        TaskKind::Eigval => Task::EigVal { k: 2 },
        TaskKind::Gmm => Task::Gmm { beta: 1.0 },
    };
    let mut best: Option<(f64, (TrainConfig, TransformerParams, Episode, spectral_tf::train::Target))> = None;
    for attempt in 0..ATTEMPTS {
        let cfg = TrainConfig {
            task,
            layers: 2,
            heads: 2,
            embed: 8,
            hidden: 8,
            d: 3,
            n: 5,
            init_scale: 1.0,
            input_norm: 3.0,
            sep_range: [2.0, 4.0],
            seed: seed.wrapping_add(attempt << 32),
            ..TrainConfig::default()
        };
        let mut params = initial_params(&cfg);
        if activation == ActivationKind::Softmax {
            for (attn, _) in params.layers.iter_mut() {
                attn.activation = Activation::Softmax;
            }
        }
        let (ep, target) = sample_episode(&cfg, &mut stream(cfg.seed, 1)).map_err(data_err)?;
        let margin = min_relu_margin(&params, &ep).map_err(data_err)?;
        if margin >= 10.0 * h {
            return Ok((cfg, params, ep, target));
        }
        if best.as_ref().is_none_or(|b| margin > b.0) {
            best = Some((margin, (cfg, params, ep, target)));
        }
    }
    let (margin, problem) = best.expect("at least one attempt");
    eprintln!("warning: closest ReLU input is {margin:e} from its kink (guard 10h = {:e})", 10.0 * h);
    Ok(problem)
}

/// Human-readable name of a parameter matrix in canonical order.
pub fn matrix_name(params: &TransformerParams, idx: usize) -> String {
    let mut i = idx;
    for (l, (attn, _)) in params.layers.iter().enumerate() {
        let block = 3 * attn.heads.len() + 2;
        if i < block {
            return if i < 3 * attn.heads.len() {
                format!("layer {l} head {} {}", i / 3, ["V", "Q", "K"][i % 3])
            } else {
                format!("layer {l} FC {}", ["W1", "W2"][i - 3 * attn.heads.len()])
            };
        }
        i -= block;
    }
    ["output W0", "output W1"].get(i).map_or_else(|| format!("matrix {idx}"), |s| s.to_string())
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(config_err("h must be positive"));
    }
    if a.h > 1e-2 {
        eprintln!("warning: h = {} exceeds 1e-2; truncation error may fail the check", a.h);
    }
    let (cfg, params, ep, target) = gradcheck_problem(a.task, a.activation, a.seed, a.h)?;
    let loss = |y: &Mat| task_loss(&cfg.task, y, &target).expect("target matches task");
    let opts = GradCheckOptions { corrupt: a.corrupt_factor, allow_coarse: true, ..GradCheckOptions::default() };
    let report = grad_check_with(&params, &ep, &loss, a.h, opts).map_err(data_err)?;
    println!("max_rel_err {}", fmt_f64(report.max_rel_err));
    if report.max_rel_err <= GRADCHECK_TOL {
        return Ok(());
    }
    let at = report.worst.map_or_else(String::new, |c| {
        format!(
            "{} [{}, {}]: analytic {} vs numeric {}",
            matrix_name(&params, c.matrix),
            c.row,
            c.col,
            report.analytic,
            report.numeric
        )
    });
    Err(CliError::GradCheck(format!("max relative error {} > {GRADCHECK_TOL} at {at}", report.max_rel_err)))
}
