//! Synthetic generators and CSV ingestion.
//!
//! Matrices are stored with covariates as rows and samples as columns (d x N).

use crate::linalg::{norm, sample_unit_sphere, Mat, Vector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },
    #[error("ragged rows: line {line} has {got} fields, expected {expected}")]
    RaggedRows { line: usize, expected: usize, got: usize },
    #[error("no numeric rows found")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Two-cluster Gaussian mixture sample.
#[derive(Debug, Clone)]
pub struct GmmInstance {
    pub x: Mat,
    pub z: Vec<u8>,
    pub mu0: Vector,
    pub mu1: Vector,
    pub sigma2: f64,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// X = L Z with L (d x d) and Z (d x N) standard normal.
pub fn gen_synthetic_pca<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Mat {
    let l = gaussian_matrix(d, d, rng);
    let z = gaussian_matrix(d, n, rng);
    l.dot(&z)
}

/// Same as [`gen_synthetic_pca`] with the mixing matrix fixed to the identity.
pub fn gen_synthetic_pca_identity<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Mat {
    gaussian_matrix(d, n, rng)
}

/// Balanced two-cluster mixture. The centre is standard normal and the
/// direction between the means is uniform on the sphere.
pub fn gen_gmm<R: Rng + ?Sized>(d: usize, n: usize, sep: f64, sigma2: f64, rng: &mut R) -> GmmInstance {
    let c: Vector = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let u = sample_unit_sphere(d, rng);
    let mu0 = &c - &(&u * (sep / 2.0));
    let mu1 = &c + &(&u * (sep / 2.0));
    let n0 = n.div_ceil(2);
    let mut z: Vec<u8> = (0..n).map(|i| u8::from(i >= n0)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        z.swap(i, j);
    }
    let sigma = sigma2.sqrt();
    let mut x = Mat::zeros((d, n));
    for (i, &zi) in z.iter().enumerate() {
        let mu = if zi == 0 { &mu0 } else { &mu1 };
        for r in 0..d {
            x[[r, i]] = mu[r] + sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    GmmInstance { x, z, mu0, mu1, sigma2 }
}

/// Separation actually realised by an instance.
pub fn separation(inst: &GmmInstance) -> f64 {
    norm((&inst.mu1 - &inst.mu0).view())
}

/// Read a numeric CSV. A first row that fails to parse as numbers is treated
/// as a header. With `transpose` the file is read as samples-as-rows.
pub fn load_csv_matrix(path: impl AsRef<Path>, transpose: bool) -> Result<Mat, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv_matrix(&text, transpose)
}

pub fn parse_csv_matrix(text: &str, transpose: bool) -> Result<Mat, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if idx == 0 && parsed.iter().any(Result::is_err) {
            continue;
        }
        let expected = *width.get_or_insert(parsed.len());
        if parsed.len() != expected {
            return Err(DataError::RaggedRows { line, expected, got: parsed.len() });
        }
        let mut row = Vec::with_capacity(expected);
        for (col, (field, value)) in rec.iter().zip(parsed).enumerate() {
            match value {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(DataError::ParseError {
                        row: line,
                        col: col + 1,
                        msg: format!("not a finite number: {field:?}"),
                    })
                }
            }
        }
        rows.push(row);
    }
    let cols = width.ok_or(DataError::Empty)?;
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let m = Array2::from_shape_vec((flat.len() / cols, cols), flat).expect("rectangular by construction");
    Ok(if transpose { m.reversed_axes().as_standard_layout().to_owned() } else { m })
}

/// Write a matrix as CSV with 17 significant digits, no header.
pub fn write_csv_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Float formatting used in every CSV the crate writes: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
