//! TOML problem files.
//!
//! Matrices are arrays of rows. `q` and `r` also accept `"identity"`, and `p`
//! accepts `"dare"` (the default) for the Riccati solution. Box bounds are
//! either one number applied to every component or a full vector. With
//! `sampling_time` set, `a` and `b` are read as a continuous-time model and
//! discretized by zero-order hold.

use std::path::{Path, PathBuf};

use etmpc_core::nalgebra::{DMatrix, DVector};
use etmpc_core::problem::{discretize_zoh, MpcProblem};
use serde::Deserialize;
use thiserror::Error;

/// Directory searched for `<name>.toml` before the bundled problems.
pub const PROBLEM_DIR_ENV: &str = "ETMPC_PROBLEM_DIR";

const BUNDLED: &[(&str, &str)] = &[
    ("four_mass_oscillator", include_str!("../problems/four_mass_oscillator.toml")),
    ("double_integrator", include_str!("../problems/double_integrator.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

#[derive(Debug, Error)]
pub enum ProblemFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("no problem file or bundled problem named {0:?} (bundled: four_mass_oscillator, double_integrator)")]
    NotFound(String),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ProblemFileError {
    ProblemFileError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Keyword(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BoundSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    #[serde(default)]
    name: Option<String>,
    horizon: usize,
    #[serde(default)]
    sampling_time: Option<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: MatrixSpec,
    r: MatrixSpec,
    #[serde(default)]
    p: Option<MatrixSpec>,
    x_lo: BoundSpec,
    x_hi: BoundSpec,
    u_lo: BoundSpec,
    u_hi: BoundSpec,
    #[serde(default)]
    t_lo: Option<BoundSpec>,
    #[serde(default)]
    t_hi: Option<BoundSpec>,
}

/// A loaded problem and where it came from.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub name: String,
    pub problem: MpcProblem,
    /// Set when the file gave a continuous-time model.
    pub sampling_time: Option<f64>,
}

fn rows_to_matrix(field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ProblemFileError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(invalid(field, "matrix is empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(invalid(field, format!("row {i} has {} entries, expected {ncols}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `None` stands for the `"dare"` keyword, accepted only when `allow_dare`.
fn square(field: &'static str, spec: &MatrixSpec, size: usize, allow_dare: bool) -> Result<Option<DMatrix<f64>>, ProblemFileError> {
    match spec {
        MatrixSpec::Keyword(k) if k == "identity" => Ok(Some(DMatrix::identity(size, size))),
        MatrixSpec::Keyword(k) if k == "dare" && allow_dare => Ok(None),
        MatrixSpec::Keyword(k) => Err(invalid(field, format!("unknown keyword {k:?}"))),
        MatrixSpec::Rows(rows) => {
            let m = rows_to_matrix(field, rows)?;
            if m.shape() != (size, size) {
                return Err(invalid(field, format!("expected {size}x{size}, got {}x{}", m.nrows(), m.ncols())));
            }
            Ok(Some(m))
        }
    }
}

fn weight(field: &'static str, spec: &MatrixSpec, size: usize) -> Result<DMatrix<f64>, ProblemFileError> {
    square(field, spec, size, false).map(|m| m.expect("dare is rejected for weights"))
}

fn bound(field: &'static str, spec: &BoundSpec, len: usize) -> Result<DVector<f64>, ProblemFileError> {
    match spec {
        BoundSpec::Scalar(v) => Ok(DVector::from_element(len, *v)),
        BoundSpec::Vector(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        BoundSpec::Vector(v) => Err(invalid(field, format!("expected {len} entries, got {}", v.len()))),
    }
}

/// Parses problem text. The result still has to pass
/// [`etmpc_core::problem::validate`]; this only checks the file's shape.
pub fn parse_problem(text: &str, default_name: &str) -> Result<ProblemFile, ProblemFileError> {
    let raw: RawProblem = toml::from_str(text)?;
    let a = rows_to_matrix("a", &raw.a)?;
    let b = rows_to_matrix("b", &raw.b)?;
    let n = a.nrows();
    if !a.is_square() {
        return Err(invalid("a", "must be square"));
    }
    if b.nrows() != n {
        return Err(invalid("b", format!("expected {n} rows, got {}", b.nrows())));
    }
    let m = b.ncols();
    let (a, b) = match raw.sampling_time {
        Some(ts) => discretize_zoh(&a, &b, ts).map_err(|e| invalid("sampling_time", e.to_string()))?,
        None => (a, b),
    };
    let q = weight("q", &raw.q, n)?;
    let r = weight("r", &raw.r, m)?;
    let p = match &raw.p {
        Some(spec) => square("p", spec, n, true)?,
        None => None,
    };
    let problem = MpcProblem {
        a,
        b,
        q,
        r,
        p,
        horizon: raw.horizon,
        x_lo: bound("x_lo", &raw.x_lo, n)?,
        x_hi: bound("x_hi", &raw.x_hi, n)?,
        u_lo: bound("u_lo", &raw.u_lo, m)?,
        u_hi: bound("u_hi", &raw.u_hi, m)?,
        t_lo: raw.t_lo.as_ref().map(|s| bound("t_lo", s, n)).transpose()?,
        t_hi: raw.t_hi.as_ref().map(|s| bound("t_hi", s, n)).transpose()?,
    };
    Ok(ProblemFile {
        name: raw.name.unwrap_or_else(|| default_name.to_string()),
        problem,
        sampling_time: raw.sampling_time,
    })
}

pub fn load_problem_file(path: &Path) -> Result<ProblemFile, ProblemFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProblemFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("problem");
    parse_problem(&text, stem)
}

pub fn bundled_problem(name: &str) -> Option<ProblemFile> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_problem(text, n).expect("bundled problem files parse"))
}

/// Resolves `spec` as a file path, then as `<name>.toml` in the directory
/// named by `ETMPC_PROBLEM_DIR`, then as a bundled problem.
pub fn resolve_problem(spec: &str) -> Result<ProblemFile, ProblemFileError> {
    let path = Path::new(spec);
    if path.is_file() {
        return load_problem_file(path);
    }
    if let Some(dir) = std::env::var_os(PROBLEM_DIR_ENV) {
        let candidate = Path::new(&dir).join(format!("{spec}.toml"));
        if candidate.is_file() {
            return load_problem_file(&candidate);
        }
    }
    bundled_problem(spec).ok_or_else(|| ProblemFileError::NotFound(spec.to_string()))
}
