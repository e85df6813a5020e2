//! Reading and writing run artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written and a later stage rebuilt from
//! disk behaves exactly like the in-memory pipeline.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use pis_core::nominal::{PolyFunction, ValueFunction};
use pis_core::polybasis::{EvenPolyBasis, MultiIndex};
use pis_core::simulate::Trajectory;
use pis_core::{DMatrix, DVector};

use crate::error::{CliError, Result};

pub const P_MATRIX: &str = "p_matrix.csv";
pub const VALUE_COEFFS: &str = "value_coefficients.csv";

/// `x1^2*x3^2` style label of a monomial; `1` for the constant.
pub fn term_label(term: &MultiIndex) -> String {
    let parts: Vec<String> = term
        .exponents()
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0)
        .map(|(i, e)| if *e == 1 { format!("x{}", i + 1) } else { format!("x{}^{e}", i + 1) })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

pub fn labels(basis: &EvenPolyBasis) -> Vec<String> {
    basis.terms().iter().map(term_label).collect()
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_with<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| io_err(path, e))?;
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_with(path, |w| traj.write_csv(w))
}

/// `x1,...,xn`, one point per row.
pub fn write_points(path: &Path, points: &[DVector<f64>]) -> Result<()> {
    let n = points.first().map_or(0, |x| x.len());
    write_with(path, |w| {
        let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for x in points {
            writeln!(w, "{}", join(x.iter()))?;
        }
        Ok(())
    })
}

/// `term,<column>` with one row per basis term.
pub fn write_coefficients(path: &Path, column: &str, basis: &EvenPolyBasis, v: &DVector<f64>) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "term,{column}")?;
        for (label, c) in labels(basis).iter().zip(v.iter()) {
            writeln!(w, "{label},{c}")?;
        }
        Ok(())
    })
}

pub fn read_coefficients(path: &Path, basis: &EvenPolyBasis) -> Result<DVector<f64>> {
    let rows = read_rows(path)?;
    let expected = labels(basis);
    if rows.len() != expected.len() {
        return Err(malformed(path, format!("{} rows for a {}-term basis", rows.len(), expected.len())));
    }
    let mut v = DVector::zeros(expected.len());
    for (k, (row, label)) in rows.iter().zip(&expected).enumerate() {
        if row.len() != 2 || row[0] != *label {
            return Err(malformed(path, format!("row {} should be `{label},<value>`", k + 2)));
        }
        v[k] = parse_f64(path, &row[1])?;
    }
    Ok(v)
}

/// The shaping map with rows labelled by `h` terms and columns by `mbar` terms.
pub fn write_map(path: &Path, basis_h: &EvenPolyBasis, basis_m: &EvenPolyBasis, map: &DMatrix<f64>) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "term,{}", labels(basis_m).join(","))?;
        for (i, label) in labels(basis_h).iter().enumerate() {
            writeln!(w, "{label},{}", join(map.row(i).iter()))?;
        }
        Ok(())
    })
}

pub fn read_map(path: &Path, basis_h: &EvenPolyBasis, basis_m: &EvenPolyBasis) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(path, "empty file".into()))?;
    let mut expected = vec!["term".to_string()];
    expected.extend(labels(basis_m));
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(malformed(path, "column terms do not match the configured mbar basis".into()));
    }
    let h_labels = labels(basis_h);
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    if rows.len() != h_labels.len() {
        return Err(malformed(path, format!("{} rows for a {}-term h basis", rows.len(), h_labels.len())));
    }
    let mut map = DMatrix::zeros(h_labels.len(), basis_m.len());
    for (i, (line, label)) in rows.iter().zip(&h_labels).enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != basis_m.len() + 1 || fields[0] != label {
            return Err(malformed(path, format!("row {} should start with `{label}` and hold {} values", i + 2, basis_m.len())));
        }
        for (j, f) in fields[1..].iter().enumerate() {
            map[(i, j)] = parse_f64(path, f)?;
        }
    }
    Ok(map)
}

/// Writes the value function into `dir`, removing a stale file of the other kind.
pub fn write_value_function(dir: &Path, value: &ValueFunction) -> Result<()> {
    let (keep, stale) = match value {
        ValueFunction::Quadratic { p } => {
            let n = p.nrows();
            write_with(&dir.join(P_MATRIX), |w| {
                let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
                writeln!(w, "{}", header.join(","))?;
                for i in 0..n {
                    writeln!(w, "{}", join(p.row(i).iter()))?;
                }
                Ok(())
            })?;
            (P_MATRIX, VALUE_COEFFS)
        }
        ValueFunction::Polynomial(poly) => {
            write_coefficients(&dir.join(VALUE_COEFFS), "coeff", &poly.basis, &poly.coeffs)?;
            (VALUE_COEFFS, P_MATRIX)
        }
    };
    let stale = dir.join(stale);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
    }
    log::debug!("value function written to {}", dir.join(keep).display());
    Ok(())
}

/// Reads whichever value-function file `dir` holds; `basis` is the expected
/// polynomial basis.
pub fn read_value_function(dir: &Path, n: usize, basis: &EvenPolyBasis) -> Result<ValueFunction> {
    let p_path = dir.join(P_MATRIX);
    let c_path = dir.join(VALUE_COEFFS);
    if p_path.exists() {
        let rows = read_rows(&p_path)?;
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(malformed(&p_path, format!("expected {n} rows of {n} values")));
        }
        let mut p = DMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for (j, f) in row.iter().enumerate() {
                p[(i, j)] = parse_f64(&p_path, f)?;
            }
        }
        Ok(ValueFunction::Quadratic { p })
    } else if c_path.exists() {
        let coeffs = read_coefficients(&c_path, basis)?;
        Ok(ValueFunction::Polynomial(PolyFunction::new(basis.clone(), coeffs)?))
    } else {
        Err(CliError::MissingArtifact(c_path))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Data rows (header skipped) split on commas.
fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| malformed(path, format!("`{s}` is not a number")))
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn malformed(path: &Path, message: String) -> CliError {
    CliError::Artifact {
        path: path.to_path_buf(),
        message,
    }
}

pub fn io_err(path: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::MissingArtifact(PathBuf::from(path))
    } else {
        CliError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}
