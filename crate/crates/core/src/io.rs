//! Flat-file persistence: observation CSVs and atomic writes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::simulate::{ObservationSet, SimulateError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed observation file: {0}")]
    Format(String),
    #[error(transparent)]
    Observations(#[from] SimulateError),
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn columns(stem: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![stem.to_string()]
    } else {
        (1..=dim).map(|i| format!("{stem}{i}")).collect()
    }
}

/// CSV with columns `n,t,x[,x2..]` and, when present, `z[,z2..]`.
pub fn observations_to_csv(obs: &ObservationSet) -> Result<Vec<u8>, IoError> {
    let dim = obs.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend(columns("x", dim));
    if obs.z().is_some() {
        header.extend(columns("z", dim));
    }
    w.write_record(&header)?;
    for n in 0..obs.len() {
        let mut rec = vec![n.to_string(), (n as f64 * obs.delta()).to_string()];
        rec.extend(obs.row(n).iter().map(f64::to_string));
        if let Some(z) = obs.z() {
            rec.extend(z[n * dim..(n + 1) * dim].iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| IoError::Io(e.into_error()))
}

pub fn write_observations(obs: &ObservationSet, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &observations_to_csv(obs)?)
}

/// Reads a file written by [`write_observations`]. The spacing is taken
/// from the `t` column, which must be uniform.
pub fn read_observations(path: &Path) -> Result<ObservationSet, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let x_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with('x')).map(|(i, _)| i).collect();
    let z_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with('z')).map(|(i, _)| i).collect();
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| IoError::Format("missing column t".into()))?;
    if x_cols.is_empty() || (!z_cols.is_empty() && z_cols.len() != x_cols.len()) {
        return Err(IoError::Format("need x columns and matching z columns".into()));
    }
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| IoError::Format(format!("not a number: {s}")));
    let (mut t, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        t.push(parse(&rec[t_col])?);
        for &c in &x_cols {
            x.push(parse(&rec[c])?);
        }
        for &c in &z_cols {
            z.push(parse(&rec[c])?);
        }
    }
    if t.len() < 2 {
        return Err(IoError::Format("need at least two rows".into()));
    }
    let delta = t[1] - t[0];
    let uniform = t.windows(2).all(|w| ((w[1] - w[0]) - delta).abs() <= 1e-9 * delta.abs().max(1.0));
    if !uniform {
        return Err(IoError::Format("observation times are not uniformly spaced".into()));
    }
    let z = (!z_cols.is_empty()).then_some(z);
    Ok(ObservationSet::new(x, x_cols.len(), delta, z)?)
}
