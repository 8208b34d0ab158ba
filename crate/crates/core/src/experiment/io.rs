//! Flat-file formats: CSV with a one-line header, and `key = value` text.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Error;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        let message = e.to_string();
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
            _ => Error::Data { path: path.to_path_buf(), message },
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows: Result<Vec<T>, _> = r.deserialize().collect();
    let rows = rows.map_err(csv_err(path))?;
    if rows.is_empty() {
        return Err(Error::Data { path: path.to_path_buf(), message: "no rows".into() });
    }
    Ok(rows)
}

/// Numeric table with arbitrary column names.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<(), Error> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(path: &Path, text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data { path: path.to_path_buf(), message: format!("line {}: expected key = value", i + 1) })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub t_min: f64,
    pub y_mgdl: f64,
}

/// Parameters and state; the state time depends on the file (`x(−T)` for
/// ground truth, `x(0)` for posterior samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub p2: f64,
    pub p3: f64,
    pub n: f64,
    #[serde(rename = "G0")]
    pub g0: f64,
    #[serde(rename = "X0")]
    pub x0: f64,
    #[serde(rename = "I0")]
    pub i0: f64,
}

impl LatentRow {
    pub fn new(theta: [f64; 3], x: [f64; 3]) -> Self {
        Self { p2: theta[0], p3: theta[1], n: theta[2], g0: x[0], x0: x[1], i0: x[2] }
    }

    pub fn theta(&self) -> [f64; 3] {
        [self.p2, self.p3, self.n]
    }

    pub fn state(&self) -> [f64; 3] {
        [self.g0, self.x0, self.i0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub p2: f64,
    pub p3: f64,
    pub n: f64,
    #[serde(rename = "G0")]
    pub g0: f64,
    #[serde(rename = "X0")]
    pub x0: f64,
    #[serde(rename = "I0")]
    pub i0: f64,
    pub logpost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    /// Start of the interval on which the value applies.
    pub t_min: f64,
    #[serde(rename = "u_mU_per_min")]
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub t_min: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "I")]
    pub i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EkfTraceRow {
    pub t: f64,
    pub G_mean: f64,
    pub X_mean: f64,
    pub I_mean: f64,
    pub P_GG: f64,
    pub P_XX: f64,
    pub P_II: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRow {
    pub stage: String,
    pub measurements: usize,
    pub proposals: u64,
    pub accepted: u64,
    pub rate: f64,
    pub scale: f64,
}
