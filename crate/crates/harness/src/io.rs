//! CSV and JSON formats used by the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use pmest::{BandResult, Dataset, FitResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {msg}")]
    Row {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] pmest::Error),
}

/// Reads `x1,...,xd,y` with a header line; the last column is the response.
pub fn read_data(path: &Path) -> Result<Dataset, IoError> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::Open {
            path: name.clone(),
            source: e.into(),
        })?;
    let ncol = rdr
        .headers()
        .map_err(|e| IoError::Format {
            path: name.clone(),
            msg: e.to_string(),
        })?
        .len();
    if ncol < 2 {
        return Err(IoError::Format {
            path: name,
            msg: "need at least one covariate column and a response".into(),
        });
    }
    let d = ncol - 1;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let rec = rec.map_err(|e| IoError::Row {
            path: name.clone(),
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != ncol {
            return Err(IoError::Row {
                path: name,
                row,
                msg: format!("expected {ncol} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| IoError::Row {
                    path: name.clone(),
                    row,
                    msg: format!("non-numeric value {field:?}"),
                })?;
            if j < d {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(IoError::Format {
            path: name,
            msg: "no data rows".into(),
        });
    }
    Ok(Dataset::new(d, x, y)?)
}

pub fn write_data(path: &Path, data: &Dataset) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    write_record(&mut w, path, &header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.row(i).iter().map(f64::to_string).collect();
        rec.push(data.y()[i].to_string());
        write_record(&mut w, path, &rec)?;
    }
    flush(w, path)
}

/// Fitted model together with the data it was fitted on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    pub schema_version: u32,
    pub fit: FitResult,
    pub data: Dataset,
}

pub fn write_fit(path: &Path, fit: &FitResult, data: &Dataset) -> Result<(), IoError> {
    let file = FitFile {
        schema_version: FIT_SCHEMA_VERSION,
        fit: fit.clone(),
        data: data.clone(),
    };
    write_json(path, &file)
}

/// Loads a fit file and reattaches the design so inference can run on it.
pub fn read_fit(path: &Path) -> Result<(FitResult, Dataset), IoError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| IoError::Open {
        path: name.clone(),
        source: e,
    })?;
    let file: FitFile = serde_json::from_str(&text).map_err(|e| IoError::Format {
        path: name.clone(),
        msg: e.to_string(),
    })?;
    if file.schema_version != FIT_SCHEMA_VERSION {
        return Err(IoError::Format {
            path: name,
            msg: format!("unsupported schema version {}", file.schema_version),
        });
    }
    let mut fit = file.fit;
    fit.attach(&file.data)?;
    Ok((fit, file.data))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let name = path.display().to_string();
    let f = File::create(path).map_err(|e| IoError::Open {
        path: name.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Format {
        path: name.clone(),
        msg: e.to_string(),
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| IoError::Open {
            path: name,
            source: e,
        })
}

/// One row per grid point: `x1..xd,q,center,lo,hi,omega`.
pub fn write_band(path: &Path, band: &BandResult) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let d = band.grid.x_points.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.extend(["q", "center", "lo", "hi", "omega"].map(String::from));
    write_record(&mut w, path, &header)?;
    for s in 0..band.grid.len() {
        let (xi, qj) = band.grid.point(s);
        let mut rec: Vec<String> = band.grid.x_points[xi].iter().map(f64::to_string).collect();
        rec.push(band.grid.q_points[qj].to_string());
        for v in [band.center[s], band.lo[s], band.hi[s], band.omega[s]] {
            rec.push(v.to_string());
        }
        write_record(&mut w, path, &rec)?;
    }
    flush(w, path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(|e| IoError::Open {
        path: path.display().to_string(),
        source: e.into(),
    })
}

fn write_record(w: &mut csv::Writer<File>, path: &Path, rec: &[String]) -> Result<(), IoError> {
    w.write_record(rec).map_err(|e| IoError::Open {
        path: path.display().to_string(),
        source: e.into(),
    })
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<(), IoError> {
    w.flush().map_err(|e| IoError::Open {
        path: path.display().to_string(),
        source: e,
    })
}
