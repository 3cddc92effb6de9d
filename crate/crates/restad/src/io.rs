//! File formats: headerless CSV datasets, JSON checkpoints and reports,
//! JSON-lines training logs, and score-trace CSV.

use std::fs;
use std::path::{Path, PathBuf};

use restad_core::data::{RawDataset, Series};
use restad_core::model::{Checkpoint, RestadModel};
use restad_core::score::ScoreTrace;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Error, Result};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const LABEL_FILE: &str = "test_labels.csv";

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a headerless numeric matrix; returns (rows, cols, row-major values).
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = reader(path)?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(rows as u64 + 1, |p| p.line());
        let width = *cols.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} columns, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("column {}: '{cell}' is not a number", j + 1),
                )
            })?;
            values.push(v);
        }
        rows += 1;
    }
    match cols {
        Some(c) if c > 0 => Ok((rows, c, values)),
        _ => Err(parse_err(path, 1, "file is empty")),
    }
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let (_, cols, values) = read_matrix(path)?;
    if cols != 1 {
        return Err(parse_err(
            path,
            1,
            format!("labels need one column, found {cols}"),
        ));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(parse_err(
                    path,
                    i as u64 + 1,
                    format!("label {v} is not 0 or 1"),
                ))
            }
        })
        .collect()
}

/// Loads `train.csv`, `test.csv` and `test_labels.csv` from `dir`.
pub fn load_csv(dir: &Path) -> Result<RawDataset> {
    let (tp, sp, lp) = (
        dir.join(TRAIN_FILE),
        dir.join(TEST_FILE),
        dir.join(LABEL_FILE),
    );
    let (tr, td, tv) = read_matrix(&tp)?;
    let (sr, sd, sv) = read_matrix(&sp)?;
    let labels = read_labels(&lp)?;
    if td != sd {
        return Err(Error::Format {
            path: sp,
            msg: format!("{sd} features but {} has {td}", tp.display()),
        });
    }
    if labels.len() != sr {
        return Err(Error::Format {
            path: lp,
            msg: format!("{} labels for {sr} test rows", labels.len()),
        });
    }
    let name = dir.file_name().map_or_else(
        || "dataset".to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    Ok(RawDataset::new(
        name,
        Series::new(tr, td, tv)?,
        Series::new(sr, sd, sv)?,
        labels,
    )?)
}

fn write_rows(path: &Path, values: &[f64], width: usize) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 12);
    for row in values.chunks(width) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes the three-file CSV layout read by [`load_csv`].
pub fn write_dataset(dir: &Path, raw: &RawDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_rows(&dir.join(TRAIN_FILE), &raw.train.values, raw.train.dim)?;
    write_rows(&dir.join(TEST_FILE), &raw.test.values, raw.test.dim)?;
    let labels: Vec<f64> = raw.test_labels.iter().map(|&l| l as f64).collect();
    write_rows(&dir.join(LABEL_FILE), &labels, 1)
}

/// Writes through a sibling temp file and renames, so a failed write never
/// leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&s).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |sp| s[..sp.start].matches('\n').count() as u64 + 1);
        parse_err(path, line, e.message().to_string())
    })
}

pub fn save_checkpoint(path: &Path, model: &RestadModel) -> Result<()> {
    write_json(path, &model.to_checkpoint())
}

pub fn load_checkpoint(path: &Path) -> Result<RestadModel> {
    let ckpt: Checkpoint = read_json(path)?;
    Ok(RestadModel::from_checkpoint(&ckpt)?)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Columns: global_time_index, eps_r, eps_s, composite, label. `eps_s` is
/// empty for models without an RBF layer, `label` when none are given.
pub fn write_trace_csv(path: &Path, trace: &ScoreTrace, labels: Option<&[u8]>) -> Result<()> {
    let mut out = String::from("global_time_index,eps_r,eps_s,composite,label\n");
    for t in 0..trace.len() {
        let s = trace
            .eps_s
            .as_ref()
            .map_or(String::new(), |s| s[t].to_string());
        let l = labels.map_or(String::new(), |l| l[t].to_string());
        out.push_str(&format!(
            "{t},{},{s},{},{l}\n",
            trace.eps_r[t], trace.composite[t]
        ));
    }
    write_atomic(path, out.as_bytes())
}
