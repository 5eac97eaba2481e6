//! Dataset files.
//!
//! * CSV: UTF-8 with a header row. Each row is one sample; every column is a
//!   feature except an optional `label` column holding integer class indices.
//!   Datasets are stored feature-major in memory (`d × n`), so rows become
//!   columns on ingest.
//! * WBDS (binary): magic `WBDS`, `u16` version 1, `u32` d, `u32` n, then
//!   `d·n` little-endian `f64` in column-major order (one sample at a time).
//!   Labels live in a companion `.wblb` file: magic `WBLB`, `u32` k, `u32` n,
//!   then `k·n` little-endian `f64`, column-major.
//! * WBCD (compressed whitened data): magic `WBCD`, `u16` version 1, `u32` d,
//!   `u32` n, `f64` condition number of the leading block, `u8` permutation
//!   flag, then `n` `u32` column indices when the flag is 1, then the `d·(n−d)`
//!   payload as little-endian `f64`, column-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use whitebench_core::data_model::{Dataset, LabelEncoding, LabelSet, SplitTag};
use whitebench_core::info_props::CompressedDataset;

use crate::error::{io_err, HarnessError, Result};

const DATA_MAGIC: &[u8; 4] = b"WBDS";
const LABEL_MAGIC: &[u8; 4] = b"WBLB";
const COMPRESSED_MAGIC: &[u8; 4] = b"WBCD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Wbds,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Format::Csv),
            Some("wbds") => Ok(Format::Wbds),
            other => Err(HarnessError::UnsupportedFormat {
                path: path.to_path_buf(),
                msg: format!(
                    "extension {:?} is not one of csv, wbds (numpy, pickle and other array dumps are not read)",
                    other.unwrap_or("")
                ),
            }),
        }
    }
}

fn parse_err(path: &Path, location: impl Into<String>, msg: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        msg: msg.into(),
    }
}

/// Companion label path: `data.wbds` → `data.wblb`.
pub fn label_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("wblb")
}

pub fn ingest(path: &Path, format: Format, split: SplitTag) -> Result<(Dataset, Option<LabelSet>)> {
    match format {
        Format::Csv => ingest_csv(path, split),
        Format::Wbds => {
            let values = read_matrix(path, DATA_MAGIC, true)?;
            let ds = Dataset::with_id(values, split, path.display().to_string())?;
            let lp = label_path(path);
            let labels = if lp.exists() {
                let t = read_matrix(&lp, LABEL_MAGIC, false)?;
                let encoding = if is_one_hot(&t) {
                    LabelEncoding::OneHot
                } else {
                    LabelEncoding::RealValued
                };
                Some(LabelSet::new(t, encoding)?)
            } else {
                None
            };
            Ok((ds, labels))
        }
    }
}

/// Reads any dataset file, choosing the format from the extension.
pub fn ingest_path(path: &Path, split: SplitTag) -> Result<(Dataset, Option<LabelSet>)> {
    ingest(path, Format::from_path(path)?, split)
}

fn is_one_hot(t: &DMatrix<f64>) -> bool {
    t.nrows() >= 2
        && t.column_iter().all(|c| {
            c.iter().all(|&v| v == 0.0 || v == 1.0) && c.iter().filter(|&&v| v == 1.0).count() == 1
        })
}

fn ingest_csv(path: &Path, split: SplitTag) -> Result<(Dataset, Option<LabelSet>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, "open", e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse_err(path, "line 1", e.to_string()))?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let d = headers.len() - usize::from(label_col.is_some());
    if d == 0 {
        return Err(parse_err(path, "line 1", "no feature columns"));
    }
    let mut samples = Vec::new();
    let mut classes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, format!("line {line}"), e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(
                path,
                format!("line {line}"),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let mut row = Vec::with_capacity(d);
        for (j, field) in rec.iter().enumerate() {
            if Some(j) == label_col {
                let c: usize = field
                    .parse()
                    .map_err(|_| parse_err(path, format!("line {line}, column {}", j + 1), format!("bad label {field:?}")))?;
                classes.push(c);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                parse_err(path, format!("line {line}, column {}", j + 1), format!("not a number: {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("line {line}, column {}", j + 1), "non-finite value"));
            }
            row.push(v);
        }
        samples.push(row);
    }
    if samples.is_empty() {
        return Err(parse_err(path, "line 2", "no samples"));
    }
    let ds = Dataset::from_samples(&samples, split)?.renamed(path.display().to_string());
    let labels = match label_col {
        Some(_) => {
            let k = classes.iter().copied().max().unwrap_or(0) + 1;
            Some(LabelSet::one_hot(&classes, k.max(2))?)
        }
        None => None,
    };
    Ok((ds, labels))
}

fn read_matrix(path: &Path, magic: &[u8; 4], versioned: bool) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = if versioned { 14 } else { 12 };
    if bytes.len() < header {
        return Err(parse_err(path, "offset 0", format!("file shorter than the {header}-byte header")));
    }
    if &bytes[..4] != magic {
        return Err(parse_err(
            path,
            "offset 0",
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), String::from_utf8_lossy(magic)),
        ));
    }
    let mut off = 4;
    if versioned {
        let v = u16::from_le_bytes([bytes[4], bytes[5]]);
        if v != VERSION {
            return Err(parse_err(path, "offset 4", format!("unsupported version {v}")));
        }
        off = 6;
    }
    let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().expect("4 bytes")) as usize;
    off += 8;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| parse_err(path, format!("offset {}", off - 8), "dimensions overflow"))?;
    if bytes.len() - off != expected {
        return Err(parse_err(
            path,
            format!("offset {off}"),
            format!("expected {expected} payload bytes for {rows}×{cols}, found {}", bytes.len() - off),
        ));
    }
    let mut vals = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[off..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_err(path, format!("offset {}", off + 8 * i), "non-finite value"));
        }
        vals.push(v);
    }
    Ok(DMatrix::from_vec(rows, cols, vals))
}

fn encode_matrix(m: &DMatrix<f64>, magic: &[u8; 4], versioned: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 8 * m.len());
    out.extend_from_slice(magic);
    if versioned {
        out.extend_from_slice(&VERSION.to_le_bytes());
    }
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes any matrix in WBDS layout (used for datasets and for `F`/`K` outputs).
pub fn write_matrix_wbds(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_bytes(path, &encode_matrix(m, DATA_MAGIC, true))
}

pub fn read_matrix_wbds(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix(path, DATA_MAGIC, true)
}

/// Writes a matrix as headerless CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| format!("{v:?}")))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    write_bytes(path, &bytes)
}

/// Writes a matrix in the format implied by the extension (`.csv` or `.wbds`).
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    match Format::from_path(path)? {
        Format::Csv => write_matrix_csv(path, m),
        Format::Wbds => write_matrix_wbds(path, m),
    }
}

pub fn export(path: &Path, format: Format, x: &Dataset, labels: Option<&LabelSet>) -> Result<()> {
    match format {
        Format::Wbds => {
            write_matrix_wbds(path, x.values())?;
            if let Some(l) = labels {
                write_bytes(&label_path(path), &encode_matrix(l.targets(), LABEL_MAGIC, false))?;
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> = (0..x.feature_dim()).map(|i| format!("x{i}")).collect();
            if labels.is_some() {
                header.push("label".into());
            }
            w.write_record(&header)?;
            let classes = labels.map(|l| l.classes());
            for j in 0..x.sample_count() {
                let mut rec: Vec<String> = x.values().column(j).iter().map(|v| format!("{v:?}")).collect();
                if let Some(c) = &classes {
                    rec.push(c[j].to_string());
                }
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
            write_bytes(path, &bytes)
        }
    }
}

pub fn export_path(path: &Path, x: &Dataset, labels: Option<&LabelSet>) -> Result<()> {
    export(path, Format::from_path(path)?, x, labels)
}

pub fn write_compressed(path: &Path, c: &CompressedDataset) -> Result<()> {
    let mut out = Vec::with_capacity(27 + 4 * c.n + 8 * c.payload.len());
    out.extend_from_slice(COMPRESSED_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.d as u32).to_le_bytes());
    out.extend_from_slice(&(c.n as u32).to_le_bytes());
    out.extend_from_slice(&c.condition_number.to_le_bytes());
    match &c.permutation {
        Some(p) => {
            out.push(1);
            for &i in p {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for v in c.payload.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_compressed(path: &Path) -> Result<CompressedDataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let short = |off: usize| parse_err(path, format!("offset {off}"), "unexpected end of file");
    let take = |off: usize, len: usize| bytes.get(off..off + len).ok_or_else(|| short(off));
    if take(0, 4)? != COMPRESSED_MAGIC {
        return Err(parse_err(path, "offset 0", "bad magic, expected \"WBCD\""));
    }
    let v = u16::from_le_bytes(take(4, 2)?.try_into().expect("2 bytes"));
    if v != VERSION {
        return Err(parse_err(path, "offset 4", format!("unsupported version {v}")));
    }
    let d = u32::from_le_bytes(take(6, 4)?.try_into().expect("4 bytes")) as usize;
    let n = u32::from_le_bytes(take(10, 4)?.try_into().expect("4 bytes")) as usize;
    let condition_number = f64::from_le_bytes(take(14, 8)?.try_into().expect("8 bytes"));
    if n < d {
        return Err(parse_err(path, "offset 6", format!("n = {n} < d = {d}")));
    }
    let mut off = 23;
    let permutation = match take(22, 1)?[0] {
        0 => None,
        1 => {
            let mut p = Vec::with_capacity(n);
            for _ in 0..n {
                let i = u32::from_le_bytes(take(off, 4)?.try_into().expect("4 bytes")) as usize;
                if i >= n {
                    return Err(parse_err(path, format!("offset {off}"), format!("column index {i} out of range")));
                }
                p.push(i);
                off += 4;
            }
            Some(p)
        }
        f => return Err(parse_err(path, "offset 22", format!("bad permutation flag {f}"))),
    };
    let m = n - d;
    if bytes.len() - off.min(bytes.len()) != 8 * d * m {
        return Err(parse_err(
            path,
            format!("offset {off}"),
            format!("expected {} payload bytes, found {}", 8 * d * m, bytes.len().saturating_sub(off)),
        ));
    }
    let vals: Vec<f64> = bytes[off..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(CompressedDataset {
        payload: DMatrix::from_vec(d, m, vals),
        d,
        n,
        permutation,
        condition_number,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn flush_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).map_err(io_err("<stdout>"))
}
