//! CSV formats for dictionaries, codes and signals, and atomic file writes.
//!
//! Floats are written with 17 significant digits (`{:.16e}`) so that a
//! write/read round trip is exact.
//!
//! * dictionary: optional header line `# local_dictionary n=<n> m=<m>`, then
//!   n rows of m comma-separated values;
//! * code: header `shift,filter,value`, one row per non-zero;
//! * signal: header `value`, one sample per row.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::conv_dict::{Atom, ConvOperator, GlobalCode, LocalDictionary};
use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn reader(text: &str, has_headers: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::parse(line, 0, e.to_string())
}

fn parse_field(record: &csv::StringRecord, k: usize) -> Result<f64> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record
        .get(k)
        .ok_or_else(|| Error::parse(line, k + 1, "missing field"))?;
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::parse(line, k + 1, format!("cannot parse {raw:?} as a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, k + 1, "value is not finite"));
    }
    Ok(v)
}

fn parse_index(record: &csv::StringRecord, k: usize) -> Result<usize> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record
        .get(k)
        .ok_or_else(|| Error::parse(line, k + 1, "missing field"))?;
    raw.parse()
        .map_err(|_| Error::parse(line, k + 1, format!("cannot parse {raw:?} as an index")))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn dictionary_to_csv(local: &LocalDictionary) -> String {
    let (n, m) = (local.n(), local.m());
    let mut out = format!("# local_dictionary n={n} m={m}\n");
    for r in 0..n {
        let row: Vec<String> = (0..m).map(|j| fmt_f64(local.atoms()[(r, j)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn parse_header(text: &str) -> Result<Option<(usize, usize)>> {
    let Some(first) = text.lines().next() else {
        return Ok(None);
    };
    let Some(rest) = first.trim().strip_prefix("# local_dictionary") else {
        return Ok(None);
    };
    let mut n = None;
    let mut m = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("n", v)) => n = v.parse().ok(),
            Some(("m", v)) => m = v.parse().ok(),
            _ => return Err(Error::parse(1, 0, format!("unexpected header token {tok:?}"))),
        }
    }
    match (n, m) {
        (Some(n), Some(m)) => Ok(Some((n, m))),
        _ => Err(Error::parse(1, 0, "header must give n=<n> m=<m>")),
    }
}

/// Parses a dictionary and normalizes its columns.
pub fn dictionary_from_csv(text: &str) -> Result<LocalDictionary> {
    let header = parse_header(text)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for rec in reader(text, false).records() {
        let rec = rec.map_err(csv_error)?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::parse(
                    record_line(&rec),
                    0,
                    format!("row has {} fields, expected {w}", rec.len()),
                ))
            }
            _ => {}
        }
        rows.push((0..rec.len()).map(|k| parse_field(&rec, k)).collect::<Result<_>>()?);
    }
    let n = rows.len();
    let m = width.unwrap_or(0);
    if n == 0 || m == 0 {
        return Err(Error::parse(1, 0, "dictionary file has no rows"));
    }
    if let Some((hn, hm)) = header {
        if (hn, hm) != (n, m) {
            return Err(Error::parse(
                1,
                0,
                format!("header says {hn}x{hm} but the file holds {n}x{m}"),
            ));
        }
    }
    LocalDictionary::new(DMatrix::from_fn(n, m, |r, j| rows[r][j]))
}

pub fn code_to_csv(code: &GlobalCode, op: &ConvOperator) -> String {
    let mut out = String::from("shift,filter,value\n");
    for (c, v) in code.iter() {
        let a = op.atom_of(c);
        let _ = writeln!(out, "{},{},{}", a.shift, a.filter, fmt_f64(v));
    }
    out
}

/// Parses a code file against an operator. An empty file is the zero code.
pub fn code_from_csv(text: &str, op: &ConvOperator) -> Result<GlobalCode> {
    let mut code = GlobalCode::zeros(op.code_len());
    if text.trim().is_empty() {
        return Ok(code);
    }
    let mut rdr = reader(text, true);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["shift", "filter", "value"] {
        return Err(Error::parse(1, 0, "code header must be shift,filter,value"));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            return Err(Error::parse(
                line,
                0,
                format!("row has {} fields, expected 3", rec.len()),
            ));
        }
        let shift = parse_index(&rec, 0)?;
        let filter = parse_index(&rec, 1)?;
        let value = parse_field(&rec, 2)?;
        if shift >= op.signal_len() {
            return Err(Error::parse(
                line,
                1,
                format!("shift {shift} out of range 0..{}", op.signal_len()),
            ));
        }
        if filter >= op.filters() {
            return Err(Error::parse(
                line,
                2,
                format!("filter {filter} out of range 0..{}", op.filters()),
            ));
        }
        let c = op.column(Atom { shift, filter });
        if code.get(c) != 0.0 {
            return Err(Error::parse(
                line,
                0,
                format!("duplicate entry for shift {shift}, filter {filter}"),
            ));
        }
        code.set(c, value)?;
    }
    Ok(code)
}

pub fn signal_to_csv(signal: &[f64]) -> String {
    let mut out = String::from("value\n");
    for v in signal {
        let _ = writeln!(out, "{}", fmt_f64(*v));
    }
    out
}

/// Parses a one-column signal; the `value` header is optional.
pub fn signal_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, rec) in reader(text, false).records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        if k == 0 && rec.get(0) == Some("value") {
            continue;
        }
        if rec.len() != 1 {
            return Err(Error::parse(
                record_line(&rec),
                0,
                format!("row has {} fields, expected 1", rec.len()),
            ));
        }
        out.push(parse_field(&rec, 0)?);
    }
    Ok(out)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<LocalDictionary> {
    dictionary_from_csv(&std::fs::read_to_string(path)?)
}

pub fn load_signal(path: &Path) -> Result<Vec<f64>> {
    signal_from_csv(&std::fs::read_to_string(path)?)
}

pub fn load_code(path: &Path, op: &ConvOperator) -> Result<GlobalCode> {
    code_from_csv(&std::fs::read_to_string(path)?, op)
}
