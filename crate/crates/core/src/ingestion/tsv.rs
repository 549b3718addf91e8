use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SencaError};

/// Header plus data rows of a tab-separated file, with 1-based line numbers.
pub(crate) struct TsvTable {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

pub(crate) fn read_tsv(path: &Path) -> Result<TsvTable> {
    let text = fs::read_to_string(path).map_err(|e| SencaError::io(path, e))?;
    parse_tsv(path, &text)
}

pub(crate) fn parse_tsv(path: &Path, text: &str) -> Result<TsvTable> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| SencaError::parse(path, 1, "missing header"))?;
    let header: Vec<String> = header.split('\t').map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (line, l) in lines {
        let fields: Vec<String> = l.split('\t').map(str::to_owned).collect();
        if fields.len() != header.len() {
            return Err(SencaError::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        rows.push((line, fields));
    }
    Ok(TsvTable { header, rows })
}

pub(crate) fn expect_header(path: &Path, header: &[String], expected: &[&str]) -> Result<()> {
    if header.len() < expected.len() || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(SencaError::parse(
            path,
            1,
            format!("expected header starting {:?}, found {:?}", expected, header),
        ));
    }
    Ok(())
}

pub(crate) fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| SencaError::parse(path, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(SencaError::parse(path, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

/// Writes via a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| SencaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SencaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SencaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SencaError::io(path, e))
}
