use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::tsv::{expect_header, read_tsv, write_atomic};
use crate::error::{Result, SencaError};

/// `spot_id → label` rows; an empty label or `NA` marks an unannotated spot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    pub entries: Vec<(String, Option<String>)>,
}

impl LabelTable {
    pub fn from_indices(ids: &[String], labels: &[usize]) -> Self {
        LabelTable {
            entries: ids
                .iter()
                .zip(labels)
                .map(|(id, l)| (id.clone(), Some(l.to_string())))
                .collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("spot_id\tlabel\n");
        for (id, l) in &self.entries {
            writeln!(out, "{id}\t{}", l.as_deref().unwrap_or("NA")).expect("write to String");
        }
        out
    }
}

pub fn load_labels(path: &Path) -> Result<LabelTable> {
    let table = read_tsv(path)?;
    expect_header(path, &table.header, &["spot_id", "label"])?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(table.rows.len());
    for (line, fields) in &table.rows {
        if !seen.insert(fields[0].clone()) {
            return Err(SencaError::parse(
                path,
                *line,
                format!("duplicate spot id {}", fields[0]),
            ));
        }
        let label = fields[1].trim();
        let label = (!label.is_empty() && label != "NA").then(|| label.to_string());
        entries.push((fields[0].clone(), label));
    }
    Ok(LabelTable { entries })
}

pub fn write_labels(path: &Path, labels: &LabelTable) -> Result<()> {
    write_atomic(path, labels.to_tsv().as_bytes())
}
