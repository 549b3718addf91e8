use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::tsv::{expect_header, parse_f64, read_tsv, write_atomic};
use crate::error::{Result, SencaError};

/// Spot identifiers with their physical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotTable {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

impl SpotTable {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(SencaError::Consistency(format!(
                "{} spot ids but {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        if ids.len() < 2 {
            return Err(SencaError::Parameter(format!(
                "need at least 2 spots, got {}",
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        let dups: Vec<&str> = ids
            .iter()
            .filter(|id| !seen.insert(id.as_str()))
            .map(String::as_str)
            .collect();
        if !dups.is_empty() {
            return Err(SencaError::Consistency(format!("duplicate spot ids: {dups:?}")));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SencaError::Parameter("non-finite spot coordinate".into()));
        }
        Ok(SpotTable { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Minimum pairwise Euclidean distance; exact O(n²) scan.
    pub fn spacing(&self) -> f64 {
        min_pairwise_distance(&self.coords)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("spot_id\tx\ty\n");
        for (id, [x, y]) in self.ids.iter().zip(&self.coords) {
            writeln!(out, "{id}\t{x}\t{y}").expect("write to String");
        }
        out
    }
}

pub fn min_pairwise_distance(coords: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in coords.iter().enumerate() {
        for b in &coords[i + 1..] {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d > 0.0 && d < best {
                best = d;
            }
        }
    }
    best
}

pub fn load_spots(path: &Path) -> Result<SpotTable> {
    let table = read_tsv(path)?;
    expect_header(path, &table.header, &["spot_id", "x", "y"])?;
    if table.header.len() != 3 {
        return Err(SencaError::parse(path, 1, "spots.tsv has exactly 3 columns"));
    }
    let mut ids = Vec::with_capacity(table.rows.len());
    let mut coords = Vec::with_capacity(table.rows.len());
    for (line, fields) in &table.rows {
        ids.push(fields[0].clone());
        coords.push([parse_f64(path, *line, &fields[1])?, parse_f64(path, *line, &fields[2])?]);
    }
    SpotTable::new(ids, coords)
}

pub fn write_spots(path: &Path, spots: &SpotTable) -> Result<()> {
    write_atomic(path, spots.to_tsv().as_bytes())
}
