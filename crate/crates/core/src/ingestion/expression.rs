use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use log::warn;

use super::spots::SpotTable;
use super::tsv::{expect_header, parse_f64, read_tsv, write_atomic};
use crate::error::{Result, SencaError};
use crate::numerics::Tensor;

/// Position of a matrix in the preprocessing pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Normalized,
    Log,
    HvgSelected,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Normalized => "normalized",
            Stage::Log => "log",
            Stage::HvgSelected => "hvg-selected",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spots × genes expression values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    spot_ids: Vec<String>,
    genes: Vec<String>,
    values: Tensor,
    stage: Stage,
}

impl ExpressionMatrix {
    pub fn new(
        spot_ids: Vec<String>,
        genes: Vec<String>,
        values: Tensor,
        stage: Stage,
    ) -> Result<Self> {
        let (rows, cols) = values.dims2();
        if rows != spot_ids.len() || cols != genes.len() {
            return Err(SencaError::shape(
                "expression",
                &[spot_ids.len(), genes.len()],
                values.shape(),
            ));
        }
        if stage == Stage::Raw {
            if let Some(pos) = values.data().iter().position(|&v| v < 0.0) {
                return Err(SencaError::Parameter(format!(
                    "negative raw count for spot {} gene {}",
                    spot_ids[pos / cols],
                    genes[pos % cols]
                )));
            }
        }
        Ok(ExpressionMatrix {
            spot_ids,
            genes,
            values,
            stage,
        })
    }

    pub fn spot_ids(&self) -> &[String] {
        &self.spot_ids
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn column(&self, g: usize) -> Vec<f64> {
        (0..self.n_spots()).map(|r| self.values.get(r, g)).collect()
    }

    fn require(&self, op: &'static str, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(SencaError::Stage {
                op,
                expected: expected.name(),
                found: self.stage.name(),
            });
        }
        Ok(())
    }

    fn with_columns(&self, keep: &[usize], stage: Stage) -> Result<Self> {
        let n = self.n_spots();
        let mut data = Vec::with_capacity(n * keep.len());
        for r in 0..n {
            let row = self.values.row(r);
            data.extend(keep.iter().map(|&g| row[g]));
        }
        Ok(ExpressionMatrix {
            spot_ids: self.spot_ids.clone(),
            genes: keep.iter().map(|&g| self.genes[g].clone()).collect(),
            values: Tensor::matrix(n, keep.len(), data)?,
            stage,
        })
    }

    /// Reorders rows to follow `spots`; every id must be present on both sides.
    pub fn aligned_to(&self, spots: &SpotTable) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .spot_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let missing: Vec<&str> = spots
            .ids()
            .iter()
            .filter(|id| !index.contains_key(id.as_str()))
            .map(String::as_str)
            .collect();
        let wanted: std::collections::HashSet<&str> =
            spots.ids().iter().map(String::as_str).collect();
        let extra: Vec<&str> = self
            .spot_ids
            .iter()
            .filter(|id| !wanted.contains(id.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(SencaError::Consistency(format!(
                "spot ids differ between spot table and expression: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let order: Vec<usize> = spots.ids().iter().map(|id| index[id.as_str()]).collect();
        Ok(ExpressionMatrix {
            spot_ids: spots.ids().to_vec(),
            genes: self.genes.clone(),
            values: self.values.select_rows(&order),
            stage: self.stage,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("spot_id");
        for g in &self.genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
        for (r, id) in self.spot_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.values.row(r) {
                write!(out, "\t{v}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads raw counts; any negative value is a parse error.
pub fn load_expression(path: &Path) -> Result<ExpressionMatrix> {
    let table = read_tsv(path)?;
    expect_header(path, &table.header, &["spot_id"])?;
    let genes: Vec<String> = table.header[1..].to_vec();
    if genes.is_empty() {
        return Err(SencaError::parse(path, 1, "no gene columns"));
    }
    let mut ids = Vec::with_capacity(table.rows.len());
    let mut data = Vec::with_capacity(table.rows.len() * genes.len());
    for (line, fields) in &table.rows {
        ids.push(fields[0].clone());
        for f in &fields[1..] {
            let v = parse_f64(path, *line, f)?;
            if v < 0.0 {
                return Err(SencaError::parse(path, *line, format!("negative count {f}")));
            }
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(SencaError::parse(path, 2, "no spot rows"));
    }
    let values = Tensor::matrix(ids.len(), genes.len(), data)?;
    ExpressionMatrix::new(ids, genes, values, Stage::Raw)
}

pub fn write_expression(path: &Path, m: &ExpressionMatrix) -> Result<()> {
    write_atomic(path, m.to_tsv().as_bytes())
}

/// Keeps genes whose total count over all spots is at least `min_total`.
pub fn filter_genes(m: &ExpressionMatrix, min_total: f64) -> Result<ExpressionMatrix> {
    m.require("filter_genes", Stage::Raw)?;
    let mut totals = vec![0.0; m.n_genes()];
    for r in 0..m.n_spots() {
        for (t, v) in totals.iter_mut().zip(m.values.row(r)) {
            *t += v;
        }
    }
    let keep: Vec<usize> = (0..m.n_genes()).filter(|&g| totals[g] >= min_total).collect();
    if keep.is_empty() {
        return Err(SencaError::EmptyResult(format!(
            "no gene has a total count of at least {min_total}"
        )));
    }
    m.with_columns(&keep, Stage::Raw)
}

/// Scales each spot to `target_sum` total. All-zero spots stay zero.
pub fn normalize_total(m: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    m.require("normalize_total", Stage::Raw)?;
    let mut values = m.values.clone();
    let cols = values.cols();
    for row in values.data_mut().chunks_mut(cols) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            let f = target_sum / total;
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(ExpressionMatrix {
        values,
        stage: Stage::Normalized,
        ..m.clone()
    })
}

pub fn log1p(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    m.require("log1p", Stage::Normalized)?;
    Ok(ExpressionMatrix {
        values: m.values.map(f64::ln_1p),
        stage: Stage::Log,
        ..m.clone()
    })
}

/// Library-size normalisation followed by `ln(1 + x)`.
pub fn normalize_log(m: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    log1p(&normalize_total(m, target_sum)?)
}

/// Per-gene statistics behind highly-variable gene selection.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneDispersion {
    pub mean: f64,
    pub dispersion: f64,
    pub normalized: f64,
}

/// Mean, variance-to-mean dispersion and within-bin z-scored dispersion for
/// each gene, computed on `expm1` of log values. Genes are placed in
/// `n_bins` equal-frequency bins by mean.
pub fn gene_dispersions(m: &ExpressionMatrix, n_bins: usize) -> Result<Vec<GeneDispersion>> {
    m.require("gene_dispersions", Stage::Log)?;
    if n_bins == 0 {
        return Err(SencaError::Parameter("dispersion bins must be positive".into()));
    }
    let n = m.n_spots() as f64;
    let genes = m.n_genes();
    let mut stats: Vec<GeneDispersion> = (0..genes)
        .map(|g| {
            let col: Vec<f64> = m.column(g).into_iter().map(f64::exp_m1).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = if col.len() > 1 {
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let dispersion = if mean > 0.0 { var / mean } else { 0.0 };
            GeneDispersion {
                mean,
                dispersion,
                normalized: 0.0,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..genes).collect();
    order.sort_by(|&a, &b| {
        stats[a]
            .mean
            .total_cmp(&stats[b].mean)
            .then_with(|| m.genes[a].cmp(&m.genes[b]))
    });
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (rank, &g) in order.iter().enumerate() {
        bins[rank * n_bins / genes].push(g);
    }
    for bin in bins.iter().filter(|b| !b.is_empty()) {
        let k = bin.len() as f64;
        let mean = bin.iter().map(|&g| stats[g].dispersion).sum::<f64>() / k;
        let sd = if bin.len() > 1 {
            (bin.iter()
                .map(|&g| (stats[g].dispersion - mean).powi(2))
                .sum::<f64>()
                / (k - 1.0))
                .sqrt()
        } else {
            0.0
        };
        for &g in bin {
            stats[g].normalized = if sd > 0.0 {
                (stats[g].dispersion - mean) / sd
            } else {
                0.0
            };
        }
    }
    Ok(stats)
}

/// Keeps the `n_hvg` genes with the highest normalised dispersion, ties
/// broken by gene name. Selected genes keep their original column order.
pub fn select_hvg(m: &ExpressionMatrix, n_hvg: usize, n_bins: usize) -> Result<ExpressionMatrix> {
    m.require("select_hvg", Stage::Log)?;
    if n_hvg == 0 {
        return Err(SencaError::Parameter("n_hvg must be positive".into()));
    }
    if n_hvg >= m.n_genes() {
        if n_hvg > m.n_genes() {
            warn!(
                "requested {n_hvg} highly variable genes but only {} are available; keeping all",
                m.n_genes()
            );
        }
        let all: Vec<usize> = (0..m.n_genes()).collect();
        return m.with_columns(&all, Stage::HvgSelected);
    }
    let stats = gene_dispersions(m, n_bins)?;
    let mut ranked: Vec<usize> = (0..m.n_genes()).collect();
    ranked.sort_by(|&a, &b| {
        stats[b]
            .normalized
            .total_cmp(&stats[a].normalized)
            .then_with(|| m.genes[a].cmp(&m.genes[b]))
    });
    let mut keep = ranked[..n_hvg].to_vec();
    keep.sort_unstable();
    m.with_columns(&keep, Stage::HvgSelected)
}
