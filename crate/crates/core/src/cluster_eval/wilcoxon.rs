use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Result, SencaError};
use crate::ingestion::{ExpressionMatrix, Stage};

/// Direction of a one-sided rank-sum test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// First sample tends to be larger.
    Greater,
    Less,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerResult {
    pub gene: String,
    pub cluster: usize,
    /// Mann–Whitney U of the in-cluster group.
    pub u: f64,
    pub p: f64,
}

/// Mid-ranks (1-based) of `values` and the tie term `Σ (t³ − t)`.
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Wilcoxon rank-sum test of `x` against `y`: normal approximation with
/// tie-corrected variance and a 0.5 continuity correction.
///
/// Returns `(U, p)` where `U` counts pairs with `x > y` (ties ½). With zero
/// variance (every value tied) the p-value is 0.5.
pub fn rank_sum_test(x: &[f64], y: &[f64], alternative: Alternative) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(SencaError::Parameter(format!(
            "rank-sum test needs two non-empty groups, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let n = n1 + n2;
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = mid_ranks(&all);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok((u, 0.5));
    }
    let mean = n1 * n2 / 2.0;
    let z = match alternative {
        Alternative::Greater => (u - mean - 0.5) / var.sqrt(),
        Alternative::Less => (mean - u - 0.5) / var.sqrt(),
    };
    let p = 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    Ok((u, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

/// One-sided test that gene `gene` is higher in `cluster` than elsewhere.
/// `expr` must be log-normalised.
pub fn wilcoxon_marker(
    expr: &ExpressionMatrix,
    labels: &[usize],
    cluster: usize,
    gene: usize,
) -> Result<MarkerResult> {
    if !matches!(expr.stage(), Stage::Log | Stage::HvgSelected) {
        return Err(SencaError::Stage {
            op: "wilcoxon_marker",
            expected: Stage::Log.name(),
            found: expr.stage().name(),
        });
    }
    if labels.len() != expr.n_spots() {
        return Err(SencaError::Consistency(format!(
            "{} labels for {} spots",
            labels.len(),
            expr.n_spots()
        )));
    }
    if gene >= expr.n_genes() {
        return Err(SencaError::Bounds(format!("gene {gene} of {}", expr.n_genes())));
    }
    let column = expr.column(gene);
    let (inside, outside): (Vec<(usize, f64)>, Vec<(usize, f64)>) = column
        .into_iter()
        .enumerate()
        .partition(|&(i, _)| labels[i] == cluster);
    let x: Vec<f64> = inside.into_iter().map(|(_, v)| v).collect();
    let y: Vec<f64> = outside.into_iter().map(|(_, v)| v).collect();
    let (u, p) = rank_sum_test(&x, &y, Alternative::Greater)
        .map_err(|_| SencaError::Parameter(format!("cluster {cluster} or its complement is empty")))?;
    Ok(MarkerResult {
        gene: expr.genes()[gene].clone(),
        cluster,
        u,
        p,
    })
}

/// Benjamini–Hochberg adjusted p-values, same order as the input.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running;
    }
    adjusted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerOptions {
    pub top_m: usize,
    /// Replace p-values with Benjamini–Hochberg values across each cluster's
    /// genes before ranking.
    pub adjust_bh: bool,
}

/// The `top_m` lowest-p genes of every cluster, clusters ascending, each
/// block sorted by p then gene name.
pub fn marker_table(
    expr: &ExpressionMatrix,
    labels: &[usize],
    options: MarkerOptions,
) -> Result<Vec<MarkerResult>> {
    if options.top_m == 0 {
        return Ok(Vec::new());
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let blocks: Vec<Vec<MarkerResult>> = clusters
        .par_iter()
        .map(|&c| {
            let mut block = (0..expr.n_genes())
                .into_par_iter()
                .map(|g| wilcoxon_marker(expr, labels, c, g))
                .collect::<Result<Vec<_>>>()?;
            if options.adjust_bh {
                let raw: Vec<f64> = block.iter().map(|r| r.p).collect();
                for (r, p) in block.iter_mut().zip(benjamini_hochberg(&raw)) {
                    r.p = p;
                }
            }
            block.sort_by(|a, b| a.p.total_cmp(&b.p).then_with(|| a.gene.cmp(&b.gene)));
            block.truncate(options.top_m);
            Ok(block)
        })
        .collect::<Result<_>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

/// `gene\tcluster\tU\tp` rows.
pub fn markers_to_tsv(markers: &[MarkerResult]) -> String {
    let mut out = String::from("gene\tcluster\tU\tp\n");
    for m in markers {
        writeln!(out, "{}\t{}\t{}\t{:e}", m.gene, m.cluster, m.u, m.p).expect("write to String");
    }
    out
}
