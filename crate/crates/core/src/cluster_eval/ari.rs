use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Result, SencaError};

/// Cluster-pair counts between two partitions of the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn index_labels<L: Eq + Hash + Clone>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<L, usize> = HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l.clone()).or_insert(next)
        })
        .collect();
    (idx, ids.len())
}

impl ContingencyTable {
    pub fn new<A, B>(x: &[A], y: &[B]) -> Result<Self>
    where
        A: Eq + Hash + Clone,
        B: Eq + Hash + Clone,
    {
        if x.len() != y.len() {
            return Err(SencaError::Consistency(format!(
                "label vectors differ in length: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        let (xi, rows) = index_labels(x);
        let (yi, cols) = index_labels(y);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&a, &b) in xi.iter().zip(&yi) {
            counts[a][b] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..cols).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n: x.len() as u64,
        })
    }
}

fn pairs(k: u64) -> f64 {
    (k as f64) * (k.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index. Returns 1 when the expected and maximum index
/// coincide (both partitions trivial in the same way).
pub fn ari<A, B>(pred: &[A], truth: &[B]) -> Result<f64>
where
    A: Eq + Hash + Clone,
    B: Eq + Hash + Clone,
{
    let t = ContingencyTable::new(pred, truth)?;
    let index: f64 = t.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let sum_b: f64 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    let total = pairs(t.n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI over the items whose truth label is present.
pub fn ari_partial<A, B>(pred: &[A], truth: &[Option<B>]) -> Result<f64>
where
    A: Eq + Hash + Clone,
    B: Eq + Hash + Clone,
{
    if pred.len() != truth.len() {
        return Err(SencaError::Consistency(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (p, t): (Vec<A>, Vec<B>) = pred
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| t.as_ref().map(|t| (p.clone(), t.clone())))
        .unzip();
    if p.is_empty() {
        return Err(SencaError::EmptyResult("no spot carries a truth label".into()));
    }
    ari(&p, &t)
}
