use std::fmt::Write as _;

use crate::error::{Result, SencaError};
use crate::numerics::Tensor;

/// One agglomeration step. Node ids `0..n` are leaves; the merge at step `s`
/// creates node `n + s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<Merge>,
}

/// Cluster labels together with the full merge history.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub dendrogram: Dendrogram,
}

impl Dendrogram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Labels after the first `n − k` merges, numbered by each cluster's
    /// smallest leaf id.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(SencaError::Parameter(format!(
                "cluster count must lie in 1..={}, got {k}",
                self.n
            )));
        }
        let total = 2 * self.n - 1;
        let mut parent: Vec<usize> = (0..total).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (step, m) in self.merges.iter().take(self.n - k).enumerate() {
            let node = self.n + step;
            parent[m.left] = node;
            parent[m.right] = node;
        }
        let roots: Vec<usize> = (0..self.n).map(|i| find(&mut parent, i)).collect();
        let mut label_of_root = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(self.n);
        for r in roots {
            let next = label_of_root.len();
            labels.push(*label_of_root.entry(r).or_insert(next));
        }
        Ok(labels)
    }

    /// `left\tright\tdistance\tsize` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("left\tright\tdistance\tsize\n");
        for m in &self.merges {
            writeln!(out, "{}\t{}\t{}\t{}", m.left, m.right, m.distance, m.size)
                .expect("write to String");
        }
        out
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Ward linkage over the rows of `points` via Lance–Williams updates.
///
/// The working distances are squared Euclidean; reported merge distances are
/// their square roots, which for Ward equal
/// `√(2·|A||B| / (|A|+|B|)) · ‖c_A − c_B‖`. Among equal distances the pair
/// with the lexicographically smallest `(min id, max id)` merges first.
pub fn ward_linkage(points: &Tensor) -> Result<Dendrogram> {
    let n = points.rows();
    if n == 0 {
        return Err(SencaError::EmptyResult("no points to cluster".into()));
    }
    // slot i holds the current cluster that started as leaf i
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(points.row(i), points.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut node = (0..n).collect::<Vec<usize>>();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let d = dist[a * n + b];
                let key = (node[a].min(node[b]), node[a].max(node[b]));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => d < bd || (d == bd && key < bkey),
                };
                if better {
                    best = Some((d, key, a, b));
                }
            }
        }
        let (d, (left, right), a, b) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &c in &active {
            if c == a || c == b {
                continue;
            }
            let nc = size[c] as f64;
            let updated = ((na + nc) * dist[a * n + c] + (nb + nc) * dist[b * n + c]
                - nc * d)
                / (na + nb + nc);
            dist[a * n + c] = updated;
            dist[c * n + a] = updated;
        }
        size[a] += size[b];
        node[a] = n + step;
        active.retain(|&c| c != b);
        merges.push(Merge {
            left,
            right,
            distance: d.max(0.0).sqrt(),
            size: size[a],
        });
    }
    Ok(Dendrogram { n, merges })
}

/// Ward clustering of the rows of `latent` into `k` groups.
pub fn agglomerative(latent: &Tensor, k: usize) -> Result<ClusterAssignment> {
    let n = latent.rows();
    if k == 0 || k > n {
        return Err(SencaError::Parameter(format!(
            "cluster count must lie in 1..={n}, got {k}"
        )));
    }
    let dendrogram = ward_linkage(latent)?;
    let labels = dendrogram.cut(k)?;
    Ok(ClusterAssignment {
        labels,
        k,
        dendrogram,
    })
}
