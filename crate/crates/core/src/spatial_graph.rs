//! Symmetric k-nearest-neighbour graph over spot coordinates.
//!
//! Neighbours are found by an exact exhaustive scan: Euclidean distance,
//! ties broken by the lower spot index. The directed lists keep their
//! ascending-distance order for neighbourhood attention; the symmetrised
//! edge set (union of both directions) drives message passing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Result, SencaError};
use crate::ingestion::{ExpressionMatrix, SpotTable, Stage};
use crate::numerics::CsrMatrix;

#[derive(Debug, Clone)]
pub struct SpotGraph {
    coords: Vec<[f64; 2]>,
    k: usize,
    knn: Vec<Vec<usize>>,
    adjacency: Vec<Vec<usize>>,
    features: Option<ExpressionMatrix>,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Builds the graph for a spot table.
pub fn build_knn(spots: &SpotTable, k: usize) -> Result<SpotGraph> {
    SpotGraph::from_coords(spots.coords().to_vec(), k)
}

impl SpotGraph {
    pub fn from_coords(coords: Vec<[f64; 2]>, k: usize) -> Result<Self> {
        let n = coords.len();
        if k == 0 || k >= n {
            return Err(SencaError::Parameter(format!(
                "k must satisfy 1 <= k < n, got k={k} with n={n}"
            )));
        }
        let mut knn = Vec::with_capacity(n);
        for i in 0..n {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(coords[i], coords[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            knn.push(others[..k].iter().map(|&(_, j)| j).collect::<Vec<_>>());
        }
        let mut sets = vec![BTreeSet::new(); n];
        for (i, list) in knn.iter().enumerate() {
            for &j in list {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        let adjacency = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(SpotGraph {
            coords,
            k,
            knn,
            adjacency,
            features: None,
        })
    }

    /// Attaches the per-spot feature rows `V_i`; they must be HVG-selected.
    pub fn with_features(mut self, features: ExpressionMatrix) -> Result<Self> {
        if features.stage() != Stage::HvgSelected {
            return Err(SencaError::Stage {
                op: "with_features",
                expected: Stage::HvgSelected.name(),
                found: features.stage().name(),
            });
        }
        if features.n_spots() != self.n() {
            return Err(SencaError::shape(
                "with_features",
                &[self.n()],
                &[features.n_spots()],
            ));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn features(&self) -> Option<&ExpressionMatrix> {
        self.features.as_ref()
    }

    /// Directed k nearest neighbours of `i`, ascending distance.
    pub fn nearest(&self, i: usize) -> &[usize] {
        &self.knn[i]
    }

    /// Symmetrised neighbours of `i`, ascending index.
    pub fn adjacent(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    /// `[i]` followed by the k nearest neighbours of `i`.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.n() {
            return Err(SencaError::Bounds(format!(
                "spot {i} of a {}-spot graph",
                self.n()
            )));
        }
        let mut out = Vec::with_capacity(self.k + 1);
        out.push(i);
        out.extend_from_slice(&self.knn[i]);
        Ok(out)
    }

    /// All neighbourhoods flattened row-major, `k + 1` entries per spot.
    pub fn neighborhood_table(&self) -> Rc<Vec<usize>> {
        let mut table = Vec::with_capacity(self.n() * (self.k + 1));
        for i in 0..self.n() {
            table.push(i);
            table.extend_from_slice(&self.knn[i]);
        }
        Rc::new(table)
    }

    /// `D⁻¹(A + I)` over the symmetrised adjacency.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n())
            .map(|i| {
                let mut cols: Vec<usize> = self.adjacency[i].clone();
                let pos = cols.binary_search(&i).unwrap_err();
                cols.insert(pos, i);
                let w = 1.0 / cols.len() as f64;
                cols.into_iter().map(|c| (c, w)).collect()
            })
            .collect();
        CsrMatrix::from_rows(self.n(), &rows).expect("columns are spot indices")
    }

    /// Debug edge list over the symmetrised graph, each undirected edge once.
    pub fn to_edge_tsv(&self) -> String {
        let mut out = String::from("src\tdst\tdistance\n");
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj.iter().filter(|&&j| j > i) {
                writeln!(out, "{i}\t{j}\t{}", distance(self.coords[i], self.coords[j]))
                    .expect("write to String");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize) -> Vec<[f64; 2]> {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| [x as f64, y as f64]))
            .collect()
    }

    /// Exhaustive oracle: all spots at distance strictly below the k-th
    /// smallest, then ties at that distance by index.
    fn oracle(coords: &[[f64; 2]], i: usize, k: usize) -> Vec<usize> {
        let mut best: Vec<usize> = Vec::new();
        let mut used = vec![false; coords.len()];
        used[i] = true;
        for _ in 0..k {
            let mut pick: Option<usize> = None;
            for j in 0..coords.len() {
                if used[j] {
                    continue;
                }
                let dj = distance(coords[i], coords[j]);
                match pick {
                    None => pick = Some(j),
                    Some(p) if dj < distance(coords[i], coords[p]) => pick = Some(j),
                    _ => {}
                }
            }
            let p = pick.unwrap();
            used[p] = true;
            best.push(p);
        }
        best
    }

    #[test]
    fn unit_square_is_complete() {
        let g = SpotGraph::from_coords(grid(2, 2), 3).unwrap();
        for i in 0..4 {
            assert_eq!(g.adjacent(i).len(), 3);
            assert_eq!(g.neighborhood(i).unwrap().len(), 4);
        }
        assert_eq!(g.neighborhood(0).unwrap()[0], 0);
    }

    #[test]
    fn grid_centre_takes_orthogonal_neighbours() {
        let g = SpotGraph::from_coords(grid(3, 3), 4).unwrap();
        let mut nb = g.neighborhood(4).unwrap();
        assert_eq!(nb[0], 4);
        nb[1..].sort();
        assert_eq!(&nb[1..], &[1, 3, 5, 7]);
        assert!(!g.nearest(4).contains(&0));
        assert!(g.is_adjacent(4, 0));
    }

    #[test]
    fn random_layout_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let coords: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let g = SpotGraph::from_coords(coords.clone(), 4).unwrap();
        for i in 0..50 {
            assert_eq!(g.nearest(i), oracle(&coords, i, 4).as_slice());
        }
    }

    #[test]
    fn duplicate_coordinates_use_index_tiebreak() {
        let coords = vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]];
        let g = SpotGraph::from_coords(coords, 2).unwrap();
        assert_eq!(g.nearest(2), &[0, 1]);
        assert_eq!(g.nearest(3), &[0, 1]);
    }

    #[test]
    fn invalid_k_and_index() {
        assert!(SpotGraph::from_coords(grid(2, 1), 2).is_err());
        assert!(SpotGraph::from_coords(grid(2, 1), 0).is_err());
        let g = SpotGraph::from_coords(grid(2, 2), 1).unwrap();
        assert!(matches!(g.neighborhood(4), Err(SencaError::Bounds(_))));
    }

    #[test]
    fn normalized_adjacency_rows_sum_to_one() {
        let g = SpotGraph::from_coords(grid(4, 3), 4).unwrap();
        let dense = g.normalized_adjacency().to_dense();
        for r in 0..12 {
            assert!((dense.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(dense.get(r, r) > 0.0);
        }
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_and_neighbourhood_shape(seed in 0u64..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coords: Vec<[f64; 2]> = (0..12)
                .map(|_| [rng.random_range(0..5) as f64, rng.random_range(0..5) as f64])
                .collect();
            let g = SpotGraph::from_coords(coords, k).unwrap();
            for i in 0..g.n() {
                prop_assert!(!g.is_adjacent(i, i));
                for &j in g.adjacent(i) {
                    prop_assert!(g.is_adjacent(j, i));
                }
                let nb = g.neighborhood(i).unwrap();
                prop_assert_eq!(nb.len(), k + 1);
                prop_assert_eq!(nb[0], i);
            }
        }

        #[test]
        fn construction_is_permutation_equivariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 15;
            let coords: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)])
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // spot perm[i] of the relabelled layout is spot i of the original
            let mut relabelled = vec![[0.0; 2]; n];
            for i in 0..n {
                relabelled[perm[i]] = coords[i];
            }
            let a = SpotGraph::from_coords(coords, 3).unwrap();
            let b = SpotGraph::from_coords(relabelled, 3).unwrap();
            for i in 0..n {
                let mut mapped: Vec<usize> = a.adjacent(i).iter().map(|&j| perm[j]).collect();
                mapped.sort();
                prop_assert_eq!(mapped.as_slice(), b.adjacent(perm[i]));
            }
        }
    }
}
