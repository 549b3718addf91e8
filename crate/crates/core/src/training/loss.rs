use std::rc::Rc;

use crate::error::{Result, SencaError};
use crate::numerics::{CsrMatrix, Tensor, Var};

/// Which resolution a [`WindowGrid`] pools to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Windowed,
    Pooled,
}

/// Partition of the spots into axis-aligned square cells of side
/// `factor × spacing` laid over the bounding box. Only non-empty cells are
/// kept, ordered row-major (by cell row, then cell column).
#[derive(Debug, Clone)]
pub struct WindowGrid {
    level: Level,
    side: f64,
    windows: Vec<Vec<usize>>,
    n: usize,
}

impl WindowGrid {
    pub fn build(coords: &[[f64; 2]], spacing: f64, factor: f64, level: Level) -> Result<Self> {
        if coords.is_empty() {
            return Err(SencaError::EmptyResult("no spots to window".into()));
        }
        let side = factor * spacing;
        if !(side > 0.0 && side.is_finite()) {
            return Err(SencaError::Parameter(format!("window side must be positive, got {side}")));
        }
        let min_x = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let min_y = coords.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
        let mut cells: Vec<((u64, u64), usize)> = coords
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let cx = ((c[0] - min_x) / side).floor() as u64;
                let cy = ((c[1] - min_y) / side).floor() as u64;
                ((cy, cx), i)
            })
            .collect();
        cells.sort();
        let mut windows: Vec<Vec<usize>> = Vec::new();
        let mut last = None;
        for (cell, i) in cells {
            if last != Some(cell) {
                windows.push(Vec::new());
                last = Some(cell);
            }
            windows.last_mut().expect("pushed above").push(i);
        }
        Ok(WindowGrid {
            level,
            side,
            windows,
            n: coords.len(),
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Member spot indices of each window, ascending.
    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    /// `windows × n` averaging matrix.
    pub fn pool_matrix(&self) -> CsrMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .windows
            .iter()
            .map(|w| {
                let weight = 1.0 / w.len() as f64;
                w.iter().map(|&i| (i, weight)).collect()
            })
            .collect();
        CsrMatrix::from_rows(self.n, &rows).expect("members are spot indices")
    }
}

/// Mean of member rows per window.
pub fn pool_embeddings(m: &Tensor, grid: &WindowGrid) -> Result<Tensor> {
    if m.rows() != grid.n {
        return Err(SencaError::shape("pool_embeddings", m.shape(), &[grid.n]));
    }
    grid.pool_matrix().matmul(m)
}

/// Tape version of [`pool_embeddings`] with a precomputed averaging matrix.
pub fn pool_var<'t>(m: Var<'t>, pool: &Rc<CsrMatrix>) -> Result<Var<'t>> {
    m.sparse_lmul(Rc::clone(pool))
}

/// SimCLR NT-Xent between paired rows of `a` and `b` (`N × d`).
///
/// Rows are L2-normalised; each of the 2N views has its counterpart as the
/// positive and the other 2N − 2 views as negatives. Returns the mean over
/// all 2N anchors.
pub fn nt_xent<'t>(a: Var<'t>, b: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(SencaError::shape("nt_xent", &sa, &sb));
    }
    let n = a.value().rows();
    if n < 2 {
        return Err(SencaError::Parameter(format!(
            "NT-Xent needs at least 2 pairs, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(SencaError::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    let z = a.l2_normalize_rows().concat_rows(b.l2_normalize_rows())?;
    let logits = z.matmul(z.transpose())?.scale(1.0 / temperature);
    let log_probs = logits.log_softmax_off_diag()?;
    let positives: Vec<(usize, usize)> = (0..2 * n).map(|i| (i, (i + n) % (2 * n))).collect();
    Ok(log_probs.select(&positives)?.mean().scale(-1.0))
}

/// The three loss components and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub pooled: Option<Var<'t>>,
    pub windowed: Option<Var<'t>>,
    pub mse: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// `(pooled, windowed, mse, total)`, with absent terms as 0.
    pub fn values(&self) -> [f64; 4] {
        let v = |x: Option<Var<'_>>| x.map_or(0.0, |x| x.value().item());
        [
            v(self.pooled),
            v(self.windowed),
            self.mse.value().item(),
            self.total.value().item(),
        ]
    }
}

/// Inputs to [`total_loss`]: projected embeddings and the fused
/// encoder input/decoder output for every spot.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'t> {
    pub h_p: Var<'t>,
    pub r_p: Var<'t>,
    pub e: Var<'t>,
    pub d: Var<'t>,
}

/// `NT-Xent(pooled) + NT-Xent(windowed) + λ · MSE(E, D)`. With `pools` set
/// to `None` the contrastive terms are dropped.
pub fn total_loss<'t>(
    x: LossInputs<'t>,
    pools: Option<(&Rc<CsrMatrix>, &Rc<CsrMatrix>)>,
    lambda: f64,
    temperature: f64,
) -> Result<LossTerms<'t>> {
    let mse = x.e.mse(x.d)?;
    let mut total = mse.scale(lambda);
    let (mut pooled, mut windowed) = (None, None);
    if let Some((pool, window)) = pools {
        let p = nt_xent(pool_var(x.h_p, pool)?, pool_var(x.r_p, pool)?, temperature)?;
        let w = nt_xent(pool_var(x.h_p, window)?, pool_var(x.r_p, window)?, temperature)?;
        total = total.add(p)?.add(w)?;
        pooled = Some(p);
        windowed = Some(w);
    }
    Ok(LossTerms {
        pooled,
        windowed,
        mse,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Per-anchor sum written out with cosine similarities.
    pub(crate) fn nt_xent_oracle(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
        let n = a.rows();
        let views: Vec<Vec<f64>> = (0..2 * n)
            .map(|i| if i < n { a.row(i).to_vec() } else { b.row(i - n).to_vec() })
            .collect();
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            d / (nx * ny)
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            let pos = (i + n) % (2 * n);
            let num = (cos(&views[i], &views[pos]) / tau).exp();
            let den: f64 = (0..2 * n)
                .filter(|&k| k != i)
                .map(|k| (cos(&views[i], &views[k]) / tau).exp())
                .sum();
            total += -(num / den).ln();
        }
        total / (2 * n) as f64
    }

    fn eval(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
        let tape = Tape::new();
        nt_xent(tape.constant(a.clone()), tape.constant(b.clone()), tau)
            .unwrap()
            .value()
            .item()
    }

    #[test]
    fn two_pair_identity_case() {
        let i2 = Tensor::identity(2);
        let want = ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
        assert!((eval(&i2, &i2, 1.0) - want).abs() < 1e-12);
        assert!((nt_xent_oracle(&i2, &i2, 1.0) - want).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..=16 {
            let (a, b) = (random(n, 5, &mut rng), random(n, 5, &mut rng));
            for tau in [0.1, 0.5, 1.0] {
                assert!((eval(&a, &b, tau) - nt_xent_oracle(&a, &b, tau)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn aligned_pairs_beat_uniform() {
        let aligned = Tensor::identity(3);
        let uniform = Tensor::filled(&[3, 3], 1.0);
        assert!(eval(&aligned, &aligned, 0.5) < eval(&uniform, &uniform, 0.5));
    }

    #[test]
    fn rejects_single_pair() {
        let one = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let tape = Tape::new();
        let r = nt_xent(tape.constant(one.clone()), tape.constant(one), 0.5);
        assert!(matches!(r, Err(SencaError::Parameter(_))));
    }

    fn grid(w: usize, h: usize) -> Vec<[f64; 2]> {
        (0..h).flat_map(|y| (0..w).map(move |x| [x as f64, y as f64])).collect()
    }

    #[test]
    fn windows_row_major_and_partition() {
        let g = WindowGrid::build(&grid(4, 4), 1.0, 2.0, Level::Windowed).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.windows()[0], vec![0, 1, 4, 5]);
        assert_eq!(g.windows()[1], vec![2, 3, 6, 7]);
        assert_eq!(g.windows()[2], vec![8, 9, 12, 13]);
        let p = WindowGrid::build(&grid(24, 24), 1.0, 4.0, Level::Pooled).unwrap();
        assert_eq!(p.len(), 36);
        assert!(WindowGrid::build(&[], 1.0, 2.0, Level::Pooled).is_err());
    }

    #[test]
    fn pooling_examples() {
        let coords = grid(3, 1);
        let singles = WindowGrid::build(&coords, 1.0, 1.0, Level::Windowed).unwrap();
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(pool_embeddings(&m, &singles).unwrap(), m);
        let pairs = WindowGrid::build(&[[0.0, 0.0], [0.5, 0.5]], 1.0, 2.0, Level::Pooled).unwrap();
        let same = Tensor::from_rows(&[[2.0, -1.0], [2.0, -1.0]]).unwrap();
        assert_eq!(pool_embeddings(&same, &pairs).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn pooling_matches_grouping_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let coords: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)])
            .collect();
        let m = random(30, 3, &mut rng);
        let g = WindowGrid::build(&coords, 1.0, 2.0, Level::Windowed).unwrap();
        let pooled = pool_embeddings(&m, &g).unwrap();
        // group by cell key directly and order keys row-major
        let mut groups: std::collections::BTreeMap<(i64, i64), Vec<usize>> = Default::default();
        let min_x = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let min_y = coords.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
        for (i, c) in coords.iter().enumerate() {
            let key = (((c[1] - min_y) / 2.0) as i64, ((c[0] - min_x) / 2.0) as i64);
            groups.entry(key).or_default().push(i);
        }
        assert_eq!(pooled.rows(), groups.len());
        for (w, members) in groups.values().enumerate() {
            for c in 0..3 {
                let mean = members.iter().map(|&i| m.get(i, c)).sum::<f64>() / members.len() as f64;
                assert!((pooled.get(w, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_sums_components() {
        let h_p = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -1.0]]).unwrap();
        let r_p = Tensor::from_rows(&[[0.9, 0.1], [0.2, 1.0], [1.0, 0.7], [0.0, -1.0]]).unwrap();
        let e = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [0.0, 0.0], [1.0, 1.0]]).unwrap();
        let d = Tensor::from_rows(&[[1.5, 2.0], [3.0, 3.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let coords = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let wg = WindowGrid::build(&coords, 1.0, 1.0, Level::Windowed).unwrap();
        let pg = WindowGrid::build(&coords, 1.0, 2.0, Level::Pooled).unwrap();
        assert_eq!(pg.len(), 2);
        let tape = Tape::new();
        let pool = Rc::new(pg.pool_matrix());
        let window = Rc::new(wg.pool_matrix());
        let inputs = LossInputs {
            h_p: tape.constant(h_p.clone()),
            r_p: tape.constant(r_p.clone()),
            e: tape.constant(e.clone()),
            d: tape.constant(d.clone()),
        };
        let terms = total_loss(inputs, Some((&pool, &window)), 40.0, 0.5).unwrap();
        let mse = (0.25 + 1.0 + 1.0) / 8.0;
        let p = nt_xent_oracle(
            &pool_embeddings(&h_p, &pg).unwrap(),
            &pool_embeddings(&r_p, &pg).unwrap(),
            0.5,
        );
        let w = nt_xent_oracle(&h_p, &r_p, 0.5);
        let [vp, vw, vm, vt] = terms.values();
        assert!((vm - mse).abs() < 1e-12);
        assert!((vp - p).abs() < 1e-6 && (vw - w).abs() < 1e-6);
        assert!((vt - (p + w + 40.0 * mse)).abs() < 1e-6);

        let flat = total_loss(inputs, None, 40.0, 0.5).unwrap();
        assert!((flat.values()[3] - 40.0 * mse).abs() < 1e-12);
        let perfect = LossInputs { d: inputs.e, ..inputs };
        let only_contrastive = total_loss(perfect, Some((&pool, &window)), 40.0, 0.5).unwrap();
        assert!((only_contrastive.values()[3] - (p + w)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn nt_xent_symmetric_scale_invariant_nonnegative(seed in 0u64..500, n in 2usize..8, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(n, 4, &mut rng), random(n, 4, &mut rng));
            let ab = eval(&a, &b, 0.5);
            prop_assert!((ab - eval(&b, &a, 0.5)).abs() < 1e-6);
            prop_assert!(ab >= 0.0);
            let mut scaled = a.clone();
            scaled.row_mut(0).iter_mut().for_each(|v| *v *= s);
            prop_assert!((ab - eval(&scaled, &b, 0.5)).abs() < 1e-9);
        }

        #[test]
        fn windows_partition_spots(seed in 0u64..500, factor in 1.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coords: Vec<[f64; 2]> = (0..25)
                .map(|_| [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)])
                .collect();
            let g = WindowGrid::build(&coords, 1.0, factor, Level::Windowed).unwrap();
            let mut all: Vec<usize> = g.windows().iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..25).collect::<Vec<_>>());
        }
    }
}
