//! Neighbourhood cross-attention between RNA and image embeddings, followed
//! by a shared encoder/decoder.
//!
//! For spot `i` with neighbourhood block `R_n`, `H_n` (self first):
//!
//! ```text
//! R_p = R_n P_R                 H_p = H_n P_H
//! A¹  = softmax((H_p Wq1)(R_p Wk1)ᵀ / √E) (R_n Wv1)
//! A²  = softmax((R_p Wq2)(H_p Wk2)ᵀ / √E) (H_n Wv2)
//! E_i = [A¹_0, A²_0]
//! S_i = elu(E_i W_enc + b_enc)
//! D_i = S_i W_dec + b_dec
//! ```
//!
//! Only row 0 of each attention output reaches the encoder, so training
//! evaluates just the centre query of every neighbourhood in one batched op.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Result, SencaError};
use crate::numerics::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::spatial_graph::SpotGraph;

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq1: ParamId,
    pub wk1: ParamId,
    pub wv1: ParamId,
    pub wq2: ParamId,
    pub wk2: ParamId,
    pub wv2: ParamId,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub latent_dim: usize,
    pub p_h: ParamId,
    pub p_r: ParamId,
    /// `None` when fusion falls back to concatenating `[R_i, H_i]`.
    pub attention: Option<AttentionWeights>,
    pub w_enc: ParamId,
    pub b_enc: ParamId,
    pub w_dec: ParamId,
    pub b_dec: ParamId,
}

/// Full-block attention outputs for one neighbourhood.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention<'t> {
    pub a1: Var<'t>,
    pub a2: Var<'t>,
    pub weights1: Var<'t>,
    pub weights2: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded<'t> {
    pub e: Var<'t>,
    pub s: Var<'t>,
    pub d: Var<'t>,
}

/// Batched fusion over all spots.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput<'t> {
    pub r_p: Var<'t>,
    pub h_p: Var<'t>,
    pub e: Var<'t>,
    pub s: Var<'t>,
    pub d: Var<'t>,
}

/// Rows of `R` and `H` for spot `i`'s neighbourhood, self first.
pub fn gather(r: &Tensor, h: &Tensor, graph: &SpotGraph, i: usize) -> Result<(Tensor, Tensor)> {
    if r.rows() != graph.n() || h.rows() != graph.n() {
        return Err(SencaError::shape("gather", r.shape(), h.shape()));
    }
    let idx = graph.neighborhood(i)?;
    Ok((r.select_rows(&idx), h.select_rows(&idx)))
}

impl CrossAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        embed_dim: usize,
        attn_dim: usize,
        latent_dim: usize,
        cross_attention: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let p_h = store.add_weight("fusion.p_h", embed_dim, embed_dim, rng);
        let p_r = store.add_weight("fusion.p_r", embed_dim, embed_dim, rng);
        let attention = cross_attention.then(|| AttentionWeights {
            wq1: store.add_weight("fusion.wq1", embed_dim, attn_dim, rng),
            wk1: store.add_weight("fusion.wk1", embed_dim, attn_dim, rng),
            wv1: store.add_weight("fusion.wv1", embed_dim, attn_dim, rng),
            wq2: store.add_weight("fusion.wq2", embed_dim, attn_dim, rng),
            wk2: store.add_weight("fusion.wk2", embed_dim, attn_dim, rng),
            wv2: store.add_weight("fusion.wv2", embed_dim, attn_dim, rng),
        });
        let fused = if cross_attention { 2 * attn_dim } else { 2 * embed_dim };
        CrossAttentionParams {
            embed_dim,
            attn_dim,
            latent_dim,
            p_h,
            p_r,
            attention,
            w_enc: store.add_weight("fusion.w_enc", fused, latent_dim, rng),
            b_enc: store.add_zeros("fusion.b_enc", latent_dim),
            w_dec: store.add_weight("fusion.w_dec", latent_dim, fused, rng),
            b_dec: store.add_zeros("fusion.b_dec", fused),
        }
    }

    fn weights(&self) -> Result<&AttentionWeights> {
        self.attention
            .as_ref()
            .ok_or_else(|| SencaError::Config("cross-attention is disabled for this model".into()))
    }

    fn scale(&self) -> f64 {
        1.0 / (self.attn_dim as f64).sqrt()
    }

    /// `A¹` and `A²` over a whole `(k+1) × embed_dim` block.
    pub fn cross_attention<'t>(
        &self,
        p: &Bound<'t>,
        r_n: Var<'t>,
        h_n: Var<'t>,
    ) -> Result<CrossAttention<'t>> {
        let w = self.weights()?;
        if r_n.shape() != h_n.shape() {
            return Err(SencaError::shape("cross_attention", &r_n.shape(), &h_n.shape()));
        }
        let r_p = r_n.matmul(p[self.p_r])?;
        let h_p = h_n.matmul(p[self.p_h])?;
        let weights1 = h_p
            .matmul(p[w.wq1])?
            .matmul(r_p.matmul(p[w.wk1])?.transpose())?
            .scale(self.scale())
            .softmax_rows();
        let a1 = weights1.matmul(r_n.matmul(p[w.wv1])?)?;
        let weights2 = r_p
            .matmul(p[w.wq2])?
            .matmul(h_p.matmul(p[w.wk2])?.transpose())?
            .scale(self.scale())
            .softmax_rows();
        let a2 = weights2.matmul(h_n.matmul(p[w.wv2])?)?;
        Ok(CrossAttention {
            a1,
            a2,
            weights1,
            weights2,
        })
    }

    /// Encoder and decoder applied to fused rows `e`.
    pub fn encode<'t>(&self, p: &Bound<'t>, e: Var<'t>) -> Result<Encoded<'t>> {
        let s = e.matmul(p[self.w_enc])?.add_row(p[self.b_enc])?.elu();
        let d = s.matmul(p[self.w_dec])?.add_row(p[self.b_dec])?;
        Ok(Encoded { e, s, d })
    }

    /// Concatenates the centre rows of `A¹` and `A²` and encodes them.
    pub fn fuse_encode<'t>(&self, p: &Bound<'t>, a1: Var<'t>, a2: Var<'t>) -> Result<Encoded<'t>> {
        let e = a1.gather_rows(&[0])?.concat_cols(a2.gather_rows(&[0])?)?;
        self.encode(p, e)
    }

    /// Fusion for every spot at once. `neighbors` holds each spot's
    /// neighbourhood (self first), `width` entries per spot.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        r: Var<'t>,
        h: Var<'t>,
        neighbors: &Rc<Vec<usize>>,
        width: usize,
    ) -> Result<FusionOutput<'t>> {
        if r.shape() != h.shape() {
            return Err(SencaError::shape("fusion", &r.shape(), &h.shape()));
        }
        let r_p = r.matmul(p[self.p_r])?;
        let h_p = h.matmul(p[self.p_h])?;
        let e = match &self.attention {
            Some(w) => {
                let a1 = h_p.matmul(p[w.wq1])?.neighbor_attention(
                    r_p.matmul(p[w.wk1])?,
                    r.matmul(p[w.wv1])?,
                    Rc::clone(neighbors),
                    width,
                    self.scale(),
                )?;
                let a2 = r_p.matmul(p[w.wq2])?.neighbor_attention(
                    h_p.matmul(p[w.wk2])?,
                    h.matmul(p[w.wv2])?,
                    Rc::clone(neighbors),
                    width,
                    self.scale(),
                )?;
                a1.concat_cols(a2)?
            }
            None => r.concat_cols(h)?,
        };
        let Encoded { e, s, d } = self.encode(p, e)?;
        Ok(FusionOutput { r_p, h_p, e, s, d })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn model(embed: usize, latent: usize, seed: u64) -> (ParamStore, CrossAttentionParams) {
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(
            &mut store,
            embed,
            embed,
            latent,
            true,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        (store, params)
    }

    fn block(store: &ParamStore, params: &CrossAttentionParams, r: &Tensor, h: &Tensor) -> [Tensor; 4] {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = params
            .cross_attention(&p, tape.constant(r.clone()), tape.constant(h.clone()))
            .unwrap();
        [out.a1, out.a2, out.weights1, out.weights2].map(|v| (*v.value()).clone())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
    }

    /// Direct per-entry evaluation of one attention output.
    #[allow(clippy::too_many_arguments)]
    fn attention_oracle(
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        pq: &Tensor,
        pk: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
    ) -> Vec<Vec<f64>> {
        let e = wq.cols() as f64;
        let m = queries.rows();
        let mut out = Vec::new();
        for i in 0..m {
            let q = row_times(&row_times(queries.row(i), pq), wq);
            let logits: Vec<f64> = (0..m)
                .map(|j| dot(&q, &row_times(&row_times(keys.row(j), pk), wk)) / e.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut row = vec![0.0; wv.cols()];
            for j in 0..m {
                let v = row_times(values.row(j), wv);
                for (o, x) in row.iter_mut().zip(v) {
                    *o += logits[j].exp() / z * x;
                }
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn gather_matches_row_indexing() {
        let coords: Vec<[f64; 2]> = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64]).collect();
        let g = SpotGraph::from_coords(coords, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, h) = (random(9, 6, &mut rng), random(9, 6, &mut rng));
        let (rn, hn) = gather(&r, &h, &g, 4).unwrap();
        assert_eq!(rn.shape(), &[5, 6]);
        assert_eq!(rn.row(0), r.row(4));
        for (slot, &src) in g.neighborhood(4).unwrap().iter().enumerate() {
            assert_eq!(rn.row(slot), r.row(src));
            assert_eq!(hn.row(slot), h.row(src));
        }
        assert!(matches!(gather(&r, &h, &g, 9), Err(SencaError::Bounds(_))));
    }

    #[test]
    fn matches_direct_formula() {
        let (store, params) = model(4, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (r, h) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
        let [a1, a2, _, _] = block(&store, &params, &r, &h);
        let w = params.attention.as_ref().unwrap();
        let t = |id| store.get(id);
        let o1 = attention_oracle(&h, &r, &r, t(params.p_h), t(params.p_r), t(w.wq1), t(w.wk1), t(w.wv1));
        let o2 = attention_oracle(&r, &h, &h, t(params.p_r), t(params.p_h), t(w.wq2), t(w.wk2), t(w.wv2));
        for i in 0..3 {
            for c in 0..4 {
                assert!((a1.get(i, c) - o1[i][c]).abs() < 1e-6);
                assert!((a2.get(i, c) - o2[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_keys_give_mean_of_values() {
        let (store, params) = model(3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Tensor::from_rows(&[[0.5, -0.2, 0.1]; 4]).unwrap();
        let h = random(4, 3, &mut rng);
        let [a1, _, w1, _] = block(&store, &params, &r, &h);
        for i in 0..4 {
            assert!(w1.row(i).iter().all(|&x| (x - 0.25).abs() < 1e-12));
            assert!(a1.row(i).iter().zip(a1.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let tape = Tape::new();
        let v = tape.constant(r.clone()).matmul(tape.constant(store.get(params.attention.as_ref().unwrap().wv1).clone())).unwrap().value();
        for c in 0..3 {
            let mean = (0..4).map(|j| v.get(j, c)).sum::<f64>() / 4.0;
            assert!((a1.get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_block_returns_value_row() {
        let (store, params) = model(3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (r, h) = (random(1, 3, &mut rng), random(1, 3, &mut rng));
        let [a1, a2, w1, w2] = block(&store, &params, &r, &h);
        assert_eq!(w1.data(), &[1.0]);
        assert_eq!(w2.data(), &[1.0]);
        let w = params.attention.as_ref().unwrap();
        assert!(a1.max_abs_diff(&r.matmul(store.get(w.wv1)).unwrap()) < 1e-15);
        assert!(a2.max_abs_diff(&h.matmul(store.get(w.wv2)).unwrap()) < 1e-15);
    }

    #[test]
    fn rows_are_convex_combinations() {
        for seed in 0..5 {
            let (store, params) = model(5, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let (r, h) = (random(5, 5, &mut rng).map(|v| v * 4.0), random(5, 5, &mut rng));
            let [a1, _, w1, w2] = block(&store, &params, &r, &h);
            let values = r.matmul(store.get(params.attention.as_ref().unwrap().wv1)).unwrap();
            for i in 0..5 {
                assert!((w1.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!((w2.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for c in 0..5 {
                    let col: Vec<f64> = (0..5).map(|j| values.get(j, c)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert!(a1.get(i, c) >= lo - 1e-12 && a1.get(i, c) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn swapping_modalities_and_weights_swaps_outputs() {
        let (store, params) = model(4, 3, 21);
        let w = params.attention.clone().unwrap();
        let mut swapped = store.clone();
        for (a, b) in [(w.wq1, w.wq2), (w.wk1, w.wk2), (w.wv1, w.wv2), (params.p_h, params.p_r)] {
            *swapped.get_mut(a) = store.get(b).clone();
            *swapped.get_mut(b) = store.get(a).clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (r, h) = (random(5, 4, &mut rng), random(5, 4, &mut rng));
        let [a1, a2, _, _] = block(&store, &params, &r, &h);
        let [b1, b2, _, _] = block(&swapped, &params, &h, &r);
        assert!(a1.max_abs_diff(&b2) < 1e-12);
        assert!(a2.max_abs_diff(&b1) < 1e-12);
    }

    #[test]
    fn batched_fusion_equals_per_spot_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let coords: Vec<[f64; 2]> = (0..12).map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]).collect();
        let g = SpotGraph::from_coords(coords, 3).unwrap();
        let (store, params) = model(4, 3, 31);
        let (r, h) = (random(12, 4, &mut rng), random(12, 4, &mut rng));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let all = params
            .forward(&p, tape.constant(r.clone()), tape.constant(h.clone()), &g.neighborhood_table(), 4)
            .unwrap();
        for i in 0..12 {
            let (rn, hn) = gather(&r, &h, &g, i).unwrap();
            let ca = params.cross_attention(&p, tape.constant(rn), tape.constant(hn)).unwrap();
            let one = params.fuse_encode(&p, ca.a1, ca.a2).unwrap();
            assert_eq!(one.e.shape(), vec![1, 8]);
            assert_eq!(one.s.shape(), vec![1, 3]);
            for (v_all, v_one) in [(all.e, one.e), (all.s, one.s), (all.d, one.d)] {
                let (x, y) = (v_all.value(), v_one.value());
                assert!(x.row(i).iter().zip(y.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_attention_and_bias_encode_to_zero() {
        let (store, params) = model(4, 3, 1);
        let mut zeroed = store.clone();
        for id in [params.b_enc, params.b_dec] {
            zeroed.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let p = zeroed.bind_frozen(&tape);
        let zero = tape.constant(Tensor::zeros(&[3, 4]));
        let out = params.fuse_encode(&p, zero, zero).unwrap();
        assert!(out.s.value().data().iter().all(|&v| v == 0.0));
        assert!(out.d.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.e.shape(), vec![1, 8]);
    }

    #[test]
    fn concatenation_fallback_uses_raw_embeddings() {
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(&mut store, 3, 3, 2, false, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let r = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let h = Tensor::from_rows(&[[7.0, 8.0, 9.0], [1.0, 1.0, 1.0]]).unwrap();
        let table = Rc::new(vec![0, 1, 1, 0]);
        let out = params.forward(&p, tape.constant(r), tape.constant(h), &table, 2).unwrap();
        assert_eq!(out.e.value().row(0), &[1.0, 2.0, 3.0, 7.0, 8.0, 9.0]);
        assert!(params.cross_attention(&p, out.r_p, out.h_p).is_err());
    }

    #[test]
    fn reconstruction_gradient_wrt_w_dec() {
        for seed in 0..5 {
            let (store, params) = model(3, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
            let (a1, a2) = (random(4, 3, &mut rng), random(4, 3, &mut rng));
            let errs = check_gradients(
                &|tape: &Tape, v| {
                    let mut p = store.bind_frozen(tape);
                    p.replace(params.w_dec, v[2]);
                    let out = params.fuse_encode(&p, v[0], v[1])?;
                    out.e.mse(out.d)
                },
                &[a1, a2, store.get(params.w_dec).clone()],
                1e-3,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-3), "seed {seed}: {errs:?}");
        }
    }

    #[test]
    fn batched_gradients_match_finite_differences() {
        let coords: Vec<[f64; 2]> = (0..6).map(|i| [(i % 3) as f64, (i / 3) as f64]).collect();
        let g = SpotGraph::from_coords(coords, 2).unwrap();
        let table = g.neighborhood_table();
        for seed in 0..5 {
            let (store, params) = model(3, 2, 70 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
            let (r, h) = (random(6, 3, &mut rng), random(6, 3, &mut rng));
            let wq1 = params.attention.as_ref().unwrap().wq1;
            let errs = check_gradients(
                &|tape: &Tape, v| {
                    let mut p = store.bind_frozen(tape);
                    p.replace(wq1, v[2]);
                    let out = params.forward(&p, v[0], v[1], &table, 3)?;
                    let rec = out.e.mse(out.d)?;
                    rec.add(out.s.mean())
                },
                &[r, h, store.get(wq1).clone()],
                1e-3,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-3), "seed {seed}: {errs:?}");
        }
    }
}
