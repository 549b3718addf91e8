//! Image embeddings from histology patches.
//!
//! Patches are reduced to a fixed 16×16×3 average-pooled grid and passed
//! through a two-layer MLP. Embeddings from an external backbone can be used
//! instead, in which case only a linear projection is trained.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, SencaError};
use crate::ingestion::{extract_patch, ImageRaster, Patch};
use crate::numerics::{Bound, ParamId, ParamStore, Tensor, Var};

/// Pooled grid side.
pub const GRID: usize = 16;
/// Length of a featurised patch: 3 channels × 16 × 16.
pub const PATCH_FEATURES: usize = 3 * GRID * GRID;

/// How image features enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// Pooled raster patches through `768 → hidden → embed_dim`.
    DownsampleMlp,
    /// External embeddings through a single linear layer.
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchFeaturizerConfig {
    pub mode: ImageMode,
    pub hidden: usize,
}

impl Default for PatchFeaturizerConfig {
    fn default() -> Self {
        PatchFeaturizerConfig {
            mode: ImageMode::DownsampleMlp,
            hidden: 256,
        }
    }
}

fn bin(i: usize, side: usize) -> (usize, usize) {
    let start = i * side / GRID;
    let end = ((i + 1) * side / GRID).max(start + 1);
    (start, end)
}

/// Average-pools a patch onto a 16×16 grid per channel, scaled to `[0, 1]`
/// and flattened channel-major (`c·256 + gy·16 + gx`).
///
/// Patches smaller than 16 pixels repeat source pixels across cells.
pub fn featurize_patch(patch: &Patch) -> Vec<f64> {
    let side = patch.side;
    let mut out = vec![0.0; PATCH_FEATURES];
    for gy in 0..GRID {
        let (y0, y1) = bin(gy, side);
        for gx in 0..GRID {
            let (x0, x1) = bin(gx, side);
            let mut acc = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = patch.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += px[c] as f64;
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                out[c * GRID * GRID + gy * GRID + gx] = acc[c] / count / 255.0;
            }
        }
    }
    out
}

/// Featurises the patch around every spot, in parallel.
pub fn featurize_spots(
    raster: &ImageRaster,
    coords: &[[f64; 2]],
    spacing: f64,
    degree: usize,
) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = coords
        .par_iter()
        .map(|&c| extract_patch(raster, c, spacing, degree).map(|p| featurize_patch(&p)))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Trainable image projection.
#[derive(Debug, Clone)]
pub enum ImageParams {
    Mlp {
        w_a: ParamId,
        b_a: ParamId,
        w_b: ParamId,
        b_b: ParamId,
    },
    Linear {
        w_fc: ParamId,
        b_fc: ParamId,
    },
}

impl ImageParams {
    /// `in_dim` is [`PATCH_FEATURES`] for the MLP path or the width of the
    /// external embeddings.
    pub fn init(
        store: &mut ParamStore,
        config: PatchFeaturizerConfig,
        in_dim: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match config.mode {
            ImageMode::DownsampleMlp => ImageParams::Mlp {
                w_a: store.add_weight("image.w_a", in_dim, config.hidden, rng),
                b_a: store.add_zeros("image.b_a", config.hidden),
                w_b: store.add_weight("image.w_b", config.hidden, embed_dim, rng),
                b_b: store.add_zeros("image.b_b", embed_dim),
            },
            ImageMode::Precomputed => ImageParams::Linear {
                w_fc: store.add_weight("image.w_fc", in_dim, embed_dim, rng),
                b_fc: store.add_zeros("image.b_fc", embed_dim),
            },
        }
    }

    pub fn mode(&self) -> ImageMode {
        match self {
            ImageParams::Mlp { .. } => ImageMode::DownsampleMlp,
            ImageParams::Linear { .. } => ImageMode::Precomputed,
        }
    }

    fn input_weight(&self) -> ParamId {
        match *self {
            ImageParams::Mlp { w_a, .. } => w_a,
            ImageParams::Linear { w_fc, .. } => w_fc,
        }
    }

    /// `n × in_dim` features to `n × embed_dim` embeddings `H`.
    pub fn forward<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let w = p[self.input_weight()].value();
        let f = features.value();
        if f.cols() != w.rows() {
            return Err(SencaError::shape("image_forward", f.shape(), w.shape()));
        }
        match *self {
            ImageParams::Mlp { w_a, b_a, w_b, b_b } => features
                .matmul(p[w_a])?
                .add_row(p[b_a])?
                .elu()
                .matmul(p[w_b])?
                .add_row(p[b_b]),
            ImageParams::Linear { w_fc, b_fc } => features.matmul(p[w_fc])?.add_row(p[b_fc]),
        }
    }
}

/// Eval-mode image embeddings.
pub fn image_forward(store: &ParamStore, params: &ImageParams, features: &Tensor) -> Result<Tensor> {
    let tape = crate::numerics::Tape::new();
    let p = store.bind_frozen(&tape);
    let h = params.forward(&p, tape.constant(features.clone()))?;
    let out = (*h.value()).clone();
    Ok(out)
}
