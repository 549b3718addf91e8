//! Hierarchical contrastive + reconstruction objective and the full-batch
//! Adam training loop.

mod config;
mod loss;

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use loss::{
    nt_xent, pool_embeddings, pool_var, total_loss, Level, LossInputs, LossTerms, WindowGrid,
};

use crate::error::{Result, SencaError};
use crate::image_branch::{featurize_spots, ImageMode, ImageParams, PatchFeaturizerConfig};
use crate::ingestion::{
    load_expression, load_patch_embeddings, load_raster, load_spots, preprocess, ExpressionMatrix,
    ImageRaster, SpotTable,
};
use crate::numerics::{adam_step, AdamState, Bound, CsrMatrix, ParamStore, Tape, Tensor, Var};
use crate::rna_branch::{Dropout, GraphTransformerParams};
use crate::shared_encoder::{CrossAttentionParams, FusionOutput};
use crate::spatial_graph::{build_knn, SpotGraph};

/// Image side of the input.
#[derive(Debug, Clone)]
pub enum ImageInput {
    /// `n × d` embeddings from an external backbone.
    Precomputed(Tensor),
    Raster(ImageRaster),
}

/// Raw inputs of one sample.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub spots: SpotTable,
    /// Raw counts.
    pub expression: ExpressionMatrix,
    pub image: ImageInput,
}

impl TrainingData {
    /// Reads `spots.tsv`, `expression.tsv` and either `embeddings.f32` or
    /// `image.ppm` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let spots = load_spots(&dir.join("spots.tsv"))?;
        let expression = load_expression(&dir.join("expression.tsv"))?;
        let embeddings = dir.join("embeddings.f32");
        let image = if embeddings.exists() {
            ImageInput::Precomputed(load_patch_embeddings(&embeddings)?)
        } else {
            ImageInput::Raster(load_raster(&dir.join("image.ppm"))?)
        };
        Ok(TrainingData {
            spots,
            expression,
            image,
        })
    }
}

/// Everything the loop needs that does not change between steps.
pub struct Prepared {
    pub spot_ids: Vec<String>,
    pub graph: SpotGraph,
    pub features: Tensor,
    pub image_features: Tensor,
    pub image_mode: ImageMode,
    pub adjacency: Rc<CsrMatrix>,
    pub neighbors: Rc<Vec<usize>>,
    /// Pooled and windowed averaging matrices.
    pub pools: (Rc<CsrMatrix>, Rc<CsrMatrix>),
}

impl Prepared {
    pub fn new(data: &TrainingData, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let expression = data.expression.aligned_to(&data.spots)?;
        let hvg = preprocess(&expression, &cfg.preprocess())?;
        let graph = build_knn(&data.spots, cfg.k_neighbors)?.with_features(hvg)?;
        let spacing = data.spots.spacing();
        let (image_features, image_mode) = match &data.image {
            ImageInput::Precomputed(t) => {
                if t.rows() != data.spots.len() {
                    return Err(SencaError::Consistency(format!(
                        "{} embedding rows for {} spots",
                        t.rows(),
                        data.spots.len()
                    )));
                }
                (t.clone(), ImageMode::Precomputed)
            }
            ImageInput::Raster(r) => (
                featurize_spots(r, data.spots.coords(), spacing, cfg.patch_degree)?,
                ImageMode::DownsampleMlp,
            ),
        };
        let coords = data.spots.coords();
        let pooled = WindowGrid::build(coords, spacing, cfg.pool_factor, Level::Pooled)?;
        let windowed = WindowGrid::build(coords, spacing, cfg.window_factor, Level::Windowed)?;
        if cfg.use_hierarchical && pooled.len() < 2 {
            return Err(SencaError::Parameter(format!(
                "pool_factor {} leaves {} window(s); NT-Xent needs at least 2",
                cfg.pool_factor,
                pooled.len()
            )));
        }
        let features = graph.features().expect("attached above").values().clone();
        Ok(Prepared {
            spot_ids: data.spots.ids().to_vec(),
            adjacency: Rc::new(graph.normalized_adjacency()),
            neighbors: graph.neighborhood_table(),
            graph,
            features,
            image_features,
            image_mode,
            pools: (Rc::new(pooled.pool_matrix()), Rc::new(windowed.pool_matrix())),
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }
}

/// All trainable weights and where each component keeps them.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub rna: GraphTransformerParams,
    pub image: ImageParams,
    pub fusion: CrossAttentionParams,
}

/// Tape values of one forward pass over every spot.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs<'t> {
    pub r: Var<'t>,
    pub h: Var<'t>,
    pub fusion: FusionOutput<'t>,
}

impl Model {
    /// Seeded Glorot initialisation.
    pub fn init(cfg: &TrainConfig, genes: usize, image_dim: usize, image_mode: ImageMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let rna = GraphTransformerParams::init(&mut store, genes, cfg.hidden_dim, cfg.embed_dim, &mut rng);
        let image = ImageParams::init(
            &mut store,
            PatchFeaturizerConfig {
                mode: image_mode,
                hidden: cfg.image_hidden,
            },
            image_dim,
            cfg.embed_dim,
            &mut rng,
        );
        let fusion = CrossAttentionParams::init(
            &mut store,
            cfg.embed_dim,
            cfg.attention_width(),
            cfg.latent_dim,
            cfg.use_cross_attention,
            &mut rng,
        );
        Model {
            store,
            rna,
            image,
            fusion,
        }
    }

    pub fn for_data(prepared: &Prepared, cfg: &TrainConfig) -> Self {
        Model::init(
            cfg,
            prepared.features.cols(),
            prepared.image_features.cols(),
            prepared.image_mode,
        )
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prepared: &Prepared,
        dropout: Dropout,
    ) -> Result<ModelOutputs<'t>> {
        let x = tape.constant(prepared.features.clone());
        let r = self.rna.forward(p, x, &prepared.adjacency, dropout)?.r;
        let h = self
            .image
            .forward(p, tape.constant(prepared.image_features.clone()))?;
        let width = prepared.graph.k() + 1;
        let fusion = self.fusion.forward(p, r, h, &prepared.neighbors, width)?;
        Ok(ModelOutputs { r, h, fusion })
    }

    /// Eval-mode `(S, R, H)`.
    pub fn embed(&self, prepared: &Prepared) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.forward(&tape, &p, prepared, Dropout::EVAL)?;
        let take = |v: Var<'_>| (*v.value()).clone();
        Ok((take(out.fusion.s), take(out.r), take(out.h)))
    }
}

/// Loss terms for a forward pass under `cfg`.
pub fn model_loss<'t>(
    out: &ModelOutputs<'t>,
    prepared: &Prepared,
    cfg: &TrainConfig,
) -> Result<LossTerms<'t>> {
    let inputs = LossInputs {
        h_p: out.fusion.h_p,
        r_p: out.fusion.r_p,
        e: out.fusion.e,
        d: out.fusion.d,
    };
    let pools = cfg
        .use_hierarchical
        .then_some((&prepared.pools.0, &prepared.pools.1));
    total_loss(inputs, pools, cfg.lambda, cfg.temperature)
}

/// Mean loss components over the steps of one epoch, measured before each
/// update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ntxent_pooled: f64,
    pub ntxent_windowed: f64,
    pub mse: f64,
    pub total: f64,
}

pub fn format_train_log(log: &[EpochLoss]) -> String {
    let mut out = String::from("epoch\tntxent_pooled\tntxent_windowed\tmse\ttotal\n");
    for e in log {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.epoch, e.ntxent_pooled, e.ntxent_windowed, e.mse, e.total
        )
        .expect("write to String");
    }
    out
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub spot_ids: Vec<String>,
    /// Eval-mode shared latent `S`.
    pub latent: Tensor,
    pub rna_embeddings: Tensor,
    pub image_embeddings: Tensor,
    pub log: Vec<EpochLoss>,
}

/// Ingests, preprocesses and trains on one sample.
pub fn train(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let prepared = Prepared::new(data, cfg)?;
    train_prepared(&prepared, cfg)
}

pub fn train_prepared(prepared: &Prepared, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.lambda == 0.0 && !cfg.use_hierarchical {
        warn!("lambda = 0 without hierarchical terms: the loss is identically zero and nothing trains");
    }
    let mut model = Model::for_data(prepared, cfg);
    let mut adam = AdamState::new(model.store.tensors(), cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 4];
        for _ in 0..cfg.steps_per_epoch {
            let tape = Tape::new();
            let p = model.store.bind(&tape);
            let dropout = Dropout {
                p: cfg.dropout,
                seed: dropout_rng.random(),
                training: true,
            };
            let out = model.forward(&tape, &p, prepared, dropout)?;
            let terms = model_loss(&out, prepared, cfg)?;
            let values = terms.values();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SencaError::NonFinite {
                    epoch,
                    detail: format!(
                        "ntxent_pooled={} ntxent_windowed={} mse={} total={}",
                        values[0], values[1], values[2], values[3]
                    ),
                });
            }
            let grads = p.gradients(&tape.backward(terms.total)?);
            adam_step(model.store.tensors_mut(), &grads, &mut adam)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let k = cfg.steps_per_epoch as f64;
        let entry = EpochLoss {
            epoch,
            ntxent_pooled: sums[0] / k,
            ntxent_windowed: sums[1] / k,
            mse: sums[2] / k,
            total: sums[3] / k,
        };
        info!("epoch {epoch}: total loss {:.6}", entry.total);
        log.push(entry);
    }
    let (latent, rna_embeddings, image_embeddings) = model.embed(prepared)?;
    Ok(TrainOutcome {
        model,
        spot_ids: prepared.spot_ids.clone(),
        latent,
        rna_embeddings,
        image_embeddings,
        log,
    })
}
