//! Input files and the gene preprocessing pipeline
//! (`filter_genes` → `normalize_log` → `select_hvg`).

mod expression;
mod labels;
mod matrix_io;
mod raster;
mod spots;
mod tsv;

pub use expression::{
    filter_genes, gene_dispersions, load_expression, log1p, normalize_log, normalize_total,
    select_hvg, write_expression, ExpressionMatrix, GeneDispersion, Stage,
};
pub use labels::{load_labels, write_labels, LabelTable};
pub use matrix_io::{
    decode_matrix, encode_matrix, load_matrix, load_patch_embeddings, write_matrix,
};
pub use raster::{
    encode_ppm, extract_patch, load_raster, meta_path, patch_side, write_raster, ImageRaster,
    Patch,
};
pub use spots::{load_spots, min_pairwise_distance, write_spots, SpotTable};

pub use tsv::write_atomic;

/// Preprocessing knobs with their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub min_total: f64,
    pub target_sum: f64,
    pub n_hvg: usize,
    pub n_bins: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_total: 10.0,
            target_sum: 1e4,
            n_hvg: 500,
            n_bins: 20,
        }
    }
}

/// Runs the full fixed-order pipeline on raw counts.
pub fn preprocess(raw: &ExpressionMatrix, cfg: &PreprocessConfig) -> crate::Result<ExpressionMatrix> {
    let filtered = filter_genes(raw, cfg.min_total)?;
    let logged = normalize_log(&filtered, cfg.target_sum)?;
    select_hvg(&logged, cfg.n_hvg, cfg.n_bins)
}
