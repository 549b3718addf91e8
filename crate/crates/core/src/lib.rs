pub mod cluster_eval;
pub mod error;
pub mod image_branch;
pub mod ingestion;
pub mod numerics;
pub mod rna_branch;
pub mod shared_encoder;
pub mod spatial_graph;
pub mod synthetic;
pub mod training;

pub use error::{Result, SencaError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
    pub struct TensorsAndGradients;
    #[doc = include_str!("../../../book/src/spatial-graph.md")]
    pub struct SpatialGraph;
    #[doc = include_str!("../../../book/src/rna-branch.md")]
    pub struct RnaBranch;
    #[doc = include_str!("../../../book/src/image-branch.md")]
    pub struct ImageBranch;
    #[doc = include_str!("../../../book/src/cross-attention.md")]
    pub struct CrossAttention;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/clustering.md")]
    pub struct Clustering;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
