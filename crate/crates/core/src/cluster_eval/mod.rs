//! Ward clustering of the shared latent, ARI scoring and Wilcoxon marker
//! genes.

mod ari;
mod ward;
mod wilcoxon;

pub use ari::{ari, ari_partial, ContingencyTable};
pub use ward::{agglomerative, ward_linkage, ClusterAssignment, Dendrogram, Merge};
pub use wilcoxon::{
    benjamini_hochberg, marker_table, markers_to_tsv, mid_ranks, rank_sum_test, wilcoxon_marker,
    Alternative, MarkerOptions, MarkerResult,
};
