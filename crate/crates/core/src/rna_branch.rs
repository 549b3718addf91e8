//! Graph transformer producing RNA embeddings from spot expression.
//!
//! ```text
//! X0 = dropout(V)
//! X1 = X0 W1
//! X2 = Â X1                       Â = D⁻¹(A + I)
//! T  = FF(LN(SelfAttention(X2)))
//! X3 = elu(X2 + T)
//! R  = X3 W_out
//! ```

use std::rc::Rc;

use rand::Rng;

use crate::error::{Result, SencaError};
use crate::ingestion::Stage;
use crate::numerics::{Bound, CsrMatrix, ParamId, ParamStore, Tape, Tensor, Var};
use crate::spatial_graph::SpotGraph;

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
    pub training: bool,
}

impl Dropout {
    pub const EVAL: Dropout = Dropout {
        p: 0.0,
        seed: 0,
        training: false,
    };
}

/// Handles to the graph transformer's weights inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GraphTransformerParams {
    pub genes: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub w1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub w_out: ParamId,
}

/// Tape values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RnaOutput<'t> {
    /// `n × embed_dim` embeddings.
    pub r: Var<'t>,
    /// `n × n` self-attention weights.
    pub attention: Var<'t>,
}

impl GraphTransformerParams {
    pub fn init(
        store: &mut ParamStore,
        genes: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GraphTransformerParams {
            genes,
            hidden,
            embed_dim,
            w1: store.add_weight("rna.w1", genes, hidden, rng),
            wq: store.add_weight("rna.attn.wq", hidden, hidden, rng),
            wk: store.add_weight("rna.attn.wk", hidden, hidden, rng),
            wv: store.add_weight("rna.attn.wv", hidden, hidden, rng),
            wo: store.add_weight("rna.attn.wo", hidden, hidden, rng),
            ln_gain: store.add("rna.ln.gain", Tensor::filled(&[hidden], 1.0)),
            ln_bias: store.add_zeros("rna.ln.bias", hidden),
            ff_w1: store.add_weight("rna.ff.w1", hidden, hidden, rng),
            ff_b1: store.add_zeros("rna.ff.b1", hidden),
            ff_w2: store.add_weight("rna.ff.w2", hidden, hidden, rng),
            ff_b2: store.add_zeros("rna.ff.b2", hidden),
            w_out: store.add_weight("rna.w_out", hidden, embed_dim, rng),
        }
    }

    /// Runs the transformer on `features` (`n × genes`) with message passing
    /// over `adjacency` (`n × n`, row-normalised).
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        features: Var<'t>,
        adjacency: &Rc<CsrMatrix>,
        dropout: Dropout,
    ) -> Result<RnaOutput<'t>> {
        let fv = features.value();
        if fv.cols() != self.genes {
            return Err(SencaError::shape(
                "rna_forward",
                fv.shape(),
                p[self.w1].value().shape(),
            ));
        }
        let x0 = features.dropout(dropout.p, dropout.seed, dropout.training)?;
        let x1 = x0.matmul(p[self.w1])?;
        let x2 = x1.sparse_lmul(Rc::clone(adjacency))?;

        let q = x2.matmul(p[self.wq])?;
        let k = x2.matmul(p[self.wk])?;
        let v = x2.matmul(p[self.wv])?;
        let attention = q
            .matmul(k.transpose())?
            .scale(1.0 / (self.hidden as f64).sqrt())
            .softmax_rows();
        let sa = attention.matmul(v)?.matmul(p[self.wo])?;

        let normed = sa.layer_norm(p[self.ln_gain], p[self.ln_bias])?;
        let ff = normed
            .matmul(p[self.ff_w1])?
            .add_row(p[self.ff_b1])?
            .elu()
            .matmul(p[self.ff_w2])?
            .add_row(p[self.ff_b2])?;
        let x3 = x2.add(ff)?.elu();
        let r = x3.matmul(p[self.w_out])?;
        Ok(RnaOutput { r, attention })
    }
}

/// Eval-mode RNA embeddings for a graph carrying HVG-selected features.
pub fn rna_forward(
    graph: &SpotGraph,
    store: &ParamStore,
    params: &GraphTransformerParams,
) -> Result<Tensor> {
    let features = graph.features().ok_or_else(|| SencaError::Stage {
        op: "rna_forward",
        expected: Stage::HvgSelected.name(),
        found: "none",
    })?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let x = tape.constant(features.values().clone());
    let adjacency = Rc::new(graph.normalized_adjacency());
    let out = params.forward(&p, x, &adjacency, Dropout::EVAL)?;
    let r = (*out.r.value()).clone();
    Ok(r)
}
