//! Multi-modal fusion: stacks the three modality blocks into one token
//! matrix and refines it with a residual self-attention + perceptron
//! aggregator.
//!
//! The aggregator computes `x + mlp(attention(x))` token-wise: single-head
//! attention `softmax(q kᵀ / sqrt(d)) v` with an output projection, then a
//! two-layer perceptron `d -> 4d -> d`. No positional encodings and no layer
//! normalization; token identity is carried by the fixed modality order.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::encoders::{EmbeddingBlock, Modality};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::params::{gaussian_init, ParamStore};

/// The fused `3k x d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct XEmbedding {
    pub tokens: Array2<f64>,
}

impl XEmbedding {
    pub fn shape(&self) -> (usize, usize) {
        self.tokens.dim()
    }
}

/// Row-wise stacking in fixed order: semantic, location, textural.
pub fn concat_modalities(
    sem: &EmbeddingBlock,
    loc: &EmbeddingBlock,
    tex: &EmbeddingBlock,
) -> Result<XEmbedding> {
    let expected = [
        (sem, Modality::Semantic, "first"),
        (loc, Modality::Location, "second"),
        (tex, Modality::Textural, "third"),
    ];
    for (block, modality, position) in expected {
        if block.modality != modality {
            return Err(Error::Invalid(format!(
                "concat_modalities: {position} argument must be the {modality:?} block, got {:?}",
                block.modality
            )));
        }
    }
    let (k, d) = sem.shape();
    for (block, name) in [(loc, "location"), (tex, "textural")] {
        if block.shape() != (k, d) {
            return Err(Error::shape(
                format!("concat_modalities ({name} block)"),
                format!("({k}, {d})"),
                format!("{:?}", block.shape()),
            ));
        }
    }
    let mut tokens = Array2::<f64>::zeros((3 * k, d));
    for (slot, block) in [sem, loc, tex].into_iter().enumerate() {
        tokens
            .slice_mut(ndarray::s![slot * k..(slot + 1) * k, ..])
            .assign(&block.tokens);
    }
    Ok(XEmbedding { tokens })
}

/// Aggregator architecture; parameter values live in the shared store under
/// the `agg.` prefix.
#[derive(Debug, Clone, Copy)]
pub struct Aggregator {
    pub d: usize,
}

impl Aggregator {
    pub fn register(d: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        for name in ["agg.wq", "agg.wk", "agg.wv", "agg.wo"] {
            store.register(name, gaussian_init(rng, &[d, d], d, 1.0), false);
        }
        store.register("agg.mlp1.w", gaussian_init(rng, &[d, 4 * d], d, 1.0), false);
        store.register("agg.mlp1.b", ndarray::ArrayD::zeros(vec![1, 4 * d]), false);
        store.register(
            "agg.mlp2.w",
            gaussian_init(rng, &[4 * d, d], 4 * d, 1.0),
            false,
        );
        store.register("agg.mlp2.b", ndarray::ArrayD::zeros(vec![1, d]), false);
        Aggregator { d }
    }

    /// Differentiable aggregation graph. Returns `(output, attention)` so
    /// invariant tests can inspect the softmax rows.
    pub fn build(&self, g: &mut ModelGraph<'_>, x: Var) -> (Var, Var) {
        let wq = g.param("agg.wq");
        let wk = g.param("agg.wk");
        let wv = g.param("agg.wv");
        let wo = g.param("agg.wo");
        let q = g.tape.matmul(x, wq);
        let k = g.tape.matmul(x, wk);
        let v = g.tape.matmul(x, wv);
        let scores = g.tape.matmul_transposed(q, k);
        let scaled = g.tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let attention = g.tape.softmax_rows(scaled);
        let mixed = g.tape.matmul(attention, v);
        let projected = g.tape.matmul(mixed, wo);

        let w1 = g.param("agg.mlp1.w");
        let b1 = g.param("agg.mlp1.b");
        let w2 = g.param("agg.mlp2.w");
        let b2 = g.param("agg.mlp2.b");
        let hidden = g.tape.linear(projected, w1, b1);
        let hidden = g.tape.silu(hidden);
        let mapped = g.tape.linear(hidden, w2, b2);
        let out = g.tape.add(x, mapped);
        (out, attention)
    }

    /// Forward-only aggregation with input validation.
    pub fn aggregate(&self, e_mul: &XEmbedding, store: &ParamStore) -> Result<XEmbedding> {
        let (out, _) = self.aggregate_with_attention(e_mul, store)?;
        Ok(out)
    }

    /// Forward aggregation also returning the softmax matrix.
    pub fn aggregate_with_attention(
        &self,
        e_mul: &XEmbedding,
        store: &ParamStore,
    ) -> Result<(XEmbedding, Array2<f64>)> {
        if e_mul.tokens.ncols() != self.d {
            return Err(Error::shape(
                "aggregate",
                format!("(3k, {})", self.d),
                format!("{:?}", e_mul.shape()),
            ));
        }
        if e_mul.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("aggregate: non-finite input".into()));
        }
        let mut g = ModelGraph::new(store);
        let x = g.tape.leaf2(e_mul.tokens.clone());
        let (out, attention) = self.build(&mut g, x);
        Ok((
            XEmbedding {
                tokens: g.tape.value2(out),
            },
            g.tape.value2(attention),
        ))
    }
}
