use super::AttentionLayer;
use crate::linalg::Matrix;

/// Cached history for one attention layer.
///
/// Rows are tokens. MHA caches full keys and values; MLA caches the joint
/// latent and the preserved key dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Mha { k: Matrix, v: Matrix },
    Mla { c_kv: Matrix, k_p: Matrix },
}

impl LayerCache {
    /// An empty cache shaped for `layer`.
    pub fn empty(layer: &AttentionLayer) -> Self {
        match layer {
            AttentionLayer::Mha(w) => LayerCache::Mha {
                k: Matrix::zeros(0, w.d_model()),
                v: Matrix::zeros(0, w.d_model()),
            },
            AttentionLayer::Mla(w) => LayerCache::Mla {
                c_kv: Matrix::zeros(0, w.d_latent()),
                k_p: Matrix::zeros(0, w.n_preserved()),
            },
        }
    }

    /// Tokens cached so far.
    pub fn len(&self) -> usize {
        match self {
            LayerCache::Mha { k, .. } => k.rows(),
            LayerCache::Mla { c_kv, .. } => c_kv.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries_per_token(&self) -> usize {
        match self {
            LayerCache::Mha { k, v } => k.cols() + v.cols(),
            LayerCache::Mla { c_kv, k_p } => c_kv.cols() + k_p.cols(),
        }
    }

    /// Total cached scalars.
    pub fn entries(&self) -> usize {
        let n = match self {
            LayerCache::Mha { k, v } => k.len() + v.len(),
            LayerCache::Mla { c_kv, k_p } => c_kv.len() + k_p.len(),
        };
        debug_assert_eq!(n, self.len() * self.entries_per_token());
        n
    }
}
