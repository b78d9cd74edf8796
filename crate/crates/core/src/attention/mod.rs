//! Attention forward passes for the three architectures:
//!
//! - MHA: cache holds full keys and values (`2·d_model` per token).
//! - Full-compression MLA: cache holds the joint latent `c_kv` only.
//! - Dimension-preserving MLA: cache holds `c_kv` plus the preserved key
//!   dimensions `k_p`.
//!
//! Queries are never compressed. Positional information is absolute and
//! already mixed into the inputs, so no rotary split is needed.

mod cache;
mod config;
mod positional;
mod weights;

pub use cache::LayerCache;
pub use config::{AttentionConfig, Variant};
pub use positional::sinusoidal_embedding;
pub use weights::{KeyLayout, KeySlot, MhaLayerWeights, MlaLayerWeights};

use crate::error::{MlaError, Result};
use crate::linalg::{softmax_rows_in_place, Matrix};

/// How latent-attention scores are evaluated at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScorePath {
    /// Reconstruct full keys and values from the cache, then attend.
    #[default]
    Naive,
    /// Fold `w_uk` into the query and `w_uv` after the weighted sum, so keys
    /// and values are never materialized.
    Absorbed,
}

/// One attention layer of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionLayer {
    Mha(MhaLayerWeights),
    Mla(MlaLayerWeights),
}

impl AttentionLayer {
    pub fn variant(&self) -> Variant {
        match self {
            AttentionLayer::Mha(_) => Variant::Mha,
            AttentionLayer::Mla(w) => w.variant(),
        }
    }

    pub fn n_heads(&self) -> usize {
        match self {
            AttentionLayer::Mha(w) => w.n_heads,
            AttentionLayer::Mla(w) => w.selection().head_count(),
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            AttentionLayer::Mha(w) => w.d_model(),
            AttentionLayer::Mla(w) => w.d_model(),
        }
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        match self {
            AttentionLayer::Mha(w) => w.validate(cfg),
            AttentionLayer::Mla(w) => w.validate(cfg),
        }
    }

    pub fn forward(
        &self,
        x_q: &Matrix,
        x_kv: &Matrix,
        causal: bool,
        cache: Option<&mut LayerCache>,
        path: ScorePath,
    ) -> Result<Matrix> {
        match self {
            AttentionLayer::Mha(w) => mha_attend(x_q, x_kv, w, causal, cache),
            AttentionLayer::Mla(w) => match path {
                ScorePath::Naive => mla_attend(x_q, x_kv, w, causal, cache),
                ScorePath::Absorbed => mla_attend_absorbed(x_q, x_kv, w, causal, cache),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            AttentionLayer::Mha(w) => AttentionLayer::Mha(w.zeros_like()),
            AttentionLayer::Mla(w) => AttentionLayer::Mla(w.zeros_like()),
        }
    }
}

fn check_inputs(x_q: &Matrix, x_kv: &Matrix, d_model: usize) -> Result<()> {
    if x_q.cols() != d_model || x_kv.cols() != d_model {
        return Err(MlaError::arg(format!(
            "attention inputs are {}x{} and {}x{}, layer width is {d_model}",
            x_q.rows(),
            x_q.cols(),
            x_kv.rows(),
            x_kv.cols()
        )));
    }
    Ok(())
}

/// Query row `i` sees key rows `0..=offset+i` under a causal mask, where
/// `offset = keys − queries` (the number of tokens cached before this call).
pub(crate) fn causal_offset(queries: usize, keys: usize, causal: bool) -> Result<Option<usize>> {
    if !causal {
        return Ok(None);
    }
    keys.checked_sub(queries).map(Some).ok_or_else(|| {
        MlaError::arg(format!(
            "causal attention with {queries} queries but only {keys} keys"
        ))
    })
}

/// Scales scores, applies the causal mask and normalizes rows in place.
pub(crate) fn scores_to_probs(scores: &mut Matrix, scale: f64, offset: Option<usize>) {
    scores.scale(scale);
    if let Some(off) = offset {
        for i in 0..scores.rows() {
            for v in &mut scores.row_mut(i)[off + i + 1..] {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows_in_place(scores);
}

/// Per-head scaled dot-product attention over full `q`, `k`, `v`
/// (`S×d`, `T×d`, `T×d`); heads are contiguous column blocks.
pub(crate) fn multi_head_sdpa(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    offset: Option<usize>,
) -> Matrix {
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.column_range(lo, hi);
        let kh = k.column_range(lo, hi);
        let vh = v.column_range(lo, hi);
        let mut p = qh.matmul_t(&kh);
        scores_to_probs(&mut p, scale, offset);
        let oh = p.matmul(&vh);
        for r in 0..out.rows() {
            out.row_mut(r)[lo..hi].copy_from_slice(oh.row(r));
        }
    }
    out
}

fn project_out(o: &Matrix, w_o: &Matrix, b_o: &Matrix) -> Matrix {
    let mut out = o.matmul(w_o);
    out.add_row_broadcast(b_o);
    out
}

/// Standard multi-head attention. With a cache, `x_kv` holds only the new
/// tokens; their keys and values are appended before attending.
pub fn mha_attend(
    x_q: &Matrix,
    x_kv: &Matrix,
    w: &MhaLayerWeights,
    causal: bool,
    cache: Option<&mut LayerCache>,
) -> Result<Matrix> {
    check_inputs(x_q, x_kv, w.d_model())?;
    let mut q = x_q.matmul(&w.w_q);
    q.add_row_broadcast(&w.b_q);
    let k_new = x_kv.matmul(&w.w_k);
    let mut v_new = x_kv.matmul(&w.w_v);
    v_new.add_row_broadcast(&w.b_v);

    let (k_local, v_local);
    let (k, v): (&Matrix, &Matrix) = match cache {
        Some(LayerCache::Mha { k, v }) => {
            k.append_rows(&k_new);
            v.append_rows(&v_new);
            (&*k, &*v)
        }
        Some(_) => return Err(MlaError::State("MHA layer given an MLA cache".into())),
        None => {
            k_local = k_new;
            v_local = v_new;
            (&k_local, &v_local)
        }
    };
    let offset = causal_offset(q.rows(), k.rows(), causal)?;
    let o = multi_head_sdpa(&q, k, v, w.n_heads, offset);
    Ok(project_out(&o, &w.w_o, &w.b_o))
}

/// Projects new tokens to latents and preserved keys, appending them to the
/// cache when one is given; returns the full cached history.
fn latent_history<'c>(
    x_kv: &Matrix,
    w: &MlaLayerWeights,
    cache: Option<&'c mut LayerCache>,
    local: &'c mut Option<(Matrix, Matrix)>,
) -> Result<(&'c Matrix, &'c Matrix)> {
    let c_new = x_kv.matmul(&w.w_dkv);
    let kp_new = x_kv.matmul(&w.w_kp);
    match cache {
        Some(LayerCache::Mla { c_kv, k_p }) => {
            if c_kv.cols() != w.d_latent() || k_p.cols() != w.n_preserved() {
                return Err(MlaError::State(format!(
                    "cache widths ({}, {}) do not match layer ({}, {})",
                    c_kv.cols(),
                    k_p.cols(),
                    w.d_latent(),
                    w.n_preserved()
                )));
            }
            c_kv.append_rows(&c_new);
            k_p.append_rows(&kp_new);
            Ok((&*c_kv, &*k_p))
        }
        Some(_) => Err(MlaError::State("MLA layer given an MHA cache".into())),
        None => {
            let (c, kp) = local.insert((c_new, kp_new));
            Ok((&*c, &*kp))
        }
    }
}

/// Latent attention with explicit key and value reconstruction.
pub fn mla_attend(
    x_q: &Matrix,
    x_kv: &Matrix,
    w: &MlaLayerWeights,
    causal: bool,
    cache: Option<&mut LayerCache>,
) -> Result<Matrix> {
    check_inputs(x_q, x_kv, w.d_model())?;
    let mut q = x_q.matmul(&w.w_q);
    q.add_row_broadcast(&w.b_q);
    let mut local = None;
    let (c_kv, k_p) = latent_history(x_kv, w, cache, &mut local)?;
    let k = w.layout().scatter(k_p, &c_kv.matmul(&w.w_uk));
    let mut v = c_kv.matmul(&w.w_uv);
    v.add_row_broadcast(&w.b_v);
    let offset = causal_offset(q.rows(), k.rows(), causal)?;
    let o = multi_head_sdpa(&q, &k, &v, w.selection().head_count(), offset);
    Ok(project_out(&o, &w.w_o, &w.b_o))
}

/// Latent attention scoring directly against the cached latents.
///
/// Per head, the compressed part of the score is `(q_c · w_ukᵀ) · c_kvᵀ`
/// and the context is `(P · c_kv) · w_uv + b_v`; rows of `P` sum to one so
/// the bias passes through unchanged.
pub fn mla_attend_absorbed(
    x_q: &Matrix,
    x_kv: &Matrix,
    w: &MlaLayerWeights,
    causal: bool,
    cache: Option<&mut LayerCache>,
) -> Result<Matrix> {
    check_inputs(x_q, x_kv, w.d_model())?;
    let mut q = x_q.matmul(&w.w_q);
    q.add_row_broadcast(&w.b_q);
    let mut local = None;
    let (c_kv, k_p) = latent_history(x_kv, w, cache, &mut local)?;
    let layout = w.layout();
    let n_heads = w.selection().head_count();
    let dh = w.d_model() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = causal_offset(q.rows(), c_kv.rows(), causal)?;

    let mut o = Matrix::zeros(q.rows(), w.d_model());
    for h in 0..n_heads {
        let pr = layout.preserved_ranges[h].clone();
        let cr = layout.compressed_ranges[h].clone();
        let q_c = q.select_columns(&layout.compressed_dims[cr.clone()]);
        let w_uk_h = w.w_uk.column_range(cr.start, cr.end);
        let q_lat = q_c.matmul_t(&w_uk_h);
        let mut scores = q_lat.matmul_t(c_kv);
        if !pr.is_empty() {
            let q_p = q.select_columns(&layout.preserved_dims[pr.clone()]);
            let kp_h = k_p.column_range(pr.start, pr.end);
            scores.add_product(1.0, q_p.view(), kp_h.view().t());
        }
        scores_to_probs(&mut scores, scale, offset);
        let ctx_lat = scores.matmul(c_kv);
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let oh = ctx_lat.matmul(&w.w_uv.column_range(lo, hi));
        for r in 0..o.rows() {
            for ((dst, &x), &b) in o.row_mut(r)[lo..hi]
                .iter_mut()
                .zip(oh.row(r))
                .zip(&w.b_v.as_slice()[lo..hi])
            {
                *dst = x + b;
            }
        }
    }
    Ok(project_out(&o, &w.w_o, &w.b_o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{select_uniform, SubspaceSelection};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_identity_passthrough() {
        let w = MhaLayerWeights::identity(4, 2);
        let x = Matrix::row_vector(vec![0.3, -1.0, 2.0, 0.5]);
        let out = mha_attend(&x, &x, &w, true, None).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn identical_tokens_average_to_input() {
        let w = MhaLayerWeights::identity(4, 1);
        let row = vec![1.0, 2.0, -0.5, 0.25];
        let x = Matrix::from_rows(&[row.clone(), row.clone()]).unwrap();
        let out = mha_attend(&x, &x, &w, false, None).unwrap();
        for r in 0..2 {
            for (a, b) in out.row(r).iter().zip(&row) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn probabilities_are_normalized_and_causal() {
        let mut s = Matrix::from_fn(3, 5, |r, c| (r as f64 - c as f64) * 0.7);
        scores_to_probs(&mut s, 0.5, Some(2));
        for i in 0..3 {
            let row = s.row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row[2 + i + 1..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn causal_needs_enough_keys() {
        let w = MhaLayerWeights::identity(4, 1);
        let q = Matrix::zeros(3, 4);
        let kv = Matrix::zeros(2, 4);
        assert!(mha_attend(&q, &kv, &w, true, None).is_err());
    }

    #[test]
    fn wrong_width_rejected() {
        let w = MhaLayerWeights::identity(4, 1);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            mha_attend(&x, &x, &w, false, None),
            Err(MlaError::Argument(_))
        ));
    }

    #[test]
    fn cache_kind_mismatch_is_state_error() {
        let w = MhaLayerWeights::identity(4, 1);
        let x = Matrix::zeros(1, 4);
        let mut cache = LayerCache::Mla {
            c_kv: Matrix::zeros(0, 2),
            k_p: Matrix::zeros(0, 0),
        };
        assert!(matches!(
            mha_attend(&x, &x, &w, true, Some(&mut cache)),
            Err(MlaError::State(_))
        ));
    }

    #[test]
    fn full_compression_with_identity_down_projection_is_mha() {
        let d = 8;
        let mut r = rng(1);
        let mha = MhaLayerWeights::random(d, 2, &mut r);
        let mla = MlaLayerWeights::new(
            mha.w_q.clone(),
            mha.b_q.clone(),
            Matrix::zeros(d, 0),
            Matrix::identity(d),
            mha.w_k.clone(),
            mha.w_v.clone(),
            mha.b_v.clone(),
            mha.w_o.clone(),
            mha.b_o.clone(),
            SubspaceSelection::empty(2, 4),
        )
        .unwrap();
        let x = Matrix::random_normal(5, d, 1.0, &mut r);
        let a = mha_attend(&x, &x, &mha, true, None).unwrap();
        let b = mla_attend(&x, &x, &mla, true, None).unwrap();
        let c = mla_attend_absorbed(&x, &x, &mla, true, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
        assert!(a.max_abs_diff(&c) <= 1e-10);
    }

    #[test]
    fn everything_preserved_matches_mha_with_scattered_keys() {
        let d = 8;
        let mut r = rng(2);
        let sel = SubspaceSelection::shared(2, 4, select_uniform(4, 2).unwrap()).unwrap();
        let w_kp = Matrix::random_normal(d, d, 0.4, &mut r);
        let mla = MlaLayerWeights::new(
            Matrix::random_normal(d, d, 0.4, &mut r),
            Matrix::random_normal(1, d, 0.1, &mut r),
            w_kp.clone(),
            Matrix::random_normal(d, 3, 0.4, &mut r),
            Matrix::zeros(3, 0),
            Matrix::random_normal(3, d, 0.4, &mut r),
            Matrix::random_normal(1, d, 0.1, &mut r),
            Matrix::random_normal(d, d, 0.4, &mut r),
            Matrix::random_normal(1, d, 0.1, &mut r),
            sel,
        )
        .unwrap();
        let mha = MhaLayerWeights {
            n_heads: 2,
            w_q: mla.w_q.clone(),
            b_q: mla.b_q.clone(),
            w_k: mla.layout().scatter(&w_kp, &Matrix::zeros(d, 0)),
            w_v: mla.w_dkv.matmul(&mla.w_uv),
            b_v: mla.b_v.clone(),
            w_o: mla.w_o.clone(),
            b_o: mla.b_o.clone(),
        };
        let x = Matrix::random_normal(4, d, 1.0, &mut r);
        let a = mha_attend(&x, &x, &mha, true, None).unwrap();
        let b = mla_attend(&x, &x, &mla, true, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn cached_single_token_matches_uncached() {
        let cfg = AttentionConfig::mla_preserving(8, 2, 3, 1).unwrap();
        let sel = SubspaceSelection::shared(2, 4, vec![1]).unwrap();
        let mut r = rng(3);
        let w = MlaLayerWeights::random(&cfg, sel, &mut r).unwrap();
        let x = Matrix::random_normal(1, 8, 1.0, &mut r);
        let mut cache = LayerCache::empty(&AttentionLayer::Mla(w.clone()));
        let a = mla_attend_absorbed(&x, &x, &w, true, Some(&mut cache)).unwrap();
        let b = mla_attend(&x, &x, &w, true, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.entries(), 3 + 4);
    }
}
