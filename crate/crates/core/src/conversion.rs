//! MHA → MLA weight conversion.
//!
//! For each converted layer the key projection is split column-wise into a
//! preserved block `w_kp` (selected frequency subspaces) and a compressible
//! block `w_kc`. One SVD of `[w_kc | w_v]` gives a shared latent:
//!
//! ```text
//! [w_kc | w_v] ≈ U Σ Vᵀ,   w_dkv = U Σ^½,   [w_uk | w_uv] = Σ^½ Vᵀ
//! ```
//!
//! The first `cols(w_kc)` rows of `Vᵀ` feed `w_uk` and the rest feed
//! `w_uv`. Queries, the output projection and all biases are copied as is.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionLayer, MhaLayerWeights, MlaLayerWeights};
use crate::error::{MlaError, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::model::{CheckpointContainer, LayerSite, Model, Site};
use crate::selection::{collect_norm_statistics, select_2norm, select_uniform, SubspaceSelection};
use crate::training::Example;

/// How preserved key subspaces are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No preserved dimensions; keys and values go entirely through the latent.
    FullCompression,
    Uniform,
    TwoNorm,
}

impl FromStr for Strategy {
    type Err = MlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-compression" | "full_compression" => Ok(Strategy::FullCompression),
            "uniform" => Ok(Strategy::Uniform),
            "2norm" | "two_norm" | "two-norm" => Ok(Strategy::TwoNorm),
            _ => Err(MlaError::arg(format!("unknown strategy `{s}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FullCompression => "full-compression",
            Strategy::Uniform => "uniform",
            Strategy::TwoNorm => "2norm",
        })
    }
}

/// Which attention layers are converted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Encoder self-attention, decoder self-attention and cross-attention.
    Full,
    /// Decoder self-attention only.
    Dso,
}

impl Placement {
    pub fn sites(self) -> &'static [Site] {
        match self {
            Placement::Full => &Site::ALL,
            Placement::Dso => &[Site::DecoderSelf],
        }
    }
}

impl FromStr for Placement {
    type Err = MlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Placement::Full),
            "dso" => Ok(Placement::Dso),
            _ => Err(MlaError::arg(format!("unknown placement `{s}`"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Full => "full",
            Placement::Dso => "dso",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionSpec {
    pub strategy: Strategy,
    pub d_latent: usize,
    pub r_per_head: usize,
    pub placement: Placement,
    /// Number of calibration examples used for 2-norm statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_examples: Option<usize>,
}

impl ConversionSpec {
    pub fn new(strategy: Strategy, d_latent: usize, r_per_head: usize, placement: Placement) -> Self {
        Self {
            strategy,
            d_latent,
            r_per_head,
            placement,
            calibration_examples: None,
        }
    }

    /// Site config after conversion.
    pub fn attention_config(&self, d_model: usize, n_heads: usize) -> Result<AttentionConfig> {
        match self.strategy {
            Strategy::FullCompression => {
                if self.r_per_head != 0 {
                    return Err(MlaError::config("full compression preserves no dimensions"));
                }
                AttentionConfig::mla_full(d_model, n_heads, self.d_latent)
            }
            Strategy::Uniform | Strategy::TwoNorm => {
                AttentionConfig::mla_preserving(d_model, n_heads, self.d_latent, self.r_per_head)
            }
        }
    }

    pub fn validate(&self, d_model: usize, n_heads: usize) -> Result<()> {
        let cfg = self.attention_config(d_model, n_heads)?;
        let width = (d_model - cfg.n_preserved()) + d_model;
        let max = d_model.min(width);
        if self.d_latent > max {
            return Err(MlaError::arg(format!(
                "d_latent {} exceeds the attainable rank {max}",
                self.d_latent
            )));
        }
        Ok(())
    }
}

/// Splits `w_k` into preserved and compressible column blocks. `dims[h]`
/// lists head `h`'s preserved local dimensions; global index is
/// `h · d_head + j`. Both blocks keep ascending global order.
pub fn split_key_projection(
    w_k: &Matrix,
    dims: &[Vec<usize>],
    d_head: usize,
) -> Result<(Matrix, Matrix)> {
    let d_model = w_k.cols();
    if dims.len() * d_head != d_model {
        return Err(MlaError::arg(format!(
            "{} heads of width {d_head} do not cover {d_model} key columns",
            dims.len()
        )));
    }
    let mut kept = vec![false; d_model];
    for (h, head_dims) in dims.iter().enumerate() {
        for &j in head_dims {
            if j >= d_head {
                return Err(MlaError::arg(format!("head {h} dim {j} out of range")));
            }
            let g = h * d_head + j;
            if std::mem::replace(&mut kept[g], true) {
                return Err(MlaError::arg(format!("head {h} dim {j} listed twice")));
            }
        }
    }
    let preserved: Vec<usize> = (0..d_model).filter(|&c| kept[c]).collect();
    let compressed: Vec<usize> = (0..d_model).filter(|&c| !kept[c]).collect();
    Ok((w_k.select_columns(&preserved), w_k.select_columns(&compressed)))
}

/// Low-rank factors of `[w_kc | w_v]` sharing one latent.
#[derive(Debug, Clone)]
pub struct JointFactors {
    /// `d_model × d_latent`
    pub w_dkv: Matrix,
    /// `d_latent × cols(w_kc)`
    pub w_uk: Matrix,
    /// `d_latent × cols(w_v)`
    pub w_uv: Matrix,
    /// Kept singular values.
    pub singular_values: Vec<f64>,
    /// `‖[w_kc|w_v] − w_dkv·[w_uk|w_uv]‖_F / ‖[w_kc|w_v]‖_F`
    pub relative_error: f64,
}

pub fn joint_svd_factorize(w_kc: &Matrix, w_v: &Matrix, d_latent: usize) -> Result<JointFactors> {
    if w_kc.rows() != w_v.rows() {
        return Err(MlaError::arg("w_kc and w_v must share the input dimension"));
    }
    let joint = w_kc.hstack(w_v);
    let max = joint.rows().min(joint.cols());
    if d_latent == 0 || d_latent > max {
        return Err(MlaError::arg(format!(
            "d_latent {d_latent} outside 1..={max} for a {}x{} joint matrix",
            joint.rows(),
            joint.cols()
        )));
    }
    let svd = truncated_svd(&joint, d_latent)?;
    let roots: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    let mut w_dkv = svd.u.clone();
    for r in 0..w_dkv.rows() {
        for (x, s) in w_dkv.row_mut(r).iter_mut().zip(&roots) {
            *x *= s;
        }
    }
    // Σ^½ · Vᵀ
    let up = Matrix::from_fn(d_latent, joint.cols(), |i, j| roots[i] * svd.v[(j, i)]);
    let kc = w_kc.cols();
    let w_uk = up.column_range(0, kc);
    let w_uv = up.column_range(kc, joint.cols());
    let approx = w_dkv.matmul(&up);
    let norm = joint.frobenius_norm();
    let relative_error = if norm > 0.0 {
        joint.sub(&approx).frobenius_norm() / norm
    } else {
        0.0
    };
    Ok(JointFactors {
        w_dkv,
        w_uk,
        w_uv,
        singular_values: svd.s,
        relative_error,
    })
}

/// Per-layer conversion diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub site: LayerSite,
    pub relative_error: f64,
    pub selection: SubspaceSelection,
}

/// Converts one MHA layer under an MLA config and selection.
pub fn convert_layer(
    w: &MhaLayerWeights,
    cfg: &AttentionConfig,
    sel: SubspaceSelection,
) -> Result<(MlaLayerWeights, f64)> {
    cfg.validate()?;
    if !cfg.variant.is_mla() {
        return Err(MlaError::config("conversion target must be an MLA variant"));
    }
    if sel.head_count() != cfg.n_heads
        || sel.d_head() != cfg.d_head()
        || sel.per_head_count() != cfg.r_per_head
    {
        return Err(MlaError::config(format!(
            "selection ({} heads, d_head {}, r {}) inconsistent with config {cfg:?}",
            sel.head_count(),
            sel.d_head(),
            sel.per_head_count()
        )));
    }
    w.validate(&AttentionConfig::mha(cfg.d_model, cfg.n_heads)?)?;
    let (w_kp, w_kc) = split_key_projection(&w.w_k, &sel.expand_to_dims(), cfg.d_head())?;
    let f = joint_svd_factorize(&w_kc, &w.w_v, cfg.d_latent)?;
    let out = MlaLayerWeights::new(
        w.w_q.clone(),
        w.b_q.clone(),
        w_kp,
        f.w_dkv,
        f.w_uk,
        f.w_uv,
        w.b_v.clone(),
        w.w_o.clone(),
        w.b_o.clone(),
        sel,
    )?;
    out.validate(cfg)?;
    Ok((out, f.relative_error))
}

/// Converts the layers dictated by `spec.placement`. `calibration` is
/// required for the 2-norm strategy and ignored otherwise.
pub fn convert_model_weights(
    model: &Model,
    spec: &ConversionSpec,
    calibration: Option<&[Example]>,
) -> Result<(Model, Vec<LayerReport>)> {
    let ms = &model.spec;
    spec.validate(ms.d_model, ms.n_heads)?;
    let cfg = spec.attention_config(ms.d_model, ms.n_heads)?;
    let targets: Vec<LayerSite> = ms
        .layer_sites()
        .into_iter()
        .filter(|ls| spec.placement.sites().contains(&ls.site))
        .collect();
    for t in &targets {
        if !matches!(model.attention(*t), Some(AttentionLayer::Mha(_))) {
            return Err(MlaError::config(format!("{t} is not an MHA layer")));
        }
    }

    let selections: Vec<SubspaceSelection> = match spec.strategy {
        Strategy::FullCompression => {
            vec![SubspaceSelection::empty(ms.n_heads, ms.d_head()); targets.len()]
        }
        Strategy::Uniform => {
            let subs = select_uniform(ms.d_head(), spec.r_per_head)?;
            vec![SubspaceSelection::shared(ms.n_heads, ms.d_head(), subs)?; targets.len()]
        }
        Strategy::TwoNorm => {
            let calib = calibration.ok_or_else(|| {
                MlaError::config("calibration required for the 2norm strategy")
            })?;
            collect_norm_statistics(model, calib, &targets)?
                .iter()
                .map(|s| select_2norm(s, spec.r_per_head))
                .collect::<Result<_>>()?
        }
    };

    let mut out = model.clone();
    let mut reports = Vec::with_capacity(targets.len());
    for (t, sel) in targets.iter().zip(selections) {
        let Some(AttentionLayer::Mha(w)) = model.attention(*t) else {
            unreachable!("checked above")
        };
        let (mla, err) = convert_layer(w, &cfg, sel.clone())?;
        *out.attention_mut(*t).expect("layer exists") = AttentionLayer::Mla(mla);
        reports.push(LayerReport {
            site: *t,
            relative_error: err,
            selection: sel,
        });
    }
    for site in spec.placement.sites() {
        *out.spec.site_config_mut(*site) = cfg;
    }
    out.validate()?;
    Ok((out, reports))
}

/// Container-level conversion. Tensors of layers that are not converted
/// are carried over unchanged.
pub fn convert_model(
    ckpt: &CheckpointContainer,
    spec: &ConversionSpec,
    calibration: Option<&[Example]>,
) -> Result<(CheckpointContainer, Vec<LayerReport>)> {
    if ckpt.conversion.is_some() {
        return Err(MlaError::config("checkpoint is already converted"));
    }
    let model = Model::from_container(ckpt)?;
    let (converted, reports) = convert_model_weights(&model, spec, calibration)?;
    let mut spec = spec.clone();
    if spec.strategy == Strategy::TwoNorm {
        spec.calibration_examples = calibration.map(<[Example]>::len);
    }
    let mut out = converted.to_container(Some(spec));
    out.metadata = ckpt.metadata.clone();
    Ok((out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_keep_all_and_none() {
        let w = Matrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let (kp, kc) = split_key_projection(&w, &[vec![0, 1, 2, 3]], 4).unwrap();
        assert_eq!(kp, w);
        assert_eq!(kc.cols(), 0);
        let (kp, kc) = split_key_projection(&w, &[vec![]], 4).unwrap();
        assert_eq!(kp.cols(), 0);
        assert_eq!(kc, w);
    }

    #[test]
    fn split_columns_bookkeeping() {
        let w = Matrix::from_fn(4, 4, |r, c| (10 * c + r) as f64);
        let (kp, kc) = split_key_projection(&w, &[vec![0, 1]], 4).unwrap();
        assert_eq!(kp, w.column_range(0, 2));
        assert_eq!(kc, w.column_range(2, 4));
    }

    #[test]
    fn split_rejects_bad_dims() {
        let w = Matrix::zeros(4, 4);
        assert!(split_key_projection(&w, &[vec![4]], 4).is_err());
        assert!(split_key_projection(&w, &[vec![1, 1]], 4).is_err());
        assert!(split_key_projection(&w, &[vec![0], vec![0]], 4).is_err());
    }

    #[test]
    fn identity_values_factorize_exactly() {
        let d = 6;
        let f = joint_svd_factorize(&Matrix::zeros(d, 3), &Matrix::identity(d), d).unwrap();
        assert!(f.w_dkv.matmul(&f.w_uv).max_abs_diff(&Matrix::identity(d)) <= 1e-10);
        assert!(f.w_uk.max_abs() <= 1e-10);
    }

    #[test]
    fn full_rank_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kc = Matrix::random_normal(8, 3, 1.0, &mut rng);
        let v = Matrix::random_normal(8, 4, 1.0, &mut rng);
        let f = joint_svd_factorize(&kc, &v, 7).unwrap();
        let rel = |a: &Matrix, b: &Matrix| a.sub(b).frobenius_norm() / b.frobenius_norm();
        assert!(rel(&f.w_dkv.matmul(&f.w_uk), &kc) <= 1e-9);
        assert!(rel(&f.w_dkv.matmul(&f.w_uv), &v) <= 1e-9);
        assert!(f.relative_error <= 1e-9);
    }

    #[test]
    fn latent_rank_bounds() {
        let kc = Matrix::zeros(4, 2);
        let v = Matrix::identity(4);
        assert!(joint_svd_factorize(&kc, &v, 0).is_err());
        assert!(joint_svd_factorize(&kc, &v, 5).is_err());
    }

    #[test]
    fn strategy_and_placement_parse() {
        assert_eq!("2norm".parse::<Strategy>().unwrap(), Strategy::TwoNorm);
        assert_eq!("full-compression".parse::<Strategy>().unwrap(), Strategy::FullCompression);
        assert_eq!("dso".parse::<Placement>().unwrap(), Placement::Dso);
        assert!("half".parse::<Placement>().is_err());
    }

    #[test]
    fn spec_consistency() {
        let bad = ConversionSpec::new(Strategy::FullCompression, 8, 1, Placement::Dso);
        assert!(bad.validate(64, 4).is_err());
        let too_wide = ConversionSpec::new(Strategy::Uniform, 65, 1, Placement::Dso);
        assert!(too_wide.validate(64, 4).is_err());
        assert!(ConversionSpec::new(Strategy::Uniform, 64, 1, Placement::Dso)
            .validate(64, 4)
            .is_ok());
    }
}
