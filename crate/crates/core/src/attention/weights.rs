use rand::Rng;

use super::config::{AttentionConfig, Variant};
use crate::error::{MlaError, Result};
use crate::linalg::Matrix;
use crate::selection::SubspaceSelection;

/// Projections of one standard attention layer. Rows index inputs, so a
/// projection is `x · w`. The key projection carries no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaLayerWeights {
    pub n_heads: usize,
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
}

impl MhaLayerWeights {
    pub fn random<R: Rng + ?Sized>(d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = || Matrix::random_normal(d_model, d_model, std, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let mut b = || Matrix::random_normal(1, d_model, 0.02, rng);
        let (b_q, b_v, b_o) = (b(), b(), b());
        Self {
            n_heads,
            w_q,
            b_q,
            w_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }

    pub fn identity(d_model: usize, n_heads: usize) -> Self {
        let i = Matrix::identity(d_model);
        let z = Matrix::zeros(1, d_model);
        Self {
            n_heads,
            w_q: i.clone(),
            b_q: z.clone(),
            w_k: i.clone(),
            w_v: i.clone(),
            b_v: z.clone(),
            w_o: i,
            b_o: z,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.variant != Variant::Mha {
            return Err(MlaError::config("MHA weights under an MLA config"));
        }
        if self.n_heads != cfg.n_heads {
            return Err(MlaError::config(format!(
                "weights have {} heads, config {}",
                self.n_heads, cfg.n_heads
            )));
        }
        let d_model = cfg.d_model;
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if m.shape() != (d_model, d_model) {
                return Err(MlaError::config(format!(
                    "{name} is {:?}, expected {d_model}x{d_model}",
                    m.shape()
                )));
            }
        }
        for (name, b) in [("b_q", &self.b_q), ("b_v", &self.b_v), ("b_o", &self.b_o)] {
            if b.shape() != (1, d_model) {
                return Err(MlaError::config(format!("{name} must be 1x{d_model}")));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            n_heads: self.n_heads,
            w_q: z(&self.w_q),
            b_q: z(&self.b_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            b_v: z(&self.b_v),
            w_o: z(&self.w_o),
            b_o: z(&self.b_o),
        }
    }
}

/// Where one global key dimension lives after the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySlot {
    /// Column of `k_p` (preserved, uncompressed).
    Preserved(usize),
    /// Column of `c_kv · w_uk` (reconstructed from the latent).
    Compressed(usize),
}

/// Bookkeeping that maps between global key dimensions and the preserved /
/// compressed column blocks. Both blocks list their dimensions in ascending
/// global order, so each head owns a contiguous column range in each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLayout {
    pub preserved_dims: Vec<usize>,
    pub compressed_dims: Vec<usize>,
    pub slots: Vec<KeySlot>,
    /// Per head: column range in `k_p`.
    pub preserved_ranges: Vec<std::ops::Range<usize>>,
    /// Per head: column range in the compressed block.
    pub compressed_ranges: Vec<std::ops::Range<usize>>,
}

impl KeyLayout {
    pub fn new(selection: &SubspaceSelection) -> Self {
        let d_head = selection.d_head();
        let n_heads = selection.head_count();
        let d_model = d_head * n_heads;
        let preserved_dims = selection.global_dims();
        let mut is_kept = vec![false; d_model];
        for &d in &preserved_dims {
            is_kept[d] = true;
        }
        let compressed_dims: Vec<usize> = (0..d_model).filter(|&d| !is_kept[d]).collect();
        let mut slots = Vec::with_capacity(d_model);
        let (mut p, mut c) = (0, 0);
        for &kept in &is_kept {
            if kept {
                slots.push(KeySlot::Preserved(p));
                p += 1;
            } else {
                slots.push(KeySlot::Compressed(c));
                c += 1;
            }
        }
        let per_head_kept = selection.n_preserved() / n_heads;
        let per_head_comp = d_head - per_head_kept;
        let preserved_ranges = (0..n_heads)
            .map(|h| h * per_head_kept..(h + 1) * per_head_kept)
            .collect();
        let compressed_ranges = (0..n_heads)
            .map(|h| h * per_head_comp..(h + 1) * per_head_comp)
            .collect();
        Self {
            preserved_dims,
            compressed_dims,
            slots,
            preserved_ranges,
            compressed_ranges,
        }
    }

    /// Places the preserved and compressed key blocks back at their global
    /// dimension positions.
    pub fn scatter(&self, kp: &Matrix, kc: &Matrix) -> Matrix {
        let rows = kp.rows().max(kc.rows());
        let mut out = Matrix::zeros(rows, self.slots.len());
        for r in 0..rows {
            let dst = out.row_mut(r);
            for (&d, &v) in self.preserved_dims.iter().zip(kp.row(r)) {
                dst[d] = v;
            }
            for (&d, &v) in self.compressed_dims.iter().zip(kc.row(r)) {
                dst[d] = v;
            }
        }
        out
    }

    /// Inverse of [`scatter`](Self::scatter).
    pub fn gather(&self, full: &Matrix) -> (Matrix, Matrix) {
        (
            full.select_columns(&self.preserved_dims),
            full.select_columns(&self.compressed_dims),
        )
    }
}

/// Projections of one latent attention layer.
///
/// Keys are `scatter(x · w_kp, (x · w_dkv) · w_uk)`; values are
/// `(x · w_dkv) · w_uv + b_v`. The query path is the original one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaLayerWeights {
    pub w_q: Matrix,
    pub b_q: Matrix,
    /// `d_model × n_preserved`
    pub w_kp: Matrix,
    /// `d_model × d_latent`
    pub w_dkv: Matrix,
    /// `d_latent × (d_model − n_preserved)`
    pub w_uk: Matrix,
    /// `d_latent × d_model`
    pub w_uv: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    selection: SubspaceSelection,
    layout: KeyLayout,
}

impl MlaLayerWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_q: Matrix,
        b_q: Matrix,
        w_kp: Matrix,
        w_dkv: Matrix,
        w_uk: Matrix,
        w_uv: Matrix,
        b_v: Matrix,
        w_o: Matrix,
        b_o: Matrix,
        selection: SubspaceSelection,
    ) -> Result<Self> {
        let layout = KeyLayout::new(&selection);
        let w = Self {
            w_q,
            b_q,
            w_kp,
            w_dkv,
            w_uk,
            w_uv,
            b_v,
            w_o,
            b_o,
            selection,
            layout,
        };
        w.check_shapes()?;
        Ok(w)
    }

    pub fn random<R: Rng + ?Sized>(
        cfg: &AttentionConfig,
        selection: SubspaceSelection,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let np = selection.n_preserved();
        let std = 1.0 / (d as f64).sqrt();
        let lstd = 1.0 / (cfg.d_latent as f64).sqrt();
        let w = Self::new(
            Matrix::random_normal(d, d, std, rng),
            Matrix::random_normal(1, d, 0.02, rng),
            Matrix::random_normal(d, np, std, rng),
            Matrix::random_normal(d, cfg.d_latent, std, rng),
            Matrix::random_normal(cfg.d_latent, d - np, lstd, rng),
            Matrix::random_normal(cfg.d_latent, d, lstd, rng),
            Matrix::random_normal(1, d, 0.02, rng),
            Matrix::random_normal(d, d, std, rng),
            Matrix::random_normal(1, d, 0.02, rng),
            selection,
        )?;
        w.validate(cfg)?;
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.w_q.rows();
        let np = self.selection.n_preserved();
        let dl = self.w_dkv.cols();
        if self.selection.d_head() * self.selection.head_count() != d {
            return Err(MlaError::config("selection does not cover d_model"));
        }
        let expect = [
            ("w_q", &self.w_q, (d, d)),
            ("b_q", &self.b_q, (1, d)),
            ("w_kp", &self.w_kp, (d, np)),
            ("w_dkv", &self.w_dkv, (d, dl)),
            ("w_uk", &self.w_uk, (dl, d - np)),
            ("w_uv", &self.w_uv, (dl, d)),
            ("b_v", &self.b_v, (1, d)),
            ("w_o", &self.w_o, (d, d)),
            ("b_o", &self.b_o, (1, d)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(MlaError::config(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Checks the weights against a site configuration.
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        if !cfg.variant.is_mla() {
            return Err(MlaError::config("MLA weights under an MHA config"));
        }
        if self.w_q.rows() != cfg.d_model
            || self.d_latent() != cfg.d_latent
            || self.selection.per_head_count() != cfg.r_per_head
            || self.selection.head_count() != cfg.n_heads
        {
            return Err(MlaError::config(format!(
                "MLA weights (d_model {}, d_latent {}, r {}, heads {}) do not match config {cfg:?}",
                self.w_q.rows(),
                self.d_latent(),
                self.selection.per_head_count(),
                self.selection.head_count()
            )));
        }
        if cfg.variant == Variant::MlaFull && self.n_preserved() != 0 {
            return Err(MlaError::config("mla_full layer has preserved dims"));
        }
        Ok(())
    }

    pub fn selection(&self) -> &SubspaceSelection {
        &self.selection
    }

    pub fn layout(&self) -> &KeyLayout {
        &self.layout
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_latent(&self) -> usize {
        self.w_dkv.cols()
    }

    pub fn n_preserved(&self) -> usize {
        self.w_kp.cols()
    }

    pub fn variant(&self) -> Variant {
        if self.n_preserved() == 0 {
            Variant::MlaFull
        } else {
            Variant::MlaPreserving
        }
    }

    /// The key projection this layer is equivalent to:
    /// `scatter(w_kp, w_dkv · w_uk)`.
    pub fn effective_key_projection(&self) -> Matrix {
        self.layout.scatter(&self.w_kp, &self.w_dkv.matmul(&self.w_uk))
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_q: z(&self.w_q),
            b_q: z(&self.b_q),
            w_kp: z(&self.w_kp),
            w_dkv: z(&self.w_dkv),
            w_uk: z(&self.w_uk),
            w_uv: z(&self.w_uv),
            b_v: z(&self.b_v),
            w_o: z(&self.w_o),
            b_o: z(&self.b_o),
            selection: self.selection.clone(),
            layout: self.layout.clone(),
        }
    }
}
