//! A Whisper-shaped encoder-decoder transformer at toy scale.
//!
//! Encoder: token embedding plus fixed sinusoidal positions, pre-norm
//! self-attention and feed-forward blocks, final layer norm. Decoder: token
//! embedding plus learned positions, pre-norm causal self-attention,
//! cross-attention and feed-forward blocks, final layer norm, and logits
//! tied to the token embedding. Source tokens stand in for audio frames.

mod checkpoint;
mod layers;
mod spec;

pub use checkpoint::{
    CheckpointContainer, CheckpointHeader, DType, Tensor, TensorData, TensorEntry, FORMAT_VERSION,
    MAGIC,
};
pub use layers::{gelu, gelu_grad, normalize_rows, FeedForward, LayerNorm, LN_EPS};
pub use spec::{LayerSite, ModelSpec, Site};

use rand::Rng;

use crate::attention::{
    sinusoidal_embedding, AttentionConfig, AttentionLayer, LayerCache, MhaLayerWeights,
    MlaLayerWeights, ScorePath, Variant,
};
use crate::error::{MlaError, Result};
use crate::linalg::Matrix;
use crate::selection::{select_uniform, SubspaceSelection};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// First token id available for content.
pub const FIRST_CONTENT: TokenId = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub self_attn: AttentionLayer,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionLayer,
    pub ln_cross: LayerNorm,
    pub cross_attn: AttentionLayer,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub enc_embed: Matrix,
    pub enc_layers: Vec<EncoderLayer>,
    pub enc_ln: LayerNorm,
    pub dec_embed: Matrix,
    pub dec_pos: Matrix,
    pub dec_layers: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    /// Fixed sinusoidal table for encoder positions; not a parameter.
    enc_pos: Matrix,
}

/// Attention inputs recorded during a forward pass: the layer-normed query
/// stream and the key/value stream of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub site: LayerSite,
    pub x_q: Matrix,
    pub x_kv: Matrix,
}

/// Per-generation caches for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub self_caches: Vec<LayerCache>,
    pub cross_caches: Vec<LayerCache>,
    pub position: usize,
    pub path: ScorePath,
}

impl DecodeState {
    pub fn self_cache_entries(&self) -> usize {
        self.self_caches.iter().map(LayerCache::entries).sum()
    }

    pub fn cross_cache_entries(&self) -> usize {
        self.cross_caches.iter().map(LayerCache::entries).sum()
    }
}

fn random_attention<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Result<AttentionLayer> {
    Ok(match cfg.variant {
        Variant::Mha => AttentionLayer::Mha(MhaLayerWeights::random(cfg.d_model, cfg.n_heads, rng)),
        Variant::MlaFull => AttentionLayer::Mla(MlaLayerWeights::random(
            cfg,
            SubspaceSelection::empty(cfg.n_heads, cfg.d_head()),
            rng,
        )?),
        Variant::MlaPreserving => {
            let subs = select_uniform(cfg.d_head(), cfg.r_per_head)?;
            AttentionLayer::Mla(MlaLayerWeights::random(
                cfg,
                SubspaceSelection::shared(cfg.n_heads, cfg.d_head(), subs)?,
                rng,
            )?)
        }
    })
}

impl Model {
    /// Fresh model with seeded random weights. MLA sites get uniform
    /// selections.
    pub fn random<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let enc_embed = Matrix::random_normal(spec.vocab_size, d, 1.0, rng);
        let mut enc_layers = Vec::with_capacity(spec.n_encoder_layers);
        for _ in 0..spec.n_encoder_layers {
            enc_layers.push(EncoderLayer {
                ln_attn: LayerNorm::new(d),
                self_attn: random_attention(&spec.encoder_self, rng)?,
                ln_ffn: LayerNorm::new(d),
                ffn: FeedForward::random(d, spec.d_ff, rng),
            });
        }
        let dec_embed = Matrix::random_normal(spec.vocab_size, d, 0.1, rng);
        let dec_pos = Matrix::random_normal(spec.max_target_len, d, 0.02, rng);
        let mut dec_layers = Vec::with_capacity(spec.n_decoder_layers);
        for _ in 0..spec.n_decoder_layers {
            dec_layers.push(DecoderLayer {
                ln_self: LayerNorm::new(d),
                self_attn: random_attention(&spec.decoder_self, rng)?,
                ln_cross: LayerNorm::new(d),
                cross_attn: random_attention(&spec.cross, rng)?,
                ln_ffn: LayerNorm::new(d),
                ffn: FeedForward::random(d, spec.d_ff, rng),
            });
        }
        Ok(Self {
            enc_pos: sinusoidal_embedding(spec.max_source_len, d)?,
            spec,
            enc_embed,
            enc_layers,
            enc_ln: LayerNorm::new(d),
            dec_embed,
            dec_pos,
            dec_layers,
            dec_ln: LayerNorm::new(d),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        spec: ModelSpec,
        enc_embed: Matrix,
        enc_layers: Vec<EncoderLayer>,
        enc_ln: LayerNorm,
        dec_embed: Matrix,
        dec_pos: Matrix,
        dec_layers: Vec<DecoderLayer>,
        dec_ln: LayerNorm,
    ) -> Result<Self> {
        let m = Self {
            enc_pos: sinusoidal_embedding(spec.max_source_len, spec.d_model)?,
            spec,
            enc_embed,
            enc_layers,
            enc_ln,
            dec_embed,
            dec_pos,
            dec_layers,
            dec_ln,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks every tensor shape and attention layer against the spec.
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        if self.enc_layers.len() != s.n_encoder_layers || self.dec_layers.len() != s.n_decoder_layers
        {
            return Err(MlaError::config("layer count disagrees with spec"));
        }
        for (name, m) in self.named_tensors() {
            if !m.is_finite() {
                return Err(MlaError::config(format!("{name} has non-finite entries")));
            }
        }
        let shapes = [
            ("encoder.embed", &self.enc_embed, (s.vocab_size, s.d_model)),
            ("decoder.embed", &self.dec_embed, (s.vocab_size, s.d_model)),
            ("decoder.pos", &self.dec_pos, (s.max_target_len, s.d_model)),
        ];
        for (name, m, shape) in shapes {
            if m.shape() != shape {
                return Err(MlaError::config(format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
        }
        for ls in s.layer_sites() {
            self.attention(ls)
                .expect("layer exists")
                .validate(s.site_config(ls.site))
                .map_err(|e| MlaError::config(format!("{ls}: {e}")))?;
        }
        Ok(())
    }

    /// Same structure, every parameter zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            spec: self.spec,
            enc_embed: z(&self.enc_embed),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncoderLayer {
                    ln_attn: l.ln_attn.zeros_like(),
                    self_attn: l.self_attn.zeros_like(),
                    ln_ffn: l.ln_ffn.zeros_like(),
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            enc_ln: self.enc_ln.zeros_like(),
            dec_embed: z(&self.dec_embed),
            dec_pos: z(&self.dec_pos),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecoderLayer {
                    ln_self: l.ln_self.zeros_like(),
                    self_attn: l.self_attn.zeros_like(),
                    ln_cross: l.ln_cross.zeros_like(),
                    cross_attn: l.cross_attn.zeros_like(),
                    ln_ffn: l.ln_ffn.zeros_like(),
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            dec_ln: self.dec_ln.zeros_like(),
            enc_pos: self.enc_pos.clone(),
        }
    }

    pub fn encoder_positions(&self) -> &Matrix {
        &self.enc_pos
    }

    pub fn attention(&self, ls: LayerSite) -> Option<&AttentionLayer> {
        match ls.site {
            Site::EncoderSelf => self.enc_layers.get(ls.layer).map(|l| &l.self_attn),
            Site::DecoderSelf => self.dec_layers.get(ls.layer).map(|l| &l.self_attn),
            Site::Cross => self.dec_layers.get(ls.layer).map(|l| &l.cross_attn),
        }
    }

    pub fn attention_mut(&mut self, ls: LayerSite) -> Option<&mut AttentionLayer> {
        match ls.site {
            Site::EncoderSelf => self.enc_layers.get_mut(ls.layer).map(|l| &mut l.self_attn),
            Site::DecoderSelf => self.dec_layers.get_mut(ls.layer).map(|l| &mut l.self_attn),
            Site::Cross => self.dec_layers.get_mut(ls.layer).map(|l| &mut l.cross_attn),
        }
    }

    /// Every trainable tensor with its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        out.push(("encoder.embed".into(), &self.enc_embed));
        for (i, l) in self.enc_layers.iter().enumerate() {
            let p = format!("encoder.layers.{i}");
            push_ln(&mut out, &format!("{p}.ln_attn"), &l.ln_attn);
            push_attention(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_ln(&mut out, &format!("{p}.ln_ffn"), &l.ln_ffn);
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        push_ln(&mut out, "encoder.ln_post", &self.enc_ln);
        out.push(("decoder.embed".into(), &self.dec_embed));
        out.push(("decoder.pos".into(), &self.dec_pos));
        for (i, l) in self.dec_layers.iter().enumerate() {
            let p = format!("decoder.layers.{i}");
            push_ln(&mut out, &format!("{p}.ln_self"), &l.ln_self);
            push_attention(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_ln(&mut out, &format!("{p}.ln_cross"), &l.ln_cross);
            push_attention(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_ln(&mut out, &format!("{p}.ln_ffn"), &l.ln_ffn);
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        push_ln(&mut out, "decoder.ln_post", &self.dec_ln);
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.enc_embed];
        for l in &mut self.enc_layers {
            out.extend([&mut l.ln_attn.gamma, &mut l.ln_attn.beta]);
            attention_mut(&mut out, &mut l.self_attn);
            out.extend([&mut l.ln_ffn.gamma, &mut l.ln_ffn.beta]);
            ffn_mut(&mut out, &mut l.ffn);
        }
        out.extend([&mut self.enc_ln.gamma, &mut self.enc_ln.beta]);
        out.push(&mut self.dec_embed);
        out.push(&mut self.dec_pos);
        for l in &mut self.dec_layers {
            out.extend([&mut l.ln_self.gamma, &mut l.ln_self.beta]);
            attention_mut(&mut out, &mut l.self_attn);
            out.extend([&mut l.ln_cross.gamma, &mut l.ln_cross.beta]);
            attention_mut(&mut out, &mut l.cross_attn);
            out.extend([&mut l.ln_ffn.gamma, &mut l.ln_ffn.beta]);
            ffn_mut(&mut out, &mut l.ffn);
        }
        out.extend([&mut self.dec_ln.gamma, &mut self.dec_ln.beta]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn check_tokens(&self, tokens: &[TokenId], max_len: usize, what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(MlaError::arg(format!("{what} sequence is empty")));
        }
        if tokens.len() > max_len {
            return Err(MlaError::arg(format!(
                "{what} length {} exceeds maximum {max_len}",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(MlaError::arg(format!("{what} token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Encoder input: token embeddings plus sinusoidal positions.
    pub fn encoder_input(&self, source: &[TokenId]) -> Matrix {
        let d = self.spec.d_model;
        let mut x = Matrix::zeros(source.len(), d);
        for (p, &t) in source.iter().enumerate() {
            for ((o, e), s) in x
                .row_mut(p)
                .iter_mut()
                .zip(self.enc_embed.row(t as usize))
                .zip(self.enc_pos.row(p))
            {
                *o = e + s;
            }
        }
        x
    }

    /// Decoder input at absolute positions `start..start+len`.
    pub fn decoder_input(&self, tokens: &[TokenId], start: usize) -> Matrix {
        let d = self.spec.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            for ((o, e), p) in x
                .row_mut(i)
                .iter_mut()
                .zip(self.dec_embed.row(t as usize))
                .zip(self.dec_pos.row(start + i))
            {
                *o = e + p;
            }
        }
        x
    }

    fn encode_inner(
        &self,
        source: &[TokenId],
        mut probes: Option<&mut Vec<AttentionProbe>>,
    ) -> Result<Matrix> {
        self.check_tokens(source, self.spec.max_source_len, "source")?;
        let mut x = self.encoder_input(source);
        for (i, l) in self.enc_layers.iter().enumerate() {
            let h = l.ln_attn.forward(&x);
            if let Some(p) = probes.as_deref_mut() {
                p.push(AttentionProbe {
                    site: LayerSite::new(Site::EncoderSelf, i),
                    x_q: h.clone(),
                    x_kv: h.clone(),
                });
            }
            x.add_assign(&l.self_attn.forward(&h, &h, false, None, ScorePath::Naive)?);
            x.add_assign(&l.ffn.forward(&l.ln_ffn.forward(&x)));
        }
        Ok(self.enc_ln.forward(&x))
    }

    /// Encoder states for a source sequence (`S × d_model`).
    pub fn encode(&self, source: &[TokenId]) -> Result<Matrix> {
        self.encode_inner(source, None)
    }

    fn decode_full_inner(
        &self,
        enc: &Matrix,
        decoder_tokens: &[TokenId],
        mut probes: Option<&mut Vec<AttentionProbe>>,
    ) -> Result<Matrix> {
        self.check_tokens(decoder_tokens, self.spec.max_target_len, "decoder")?;
        let mut x = self.decoder_input(decoder_tokens, 0);
        for (i, l) in self.dec_layers.iter().enumerate() {
            let h = l.ln_self.forward(&x);
            if let Some(p) = probes.as_deref_mut() {
                p.push(AttentionProbe {
                    site: LayerSite::new(Site::DecoderSelf, i),
                    x_q: h.clone(),
                    x_kv: h.clone(),
                });
            }
            x.add_assign(&l.self_attn.forward(&h, &h, true, None, ScorePath::Naive)?);
            let h = l.ln_cross.forward(&x);
            if let Some(p) = probes.as_deref_mut() {
                p.push(AttentionProbe {
                    site: LayerSite::new(Site::Cross, i),
                    x_q: h.clone(),
                    x_kv: enc.clone(),
                });
            }
            x.add_assign(&l.cross_attn.forward(&h, enc, false, None, ScorePath::Naive)?);
            x.add_assign(&l.ffn.forward(&l.ln_ffn.forward(&x)));
        }
        Ok(self.logits(&self.dec_ln.forward(&x)))
    }

    fn logits(&self, h: &Matrix) -> Matrix {
        h.matmul_t(&self.dec_embed)
    }

    /// Teacher-forced logits for every decoder position in one causal pass,
    /// without caches (`T × vocab`).
    pub fn forward_logits(&self, source: &[TokenId], decoder_tokens: &[TokenId]) -> Result<Matrix> {
        let enc = self.encode(source)?;
        self.decode_full_inner(&enc, decoder_tokens, None)
    }

    /// Full causal decoder pass over precomputed encoder states.
    pub fn decode_full(&self, enc: &Matrix, decoder_tokens: &[TokenId]) -> Result<Matrix> {
        self.decode_full_inner(enc, decoder_tokens, None)
    }

    /// Records the inputs of every attention layer for one example.
    pub fn probe_attention(
        &self,
        source: &[TokenId],
        decoder_tokens: &[TokenId],
    ) -> Result<Vec<AttentionProbe>> {
        let mut probes = Vec::new();
        let enc = self.encode_inner(source, Some(&mut probes))?;
        self.decode_full_inner(&enc, decoder_tokens, Some(&mut probes))?;
        Ok(probes)
    }

    pub fn new_decode_state(&self, path: ScorePath) -> DecodeState {
        DecodeState {
            self_caches: self
                .dec_layers
                .iter()
                .map(|l| LayerCache::empty(&l.self_attn))
                .collect(),
            cross_caches: self
                .dec_layers
                .iter()
                .map(|l| LayerCache::empty(&l.cross_attn))
                .collect(),
            position: 0,
            path,
        }
    }

    /// One autoregressive step. Self-attention caches grow by one token;
    /// cross-attention caches are filled from `enc` at position 0 and only
    /// read afterwards. Returns `1 × vocab` logits.
    pub fn decode_step(
        &self,
        token: TokenId,
        position: usize,
        enc: &Matrix,
        state: &mut DecodeState,
    ) -> Result<Matrix> {
        if position != state.position {
            return Err(MlaError::State(format!(
                "decode step at position {position} but caches hold {} tokens",
                state.position
            )));
        }
        if position >= self.spec.max_target_len {
            return Err(MlaError::arg(format!(
                "position {position} exceeds maximum target length {}",
                self.spec.max_target_len
            )));
        }
        if token as usize >= self.spec.vocab_size {
            return Err(MlaError::arg(format!("token {token} outside vocabulary")));
        }
        for c in &state.self_caches {
            if c.len() != position {
                return Err(MlaError::State(format!(
                    "self-attention cache holds {} tokens at position {position}",
                    c.len()
                )));
            }
        }
        let empty = Matrix::zeros(0, self.spec.d_model);
        let cross_kv = if position == 0 {
            if state.cross_caches.iter().any(|c| !c.is_empty()) {
                return Err(MlaError::State("cross-attention cache filled before position 0".into()));
            }
            enc
        } else {
            if state.cross_caches.iter().any(LayerCache::is_empty) {
                return Err(MlaError::State("cross-attention cache missing after position 0".into()));
            }
            &empty
        };

        let mut x = self.decoder_input(&[token], position);
        for (i, l) in self.dec_layers.iter().enumerate() {
            let h = l.ln_self.forward(&x);
            let a = l
                .self_attn
                .forward(&h, &h, true, Some(&mut state.self_caches[i]), state.path)?;
            x.add_assign(&a);
            let h = l.ln_cross.forward(&x);
            let a = l.cross_attn.forward(
                &h,
                cross_kv,
                false,
                Some(&mut state.cross_caches[i]),
                state.path,
            )?;
            x.add_assign(&a);
            x.add_assign(&l.ffn.forward(&l.ln_ffn.forward(&x)));
        }
        state.position += 1;
        Ok(self.logits(&self.dec_ln.forward(&x)))
    }

    /// Argmax decoding from BOS until EOS or `max_len` tokens. Ties go to
    /// the lowest token id. The EOS token is not included in the output.
    pub fn greedy_decode(&self, source: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        let enc = self.encode(source)?;
        let mut state = self.new_decode_state(ScorePath::Absorbed);
        let mut out = Vec::new();
        let mut token = BOS;
        let limit = max_len.min(self.spec.max_target_len);
        for pos in 0..limit {
            let logits = self.decode_step(token, pos, &enc, &mut state)?;
            token = argmax(logits.row(0)) as TokenId;
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }
}

/// Index of the maximum; lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Matrix)>, p: &str, ln: &'a LayerNorm) {
    out.push((format!("{p}.gamma"), &ln.gamma));
    out.push((format!("{p}.beta"), &ln.beta));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Matrix)>, p: &str, f: &'a FeedForward) {
    out.push((format!("{p}.w1"), &f.w1));
    out.push((format!("{p}.b1"), &f.b1));
    out.push((format!("{p}.w2"), &f.w2));
    out.push((format!("{p}.b2"), &f.b2));
}

/// Tensor names of an attention layer, in checkpoint order.
pub fn attention_tensor_names(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Mha => &["w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o"],
        _ => &["w_q", "b_q", "w_kp", "w_dkv", "w_uk", "w_uv", "b_v", "w_o", "b_o"],
    }
}

fn push_attention<'a>(out: &mut Vec<(String, &'a Matrix)>, p: &str, a: &'a AttentionLayer) {
    let names = attention_tensor_names(a.variant());
    let tensors: Vec<&Matrix> = match a {
        AttentionLayer::Mha(w) => vec![&w.w_q, &w.b_q, &w.w_k, &w.w_v, &w.b_v, &w.w_o, &w.b_o],
        AttentionLayer::Mla(w) => vec![
            &w.w_q, &w.b_q, &w.w_kp, &w.w_dkv, &w.w_uk, &w.w_uv, &w.b_v, &w.w_o, &w.b_o,
        ],
    };
    for (n, t) in names.iter().zip(tensors) {
        out.push((format!("{p}.{n}"), t));
    }
}

fn attention_mut<'a>(out: &mut Vec<&'a mut Matrix>, a: &'a mut AttentionLayer) {
    match a {
        AttentionLayer::Mha(w) => out.extend([
            &mut w.w_q, &mut w.b_q, &mut w.w_k, &mut w.w_v, &mut w.b_v, &mut w.w_o, &mut w.b_o,
        ]),
        AttentionLayer::Mla(w) => out.extend([
            &mut w.w_q,
            &mut w.b_q,
            &mut w.w_kp,
            &mut w.w_dkv,
            &mut w.w_uk,
            &mut w.w_uv,
            &mut w.b_v,
            &mut w.w_o,
            &mut w.b_o,
        ]),
    }
}

fn ffn_mut<'a>(out: &mut Vec<&'a mut Matrix>, f: &'a mut FeedForward) {
    out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
}
