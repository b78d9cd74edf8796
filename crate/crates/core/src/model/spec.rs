use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{MlaError, Result};

/// Shape of the encoder-decoder model and the attention variant at each
/// site. All layers of a site share one [`AttentionConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub encoder_self: AttentionConfig,
    pub decoder_self: AttentionConfig,
    pub cross: AttentionConfig,
}

impl ModelSpec {
    /// All-MHA model with the given dimensions.
    #[allow(clippy::too_many_arguments)]
    pub fn mha(
        d_model: usize,
        n_heads: usize,
        n_encoder_layers: usize,
        n_decoder_layers: usize,
        d_ff: usize,
        vocab_size: usize,
        max_source_len: usize,
        max_target_len: usize,
    ) -> Result<Self> {
        let att = AttentionConfig::mha(d_model, n_heads)?;
        let spec = Self {
            d_model,
            n_heads,
            n_encoder_layers,
            n_decoder_layers,
            d_ff,
            vocab_size,
            max_source_len,
            max_target_len,
            encoder_self: att,
            decoder_self: att,
            cross: att,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: width 64, 4 heads, 2+2 layers.
    pub fn toy() -> Self {
        Self::mha(64, 4, 2, 2, 256, 64, 128, 128).expect("valid constants")
    }

    /// Whisper-small dimensions (used for memory estimates only).
    pub fn whisper_small() -> Self {
        Self::mha(768, 12, 12, 12, 3072, 51865, 1500, 448).expect("valid constants")
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn site_config(&self, site: Site) -> &AttentionConfig {
        match site {
            Site::EncoderSelf => &self.encoder_self,
            Site::DecoderSelf => &self.decoder_self,
            Site::Cross => &self.cross,
        }
    }

    pub fn site_config_mut(&mut self, site: Site) -> &mut AttentionConfig {
        match site {
            Site::EncoderSelf => &mut self.encoder_self,
            Site::DecoderSelf => &mut self.decoder_self,
            Site::Cross => &mut self.cross,
        }
    }

    pub fn layer_count(&self, site: Site) -> usize {
        match site {
            Site::EncoderSelf => self.n_encoder_layers,
            Site::DecoderSelf | Site::Cross => self.n_decoder_layers,
        }
    }

    /// Every attention layer in canonical order.
    pub fn layer_sites(&self) -> Vec<LayerSite> {
        Site::ALL
            .iter()
            .flat_map(|&site| (0..self.layer_count(site)).map(move |layer| LayerSite { site, layer }))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(MlaError::config(format!("{name} must be at least 1")));
        }
        for site in Site::ALL {
            let c = self.site_config(site);
            c.validate()?;
            if c.d_model != self.d_model || c.n_heads != self.n_heads {
                return Err(MlaError::config(format!(
                    "{site} attention config disagrees with model width/heads"
                )));
            }
        }
        Ok(())
    }
}

/// The three kinds of attention in an encoder-decoder model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::Cross];

    /// Decoder self-attention is the only cache that grows while decoding.
    pub fn is_growing(self) -> bool {
        matches!(self, Site::DecoderSelf)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::EncoderSelf => "encoder_self",
            Site::DecoderSelf => "decoder_self",
            Site::Cross => "cross",
        })
    }
}

/// One attention layer: a site and a layer index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSite {
    pub site: Site,
    pub layer: usize,
}

impl LayerSite {
    pub fn new(site: Site, layer: usize) -> Self {
        Self { site, layer }
    }

    /// Tensor-name prefix of this layer's attention weights.
    pub fn prefix(&self) -> String {
        match self.site {
            Site::EncoderSelf => format!("encoder.layers.{}.self_attn", self.layer),
            Site::DecoderSelf => format!("decoder.layers.{}.self_attn", self.layer),
            Site::Cross => format!("decoder.layers.{}.cross_attn", self.layer),
        }
    }
}

impl fmt::Display for LayerSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}
