use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MlaError, Result};

/// Which attention architecture a site uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Standard multi-head attention caching full keys and values.
    Mha,
    /// All key and value dimensions go through the shared latent.
    MlaFull,
    /// Selected key subspaces bypass the latent.
    MlaPreserving,
}

impl Variant {
    pub fn is_mla(self) -> bool {
        !matches!(self, Variant::Mha)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mha => "mha",
            Variant::MlaFull => "mla_full",
            Variant::MlaPreserving => "mla_preserving",
        })
    }
}

impl FromStr for Variant {
    type Err = MlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(Variant::Mha),
            "mla_full" => Ok(Variant::MlaFull),
            "mla_preserving" => Ok(Variant::MlaPreserving),
            _ => Err(MlaError::arg(format!("unknown attention variant `{s}`"))),
        }
    }
}

/// Shape and variant of one attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub variant: Variant,
    /// Latent width; zero for MHA.
    pub d_latent: usize,
    /// Preserved frequency subspaces per head; non-zero only for the
    /// preserving variant.
    pub r_per_head: usize,
}

impl AttentionConfig {
    pub fn mha(d_model: usize, n_heads: usize) -> Result<Self> {
        Self {
            d_model,
            n_heads,
            variant: Variant::Mha,
            d_latent: 0,
            r_per_head: 0,
        }
        .validated()
    }

    pub fn mla_full(d_model: usize, n_heads: usize, d_latent: usize) -> Result<Self> {
        Self {
            d_model,
            n_heads,
            variant: Variant::MlaFull,
            d_latent,
            r_per_head: 0,
        }
        .validated()
    }

    pub fn mla_preserving(
        d_model: usize,
        n_heads: usize,
        d_latent: usize,
        r_per_head: usize,
    ) -> Result<Self> {
        Self {
            d_model,
            n_heads,
            variant: Variant::MlaPreserving,
            d_latent,
            r_per_head,
        }
        .validated()
    }

    /// Whisper-small decoder self-attention after conversion: 12 heads of
    /// 64, latent 96, 48 preserved key dimensions.
    pub fn whisper_small_mla() -> Self {
        Self::mla_preserving(768, 12, 96, 2).expect("valid constants")
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MlaError::config(format!(
                "d_model {} is not a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let d_head = self.d_head();
        if !d_head.is_multiple_of(2) {
            return Err(MlaError::config(format!("d_head {d_head} must be even")));
        }
        match self.variant {
            Variant::Mha => {
                if self.d_latent != 0 || self.r_per_head != 0 {
                    return Err(MlaError::config("MHA takes no latent or preserved dims"));
                }
            }
            Variant::MlaFull => {
                if self.r_per_head != 0 {
                    return Err(MlaError::config("mla_full preserves no key dimensions"));
                }
                if self.d_latent == 0 {
                    return Err(MlaError::config("d_latent must be at least 1"));
                }
            }
            Variant::MlaPreserving => {
                if self.r_per_head == 0 || self.r_per_head > d_head / 2 {
                    return Err(MlaError::config(format!(
                        "r_per_head {} outside 1..={}",
                        self.r_per_head,
                        d_head / 2
                    )));
                }
                if self.d_latent == 0 {
                    return Err(MlaError::config("d_latent must be at least 1"));
                }
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }

    /// Key dimensions kept outside the latent, over all heads.
    pub fn n_preserved(&self) -> usize {
        2 * self.r_per_head * self.n_heads
    }

    /// Cached scalars per token per layer.
    pub fn cache_entries_per_token(&self) -> usize {
        match self.variant {
            Variant::Mha => 2 * self.d_model,
            _ => self.d_latent + self.n_preserved(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whisper_small_defaults() {
        let c = AttentionConfig::whisper_small_mla();
        assert_eq!(c.d_head(), 64);
        assert_eq!(c.n_preserved(), 48);
        assert_eq!(c.cache_entries_per_token(), 144);
    }

    #[test]
    fn invariants_enforced() {
        assert!(AttentionConfig::mha(65, 4).is_err());
        assert!(AttentionConfig::mha(12, 4).is_err()); // odd d_head
        assert!(AttentionConfig::mla_full(64, 4, 0).is_err());
        assert!(AttentionConfig::mla_preserving(64, 4, 8, 0).is_err());
        assert!(AttentionConfig::mla_preserving(64, 4, 8, 9).is_err());
        assert!(AttentionConfig::mla_preserving(64, 4, 8, 8).is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Mha, Variant::MlaFull, Variant::MlaPreserving] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
