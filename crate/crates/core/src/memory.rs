//! Analytic KV-cache accounting.
//!
//! Only cache entries are counted (no weights or activations). Per token
//! and layer, an MHA site caches `2·d_model` entries and an MLA site caches
//! `d_latent + n_preserved`. Decoder self-attention grows with the number
//! of generated tokens; encoder self-attention and cross-attention scale
//! with the source length and are filled once.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::AttentionConfig;
use crate::conversion::Placement;
use crate::error::{MlaError, Result};
use crate::model::{ModelSpec, Site};

/// Default bytes per cached scalar (half precision).
pub const DEFAULT_BYTES_PER_ENTRY: u64 = 2;

/// Denominator used for a reduction percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionBasis {
    /// Per-token MHA footprint taken as `d_model`.
    KeyOnly,
    /// Per-token MHA footprint taken as `2·d_model` (keys and values).
    KeyValue,
}

impl ReductionBasis {
    pub fn entries(self, d_model: usize) -> usize {
        match self {
            ReductionBasis::KeyOnly => d_model,
            ReductionBasis::KeyValue => 2 * d_model,
        }
    }
}

impl fmt::Display for ReductionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionBasis::KeyOnly => "key_only",
            ReductionBasis::KeyValue => "key_value",
        })
    }
}

impl FromStr for ReductionBasis {
    type Err = MlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key_only" | "key-only" => Ok(ReductionBasis::KeyOnly),
            "key_value" | "key-value" => Ok(ReductionBasis::KeyValue),
            _ => Err(MlaError::arg(format!("unknown reduction basis `{s}`"))),
        }
    }
}

/// An exact reduction `saved / basis`, kept as integers until formatted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Reduction {
    pub basis: ReductionBasis,
    pub saved: u64,
    pub total: u64,
}

/// Digits printed for non-terminating percentages.
const MAX_DECIMALS: usize = 6;

impl Reduction {
    pub fn fraction(&self) -> f64 {
        self.saved as f64 / self.total as f64
    }

    /// Percentage with at least two decimals and as many more as the exact
    /// value needs (up to six, rounded half up).
    pub fn percent_string(&self) -> String {
        let num = 100 * self.saved as u128;
        let den = self.total as u128;
        let int = num / den;
        let mut rem = num % den;
        let mut digits = Vec::new();
        while digits.len() < MAX_DECIMALS && (rem != 0 || digits.len() < 2) {
            rem *= 10;
            digits.push((rem / den) as u8);
            rem %= den;
        }
        let mut int = int;
        if rem * 2 >= den && rem != 0 {
            // Round the last digit up, carrying as needed.
            let mut i = digits.len();
            loop {
                if i == 0 {
                    int += 1;
                    break;
                }
                i -= 1;
                if digits[i] == 9 {
                    digits[i] = 0;
                } else {
                    digits[i] += 1;
                    break;
                }
            }
        }
        let frac: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
        format!("{int}.{frac}%")
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.percent_string())
    }
}

/// `1 − (d_latent + n_preserved) / basis`.
pub fn reduction_ratio(
    basis: ReductionBasis,
    d_model: usize,
    d_latent: usize,
    n_preserved: usize,
) -> Result<Reduction> {
    let total = basis.entries(d_model);
    if total == 0 {
        return Err(MlaError::arg("d_model must be at least 1"));
    }
    let kept = d_latent + n_preserved;
    if kept > total {
        return Err(MlaError::arg(format!(
            "{kept} cached entries per token exceed the {basis} basis of {total}: not a compression"
        )));
    }
    Ok(Reduction {
        basis,
        saved: (total - kept) as u64,
        total: total as u64,
    })
}

/// Cache accounting for one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiteFootprint {
    pub site: Site,
    pub entries_per_token_per_layer: usize,
    pub layers: usize,
    pub growing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheFootprint {
    pub sites: [SiteFootprint; 3],
    pub bytes_per_entry: u64,
}

impl CacheFootprint {
    pub fn new(spec: &ModelSpec, bytes_per_entry: u64) -> Self {
        let site = |s: Site| SiteFootprint {
            site: s,
            entries_per_token_per_layer: spec.site_config(s).cache_entries_per_token(),
            layers: spec.layer_count(s),
            growing: s.is_growing(),
        };
        Self {
            sites: [site(Site::EncoderSelf), site(Site::DecoderSelf), site(Site::Cross)],
            bytes_per_entry,
        }
    }

    pub fn site(&self, s: Site) -> &SiteFootprint {
        self.sites.iter().find(|f| f.site == s).expect("all sites present")
    }

    /// Bytes for a batch, after `generated_len` decoder tokens over a
    /// source of `source_len` tokens.
    pub fn bytes(&self, batch: u64, generated_len: u64, source_len: u64) -> FootprintBytes {
        let b = |s: Site| {
            let f = self.site(s);
            let len = if f.growing { generated_len } else { source_len };
            f.entries_per_token_per_layer as u64 * f.layers as u64 * len * batch * self.bytes_per_entry
        };
        let encoder_self = b(Site::EncoderSelf);
        let decoder_self = b(Site::DecoderSelf);
        let cross = b(Site::Cross);
        FootprintBytes {
            encoder_self,
            decoder_self,
            cross,
            total: encoder_self + decoder_self + cross,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FootprintBytes {
    pub encoder_self: u64,
    pub decoder_self: u64,
    pub cross: u64,
    pub total: u64,
}

pub fn footprint(
    spec: &ModelSpec,
    batch: u64,
    generated_len: u64,
    source_len: u64,
    bytes_per_entry: u64,
) -> FootprintBytes {
    CacheFootprint::new(spec, bytes_per_entry).bytes(batch, generated_len, source_len)
}

/// `base` with the sites of `placement` switched to `mla`.
pub fn with_placement(base: &ModelSpec, placement: Placement, mla: AttentionConfig) -> Result<ModelSpec> {
    let mut spec = *base;
    for &s in placement.sites() {
        *spec.site_config_mut(s) = mla;
    }
    spec.validate()?;
    Ok(spec)
}

/// One sweep model: a label, the placement tag written to the CSV, and
/// its spec.
#[derive(Debug, Clone)]
pub struct SweepModel {
    pub name: String,
    pub placement: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub model: String,
    pub placement: String,
    pub batch: u64,
    pub seq_len: u64,
    pub source_len: u64,
    pub bytes_total: u64,
    pub bytes_decoder_self: u64,
    pub bytes_cross: u64,
    pub bytes_encoder_self: u64,
    pub oom: bool,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "model,placement,batch,seq_len,source_len,bytes_total,bytes_decoder_self,bytes_cross,bytes_encoder_self,oom";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.placement,
            self.batch,
            self.seq_len,
            self.source_len,
            self.bytes_total,
            self.bytes_decoder_self,
            self.bytes_cross,
            self.bytes_encoder_self,
            self.oom
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub batches: Vec<u64>,
    pub lengths: Vec<u64>,
    pub source_len: u64,
    pub bytes_per_entry: u64,
    pub budget_bytes: Option<u64>,
}

/// Batches and lengths of the desk-scale Fig-3-style grid.
pub const SWEEP_BATCHES: [u64; 4] = [1, 4, 16, 64];
pub const SWEEP_LENGTHS: [u64; 5] = [256, 512, 1024, 2048, 4096];

/// One row per (model, batch, length), models outermost. A row is flagged
/// OOM when a budget is given and its total exceeds it.
pub fn sweep(models: &[SweepModel], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if models.is_empty() || cfg.batches.is_empty() || cfg.lengths.is_empty() {
        return Err(MlaError::arg("sweep needs at least one model, batch and length"));
    }
    let mut rows = Vec::with_capacity(models.len() * cfg.batches.len() * cfg.lengths.len());
    for m in models {
        let fp = CacheFootprint::new(&m.spec, cfg.bytes_per_entry);
        for &batch in &cfg.batches {
            for &len in &cfg.lengths {
                let b = fp.bytes(batch, len, cfg.source_len);
                rows.push(SweepRow {
                    model: m.name.clone(),
                    placement: m.placement.clone(),
                    batch,
                    seq_len: len,
                    source_len: cfg.source_len,
                    bytes_total: b.total,
                    bytes_decoder_self: b.decoder_self,
                    bytes_cross: b.cross,
                    bytes_encoder_self: b.encoder_self,
                    oom: cfg.budget_bytes.is_some_and(|cap| b.total > cap),
                });
            }
        }
    }
    Ok(rows)
}
