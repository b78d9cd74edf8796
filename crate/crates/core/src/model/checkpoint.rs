//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WMLA" | version: u32 | header_len: u64 | header (JSON, header_len bytes) | payload
//! ```
//!
//! The header lists every tensor with its element type, shape, and byte
//! range inside the payload, plus the model spec and the conversion spec if
//! the model was converted. Payload tensors are packed back to back in
//! header order. Float tensors are stored as `f32` when every value is
//! exactly representable in `f32` and as `f64` otherwise, so nothing is
//! lost and re-saving a loaded file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    attention_tensor_names, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, LayerSite, Model,
    ModelSpec,
};
use crate::attention::{AttentionLayer, MhaLayerWeights, MlaLayerWeights, Variant};
use crate::conversion::ConversionSpec;
use crate::error::{MlaError, Result};
use crate::linalg::Matrix;
use crate::selection::SubspaceSelection;

pub const MAGIC: &[u8; 4] = b"WMLA";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion: Option<ConversionSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Picks `f32` when the narrowing is exact.
    pub fn from_f64(values: &[f64]) -> Self {
        if values.iter().all(|&v| (v as f32) as f64 == v) {
            TensorData::F32(values.iter().map(|&v| v as f32).collect())
        } else {
            TensorData::F64(values.to_vec())
        }
    }

    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Some(v.clone()),
            TensorData::U32(_) => None,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// In-memory checkpoint: spec, optional conversion record, ordered tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContainer {
    pub model: ModelSpec,
    pub conversion: Option<ConversionSpec>,
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<Tensor>,
}

impl CheckpointContainer {
    pub fn new(
        model: ModelSpec,
        conversion: Option<ConversionSpec>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(MlaError::format("tensors", format!("duplicate tensor `{}`", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(MlaError::format(
                    format!("tensors.{}.shape", t.name),
                    "shape does not match element count",
                ));
            }
        }
        Ok(Self {
            model,
            conversion,
            metadata: BTreeMap::new(),
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Header describing the current tensors with packed offsets.
    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let length = (t.data.len() * t.data.dtype().size()) as u64;
                let e = TensorEntry {
                    name: t.name.clone(),
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        CheckpointHeader {
            model: self.model,
            conversion: self.conversion.clone(),
            metadata: self.metadata.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.data.to_le_bytes());
        }
        out
    }

    /// Parses and validates a whole file image. Every header invariant is
    /// checked before any tensor is decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(MlaError::format("magic", "file shorter than the fixed preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(MlaError::format("magic", format!("expected WMLA, found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(MlaError::format(
                "version",
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| MlaError::format("header_len", "header extends past end of file"))?
            as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| MlaError::format("header", e.to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| MlaError::format("header.model", e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut ranges = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let field = format!("tensors.{}", e.name);
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| MlaError::format(format!("{field}.shape"), "shape overflows"))?;
            if count.checked_mul(e.dtype.size() as u64) != Some(e.length) {
                return Err(MlaError::format(
                    format!("{field}.length"),
                    format!("{} bytes does not match shape {:?} of {:?}", e.length, e.shape, e.dtype),
                ));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .ok_or_else(|| MlaError::format(format!("{field}.offset"), "offset overflows"))?;
            if end > payload.len() as u64 {
                return Err(MlaError::format(
                    format!("{field}.offset"),
                    format!(
                        "range {}..{end} exceeds payload of {} bytes (truncated file?)",
                        e.offset,
                        payload.len()
                    ),
                ));
            }
            ranges.push((e.offset, end, e.name.as_str()));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(MlaError::format(
                    format!("tensors.{}.offset", w[1].2),
                    format!("overlaps tensor `{}`", w[0].2),
                ));
            }
        }
        let used = ranges.last().map_or(0, |r| r.1);
        if used != payload.len() as u64 {
            return Err(MlaError::format(
                "payload",
                format!("{} trailing bytes after the last tensor", payload.len() as u64 - used),
            ));
        }

        let tensors = header
            .tensors
            .iter()
            .map(|e| Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: TensorData::from_le_bytes(
                    e.dtype,
                    &payload[e.offset as usize..(e.offset + e.length) as usize],
                ),
            })
            .collect();
        let mut c = Self::new(header.model, header.conversion, tensors)?;
        c.metadata = header.metadata;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn selection_name(ls: LayerSite) -> String {
    format!("{}.selection", ls.prefix())
}

impl Model {
    /// Packs every parameter (and each MLA layer's selection) into a
    /// container.
    pub fn to_container(&self, conversion: Option<ConversionSpec>) -> CheckpointContainer {
        let mut tensors: Vec<Tensor> = self
            .named_tensors()
            .into_iter()
            .map(|(name, m)| Tensor {
                name,
                shape: vec![m.rows(), m.cols()],
                data: TensorData::from_f64(m.as_slice()),
            })
            .collect();
        for ls in self.spec.layer_sites() {
            if let Some(AttentionLayer::Mla(w)) = self.attention(ls) {
                let sel = w.selection();
                tensors.push(Tensor {
                    name: selection_name(ls),
                    shape: vec![sel.head_count(), sel.per_head_count()],
                    data: TensorData::U32(sel.per_head().iter().flatten().map(|&k| k as u32).collect()),
                });
            }
        }
        CheckpointContainer::new(self.spec, conversion, tensors).expect("model tensors are consistent")
    }

    /// Rebuilds a model, checking every expected tensor's presence and shape.
    pub fn from_container(c: &CheckpointContainer) -> Result<Self> {
        let spec = c.model;
        spec.validate()
            .map_err(|e| MlaError::format("header.model", e.to_string()))?;
        let by_name: BTreeMap<&str, &Tensor> =
            c.tensors().iter().map(|t| (t.name.as_str(), t)).collect();
        let mut used = 0usize;
        let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| MlaError::format(format!("tensors.{name}"), "missing"))?;
            if t.shape != [rows, cols] {
                return Err(MlaError::format(
                    format!("tensors.{name}.shape"),
                    format!("{:?}, expected [{rows}, {cols}]", t.shape),
                ));
            }
            let data = t.data.to_f64().ok_or_else(|| {
                MlaError::format(format!("tensors.{name}.dtype"), "expected a float tensor")
            })?;
            used += 1;
            Matrix::new(rows, cols, data)
                .map_err(|e| MlaError::format(format!("tensors.{name}"), e.to_string()))
        };
        let d = spec.d_model;

        let ln = |take: &mut dyn FnMut(String, usize, usize) -> Result<Matrix>, p: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: take(format!("{p}.gamma"), 1, d)?,
                beta: take(format!("{p}.beta"), 1, d)?,
            })
        };
        let ffn = |take: &mut dyn FnMut(String, usize, usize) -> Result<Matrix>, p: &str| -> Result<FeedForward> {
            Ok(FeedForward {
                w1: take(format!("{p}.w1"), d, spec.d_ff)?,
                b1: take(format!("{p}.b1"), 1, spec.d_ff)?,
                w2: take(format!("{p}.w2"), spec.d_ff, d)?,
                b2: take(format!("{p}.b2"), 1, d)?,
            })
        };
        let mut n_selections = 0usize;
        let mut attn = |take: &mut dyn FnMut(String, usize, usize) -> Result<Matrix>,
                        ls: LayerSite|
         -> Result<AttentionLayer> {
            let cfg = spec.site_config(ls.site);
            let p = ls.prefix();
            let names = attention_tensor_names(cfg.variant);
            if cfg.variant == Variant::Mha {
                let mut g = |n: &str, r: usize, c: usize| take(format!("{p}.{n}"), r, c);
                return Ok(AttentionLayer::Mha(MhaLayerWeights {
                    n_heads: cfg.n_heads,
                    w_q: g(names[0], d, d)?,
                    b_q: g(names[1], 1, d)?,
                    w_k: g(names[2], d, d)?,
                    w_v: g(names[3], d, d)?,
                    b_v: g(names[4], 1, d)?,
                    w_o: g(names[5], d, d)?,
                    b_o: g(names[6], 1, d)?,
                }));
            }
            let sname = selection_name(ls);
            let st = by_name
                .get(sname.as_str())
                .ok_or_else(|| MlaError::format(format!("tensors.{sname}"), "missing"))?;
            let TensorData::U32(raw) = &st.data else {
                return Err(MlaError::format(format!("tensors.{sname}.dtype"), "expected u32"));
            };
            if st.shape != [cfg.n_heads, cfg.r_per_head] {
                return Err(MlaError::format(
                    format!("tensors.{sname}.shape"),
                    format!("{:?}, expected [{}, {}]", st.shape, cfg.n_heads, cfg.r_per_head),
                ));
            }
            let per_head: Vec<Vec<usize>> = if cfg.r_per_head == 0 {
                vec![Vec::new(); cfg.n_heads]
            } else {
                raw.chunks(cfg.r_per_head)
                    .map(|c| c.iter().map(|&k| k as usize).collect())
                    .collect()
            };
            let sel = SubspaceSelection::new(cfg.d_head(), per_head)
                .map_err(|e| MlaError::format(format!("tensors.{sname}"), e.to_string()))?;
            n_selections += 1;
            let np = cfg.n_preserved();
            let dl = cfg.d_latent;
            let mut g = |n: &str, r: usize, c: usize| take(format!("{p}.{n}"), r, c);
            let w = MlaLayerWeights::new(
                g(names[0], d, d)?,
                g(names[1], 1, d)?,
                g(names[2], d, np)?,
                g(names[3], d, dl)?,
                g(names[4], dl, d - np)?,
                g(names[5], dl, d)?,
                g(names[6], 1, d)?,
                g(names[7], d, d)?,
                g(names[8], 1, d)?,
                sel,
            )
            .map_err(|e| MlaError::format(p.clone(), e.to_string()))?;
            Ok(AttentionLayer::Mla(w))
        };

        let enc_embed = take("encoder.embed".into(), spec.vocab_size, d)?;
        let mut enc_layers = Vec::new();
        for i in 0..spec.n_encoder_layers {
            let p = format!("encoder.layers.{i}");
            enc_layers.push(EncoderLayer {
                ln_attn: ln(&mut take, &format!("{p}.ln_attn"))?,
                self_attn: attn(&mut take, LayerSite::new(super::Site::EncoderSelf, i))?,
                ln_ffn: ln(&mut take, &format!("{p}.ln_ffn"))?,
                ffn: ffn(&mut take, &format!("{p}.ffn"))?,
            });
        }
        let enc_ln = ln(&mut take, "encoder.ln_post")?;
        let dec_embed = take("decoder.embed".into(), spec.vocab_size, d)?;
        let dec_pos = take("decoder.pos".into(), spec.max_target_len, d)?;
        let mut dec_layers = Vec::new();
        for i in 0..spec.n_decoder_layers {
            let p = format!("decoder.layers.{i}");
            dec_layers.push(DecoderLayer {
                ln_self: ln(&mut take, &format!("{p}.ln_self"))?,
                self_attn: attn(&mut take, LayerSite::new(super::Site::DecoderSelf, i))?,
                ln_cross: ln(&mut take, &format!("{p}.ln_cross"))?,
                cross_attn: attn(&mut take, LayerSite::new(super::Site::Cross, i))?,
                ln_ffn: ln(&mut take, &format!("{p}.ln_ffn"))?,
                ffn: ffn(&mut take, &format!("{p}.ffn"))?,
            });
        }
        let dec_ln = ln(&mut take, "decoder.ln_post")?;
        if used + n_selections != c.tensors().len() {
            return Err(MlaError::format(
                "tensors",
                format!(
                    "{} tensors present but the spec uses {}",
                    c.tensors().len(),
                    used + n_selections
                ),
            ));
        }
        Model::from_parts(spec, enc_embed, enc_layers, enc_ln, dec_embed, dec_pos, dec_layers, dec_ln)
            .map_err(|e| MlaError::format("tensors", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>, conversion: Option<ConversionSpec>) -> Result<()> {
        self.to_container(conversion).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&CheckpointContainer::load(path)?)
    }
}
