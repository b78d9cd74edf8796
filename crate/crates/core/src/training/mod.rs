//! Toy-scale training: synthetic seq2seq tasks, hand-written backprop,
//! finite-difference validation and a fine-tuning loop.

mod backprop;
mod finetune;
mod gradcheck;

pub use backprop::{backward, forward_loss, BatchOutcome};
pub use finetune::{evaluate, finetune, finetune_on, EvalResult, MetricRow, TrainOutcome};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, GradSample};

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MlaError, Result};
use crate::model::{ModelSpec, Site, TokenId, BOS, EOS, FIRST_CONTENT, PAD};

/// One source/target pair. `target` ends with EOS; teacher forcing feeds
/// `[BOS] + target[..n-1]` to the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn decoder_input(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.target.len());
        v.push(BOS);
        v.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        v
    }

    /// Number of target positions that contribute to the loss.
    pub fn label_count(&self) -> usize {
        self.target.iter().filter(|&&t| t != PAD).count()
    }
}

/// Reads examples from JSON lines; blank lines are skipped.
pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| MlaError::format(format!("line {}", i + 1), e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| MlaError::format("example", e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
}

impl FromStr for TaskKind {
    type Err = MlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            _ => Err(MlaError::arg(format!("unknown task `{s}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
        })
    }
}

/// Seeded synthetic seq2seq dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sample_count: usize,
    pub seed: u64,
}

/// Share of samples held out for evaluation.
pub const HELDOUT_FRACTION: f64 = 0.1;

impl SyntheticTask {
    /// Copy task at the toy defaults: vocab 64, lengths 1..=16, 2000 samples.
    pub fn copy(seed: u64) -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 64,
            min_len: 1,
            max_len: 16,
            sample_count: 2000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT as usize {
            return Err(MlaError::config(format!(
                "vocab_size must exceed {FIRST_CONTENT} reserved ids"
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(MlaError::config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.sample_count < 2 {
            return Err(MlaError::config("need at least 2 samples for a train/held-out split"));
        }
        Ok(())
    }

    /// Checks the task fits a model.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        if self.vocab_size > spec.vocab_size {
            return Err(MlaError::config("task vocabulary exceeds model vocabulary"));
        }
        if self.max_len > spec.max_source_len || self.max_len + 1 > spec.max_target_len {
            return Err(MlaError::config("task lengths exceed model maxima"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let lo = FIRST_CONTENT;
        let hi = self.vocab_size as TokenId;
        Ok((0..self.sample_count)
            .map(|_| {
                let n = rng.random_range(self.min_len..=self.max_len);
                let source: Vec<TokenId> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
                let mut target = source.clone();
                if self.kind == TaskKind::Reverse {
                    target.reverse();
                }
                target.push(EOS);
                Example { source, target }
            })
            .collect())
    }

    /// `(train, held_out)`; the held-out part is the tail of the dataset.
    pub fn split(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let mut all = self.generate()?;
        let held = ((self.sample_count as f64 * HELDOUT_FRACTION).round() as usize)
            .clamp(1, self.sample_count - 1);
        let test = all.split_off(self.sample_count - held);
        Ok((all, test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            optimizer: Optimizer::adam(),
            seed: 0,
            gradient_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MlaError::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlaError::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(MlaError::config("batch_size must be at least 1"));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(MlaError::config("gradient_clip must be positive"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(MlaError::config("invalid Adam hyperparameters"));
            }
        }
        Ok(())
    }

    pub(crate) fn shuffled_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Tensors excluded from updates. Matching is by canonical tensor-name
/// prefix, so freezing a site freezes its attention weights.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Freeze {
    prefixes: BTreeSet<String>,
}

impl Freeze {
    pub fn none() -> Self {
        Self::default()
    }

    /// Freezes the listed sites. Freezing encoder self-attention freezes
    /// the whole encoder, since nothing else in it would see a gradient
    /// that changes what the decoder reads.
    pub fn sites(spec: &ModelSpec, sites: &[Site]) -> Self {
        let mut prefixes = BTreeSet::new();
        for &s in sites {
            match s {
                Site::EncoderSelf => {
                    prefixes.insert("encoder.".to_string());
                }
                Site::DecoderSelf => {
                    for i in 0..spec.n_decoder_layers {
                        prefixes.insert(format!("decoder.layers.{i}.self_attn."));
                    }
                }
                Site::Cross => {
                    for i in 0..spec.n_decoder_layers {
                        prefixes.insert(format!("decoder.layers.{i}.cross_attn."));
                    }
                }
            }
        }
        Self { prefixes }
    }

    /// The decoder-self-only discipline: encoder and cross-attention stay
    /// as loaded.
    pub fn dso(spec: &ModelSpec) -> Self {
        Self::sites(spec, &[Site::EncoderSelf, Site::Cross])
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefixes.insert(prefix.into());
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub(crate) fn encoder_frozen(&self) -> bool {
        self.is_frozen("encoder.embed")
            && self.is_frozen("encoder.ln_post.gamma")
            && self.is_frozen("encoder.layers.0.ffn.w1")
    }
}
