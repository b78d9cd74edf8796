//! Multi-head latent attention (MLA) for encoder-decoder transformers with
//! absolute positional embeddings.
//!
//! The crate covers the full pipeline on a desk-scale toy model:
//!
//! - [`linalg`]: dense row-major matrices and a one-sided Jacobi SVD.
//! - [`selection`]: choosing which key frequency subspaces bypass compression.
//! - [`attention`]: MHA, full-compression MLA and dimension-preserving MLA,
//!   with KV caches and an absorbed inference path.
//! - [`conversion`]: turning pretrained MHA weights into MLA weights with a
//!   joint SVD of the compressible keys and the values.
//! - [`model`]: a Whisper-shaped encoder-decoder and its checkpoint format.
//! - [`training`]: analytic backprop, gradient checks, synthetic tasks and
//!   fine-tuning.
//! - [`memory`]: KV-cache accounting and memory sweeps.

pub mod attention;
pub mod conversion;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod selection;
pub mod training;

pub use error::{MlaError, Result};
pub use linalg::Matrix;
