//! Dense linear algebra: row-major matrices, row softmax and truncated SVD.

mod matrix;
mod svd;

pub use matrix::{softmax_rows, softmax_rows_in_place, MatView, Matrix};
pub use svd::{truncated_svd, SvdFactors};
