use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{MlaError, Result};
use crate::model::Model;

use super::backprop::{backward, forward_loss};
use super::{Example, Freeze};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Samples above this relative error are flagged.
pub const FLAG_THRESHOLD: f64 = 1e-3;
/// Magnitude below which gradients are compared absolutely. Central
/// differences of an O(1) loss carry ~1e-10 of rounding noise at h=1e-5,
/// so relative error is meaningless for gradients near that level.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSample {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Worst relative error per sampled tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn flagged(&self) -> Vec<&GradSample> {
        self.samples
            .iter()
            .filter(|s| s.relative_error > FLAG_THRESHOLD)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

/// Compares analytic gradients with central differences at `sample_count`
/// random coordinates. A tensor is drawn uniformly, then a coordinate
/// within it, so small tensors such as biases are exercised too.
pub fn finite_diff_check(
    model: &Model,
    batch: &[Example],
    sample_count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if sample_count == 0 {
        return Err(MlaError::arg("sample_count must be at least 1"));
    }
    let (_, grads) = backward(model, batch, &Freeze::none())?;
    let grad_tensors = grads.named_tensors();
    let candidates: Vec<usize> = (0..grad_tensors.len())
        .filter(|&i| !grad_tensors[i].1.is_empty())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(sample_count);
    let mut per_tensor: BTreeMap<String, f64> = BTreeMap::new();
    for _ in 0..sample_count {
        let ti = candidates[rng.random_range(0..candidates.len())];
        let (name, g) = &grad_tensors[ti];
        let idx = rng.random_range(0..g.len());
        let analytic = g.as_slice()[idx];

        let original = probe.tensors_mut()[ti].as_slice()[idx];
        probe.tensors_mut()[ti].as_mut_slice()[idx] = original + FD_STEP;
        let plus = forward_loss(&probe, batch)?;
        probe.tensors_mut()[ti].as_mut_slice()[idx] = original - FD_STEP;
        let minus = forward_loss(&probe, batch)?;
        probe.tensors_mut()[ti].as_mut_slice()[idx] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);

        let err = relative_error(analytic, numeric);
        let worst = per_tensor.entry(name.clone()).or_insert(0.0);
        *worst = worst.max(err);
        samples.push(GradSample {
            tensor: name.clone(),
            row: idx / g.cols(),
            col: idx % g.cols(),
            analytic,
            numeric,
            relative_error: err,
        });
    }
    let max_relative_error = samples.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples,
        per_tensor,
        max_relative_error,
    })
}
