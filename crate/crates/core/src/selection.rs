//! Choosing which key frequency subspaces bypass low-rank compression.
//!
//! A head of width `d_head` has `d_head / 2` frequency subspaces; subspace `k`
//! covers dimensions `2k` and `2k + 1`. Two strategies pick `r` of them:
//! uniform sampling, which is weight-independent, and head-wise 2-norm
//! contribution, which ranks subspaces by the mean product of query and key
//! norms observed on calibration data.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionLayer;
use crate::error::{MlaError, Result};
use crate::model::{LayerSite, Model, Site};
use crate::training::Example;

/// Per-head preserved subspace indices for one attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceSelection {
    d_head: usize,
    per_head: Vec<Vec<usize>>,
}

impl SubspaceSelection {
    /// Validates and builds a selection. Each head list must be sorted,
    /// duplicate-free, in `[0, d_head/2)`, and all lists equally long.
    pub fn new(d_head: usize, per_head: Vec<Vec<usize>>) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(MlaError::arg(format!("d_head must be even and positive, got {d_head}")));
        }
        if per_head.is_empty() {
            return Err(MlaError::arg("selection needs at least one head"));
        }
        let r = per_head[0].len();
        let n_sub = d_head / 2;
        for (h, subs) in per_head.iter().enumerate() {
            if subs.len() != r {
                return Err(MlaError::arg(format!(
                    "head {h} keeps {} subspaces, head 0 keeps {r}",
                    subs.len()
                )));
            }
            if subs.iter().any(|&k| k >= n_sub) {
                return Err(MlaError::arg(format!(
                    "head {h} has a subspace index outside [0, {n_sub})"
                )));
            }
            if subs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MlaError::arg(format!(
                    "head {h} subspaces must be strictly ascending"
                )));
            }
        }
        Ok(Self { d_head, per_head })
    }

    /// The same subspace list for every head.
    pub fn shared(n_heads: usize, d_head: usize, subspaces: Vec<usize>) -> Result<Self> {
        Self::new(d_head, vec![subspaces; n_heads])
    }

    /// No preserved subspaces (full compression).
    pub fn empty(n_heads: usize, d_head: usize) -> Self {
        Self {
            d_head,
            per_head: vec![Vec::new(); n_heads],
        }
    }

    pub fn head_count(&self) -> usize {
        self.per_head.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Subspaces kept per head (`r`).
    pub fn per_head_count(&self) -> usize {
        self.per_head[0].len()
    }

    pub fn subspaces(&self, head: usize) -> &[usize] {
        &self.per_head[head]
    }

    pub fn per_head(&self) -> &[Vec<usize>] {
        &self.per_head
    }

    /// Total preserved key dimensions across heads.
    pub fn n_preserved(&self) -> usize {
        2 * self.per_head_count() * self.head_count()
    }

    /// Per-head local dimension indices: subspace `k` → `{2k, 2k+1}`.
    pub fn expand_to_dims(&self) -> Vec<Vec<usize>> {
        self.per_head
            .iter()
            .map(|subs| subs.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect())
            .collect()
    }

    /// Global key dimension indices (`head · d_head + local`), ascending.
    pub fn global_dims(&self) -> Vec<usize> {
        self.expand_to_dims()
            .iter()
            .enumerate()
            .flat_map(|(h, dims)| dims.iter().map(move |&j| h * self.d_head + j))
            .collect()
    }
}

/// Uniformly spaced subspaces: `{ ⌊k · d_head / (2r)⌋ : 0 ≤ k < r }`.
pub fn select_uniform(d_head: usize, r: usize) -> Result<Vec<usize>> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return Err(MlaError::arg(format!("d_head must be even and positive, got {d_head}")));
    }
    if r == 0 || r > d_head / 2 {
        return Err(MlaError::arg(format!(
            "cannot keep {r} of {} subspaces",
            d_head / 2
        )));
    }
    Ok((0..r).map(|k| k * d_head / (2 * r)).collect())
}

/// Mean per-head, per-subspace 2-norm product for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStatistics {
    scores: Vec<Vec<f64>>,
    sample_count: usize,
}

impl NormStatistics {
    pub fn new(scores: Vec<Vec<f64>>, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(MlaError::arg("norm statistics need at least one sample"));
        }
        if scores.is_empty() || scores.iter().any(|h| h.len() != scores[0].len()) {
            return Err(MlaError::arg("score table must be a non-empty rectangle"));
        }
        if scores.iter().flatten().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(MlaError::arg("scores must be finite and non-negative"));
        }
        Ok(Self {
            scores,
            sample_count,
        })
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn head_count(&self) -> usize {
        self.scores.len()
    }

    pub fn subspace_count(&self) -> usize {
        self.scores[0].len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Top-`r` subspaces per head by score; lower index wins ties.
pub fn select_2norm(stats: &NormStatistics, r: usize) -> Result<SubspaceSelection> {
    let n_sub = stats.subspace_count();
    if r > n_sub {
        return Err(MlaError::arg(format!("cannot keep {r} of {n_sub} subspaces")));
    }
    let per_head = stats
        .scores
        .iter()
        .map(|scores| {
            let mut idx: Vec<usize> = (0..n_sub).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut top = idx[..r].to_vec();
            top.sort_unstable();
            top
        })
        .collect();
    SubspaceSelection::new(2 * n_sub, per_head)
}

/// Running sums for one layer. Merging is plain addition, so partial
/// accumulators over disjoint calibration shards combine associatively.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    d_head: usize,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl NormAccumulator {
    pub fn new(n_heads: usize, d_head: usize) -> Self {
        Self {
            d_head,
            sums: vec![vec![0.0; d_head / 2]; n_heads],
            count: 0,
        }
    }

    fn subspace_norms(&self, row: &[f64], head: usize) -> impl Iterator<Item = f64> + '_ {
        let base = head * self.d_head;
        let row = row[base..base + self.d_head].to_vec();
        (0..self.d_head / 2).map(move |k| row[2 * k].hypot(row[2 * k + 1]))
    }

    /// Self-attention: queries and keys are paired position by position.
    pub fn add_aligned(&mut self, q: &crate::Matrix, k: &crate::Matrix) {
        assert_eq!(q.shape(), k.shape());
        for t in 0..q.rows() {
            for h in 0..self.sums.len() {
                let qn: Vec<f64> = self.subspace_norms(q.row(t), h).collect();
                let kn: Vec<f64> = self.subspace_norms(k.row(t), h).collect();
                for (s, (a, b)) in self.sums[h].iter_mut().zip(qn.iter().zip(&kn)) {
                    *s += a * b;
                }
            }
        }
        self.count += q.rows();
    }

    /// Cross-attention: every query position is paired with every key
    /// position, so the mean product factors into per-side norm sums.
    pub fn add_all_pairs(&mut self, q: &crate::Matrix, k: &crate::Matrix) {
        for h in 0..self.sums.len() {
            let mut qsum = vec![0.0; self.d_head / 2];
            let mut ksum = vec![0.0; self.d_head / 2];
            for t in 0..q.rows() {
                for (s, n) in qsum.iter_mut().zip(self.subspace_norms(q.row(t), h)) {
                    *s += n;
                }
            }
            for t in 0..k.rows() {
                for (s, n) in ksum.iter_mut().zip(self.subspace_norms(k.row(t), h)) {
                    *s += n;
                }
            }
            for (s, (a, b)) in self.sums[h].iter_mut().zip(qsum.iter().zip(&ksum)) {
                *s += a * b;
            }
        }
        self.count += q.rows() * k.rows();
    }

    pub fn merge(&mut self, other: &NormAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
    }

    pub fn finish(self) -> Result<NormStatistics> {
        let n = self.count as f64;
        let scores = self
            .sums
            .into_iter()
            .map(|h| h.into_iter().map(|s| s / n).collect())
            .collect();
        NormStatistics::new(scores, self.count)
    }
}

/// Runs the original MHA model over `calibration` and returns one
/// [`NormStatistics`] per requested layer, in the order given.
pub fn collect_norm_statistics(
    model: &Model,
    calibration: &[Example],
    targets: &[LayerSite],
) -> Result<Vec<NormStatistics>> {
    if calibration.is_empty() {
        return Err(MlaError::arg("calibration set is empty"));
    }
    let spec = &model.spec;
    let mut accs = Vec::with_capacity(targets.len());
    for t in targets {
        let layer = model.attention(*t).ok_or_else(|| {
            MlaError::arg(format!("layer {t} does not exist in this model"))
        })?;
        if !matches!(layer, AttentionLayer::Mha(_)) {
            return Err(MlaError::config(format!(
                "layer {t} is not MHA; statistics need the original weights"
            )));
        }
        accs.push(NormAccumulator::new(spec.n_heads, spec.d_head()));
    }

    for ex in calibration {
        let probes = model.probe_attention(&ex.source, &ex.decoder_input())?;
        for (t, acc) in targets.iter().zip(accs.iter_mut()) {
            let probe = probes
                .iter()
                .find(|p| p.site == *t)
                .expect("probe recorded for every attention layer");
            let AttentionLayer::Mha(w) = model.attention(*t).expect("checked above") else {
                unreachable!()
            };
            let mut q = probe.x_q.matmul(&w.w_q);
            q.add_row_broadcast(&w.b_q);
            let k = probe.x_kv.matmul(&w.w_k);
            match t.site {
                Site::EncoderSelf | Site::DecoderSelf => acc.add_aligned(&q, &k),
                Site::Cross => acc.add_all_pairs(&q, &k),
            }
        }
    }
    accs.into_iter().map(NormAccumulator::finish).collect()
}
