//! Straight-line reference implementations used as test oracles. Nothing
//! here calls the library's matrix products or attention code; weights are
//! only read out of the model.
#![allow(dead_code)]

use mla_core::attention::AttentionLayer;
use mla_core::model::{Model, TokenId};
use mla_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn max_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(r, c)]).abs());
        }
    }
    worst
}

/// `x · W (+ b)` by explicit loops.
pub fn linear(x: &Rows, w: &Matrix, b: Option<&Matrix>) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = b.map_or(0.0, |b| b[(0, j)]);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[(i, j)];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Rows, gamma: &Matrix, beta: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-8).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[(0, j)] + beta[(0, j)])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &mut Rows, b: &Rows) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

/// Full keys and values of an attention layer, reconstructed element by
/// element for MLA.
fn keys_values(layer: &AttentionLayer, x_kv: &Rows) -> (Rows, Rows) {
    match layer {
        AttentionLayer::Mha(w) => (linear(x_kv, &w.w_k, None), linear(x_kv, &w.w_v, Some(&w.b_v))),
        AttentionLayer::Mla(w) => {
            let c = linear(x_kv, &w.w_dkv, None);
            let kp = linear(x_kv, &w.w_kp, None);
            let kc = linear(&c, &w.w_uk, None);
            let v = linear(&c, &w.w_uv, Some(&w.b_v));
            let d = w.d_model();
            let kept = w.selection().global_dims();
            let compressed: Vec<usize> = (0..d).filter(|g| !kept.contains(g)).collect();
            let k = (0..x_kv.len())
                .map(|t| {
                    let mut row = vec![0.0; d];
                    for (i, &g) in kept.iter().enumerate() {
                        row[g] = kp[t][i];
                    }
                    for (i, &g) in compressed.iter().enumerate() {
                        row[g] = kc[t][i];
                    }
                    row
                })
                .collect();
            (k, v)
        }
    }
}

/// Multi-head attention with explicit score loops. Causal masking assumes
/// queries are the last `x_q.len()` positions of the key sequence.
pub fn attention(layer: &AttentionLayer, x_q: &Rows, x_kv: &Rows, causal: bool) -> Rows {
    let (w_q, b_q, w_o, b_o) = match layer {
        AttentionLayer::Mha(w) => (&w.w_q, &w.b_q, &w.w_o, &w.b_o),
        AttentionLayer::Mla(w) => (&w.w_q, &w.b_q, &w.w_o, &w.b_o),
    };
    let q = linear(x_q, w_q, Some(b_q));
    let (k, v) = keys_values(layer, x_kv);
    let h = layer.n_heads();
    let d = q[0].len();
    let dh = d / h;
    let offset = if causal { k.len() - q.len() } else { 0 };
    let mut o = vec![vec![0.0; d]; q.len()];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..q.len() {
            let visible = if causal { offset + i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|t| cols.clone().map(|c| q[i][c] * k[t][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                o[i][c] = (0..visible).map(|t| e[t] / z * v[t][c]).sum();
            }
        }
    }
    linear(&o, w_o, Some(b_o))
}

pub fn sinusoid(p: usize, c: usize, d: usize) -> f64 {
    let k = (c / 2) as f64;
    let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
    if c.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn ffn(f: &mla_core::model::FeedForward, x: &Rows) -> Rows {
    let mut h = linear(x, &f.w1, Some(&f.b1));
    h.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    linear(&h, &f.w2, Some(&f.b2))
}

pub fn encode(m: &Model, source: &[TokenId]) -> Rows {
    let d = m.spec.d_model;
    let mut x: Rows = source
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|c| m.enc_embed[(t as usize, c)] + sinusoid(p, c, d)).collect())
        .collect();
    for l in &m.enc_layers {
        let h = layer_norm(&x, &l.ln_attn.gamma, &l.ln_attn.beta);
        add(&mut x, &attention(&l.self_attn, &h, &h, false));
        let h = layer_norm(&x, &l.ln_ffn.gamma, &l.ln_ffn.beta);
        add(&mut x, &ffn(&l.ffn, &h));
    }
    layer_norm(&x, &m.enc_ln.gamma, &m.enc_ln.beta)
}

/// Teacher-forced logits with no caching.
pub fn forward_logits(m: &Model, source: &[TokenId], tokens: &[TokenId]) -> Rows {
    let enc = encode(m, source);
    let d = m.spec.d_model;
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|c| m.dec_embed[(t as usize, c)] + m.dec_pos[(p, c)]).collect())
        .collect();
    for l in &m.dec_layers {
        let h = layer_norm(&x, &l.ln_self.gamma, &l.ln_self.beta);
        add(&mut x, &attention(&l.self_attn, &h, &h, true));
        let h = layer_norm(&x, &l.ln_cross.gamma, &l.ln_cross.beta);
        add(&mut x, &attention(&l.cross_attn, &h, &enc, false));
        let h = layer_norm(&x, &l.ln_ffn.gamma, &l.ln_ffn.beta);
        add(&mut x, &ffn(&l.ffn, &h));
    }
    let h = layer_norm(&x, &m.dec_ln.gamma, &m.dec_ln.beta);
    h.iter()
        .map(|row| {
            (0..m.spec.vocab_size)
                .map(|t| row.iter().enumerate().map(|(c, v)| v * m.dec_embed[(t, c)]).sum())
                .collect()
        })
        .collect()
}

/// Mean `−log softmax(label)` over non-PAD labels, summed per position.
pub fn cross_entropy(logits: &Rows, labels: &[TokenId]) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &y) in logits.iter().zip(labels) {
        if y == mla_core::model::PAD {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += log_z - row[y as usize];
        n += 1;
    }
    (total, n)
}

/// Spec with every attention site set to `cfg`.
pub fn uniform_spec(cfg: mla_core::attention::AttentionConfig) -> mla_core::model::ModelSpec {
    let mut s = mla_core::model::ModelSpec::toy();
    s.encoder_self = cfg;
    s.decoder_self = cfg;
    s.cross = cfg;
    s
}
