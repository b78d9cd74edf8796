//! Reverse-mode gradients for the toy model, written out layer by layer.
//!
//! Every forward op records what its backward needs on a small tape. MLA
//! layers are differentiated through the naive path (explicit keys and
//! values), which is numerically the same function as the absorbed path.

use crate::attention::{causal_offset, scores_to_probs, AttentionLayer};
use crate::error::{MlaError, Result};
use crate::linalg::Matrix;
use crate::model::{argmax, gelu, gelu_grad, FeedForward, LayerNorm, Model, PAD};

use super::{Example, Freeze};

/// Loss and teacher-forced accuracy over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutcome {
    /// Mean cross-entropy over non-PAD labels.
    pub loss: f64,
    pub label_count: usize,
    pub correct: usize,
}

impl BatchOutcome {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.label_count as f64
    }
}

fn count_labels(batch: &[Example]) -> Result<usize> {
    let n: usize = batch.iter().map(Example::label_count).sum();
    if n == 0 {
        return Err(MlaError::arg("batch has no non-PAD target positions"));
    }
    Ok(n)
}

/// Sum of `−log p(label)` over non-PAD rows, the number of correct argmax
/// predictions, and optionally `softmax − onehot` scaled by `scale`.
fn cross_entropy(logits: &Matrix, labels: &[u32], grad_scale: Option<f64>) -> (f64, usize, Option<Matrix>) {
    let mut total = 0.0;
    let mut correct = 0;
    let mut grad = grad_scale.map(|_| Matrix::zeros(logits.rows(), logits.cols()));
    for (t, &y) in labels.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = logits.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y as usize];
        if argmax(row) == y as usize {
            correct += 1;
        }
        if let (Some(g), Some(s)) = (grad.as_mut(), grad_scale) {
            for (gi, v) in g.row_mut(t).iter_mut().zip(row) {
                *gi = s * (v - lse).exp();
            }
            g.row_mut(t)[y as usize] -= s;
        }
    }
    (total, correct, grad)
}

/// Mean token cross-entropy of `batch` under teacher forcing.
pub fn forward_loss(model: &Model, batch: &[Example]) -> Result<f64> {
    Ok(evaluate_batch(model, batch)?.loss)
}

pub(crate) fn evaluate_batch(model: &Model, batch: &[Example]) -> Result<BatchOutcome> {
    let n = count_labels(batch)?;
    let mut total = 0.0;
    let mut correct = 0;
    for ex in batch {
        let logits = model.forward_logits(&ex.source, &ex.decoder_input())?;
        let (l, c, _) = cross_entropy(&logits, &ex.target, None);
        total += l;
        correct += c;
    }
    Ok(BatchOutcome {
        loss: total / n as f64,
        label_count: n,
        correct,
    })
}

/// Loss and gradients of every trainable tensor. The gradient is returned
/// as a model-shaped buffer; tensors matched by `freeze` get exact zeros,
/// and a fully frozen encoder is not differentiated at all.
pub fn backward(model: &Model, batch: &[Example], freeze: &Freeze) -> Result<(BatchOutcome, Model)> {
    let n = count_labels(batch)?;
    let scale = 1.0 / n as f64;
    let mut grads = model.zeros_like();
    let skip_encoder = freeze.encoder_frozen();
    let mut total = 0.0;
    let mut correct = 0;
    for ex in batch {
        let (l, c) = example_backward(model, ex, scale, skip_encoder, &mut grads)?;
        total += l;
        correct += c;
    }
    if !freeze.is_empty() {
        let names: Vec<String> = grads.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, g) in names.iter().zip(grads.tensors_mut()) {
            if freeze.is_frozen(name) {
                g.as_mut_slice().fill(0.0);
            }
        }
    }
    Ok((
        BatchOutcome {
            loss: total / n as f64,
            label_count: n,
            correct,
        },
        grads,
    ))
}

struct LnTape {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn ln_forward(ln: &LayerNorm, x: &Matrix) -> (Matrix, LnTape) {
    let (y, xhat, inv_std) = ln.forward_with_stats(x);
    (y, LnTape { xhat, inv_std })
}

fn ln_backward(ln: &LayerNorm, g: &mut LayerNorm, tape: &LnTape, dy: &Matrix) -> Matrix {
    let d = dy.cols();
    let gamma = ln.gamma.as_slice();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = tape.xhat.row(r);
        for j in 0..d {
            g.gamma.as_mut_slice()[j] += dyr[j] * xh[j];
            g.beta.as_mut_slice()[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean = dxhat.iter().sum::<f64>() / d as f64;
        let mean_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = tape.inv_std[r];
        for ((o, a), b) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = s * (a - mean - b * mean_x);
        }
    }
    dx
}

struct FfnTape {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

fn ffn_forward(f: &FeedForward, x: &Matrix) -> (Matrix, FfnTape) {
    let pre = f.pre_activation(x);
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let mut y = act.matmul(&f.w2);
    y.add_row_broadcast(&f.b2);
    (
        y,
        FfnTape {
            x: x.clone(),
            pre,
            act,
        },
    )
}

fn ffn_backward(f: &FeedForward, g: &mut FeedForward, tape: &FfnTape, dy: &Matrix) -> Matrix {
    g.w2.add_product(1.0, tape.act.view().t(), dy.view());
    g.b2.add_assign(&dy.sum_rows());
    let mut dpre = dy.matmul_t(&f.w2);
    for (d, p) in dpre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
        *d *= gelu_grad(*p);
    }
    g.w1.add_product(1.0, tape.x.view().t(), dpre.view());
    g.b1.add_assign(&dpre.sum_rows());
    dpre.matmul_t(&f.w1)
}

struct AttnTape {
    x_q: Matrix,
    x_kv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention probabilities.
    probs: Vec<Matrix>,
    /// Concatenated head outputs before `w_o`.
    o: Matrix,
    /// Joint latent, MLA only.
    c: Option<Matrix>,
}

fn attn_forward(layer: &AttentionLayer, x_q: &Matrix, x_kv: &Matrix, causal: bool) -> Result<(Matrix, AttnTape)> {
    let (w_q, b_q, w_o, b_o) = match layer {
        AttentionLayer::Mha(w) => (&w.w_q, &w.b_q, &w.w_o, &w.b_o),
        AttentionLayer::Mla(w) => (&w.w_q, &w.b_q, &w.w_o, &w.b_o),
    };
    let mut q = x_q.matmul(w_q);
    q.add_row_broadcast(b_q);
    let (k, v, c) = match layer {
        AttentionLayer::Mha(w) => {
            let k = x_kv.matmul(&w.w_k);
            let mut v = x_kv.matmul(&w.w_v);
            v.add_row_broadcast(&w.b_v);
            (k, v, None)
        }
        AttentionLayer::Mla(w) => {
            let c = x_kv.matmul(&w.w_dkv);
            let kp = x_kv.matmul(&w.w_kp);
            let k = w.layout().scatter(&kp, &c.matmul(&w.w_uk));
            let mut v = c.matmul(&w.w_uv);
            v.add_row_broadcast(&w.b_v);
            (k, v, Some(c))
        }
    };
    let n_heads = layer.n_heads();
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = causal_offset(q.rows(), k.rows(), causal)?;
    let mut o = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let mut p = q.column_range(lo, hi).matmul_t(&k.column_range(lo, hi));
        scores_to_probs(&mut p, scale, offset);
        let oh = p.matmul(&v.column_range(lo, hi));
        for r in 0..o.rows() {
            o.row_mut(r)[lo..hi].copy_from_slice(oh.row(r));
        }
        probs.push(p);
    }
    let mut y = o.matmul(w_o);
    y.add_row_broadcast(b_o);
    Ok((
        y,
        AttnTape {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            q,
            k,
            v,
            probs,
            o,
            c,
        },
    ))
}

fn write_cols(dst: &mut Matrix, lo: usize, src: &Matrix) {
    for r in 0..src.rows() {
        dst.row_mut(r)[lo..lo + src.cols()].copy_from_slice(src.row(r));
    }
}

/// Returns `(∂L/∂x_q, ∂L/∂x_kv)`.
fn attn_backward(layer: &AttentionLayer, g: &mut AttentionLayer, tape: &AttnTape, dy: &Matrix) -> (Matrix, Matrix) {
    let n_heads = layer.n_heads();
    let d = tape.q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (w_q, w_o) = match layer {
        AttentionLayer::Mha(w) => (&w.w_q, &w.w_o),
        AttentionLayer::Mla(w) => (&w.w_q, &w.w_o),
    };
    {
        let (gw_o, gb_o) = match g {
            AttentionLayer::Mha(w) => (&mut w.w_o, &mut w.b_o),
            AttentionLayer::Mla(w) => (&mut w.w_o, &mut w.b_o),
        };
        gw_o.add_product(1.0, tape.o.view().t(), dy.view());
        gb_o.add_assign(&dy.sum_rows());
    }
    let d_o = dy.matmul_t(w_o);

    let mut dq = Matrix::zeros(tape.q.rows(), d);
    let mut dk = Matrix::zeros(tape.k.rows(), d);
    let mut dv = Matrix::zeros(tape.v.rows(), d);
    for (h, p) in tape.probs.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let do_h = d_o.column_range(lo, hi);
        let v_h = tape.v.column_range(lo, hi);
        write_cols(&mut dv, lo, &p.t_matmul(&do_h));
        let mut ds = do_h.matmul_t(&v_h);
        for r in 0..ds.rows() {
            let pr = p.row(r);
            let dot: f64 = ds.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
            for (x, &pv) in ds.row_mut(r).iter_mut().zip(pr) {
                *x = scale * pv * (*x - dot);
            }
        }
        write_cols(&mut dq, lo, &ds.matmul(&tape.k.column_range(lo, hi)));
        write_cols(&mut dk, lo, &ds.t_matmul(&tape.q.column_range(lo, hi)));
    }

    let xq_t = tape.x_q.view().t();
    let xkv_t = tape.x_kv.view().t();
    let dx_q = dq.matmul_t(w_q);
    let dx_kv = match (layer, g) {
        (AttentionLayer::Mha(w), AttentionLayer::Mha(gw)) => {
            gw.w_q.add_product(1.0, xq_t, dq.view());
            gw.b_q.add_assign(&dq.sum_rows());
            gw.w_k.add_product(1.0, xkv_t, dk.view());
            gw.w_v.add_product(1.0, xkv_t, dv.view());
            gw.b_v.add_assign(&dv.sum_rows());
            let mut dx = dk.matmul_t(&w.w_k);
            dx.add_product(1.0, dv.view(), w.w_v.view().t());
            dx
        }
        (AttentionLayer::Mla(w), AttentionLayer::Mla(gw)) => {
            let c = tape.c.as_ref().expect("MLA tape holds the latent");
            gw.w_q.add_product(1.0, xq_t, dq.view());
            gw.b_q.add_assign(&dq.sum_rows());
            let (dkp, dkc) = w.layout().gather(&dk);
            gw.w_kp.add_product(1.0, xkv_t, dkp.view());
            gw.w_uk.add_product(1.0, c.view().t(), dkc.view());
            gw.w_uv.add_product(1.0, c.view().t(), dv.view());
            gw.b_v.add_assign(&dv.sum_rows());
            let mut dc = dkc.matmul_t(&w.w_uk);
            dc.add_product(1.0, dv.view(), w.w_uv.view().t());
            gw.w_dkv.add_product(1.0, xkv_t, dc.view());
            let mut dx = dc.matmul_t(&w.w_dkv);
            dx.add_product(1.0, dkp.view(), w.w_kp.view().t());
            dx
        }
        _ => unreachable!("gradient buffer mirrors the model"),
    };
    (dx_q, dx_kv)
}

struct EncLayerTape {
    ln_attn: LnTape,
    attn: AttnTape,
    ln_ffn: LnTape,
    ffn: FfnTape,
}

struct DecLayerTape {
    ln_self: LnTape,
    self_attn: AttnTape,
    ln_cross: LnTape,
    cross: AttnTape,
    ln_ffn: LnTape,
    ffn: FfnTape,
}

/// Adds one example's `scale`-weighted gradient into `g`; returns its
/// summed loss and correct count.
fn example_backward(
    model: &Model,
    ex: &Example,
    scale: f64,
    skip_encoder: bool,
    g: &mut Model,
) -> Result<(f64, usize)> {
    let dec_tokens = ex.decoder_input();
    // Bounds checks and the forward shape contract live in the model.
    let spec = &model.spec;
    if ex.source.is_empty() || ex.source.len() > spec.max_source_len {
        return Err(MlaError::arg(format!("source length {} invalid", ex.source.len())));
    }
    if ex.target.is_empty() || ex.target.len() > spec.max_target_len {
        return Err(MlaError::arg(format!("target length {} invalid", ex.target.len())));
    }
    if let Some(t) = ex.source.iter().chain(&ex.target).find(|&&t| t as usize >= spec.vocab_size) {
        return Err(MlaError::arg(format!("token {t} outside vocabulary")));
    }

    // Encoder.
    let mut x = model.encoder_input(&ex.source);
    let mut enc_tapes = Vec::with_capacity(model.enc_layers.len());
    for l in &model.enc_layers {
        let (h, ln_attn) = ln_forward(&l.ln_attn, &x);
        let (a, attn) = attn_forward(&l.self_attn, &h, &h, false)?;
        x.add_assign(&a);
        let (h, ln_ffn) = ln_forward(&l.ln_ffn, &x);
        let (f, ffn) = ffn_forward(&l.ffn, &h);
        x.add_assign(&f);
        enc_tapes.push(EncLayerTape {
            ln_attn,
            attn,
            ln_ffn,
            ffn,
        });
    }
    let (enc, enc_ln_tape) = ln_forward(&model.enc_ln, &x);

    // Decoder.
    let mut x = model.decoder_input(&dec_tokens, 0);
    let mut dec_tapes = Vec::with_capacity(model.dec_layers.len());
    for l in &model.dec_layers {
        let (h, ln_self) = ln_forward(&l.ln_self, &x);
        let (a, self_attn) = attn_forward(&l.self_attn, &h, &h, true)?;
        x.add_assign(&a);
        let (h, ln_cross) = ln_forward(&l.ln_cross, &x);
        let (a, cross) = attn_forward(&l.cross_attn, &h, &enc, false)?;
        x.add_assign(&a);
        let (h, ln_ffn) = ln_forward(&l.ln_ffn, &x);
        let (f, ffn) = ffn_forward(&l.ffn, &h);
        x.add_assign(&f);
        dec_tapes.push(DecLayerTape {
            ln_self,
            self_attn,
            ln_cross,
            cross,
            ln_ffn,
            ffn,
        });
    }
    let (h_out, dec_ln_tape) = ln_forward(&model.dec_ln, &x);
    let logits = h_out.matmul_t(&model.dec_embed);
    let (loss, correct, dlogits) = cross_entropy(&logits, &ex.target, Some(scale));
    let dlogits = dlogits.expect("gradient requested");

    // Tied output projection.
    g.dec_embed.add_product(1.0, dlogits.view().t(), h_out.view());
    let dh = dlogits.matmul(&model.dec_embed);
    let mut dx = ln_backward(&model.dec_ln, &mut g.dec_ln, &dec_ln_tape, &dh);
    let mut d_enc = Matrix::zeros(enc.rows(), enc.cols());
    for ((l, gl), t) in model
        .dec_layers
        .iter()
        .zip(g.dec_layers.iter_mut())
        .zip(&dec_tapes)
        .rev()
    {
        let df = ffn_backward(&l.ffn, &mut gl.ffn, &t.ffn, &dx);
        dx.add_assign(&ln_backward(&l.ln_ffn, &mut gl.ln_ffn, &t.ln_ffn, &df));
        let (dq, dkv) = attn_backward(&l.cross_attn, &mut gl.cross_attn, &t.cross, &dx);
        d_enc.add_assign(&dkv);
        dx.add_assign(&ln_backward(&l.ln_cross, &mut gl.ln_cross, &t.ln_cross, &dq));
        let (dq, dkv) = attn_backward(&l.self_attn, &mut gl.self_attn, &t.self_attn, &dx);
        let dh = dq.add(&dkv);
        dx.add_assign(&ln_backward(&l.ln_self, &mut gl.ln_self, &t.ln_self, &dh));
    }
    for (i, &tok) in dec_tokens.iter().enumerate() {
        for ((e, p), d) in g
            .dec_embed
            .row_mut(tok as usize)
            .iter_mut()
            .zip(dx.row(i))
            .zip(0..)
        {
            *e += p;
            g.dec_pos[(i, d)] += p;
        }
    }

    if skip_encoder {
        return Ok((loss, correct));
    }
    let mut dx = ln_backward(&model.enc_ln, &mut g.enc_ln, &enc_ln_tape, &d_enc);
    for ((l, gl), t) in model
        .enc_layers
        .iter()
        .zip(g.enc_layers.iter_mut())
        .zip(&enc_tapes)
        .rev()
    {
        let df = ffn_backward(&l.ffn, &mut gl.ffn, &t.ffn, &dx);
        dx.add_assign(&ln_backward(&l.ln_ffn, &mut gl.ln_ffn, &t.ln_ffn, &df));
        let (dq, dkv) = attn_backward(&l.self_attn, &mut gl.self_attn, &t.attn, &dx);
        let dh = dq.add(&dkv);
        dx.add_assign(&ln_backward(&l.ln_attn, &mut gl.ln_attn, &t.ln_attn, &dh));
    }
    for (p, &tok) in ex.source.iter().enumerate() {
        for (e, d) in g.enc_embed.row_mut(tok as usize).iter_mut().zip(dx.row(p)) {
            *e += d;
        }
    }
    Ok((loss, correct))
}
