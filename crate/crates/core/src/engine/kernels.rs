use alloc::vec;

use super::{Precision, Reduction, SoftmaxStyle, SumOrder};
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;

/// `out = x · w` for a row vector `x` of length k and a row-major k×m
/// matrix `w`. Each output element equals `red.sum` over the k products, so
/// a row's result does not depend on which other rows share the batch.
pub fn vecmat(x: &[f64], w: &[f64], m: usize, red: Reduction, out: &mut [f64]) {
    let k = x.len();
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), m);
    let p = red.precision;
    match (p, red.order) {
        (Precision::F64, SumOrder::LeftToRight) => {
            out.fill(0.0);
            for (xv, row) in x.iter().zip(w.chunks_exact(m)) {
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += xv * wv;
                }
            }
        }
        (_, SumOrder::LeftToRight) => {
            out.fill(0.0);
            for (xv, row) in x.iter().zip(w.chunks_exact(m)) {
                for (o, wv) in out.iter_mut().zip(row) {
                    *o = p.round(*o + p.round(xv * wv));
                }
            }
        }
        (_, SumOrder::Blocked(b)) => {
            let b = b.max(1);
            out.fill(0.0);
            let mut partial = vec![0.0; m];
            for start in (0..k).step_by(b) {
                partial.fill(0.0);
                for kk in start..(start + b).min(k) {
                    let xv = x[kk];
                    for (s, wv) in partial.iter_mut().zip(&w[kk * m..(kk + 1) * m]) {
                        *s = p.round(*s + p.round(xv * wv));
                    }
                }
                for (o, s) in out.iter_mut().zip(&partial) {
                    *o = p.round(*o + s);
                }
            }
        }
        (_, SumOrder::Pairwise) => {
            let mut col = vec![0.0; k];
            for (j, o) in out.iter_mut().enumerate() {
                for (kk, c) in col.iter_mut().enumerate() {
                    *c = x[kk] * w[kk * m + j];
                }
                *o = red.sum(&col);
            }
        }
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

/// Root-mean-square normalization of one row; returns `1/rms`.
pub fn rmsnorm_row(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / libm::sqrt(ss / x.len() as f64 + RMS_EPS);
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

fn shift(logits: &[f64], style: SoftmaxStyle) -> f64 {
    match style {
        SoftmaxStyle::MaxSubtracted => logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SoftmaxStyle::Unshifted => 0.0,
    }
}

pub fn softmax_row(logits: &[f64], style: SoftmaxStyle, out: &mut [f64]) {
    let m = shift(logits, style);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = libm::exp(l - m);
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn log_softmax_row(logits: &[f64], style: SoftmaxStyle, out: &mut [f64]) {
    let m = shift(logits, style);
    let mut z = 0.0;
    for &l in logits {
        z += libm::exp(l - m);
    }
    let lse = m + libm::log(z);
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Softmax restricted to the selected positions; unselected outputs are 0.
/// With `MaxSubtracted` the shift is the max over selected logits.
pub fn masked_softmax_row(
    logits: &[f64],
    mask: &[bool],
    style: SoftmaxStyle,
    out: &mut [f64],
) -> Result<()> {
    if logits.len() != mask.len() || out.len() != mask.len() {
        return Err(crate::error::shape_err(
            "masked_softmax",
            alloc::format!("logits {} mask {} out {}", logits.len(), mask.len(), out.len()),
        ));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptySelection);
    }
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite("masked_softmax logits"));
    }
    let m = match style {
        SoftmaxStyle::MaxSubtracted => logits
            .iter()
            .zip(mask)
            .filter(|(_, &s)| s)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max),
        SoftmaxStyle::Unshifted => 0.0,
    };
    let mut z = 0.0;
    for ((o, &l), &s) in out.iter_mut().zip(logits).zip(mask) {
        *o = if s { libm::exp(l - m) } else { 0.0 };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

/// Causal attention for the query at row `t`: `keys`/`values` hold rows
/// `0..=t`, each of width `d = q.len()`. Writes the attended row to `out` and
/// the per-head probabilities (`heads × (t+1)`) to `probs`.
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    heads: usize,
    style: SoftmaxStyle,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d = q.len();
    let hd = d / heads;
    let n = keys.len() / d;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let mut acc = 0.0;
            for (a, b) in qh.iter().zip(kh) {
                acc += a * b;
            }
            *s = acc * scale;
        }
        let ph = &mut probs[h * n..(h + 1) * n];
        softmax_row(&scores, style, ph);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.fill(0.0);
        for (j, &p) in ph.iter().enumerate() {
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}
