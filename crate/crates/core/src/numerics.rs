//! Numerically stable scalar kernels shared by the tape, the losses, and
//! evaluation. Raw logits are never exponentiated directly: softmax goes
//! through a max-shifted log-sum-exp and sigmoid branches on the sign.

/// Logistic function, stable for any finite input.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(row))) computed with the max shifted out.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
    m + s.ln()
}

/// Writes softmax(row) into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    debug_assert_eq!(row.len(), out.len());
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Binary cross-entropy of logit `z` against target `t` in [0,1]:
/// max(z,0) - z*t + ln(1+exp(-|z|)). Never forms exp(z) for large z.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
