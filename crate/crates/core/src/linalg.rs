//! Small dense helpers over flat `f64` slices.
//!
//! Matrices are row-major `[rows, cols]`. Nothing here allocates unless the
//! signature returns a `Vec`; the hot training loops reuse buffers.

/// Large negative sentinel standing in for log(0). Using a finite value keeps
/// log-sum-exp free of NaN when both branches are impossible.
pub const LOG_ZERO: f64 = -1.0e30;

/// log(exp(a) + exp(b)) with max-shift, treating anything at or below
/// `LOG_ZERO / 2` as exactly zero probability.
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO / 2.0 {
        return LOG_ZERO;
    }
    if lo <= LOG_ZERO / 2.0 {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut m = LOG_ZERO;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m <= LOG_ZERO / 2.0 {
        return LOG_ZERO;
    }
    let mut s = 0.0;
    for &x in xs {
        if x > LOG_ZERO / 2.0 {
            s += (x - m).exp();
        }
    }
    m + s.ln()
}

/// In-place log-softmax over `xs`.
pub fn log_softmax_inplace(xs: &mut [f64]) {
    let z = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= z;
    }
}

/// Returns softmax probabilities of `xs`.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    log_softmax_inplace(&mut out);
    for v in out.iter_mut() {
        *v = v.exp();
    }
    out
}

/// y += W x, with W row-major [rows, cols], x len cols, y len rows.
pub fn matvec_add(y: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *yr += acc;
    }
}

/// y += W^T x, with W row-major [rows, cols], x len rows, y len cols.
pub fn matvec_t_add(y: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = y.len();
    debug_assert_eq!(w.len(), x.len() * cols);
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (yc, a) in y.iter_mut().zip(row) {
            *yc += xr * a;
        }
    }
}

/// W += a ⊗ b (outer product accumulate), W row-major [a.len(), b.len()].
pub fn outer_add(w: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    debug_assert_eq!(w.len(), a.len() * cols);
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut w[r * cols..(r + 1) * cols];
        for (wc, &bc) in row.iter_mut().zip(b) {
            *wc += ar * bc;
        }
    }
}

/// y += a * x
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Elementwise tanh into a new Vec.
pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
