//! Small neural-net toolkit: flat parameter vectors with named segments,
//! deterministic initialization, Adam, and manually differentiated layer
//! primitives (linear, tanh recurrent cell, windowed self-attention).
//!
//! Everything is f64 and loop-based; model code owns the sequence loops and
//! caches while this module supplies the per-step forward/backward math.

use crate::linalg::{matvec_add, matvec_t_add, outer_add, softmax};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// How a segment is filled at init time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (rows + cols)).
    Glorot,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, non-overlapping named views into one flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    segs: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a rows x cols matrix segment; returns its index.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        let seg = Segment {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
            init,
        };
        self.total += seg.len();
        self.segs.push(seg);
        self.segs.len() - 1
    }

    /// Append a zero-initialized length-n vector segment; returns its index.
    pub fn push_vec(&mut self, name: impl Into<String>, n: usize) -> usize {
        self.push(name, n, 1, Init::Zero)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segs
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.segs.iter().position(|s| s.name == name)
    }

    pub fn slice<'a>(&self, data: &'a [f64], idx: usize) -> &'a [f64] {
        let s = &self.segs[idx];
        &data[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], idx: usize) -> &'a mut [f64] {
        let s = &self.segs[idx];
        &mut data[s.offset..s.offset + s.len()]
    }

    /// Mutable views of N distinct segments at once.
    pub fn disjoint_mut<'a, const N: usize>(
        &self,
        data: &'a mut [f64],
        ids: [usize; N],
    ) -> [&'a mut [f64]; N] {
        let mut order: Vec<usize> = (0..N).collect();
        order.sort_by_key(|&i| self.segs[ids[i]].offset);
        for w in order.windows(2) {
            assert_ne!(ids[w[0]], ids[w[1]], "duplicate segment id");
        }
        let mut out: [Option<&'a mut [f64]>; N] = [(); N].map(|_| None);
        let mut rest = data;
        let mut base = 0usize;
        for &oi in &order {
            let s = &self.segs[ids[oi]];
            let (_, tail) = rest.split_at_mut(s.offset - base);
            let (seg, tail) = tail.split_at_mut(s.len());
            out[oi] = Some(seg);
            rest = tail;
            base = s.offset + s.len();
        }
        out.map(|o| o.expect("filled above"))
    }

    /// Split a flat vector into one mutable slice per segment, layout order.
    pub fn split_all<'a>(&self, mut data: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        let mut out = Vec::with_capacity(self.segs.len());
        let mut consumed = 0usize;
        for s in &self.segs {
            debug_assert_eq!(s.offset, consumed);
            let (head, tail) = data.split_at_mut(s.len());
            out.push(head);
            data = tail;
            consumed += s.len();
        }
        debug_assert_eq!(consumed, self.total);
        out
    }

    /// Deterministic initial parameter vector for this layout.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = vec![0.0; self.total];
        for s in &self.segs {
            if s.init == Init::Glorot {
                let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
                for v in &mut data[s.offset..s.offset + s.len()] {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        data
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    /// One update; `grad` is rescaled in place when clipping engages.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let norm = crate::linalg::norm2(grad);
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let scale = self.clip_norm / norm;
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// y = W x + b.
pub fn linear(y: &mut [f64], w: &[f64], b: Option<&[f64]>, x: &[f64]) {
    if let Some(b) = b {
        y.copy_from_slice(b);
    } else {
        y.iter_mut().for_each(|v| *v = 0.0);
    }
    matvec_add(y, w, x);
}

/// Backprop through y = W x + b given dL/dy.
pub fn linear_backward(
    dy: &[f64],
    w: &[f64],
    x: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    outer_add(dw, dy, x);
    if let Some(db) = db {
        for (d, g) in db.iter_mut().zip(dy) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        matvec_t_add(dx, w, dy);
    }
}

/// h = tanh(Wx x + Wh h_prev + b).
pub fn rnn_cell(h: &mut [f64], wx: &[f64], wh: &[f64], b: &[f64], x: &[f64], h_prev: &[f64]) {
    h.copy_from_slice(b);
    matvec_add(h, wx, x);
    matvec_add(h, wh, h_prev);
    for v in h.iter_mut() {
        *v = v.tanh();
    }
}

/// Backprop through the tanh recurrent cell. `dh` is dL/dh (post-tanh);
/// gradients accumulate into the dw/db slices and into dx/dh_prev.
#[allow(clippy::too_many_arguments)]
pub fn rnn_cell_backward(
    dh: &[f64],
    h: &[f64],
    wx: &[f64],
    wh: &[f64],
    x: &[f64],
    h_prev: &[f64],
    dwx: &mut [f64],
    dwh: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
    dh_prev: &mut [f64],
) {
    let dpre: Vec<f64> = dh
        .iter()
        .zip(h)
        .map(|(g, hv)| g * (1.0 - hv * hv))
        .collect();
    outer_add(dwx, &dpre, x);
    outer_add(dwh, &dpre, h_prev);
    for (d, g) in db.iter_mut().zip(&dpre) {
        *d += g;
    }
    if let Some(dx) = dx {
        matvec_t_add(dx, wx, &dpre);
    }
    matvec_t_add(dh_prev, wh, &dpre);
}

/// Single-head windowed self-attention over a sequence, with a residual
/// connection and tanh output: for each position t,
///   e(t,s) = q_t . k_s / sqrt(d) + pos[s - t + left]   for s in [t-left, t+right]
///   ctx_t  = sum_s softmax_s(e)(s) v_s
///   out_t  = tanh(Wo ctx_t + bo + x_t)
/// Queries/keys/values are bias-free projections of x.
pub struct AttnParams<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
    /// Relative-position bias, length left + right + 1.
    pub pos: &'a [f64],
    pub dim: usize,
    pub left: usize,
    pub right: usize,
}

pub struct AttnCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per t: softmax weights over its window, parallel to window starts.
    pub weights: Vec<Vec<f64>>,
    pub win_start: Vec<usize>,
    pub ctx: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn attention_forward(p: &AttnParams, xs: &[f64], t_len: usize) -> AttnCache {
    let d = p.dim;
    assert_eq!(xs.len(), t_len * d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut q = vec![0.0; t_len * d];
    let mut k = vec![0.0; t_len * d];
    let mut v = vec![0.0; t_len * d];
    for t in 0..t_len {
        let x = &xs[t * d..(t + 1) * d];
        matvec_add(&mut q[t * d..(t + 1) * d], p.wq, x);
        matvec_add(&mut k[t * d..(t + 1) * d], p.wk, x);
        matvec_add(&mut v[t * d..(t + 1) * d], p.wv, x);
    }
    let mut weights = Vec::with_capacity(t_len);
    let mut win_start = Vec::with_capacity(t_len);
    let mut ctx = vec![0.0; t_len * d];
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let lo = t.saturating_sub(p.left);
        let hi = (t + p.right).min(t_len - 1);
        let qs = &q[t * d..(t + 1) * d];
        let mut scores = Vec::with_capacity(hi - lo + 1);
        for s in lo..=hi {
            let ks = &k[s * d..(s + 1) * d];
            let dot: f64 = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
            scores.push(dot * scale + p.pos[s + p.left - t]);
        }
        let w = softmax(&scores);
        let c = &mut ctx[t * d..(t + 1) * d];
        for (wi, s) in w.iter().zip(lo..=hi) {
            for (ci, vi) in c.iter_mut().zip(&v[s * d..(s + 1) * d]) {
                *ci += wi * vi;
            }
        }
        let o = &mut out[t * d..(t + 1) * d];
        o.copy_from_slice(p.bo);
        matvec_add(o, p.wo, c);
        for (ov, xv) in o.iter_mut().zip(&xs[t * d..(t + 1) * d]) {
            *ov = (*ov + xv).tanh();
        }
        weights.push(w);
        win_start.push(lo);
    }
    AttnCache {
        q,
        k,
        v,
        weights,
        win_start,
        ctx,
        out,
    }
}

pub struct AttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bo: &'a mut [f64],
    pub pos: &'a mut [f64],
}

/// Backprop through `attention_forward`; returns dL/dx. `d_out` is dL/dout.
pub fn attention_backward(
    p: &AttnParams,
    xs: &[f64],
    cache: &AttnCache,
    d_out: &[f64],
    g: &mut AttnGrads,
) -> Vec<f64> {
    let d = p.dim;
    let t_len = cache.weights.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = vec![0.0; t_len * d];
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dctx = vec![0.0; d];
    for t in 0..t_len {
        let out = &cache.out[t * d..(t + 1) * d];
        // tanh + residual
        let dpre: Vec<f64> = d_out[t * d..(t + 1) * d]
            .iter()
            .zip(out)
            .map(|(gv, ov)| gv * (1.0 - ov * ov))
            .collect();
        for (a, b) in dx[t * d..(t + 1) * d].iter_mut().zip(&dpre) {
            *a += b;
        }
        for (a, b) in g.bo.iter_mut().zip(&dpre) {
            *a += b;
        }
        let ctx = &cache.ctx[t * d..(t + 1) * d];
        outer_add(g.wo, &dpre, ctx);
        dctx.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(&mut dctx, p.wo, &dpre);

        let w = &cache.weights[t];
        let lo = cache.win_start[t];
        // ctx = sum_s w_s v_s
        let mut da = vec![0.0; w.len()];
        for (i, s) in (lo..lo + w.len()).enumerate() {
            let vs = &cache.v[s * d..(s + 1) * d];
            da[i] = dctx.iter().zip(vs).map(|(a, b)| a * b).sum();
            for (dvj, dcj) in dv[s * d..(s + 1) * d].iter_mut().zip(&dctx) {
                *dvj += w[i] * dcj;
            }
        }
        // softmax jacobian
        let dot: f64 = w.iter().zip(&da).map(|(a, b)| a * b).sum();
        let qs = &cache.q[t * d..(t + 1) * d];
        for (i, s) in (lo..lo + w.len()).enumerate() {
            let de = w[i] * (da[i] - dot);
            g.pos[s + p.left - t] += de;
            let ks = &cache.k[s * d..(s + 1) * d];
            for j in 0..d {
                dq[t * d + j] += de * ks[j] * scale;
                dk[s * d + j] += de * qs[j] * scale;
            }
        }
    }
    for t in 0..t_len {
        let x = &xs[t * d..(t + 1) * d];
        outer_add(g.wq, &dq[t * d..(t + 1) * d], x);
        outer_add(g.wk, &dk[t * d..(t + 1) * d], x);
        outer_add(g.wv, &dv[t * d..(t + 1) * d], x);
        let dxt = &mut dx[t * d..(t + 1) * d];
        matvec_t_add(dxt, p.wq, &dq[t * d..(t + 1) * d]);
        matvec_t_add(dxt, p.wk, &dk[t * d..(t + 1) * d]);
        matvec_t_add(dxt, p.wv, &dv[t * d..(t + 1) * d]);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn layout_offsets_and_init() {
        let mut l = ParamLayout::new();
        let a = l.push("a", 3, 4, Init::Glorot);
        let b = l.push_vec("b", 5);
        assert_eq!(l.total(), 17);
        assert_eq!(l.index("b"), Some(b));
        let p = l.init(9);
        let q = l.init(9);
        assert_eq!(p, q);
        let r = l.init(10);
        assert_ne!(p, r);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(l.slice(&p, a).iter().all(|v| v.abs() < bound));
        assert!(l.slice(&p, b).iter().all(|&v| v == 0.0));
        let mut data = p.clone();
        let parts = l.split_all(&mut data);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].len(), 12);
        assert_eq!(parts[1].len(), 5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = vec![5.0, -3.0, 2.0];
        let mut opt = Adam::new(3, 0.1);
        for _ in 0..500 {
            let mut grad: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            opt.step(&mut params, &mut grad);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "{params:?}");
    }

    #[test]
    fn adam_clips_global_norm() {
        let mut opt = Adam::new(2, 0.0);
        let mut params = vec![0.0, 0.0];
        let mut grad = vec![3.0, 4.0];
        opt.step(&mut params, &mut grad);
        assert!((crate::linalg::norm2(&grad) - 1.0).abs() < 1e-12);
    }

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = StdRng::seed_from_u64(1);
        let (out, inp) = (3, 4);
        let w = rand_vec(&mut rng, out * inp);
        let b = rand_vec(&mut rng, out);
        let x = rand_vec(&mut rng, inp);
        let dy = rand_vec(&mut rng, out);
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            let mut y = vec![0.0; out];
            linear(&mut y, w, Some(b), x);
            y.iter().zip(&dy).map(|(a, g)| a * g).sum()
        };
        let mut dw = vec![0.0; out * inp];
        let mut db = vec![0.0; out];
        let mut dx = vec![0.0; inp];
        linear_backward(&dy, &w, &x, &mut dw, Some(&mut db), Some(&mut dx));
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rnn_cell_gradcheck() {
        let mut rng = StdRng::seed_from_u64(2);
        let (d, inp) = (3, 4);
        let wx = rand_vec(&mut rng, d * inp);
        let wh = rand_vec(&mut rng, d * d);
        let b = rand_vec(&mut rng, d);
        let x = rand_vec(&mut rng, inp);
        let hp = rand_vec(&mut rng, d);
        let dh = rand_vec(&mut rng, d);
        let loss = |wx: &[f64], wh: &[f64], b: &[f64], x: &[f64], hp: &[f64]| -> f64 {
            let mut h = vec![0.0; d];
            rnn_cell(&mut h, wx, wh, b, x, hp);
            h.iter().zip(&dh).map(|(a, g)| a * g).sum()
        };
        let mut h = vec![0.0; d];
        rnn_cell(&mut h, &wx, &wh, &b, &x, &hp);
        let mut dwx = vec![0.0; d * inp];
        let mut dwh = vec![0.0; d * d];
        let mut db = vec![0.0; d];
        let mut dx = vec![0.0; inp];
        let mut dhp = vec![0.0; d];
        rnn_cell_backward(
            &dh,
            &h,
            &wx,
            &wh,
            &x,
            &hp,
            &mut dwx,
            &mut dwh,
            &mut db,
            Some(&mut dx),
            &mut dhp,
        );
        let h_step = 1e-6;
        for i in 0..wx.len() {
            let mut p = wx.clone();
            p[i] += h_step;
            let mut m = wx.clone();
            m[i] -= h_step;
            let fd = (loss(&p, &wh, &b, &x, &hp) - loss(&m, &wh, &b, &x, &hp)) / (2.0 * h_step);
            assert!((fd - dwx[i]).abs() < 1e-6);
        }
        for i in 0..hp.len() {
            let mut p = hp.clone();
            p[i] += h_step;
            let mut m = hp.clone();
            m[i] -= h_step;
            let fd = (loss(&wx, &wh, &b, &x, &p) - loss(&wx, &wh, &b, &x, &m)) / (2.0 * h_step);
            assert!((fd - dhp[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = StdRng::seed_from_u64(3);
        let (d, t_len, left, right) = (3usize, 5usize, 2usize, 1usize);
        let wq = rand_vec(&mut rng, d * d);
        let wk = rand_vec(&mut rng, d * d);
        let wv = rand_vec(&mut rng, d * d);
        let wo = rand_vec(&mut rng, d * d);
        let bo = rand_vec(&mut rng, d);
        let pos = rand_vec(&mut rng, left + right + 1);
        let xs = rand_vec(&mut rng, t_len * d);
        let dout = rand_vec(&mut rng, t_len * d);
        let loss = |wq: &[f64], pos: &[f64], xs: &[f64]| -> f64 {
            let p = AttnParams {
                wq,
                wk: &wk,
                wv: &wv,
                wo: &wo,
                bo: &bo,
                pos,
                dim: d,
                left,
                right,
            };
            let c = attention_forward(&p, xs, t_len);
            c.out.iter().zip(&dout).map(|(a, g)| a * g).sum()
        };
        let p = AttnParams {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
            bo: &bo,
            pos: &pos,
            dim: d,
            left,
            right,
        };
        let cache = attention_forward(&p, &xs, t_len);
        let mut gwq = vec![0.0; d * d];
        let mut gwk = vec![0.0; d * d];
        let mut gwv = vec![0.0; d * d];
        let mut gwo = vec![0.0; d * d];
        let mut gbo = vec![0.0; d];
        let mut gpos = vec![0.0; pos.len()];
        let mut g = AttnGrads {
            wq: &mut gwq,
            wk: &mut gwk,
            wv: &mut gwv,
            wo: &mut gwo,
            bo: &mut gbo,
            pos: &mut gpos,
        };
        let dx = attention_backward(&p, &xs, &cache, &dout, &mut g);
        let h = 1e-6;
        for i in 0..wq.len() {
            let mut pl = wq.clone();
            pl[i] += h;
            let mut mi = wq.clone();
            mi[i] -= h;
            let fd = (loss(&pl, &pos, &xs) - loss(&mi, &pos, &xs)) / (2.0 * h);
            assert!((fd - gwq[i]).abs() < 1e-5, "wq[{i}] fd {fd} vs {}", gwq[i]);
        }
        for i in 0..pos.len() {
            let mut pl = pos.clone();
            pl[i] += h;
            let mut mi = pos.clone();
            mi[i] -= h;
            let fd = (loss(&wq, &pl, &xs) - loss(&wq, &mi, &xs)) / (2.0 * h);
            assert!((fd - gpos[i]).abs() < 1e-5);
        }
        for i in 0..xs.len() {
            let mut pl = xs.clone();
            pl[i] += h;
            let mut mi = xs.clone();
            mi[i] -= h;
            let fd = (loss(&wq, &pos, &pl) - loss(&wq, &pos, &mi)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-5, "x[{i}] fd {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn attention_streaming_window_is_causal() {
        let mut rng = StdRng::seed_from_u64(4);
        let d = 3;
        let wq = rand_vec(&mut rng, d * d);
        let wk = rand_vec(&mut rng, d * d);
        let wv = rand_vec(&mut rng, d * d);
        let wo = rand_vec(&mut rng, d * d);
        let bo = rand_vec(&mut rng, d);
        let pos = rand_vec(&mut rng, 3);
        let p = AttnParams {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
            bo: &bo,
            pos: &pos,
            dim: d,
            left: 2,
            right: 0,
        };
        let xs = rand_vec(&mut rng, 6 * d);
        let full = attention_forward(&p, &xs, 6);
        // with right = 0, out[..4] must not change when the tail changes
        let mut xs2 = xs.clone();
        for v in &mut xs2[4 * d..] {
            *v += 1.0;
        }
        let changed = attention_forward(&p, &xs2, 6);
        for i in 0..4 * d {
            assert!((full.out[i] - changed.out[i]).abs() < 1e-12);
        }
    }
}
