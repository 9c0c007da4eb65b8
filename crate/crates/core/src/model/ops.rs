//! Row-major kernels with hand-written backward passes. Rows are tokens.

use super::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b`, x: n×din, W: din×dout.
pub fn linear<T: Scalar>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    T::gemm(n, din, dout, T::ONE, x, din, 1, w, dout, 1, T::ONE, &mut y, dout, 1);
    y
}

/// Accumulates `gW += xᵀ·dy`, `gb += Σ dy` and, when given, `dx += dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    gw: &mut [T],
    gb: &mut [T],
) {
    T::gemm(din, n, dout, T::ONE, x, 1, din, dy, dout, 1, T::ONE, gw, dout, 1);
    for row in dy.chunks_exact(dout) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        T::gemm(n, dout, din, T::ONE, dy, dout, 1, w, 1, dout, T::ONE, dx, din, 1);
    }
}

pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = Vec::with_capacity(n);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let r = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `gg`, `gb`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dx: &mut [T],
    gg: &mut [T],
    gb: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for (i, row) in dy.chunks_exact(d).enumerate() {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for j in 0..d {
            gg[j] += row[j] * xh[j];
            gb[j] += row[j];
            dxhat[j] = row[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

pub fn relu<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `dy` where the ReLU output was zero.
pub fn relu_backward<T: Scalar>(out: &[T], dy: &mut [T]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if !(o > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// One attention block: query rows `q` attend over key rows `k`.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` sees keys `0..=i + offset`, where `offset = k_len − q_len`.
    pub causal: bool,
}

impl Segment {
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1 + self.k_len - self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention over packed segments.
/// Returns the concatenated head outputs and the attention probabilities.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], d: usize, heads: usize, segs: &[Segment]) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::ZERO; q.len()];
    let total: usize = segs.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
    let mut probs = Vec::with_capacity(total);
    let mut row = Vec::new();
    for s in segs {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..s.q_len {
                let qi = &q[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                let vis = s.visible(i);
                row.clear();
                let mut max = None;
                for j in 0..vis {
                    let kj = &k[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                    let mut dot = T::ZERO;
                    for t in 0..dh {
                        dot += qi[t] * kj[t];
                    }
                    let sc = dot * scale;
                    if max.map_or(true, |m| sc > m) {
                        max = Some(sc);
                    }
                    row.push(sc);
                }
                let max = max.unwrap_or(T::ZERO);
                let mut sum = T::ZERO;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let o = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = *p / sum;
                    let vj = &v[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                    for t in 0..dh {
                        o[t] += *p * vj[t];
                    }
                }
                probs.extend_from_slice(&row);
                probs.extend(std::iter::repeat(T::ZERO).take(s.k_len - vis));
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of [`attention`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    heads: usize,
    segs: &[Segment],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut off = 0;
    let mut ds = Vec::new();
    for s in segs {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..s.q_len {
                let p = &probs[off..off + s.k_len];
                off += s.k_len;
                let vis = s.visible(i);
                let qr = (s.q_start + i) * d + c0;
                let go = &dout[qr..qr + dh];
                ds.clear();
                let mut dot_pdp = T::ZERO;
                for j in 0..vis {
                    let vr = (s.k_start + j) * d + c0;
                    let mut dp = T::ZERO;
                    for t in 0..dh {
                        dp += go[t] * v[vr + t];
                        dv[vr + t] += p[j] * go[t];
                    }
                    dot_pdp += p[j] * dp;
                    ds.push(dp);
                }
                for j in 0..vis {
                    let g = p[j] * (ds[j] - dot_pdp) * scale;
                    let kr = (s.k_start + j) * d + c0;
                    for t in 0..dh {
                        dq[qr + t] += g * k[kr + t];
                        dk[kr + t] += g * q[qr + t];
                    }
                }
            }
        }
    }
}
