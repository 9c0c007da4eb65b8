//! Training forward and backward passes over a packed batch.
//!
//! Sequences are concatenated without padding. The decoder keeps only the
//! positions whose input is not PAD; each keeps its original position index
//! so span reconstruction sees where the span sits in the sentence.

use rand::Rng as _;

use super::ops::{self, LnCache, Segment};
use super::params::{AttnIdx, FfnIdx, Index, LnIdx, ModelConfig, Params};
use super::scalar::Scalar;
use crate::corrupt::TrainingExample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::subword::Special;

/// Token rows of one batch, after packing.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub enc_tok: Vec<u32>,
    pub enc_pos: Vec<usize>,
    pub enc_segs: Vec<(usize, usize)>,
    pub dec_tok: Vec<u32>,
    pub dec_pos: Vec<usize>,
    pub dec_segs: Vec<(usize, usize)>,
    /// Decoder rows carrying loss, and their targets.
    pub loss_rows: Vec<usize>,
    pub targets: Vec<u32>,
}

impl Packed {
    pub fn new(cfg: &ModelConfig, batch: &[TrainingExample]) -> Result<Self> {
        let v = cfg.vocab_size;
        let check = |id: u32| -> Result<u32> {
            if (id as usize) < v {
                Ok(id)
            } else {
                Err(Error::IdOutOfRange { id, size: v })
            }
        };
        let mut p = Packed::default();
        for ex in batch {
            if ex.enc_ids.is_empty() || ex.enc_ids.len() > cfg.max_positions || ex.dec_in.len() > cfg.max_positions {
                return Err(Error::InvalidArgument(format!(
                    "sequence lengths {}/{} outside 1..={}",
                    ex.enc_ids.len(),
                    ex.dec_in.len(),
                    cfg.max_positions
                )));
            }
            if ex.dec_in.len() != ex.tgt.len() || ex.tgt.len() != ex.loss_mask.len() {
                return Err(Error::Shape {
                    expected: format!("dec_in/tgt/mask of equal length {}", ex.dec_in.len()),
                    found: format!("{}/{}", ex.tgt.len(), ex.loss_mask.len()),
                });
            }
            p.enc_segs.push((p.enc_tok.len(), ex.enc_ids.len()));
            for (i, &t) in ex.enc_ids.iter().enumerate() {
                p.enc_tok.push(check(t)?);
                p.enc_pos.push(i);
            }
            let start = p.dec_tok.len();
            for (i, &t) in ex.dec_in.iter().enumerate() {
                if t == Special::Pad.id() {
                    if ex.loss_mask[i] {
                        return Err(Error::InvalidArgument(format!("loss on padded decoder position {i}")));
                    }
                    continue;
                }
                if ex.loss_mask[i] {
                    p.loss_rows.push(p.dec_tok.len());
                    p.targets.push(check(ex.tgt[i])?);
                }
                p.dec_tok.push(check(t)?);
                p.dec_pos.push(i);
            }
            p.dec_segs.push((start, p.dec_tok.len() - start));
        }
        if p.loss_rows.is_empty() {
            return Err(Error::Empty("batch has no loss-masked positions".into()));
        }
        Ok(p)
    }

    fn self_segs(segs: &[(usize, usize)], causal: bool) -> Vec<Segment> {
        segs.iter()
            .map(|&(s, n)| Segment { q_start: s, q_len: n, k_start: s, k_len: n, causal })
            .collect()
    }

    fn cross_segs(&self) -> Vec<Segment> {
        self.dec_segs
            .iter()
            .zip(&self.enc_segs)
            .map(|(&(qs, qn), &(ks, kn))| Segment { q_start: qs, q_len: qn, k_start: ks, k_len: kn, causal: false })
            .collect()
    }
}

/// Read-only view of a parameter vector.
#[derive(Clone, Copy)]
pub struct Net<'a, T> {
    pub cfg: &'a ModelConfig,
    pub idx: &'a Index,
    pub p: &'a [T],
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn slice(&self, off: usize, len: usize) -> &'a [T] {
        &self.p[off..off + len]
    }

    fn d(&self) -> usize {
        self.cfg.d_model
    }

    pub fn embed(&self, toks: &[u32], pos: &[usize], pos_table: usize) -> Vec<T> {
        let d = self.d();
        let mut x = Vec::with_capacity(toks.len() * d);
        for (&t, &q) in toks.iter().zip(pos) {
            let e = self.slice(self.idx.embed + t as usize * d, d);
            let p = self.slice(pos_table + q * d, d);
            x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }
        x
    }

    pub fn ln(&self, x: &[T], i: LnIdx) -> (Vec<T>, LnCache<T>) {
        let d = self.d();
        ops::layer_norm(x, d, self.slice(i.g, d), self.slice(i.b, d))
    }

    pub fn lin(&self, x: &[T], w: usize, b: usize, din: usize, dout: usize) -> Vec<T> {
        ops::linear(x, x.len() / din, din, self.slice(w, din * dout), self.slice(b, dout), dout)
    }

    pub fn ffn(&self, h: &[T], i: FfnIdx) -> (Vec<T>, Vec<T>) {
        let (d, f) = (self.d(), self.cfg.d_ffn);
        let mut a = self.lin(h, i.w1, i.b1, d, f);
        ops::relu(&mut a);
        let out = self.lin(&a, i.w2, i.b2, f, d);
        (out, a)
    }

    pub fn output_logits(&self, z: &[T]) -> Vec<T> {
        let (d, v) = (self.d(), self.cfg.vocab_size);
        let n = z.len() / d;
        let mut logits = Vec::with_capacity(n * v);
        let bias = self.slice(self.idx.out_bias, v);
        for _ in 0..n {
            logits.extend_from_slice(bias);
        }
        T::gemm(n, d, v, T::ONE, z, d, 1, self.slice(self.idx.embed, v * d), 1, d, T::ONE, &mut logits, v, 1);
        logits
    }
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

fn attn_forward<T: Scalar>(net: &Net<T>, i: AttnIdx, hq: &[T], hkv: &[T], segs: &[Segment]) -> (Vec<T>, AttnCache<T>) {
    let d = net.d();
    let q = net.lin(hq, i.wq, i.bq, d, d);
    let k = net.lin(hkv, i.wk, i.bk, d, d);
    let v = net.lin(hkv, i.wv, i.bv, d, d);
    let (ctx, probs) = ops::attention(&q, &k, &v, d, net.cfg.heads, segs);
    let out = net.lin(&ctx, i.wo, i.bo, d, d);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Returns (d hq, d hkv).
fn attn_backward<T: Scalar>(
    net: &Net<T>,
    g: &mut [T],
    i: AttnIdx,
    c: &AttnCache<T>,
    hq: &[T],
    hkv: &[T],
    segs: &[Segment],
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let d = net.d();
    let (nq, nk) = (hq.len() / d, hkv.len() / d);
    let mut dctx = vec![T::ZERO; c.ctx.len()];
    lin_back(net, g, &c.ctx, nq, i.wo, i.bo, d, d, dout, Some(&mut dctx));
    let (mut dq, mut dk, mut dv) = (vec![T::ZERO; c.q.len()], vec![T::ZERO; c.k.len()], vec![T::ZERO; c.v.len()]);
    ops::attention_backward(&dctx, &c.q, &c.k, &c.v, &c.probs, d, net.cfg.heads, segs, &mut dq, &mut dk, &mut dv);
    let mut dhq = vec![T::ZERO; hq.len()];
    let mut dhkv = vec![T::ZERO; hkv.len()];
    lin_back(net, g, hq, nq, i.wq, i.bq, d, d, &dq, Some(&mut dhq));
    lin_back(net, g, hkv, nk, i.wk, i.bk, d, d, &dk, Some(&mut dhkv));
    lin_back(net, g, hkv, nk, i.wv, i.bv, d, d, &dv, Some(&mut dhkv));
    (dhq, dhkv)
}

#[allow(clippy::too_many_arguments)]
fn lin_back<T: Scalar>(
    net: &Net<T>,
    g: &mut [T],
    x: &[T],
    n: usize,
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
) {
    let (gw, gb) = two_mut(g, (w, din * dout), (b, dout));
    ops::linear_backward(x, n, din, net.slice(w, din * dout), dout, dy, dx, gw, gb);
}

/// Two disjoint mutable windows of the gradient vector.
fn two_mut<T>(g: &mut [T], a: (usize, usize), b: (usize, usize)) -> (&mut [T], &mut [T]) {
    if a.0 < b.0 {
        assert!(a.0 + a.1 <= b.0);
        let (lo, hi) = g.split_at_mut(b.0);
        (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
    } else {
        assert!(b.0 + b.1 <= a.0);
        let (lo, hi) = g.split_at_mut(a.0);
        (&mut hi[..a.1], &mut lo[b.0..b.0 + b.1])
    }
}

fn ln_back<T: Scalar>(net: &Net<T>, g: &mut [T], i: LnIdx, c: &LnCache<T>, dy: &[T], dx: &mut [T]) {
    let d = net.d();
    let (gg, gb) = two_mut(g, (i.g, d), (i.b, d));
    ops::layer_norm_backward(dy, c, d, net.slice(i.g, d), dx, gg, gb);
}

fn ffn_back<T: Scalar>(net: &Net<T>, g: &mut [T], i: FfnIdx, h: &[T], a: &[T], dout: &[T]) -> Vec<T> {
    let (d, f) = (net.d(), net.cfg.d_ffn);
    let n = h.len() / d;
    let mut da = vec![T::ZERO; a.len()];
    lin_back(net, g, a, n, i.w2, i.b2, f, d, dout, Some(&mut da));
    ops::relu_backward(a, &mut da);
    let mut dh = vec![T::ZERO; h.len()];
    lin_back(net, g, h, n, i.w1, i.b1, d, f, &da, Some(&mut dh));
    dh
}

/// Inverted dropout; `None` when inactive.
struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut Rng>,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        let rng = self.rng.as_deref_mut()?;
        if self.p <= 0.0 {
            return None;
        }
        let keep = T::from_f64(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < self.p { T::ZERO } else { keep }).collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

fn undrop<T: Scalar>(mask: &Option<Vec<T>>, dy: &[T]) -> Vec<T> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

struct EncLayerCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    a: Vec<T>,
    drop2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    lnc: LnCache<T>,
    hc: Vec<T>,
    cross: AttnCache<T>,
    dropc: Option<Vec<T>>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    a: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Everything the backward pass needs.
pub struct Forward<T> {
    pub packed: Packed,
    /// Softmax over the vocabulary for each loss row.
    pub probs: Vec<T>,
    /// Σ −log p(target) over loss rows.
    pub nll_sum: f64,
    /// Σ of the (possibly smoothed) training loss over loss rows.
    pub loss_sum: f64,
    enc_drop0: Option<Vec<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_lnf: LnCache<T>,
    enc_out: Vec<T>,
    dec_drop0: Option<Vec<T>>,
    dec: Vec<DecLayerCache<T>>,
    dec_lnf: LnCache<T>,
    z_loss: Vec<T>,
}

impl<T> Forward<T> {
    pub fn tokens(&self) -> usize {
        self.packed.targets.len()
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens() as f64
    }

    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens() as f64
    }
}

pub fn forward<T: Scalar>(net: &Net<T>, batch: &[TrainingExample], rng: Option<&mut Rng>) -> Result<Forward<T>> {
    let packed = Packed::new(net.cfg, batch)?;
    forward_packed(net, packed, rng)
}

pub fn forward_packed<T: Scalar>(net: &Net<T>, packed: Packed, rng: Option<&mut Rng>) -> Result<Forward<T>> {
    let cfg = net.cfg;
    let idx = net.idx;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut drop = Dropout { p: cfg.dropout, rng };

    let enc_segs = Packed::self_segs(&packed.enc_segs, false);
    let mut x = net.embed(&packed.enc_tok, &packed.enc_pos, idx.enc_pos);
    let enc_drop0 = drop.apply(&mut x);
    let mut enc = Vec::with_capacity(idx.enc.len());
    for l in &idx.enc {
        let (h1, ln1) = net.ln(&x, l.ln1);
        let (mut s, attn) = attn_forward(net, l.attn, &h1, &h1, &enc_segs);
        let drop1 = drop.apply(&mut s);
        add_into(&mut x, &s);
        let (h2, ln2) = net.ln(&x, l.ln2);
        let (mut f, a) = net.ffn(&h2, l.ffn);
        let drop2 = drop.apply(&mut f);
        add_into(&mut x, &f);
        enc.push(EncLayerCache { ln1, h1, attn, drop1, ln2, h2, a, drop2 });
    }
    let (enc_out, enc_lnf) = net.ln(&x, idx.enc_ln);

    let dec_segs = Packed::self_segs(&packed.dec_segs, true);
    let cross_segs = packed.cross_segs();
    let mut y = net.embed(&packed.dec_tok, &packed.dec_pos, idx.dec_pos);
    let dec_drop0 = drop.apply(&mut y);
    let mut dec = Vec::with_capacity(idx.dec.len());
    for l in &idx.dec {
        let (h1, ln1) = net.ln(&y, l.ln1);
        let (mut s, attn) = attn_forward(net, l.attn, &h1, &h1, &dec_segs);
        let drop1 = drop.apply(&mut s);
        add_into(&mut y, &s);
        let (hc, lnc) = net.ln(&y, l.ln_cross);
        let (mut c, cross) = attn_forward(net, l.cross, &hc, &enc_out, &cross_segs);
        let dropc = drop.apply(&mut c);
        add_into(&mut y, &c);
        let (h2, ln2) = net.ln(&y, l.ln2);
        let (mut f, a) = net.ffn(&h2, l.ffn);
        let drop2 = drop.apply(&mut f);
        add_into(&mut y, &f);
        dec.push(DecLayerCache { ln1, h1, attn, drop1, lnc, hc, cross, dropc, ln2, h2, a, drop2 });
    }
    let (z, dec_lnf) = net.ln(&y, idx.dec_ln);
    let mut z_loss = Vec::with_capacity(packed.loss_rows.len() * d);
    for &r in &packed.loss_rows {
        z_loss.extend_from_slice(&z[r * d..(r + 1) * d]);
    }
    let mut probs = net.output_logits(&z_loss);
    let eps = cfg.label_smoothing;
    let (mut nll_sum, mut loss_sum) = (0.0, 0.0);
    for (row, &t) in probs.chunks_exact_mut(v).zip(&packed.targets) {
        let mut max = row[0];
        let mut mean = T::ZERO;
        for &x in row.iter() {
            if x > max {
                max = x;
            }
            mean += x;
        }
        let mean = mean.to_f64() / v as f64;
        let target_logit = row[t as usize].to_f64();
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
        let lse = max.to_f64() + sum.to_f64().ln();
        let nll = lse - target_logit;
        nll_sum += nll;
        loss_sum += if eps > 0.0 { (1.0 - eps) * nll + eps * (lse - mean) } else { nll };
    }
    if !loss_sum.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(Forward {
        packed,
        probs,
        nll_sum,
        loss_sum,
        enc_drop0,
        enc,
        enc_lnf,
        enc_out,
        dec_drop0,
        dec,
        dec_lnf,
        z_loss,
    })
}

/// Gradient of `scale · loss_sum` with respect to every parameter.
pub fn backward<T: Scalar>(net: &Net<T>, fwd: &Forward<T>, scale: T) -> Params<T> {
    let cfg = net.cfg;
    let idx = net.idx;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut g = vec![T::ZERO; net.p.len()];
    let pk = &fwd.packed;

    // output layer: d logits = scale · (p − q)
    let eps = T::from_f64(cfg.label_smoothing);
    let uniform = eps / T::from_f64(v as f64);
    let mut dlogits = fwd.probs.clone();
    for (row, &t) in dlogits.chunks_exact_mut(v).zip(&pk.targets) {
        for x in row.iter_mut() {
            *x = (*x - uniform) * scale;
        }
        row[t as usize] -= (T::ONE - eps) * scale;
    }
    let nl = pk.targets.len();
    let mut dz_loss = vec![T::ZERO; nl * d];
    T::gemm(nl, v, d, T::ONE, &dlogits, v, 1, net.slice(idx.embed, v * d), d, 1, T::ZERO, &mut dz_loss, d, 1);
    T::gemm(v, nl, d, T::ONE, &dlogits, 1, v, &fwd.z_loss, d, 1, T::ONE, &mut g[idx.embed..idx.embed + v * d], d, 1);
    for row in dlogits.chunks_exact(v) {
        add_into(&mut g[idx.out_bias..idx.out_bias + v], row);
    }
    let n_dec = pk.dec_tok.len();
    let mut dz = vec![T::ZERO; n_dec * d];
    for (i, &r) in pk.loss_rows.iter().enumerate() {
        dz[r * d..(r + 1) * d].copy_from_slice(&dz_loss[i * d..(i + 1) * d]);
    }

    // decoder
    let mut dy = vec![T::ZERO; n_dec * d];
    ln_back(net, &mut g, idx.dec_ln, &fwd.dec_lnf, &dz, &mut dy);
    let mut d_enc_out = vec![T::ZERO; fwd.enc_out.len()];
    let dec_segs = Packed::self_segs(&pk.dec_segs, true);
    let cross_segs = pk.cross_segs();
    for (l, c) in idx.dec.iter().zip(&fwd.dec).rev() {
        let df = undrop(&c.drop2, &dy);
        let dh2 = ffn_back(net, &mut g, l.ffn, &c.h2, &c.a, &df);
        ln_back(net, &mut g, l.ln2, &c.ln2, &dh2, &mut dy);
        let dc = undrop(&c.dropc, &dy);
        let (dhc, dmem) = attn_backward(net, &mut g, l.cross, &c.cross, &c.hc, &fwd.enc_out, &cross_segs, &dc);
        add_into(&mut d_enc_out, &dmem);
        ln_back(net, &mut g, l.ln_cross, &c.lnc, &dhc, &mut dy);
        let ds = undrop(&c.drop1, &dy);
        let (dq, dkv) = attn_backward(net, &mut g, l.attn, &c.attn, &c.h1, &c.h1, &dec_segs, &ds);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        ln_back(net, &mut g, l.ln1, &c.ln1, &dh1, &mut dy);
    }
    let dy0 = undrop(&fwd.dec_drop0, &dy);
    scatter_embed(&mut g, idx.embed, idx.dec_pos, d, &pk.dec_tok, &pk.dec_pos, &dy0);

    // encoder
    let mut dx = vec![T::ZERO; pk.enc_tok.len() * d];
    ln_back(net, &mut g, idx.enc_ln, &fwd.enc_lnf, &d_enc_out, &mut dx);
    let enc_segs = Packed::self_segs(&pk.enc_segs, false);
    for (l, c) in idx.enc.iter().zip(&fwd.enc).rev() {
        let df = undrop(&c.drop2, &dx);
        let dh2 = ffn_back(net, &mut g, l.ffn, &c.h2, &c.a, &df);
        ln_back(net, &mut g, l.ln2, &c.ln2, &dh2, &mut dx);
        let ds = undrop(&c.drop1, &dx);
        let (dq, dkv) = attn_backward(net, &mut g, l.attn, &c.attn, &c.h1, &c.h1, &enc_segs, &ds);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        ln_back(net, &mut g, l.ln1, &c.ln1, &dh1, &mut dx);
    }
    let dx0 = undrop(&fwd.enc_drop0, &dx);
    scatter_embed(&mut g, idx.embed, idx.enc_pos, d, &pk.enc_tok, &pk.enc_pos, &dx0);
    Params { data: g }
}

fn scatter_embed<T: Scalar>(g: &mut [T], embed: usize, pos_table: usize, d: usize, toks: &[u32], pos: &[usize], dx: &[T]) {
    for (i, (&t, &p)) in toks.iter().zip(pos).enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        add_into(&mut g[embed + t as usize * d..embed + (t as usize + 1) * d], row);
        add_into(&mut g[pos_table + p * d..pos_table + (p + 1) * d], row);
    }
}
