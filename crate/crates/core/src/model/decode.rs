//! Inference: encoder memory, an incremental decoder with per-stream
//! key/value caches, greedy and beam search.

use super::ops::{self, Segment};
use super::net::Net;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::subword::Special;

/// Length penalty exponent for beam search.
pub const LENGTH_ALPHA: f64 = 0.6;

/// Encoded sources plus the cross-attention keys and values of every layer.
pub struct Memory<T> {
    segs: Vec<(usize, usize)>,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

pub fn encode<T: Scalar>(net: &Net<T>, srcs: &[&[u32]]) -> Result<Memory<T>> {
    let cfg = net.cfg;
    let d = cfg.d_model;
    let mut toks = Vec::new();
    let mut pos = Vec::new();
    let mut segs = Vec::new();
    for s in srcs {
        if s.is_empty() || s.len() > cfg.max_positions {
            return Err(Error::InvalidArgument(format!("source length {} outside 1..={}", s.len(), cfg.max_positions)));
        }
        if let Some(&id) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::IdOutOfRange { id, size: cfg.vocab_size });
        }
        segs.push((toks.len(), s.len()));
        toks.extend_from_slice(s);
        pos.extend(0..s.len());
    }
    let attn_segs: Vec<Segment> = segs
        .iter()
        .map(|&(s, n)| Segment { q_start: s, q_len: n, k_start: s, k_len: n, causal: false })
        .collect();
    let mut x = net.embed(&toks, &pos, net.idx.enc_pos);
    for l in &net.idx.enc {
        let (h, _) = net.ln(&x, l.ln1);
        let q = net.lin(&h, l.attn.wq, l.attn.bq, d, d);
        let k = net.lin(&h, l.attn.wk, l.attn.bk, d, d);
        let v = net.lin(&h, l.attn.wv, l.attn.bv, d, d);
        let (ctx, _) = ops::attention(&q, &k, &v, d, cfg.heads, &attn_segs);
        add(&mut x, &net.lin(&ctx, l.attn.wo, l.attn.bo, d, d));
        let (h2, _) = net.ln(&x, l.ln2);
        add(&mut x, &net.ffn(&h2, l.ffn).0);
    }
    let (mem, _) = net.ln(&x, net.idx.enc_ln);
    let (cross_k, cross_v) = net
        .idx
        .dec
        .iter()
        .map(|l| (net.lin(&mem, l.cross.wk, l.cross.bk, d, d), net.lin(&mem, l.cross.wv, l.cross.bv, d, d)))
        .unzip();
    Ok(Memory { segs, cross_k, cross_v })
}

fn add<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// One hypothesis being decoded: its source and self-attention cache.
#[derive(Clone)]
pub struct Stream<T> {
    pub src: usize,
    pub len: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Stream<T> {
    pub fn new(net: &Net<T>, src: usize) -> Self {
        let n = net.idx.dec.len();
        Self { src, len: 0, k: vec![Vec::new(); n], v: vec![Vec::new(); n] }
    }
}

/// Feeds one token to each stream and returns the next-token logits (rows).
pub fn step<T: Scalar>(net: &Net<T>, mem: &Memory<T>, streams: &mut [Stream<T>], tokens: &[u32]) -> Result<Vec<T>> {
    let cfg = net.cfg;
    let d = cfg.d_model;
    let pos: Vec<usize> = streams.iter().map(|s| s.len).collect();
    if pos.iter().any(|&p| p >= cfg.max_positions) {
        return Err(Error::InvalidArgument(format!("decoder position beyond {}", cfg.max_positions)));
    }
    let mut y = net.embed(tokens, &pos, net.idx.dec_pos);
    for (li, l) in net.idx.dec.iter().enumerate() {
        let (h, _) = net.ln(&y, l.ln1);
        let q = net.lin(&h, l.attn.wq, l.attn.bq, d, d);
        let k = net.lin(&h, l.attn.wk, l.attn.bk, d, d);
        let v = net.lin(&h, l.attn.wv, l.attn.bv, d, d);
        let mut ctx = Vec::with_capacity(y.len());
        for (i, s) in streams.iter_mut().enumerate() {
            s.k[li].extend_from_slice(&k[i * d..(i + 1) * d]);
            s.v[li].extend_from_slice(&v[i * d..(i + 1) * d]);
            let n = s.k[li].len() / d;
            let seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: n, causal: false }];
            ctx.extend(ops::attention(&q[i * d..(i + 1) * d], &s.k[li], &s.v[li], d, cfg.heads, &seg).0);
        }
        add(&mut y, &net.lin(&ctx, l.attn.wo, l.attn.bo, d, d));
        let (hc, _) = net.ln(&y, l.ln_cross);
        let qc = net.lin(&hc, l.cross.wq, l.cross.bq, d, d);
        let mut ctx = Vec::with_capacity(y.len());
        for (i, s) in streams.iter().enumerate() {
            let (start, n) = mem.segs[s.src];
            let kk = &mem.cross_k[li][start * d..(start + n) * d];
            let vv = &mem.cross_v[li][start * d..(start + n) * d];
            let seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: n, causal: false }];
            ctx.extend(ops::attention(&qc[i * d..(i + 1) * d], kk, vv, d, cfg.heads, &seg).0);
        }
        add(&mut y, &net.lin(&ctx, l.cross.wo, l.cross.bo, d, d));
        let (h2, _) = net.ln(&y, l.ln2);
        add(&mut y, &net.ffn(&h2, l.ffn).0);
    }
    for s in streams.iter_mut() {
        s.len += 1;
    }
    let (z, _) = net.ln(&y, net.idx.dec_ln);
    Ok(net.output_logits(&z))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of many sources at once. Output excludes BOS and EOS.
pub fn greedy<T: Scalar>(net: &Net<T>, srcs: &[&[u32]], max_lens: &[usize]) -> Result<Vec<Vec<u32>>> {
    let v = net.cfg.vocab_size;
    let mem = encode(net, srcs)?;
    let mut out = vec![Vec::new(); srcs.len()];
    let mut alive: Vec<usize> = (0..srcs.len()).filter(|&i| max_lens[i] > 0).collect();
    let mut streams: Vec<Stream<T>> = alive.iter().map(|&i| Stream::new(net, i)).collect();
    let mut tokens = vec![Special::Bos.id(); alive.len()];
    while !alive.is_empty() {
        let logits = step(net, &mem, &mut streams, &tokens)?;
        let mut keep = Vec::with_capacity(alive.len());
        tokens.clear();
        for (i, &src) in alive.iter().enumerate() {
            let t = argmax(&logits[i * v..(i + 1) * v]) as u32;
            if t == Special::Eos.id() {
                continue;
            }
            out[src].push(t);
            if out[src].len() < max_lens[src] {
                keep.push(i);
                tokens.push(t);
            }
        }
        alive = keep.iter().map(|&i| alive[i]).collect();
        let mut mask = vec![false; streams.len()];
        for &i in &keep {
            mask[i] = true;
        }
        streams = streams.into_iter().zip(mask).filter(|(_, m)| *m).map(|(s, _)| s).collect();
    }
    Ok(out)
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.to_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.to_f64() - lse).collect()
}

/// GNMT length penalty `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(LENGTH_ALPHA)
}

/// Beam search with length-normalised scores; `beam == 1` is exact greedy.
/// Output excludes BOS and EOS.
pub fn beam_search<T: Scalar>(net: &Net<T>, src: &[u32], beam: usize, max_len: usize) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    if beam == 1 {
        return Ok(greedy(net, &[src], &[max_len])?.remove(0));
    }
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let v = net.cfg.vocab_size;
    let mem = encode(net, &[src])?;
    let mut alive: Vec<(Vec<u32>, f64, Stream<T>)> = vec![(Vec::new(), 0.0, Stream::new(net, 0))];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    while !alive.is_empty() && finished.len() < beam {
        let tokens: Vec<u32> = alive.iter().map(|(h, _, _)| h.last().copied().unwrap_or(Special::Bos.id())).collect();
        let mut streams: Vec<Stream<T>> = alive.iter().map(|a| a.2.clone()).collect();
        let logits = step(net, &mem, &mut streams, &tokens)?;
        let mut cands: Vec<(f64, f64, usize, u32)> = Vec::new();
        for (i, (_, score, _)) in alive.iter().enumerate() {
            let lp = log_softmax(&logits[i * v..(i + 1) * v]);
            for (t, &l) in lp.iter().enumerate() {
                cands.push((score + l, l, i, t as u32));
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(beam);
        for &(score, _, i, t) in cands.iter().take(beam) {
            let mut hyp = alive[i].0.clone();
            if t == Special::Eos.id() {
                let n = hyp.len() + 1;
                finished.push((hyp, score / length_penalty(n)));
                continue;
            }
            hyp.push(t);
            if hyp.len() >= max_len {
                let n = hyp.len();
                finished.push((hyp, score / length_penalty(n)));
            } else {
                next.push((hyp, score, streams[i].clone()));
            }
        }
        alive = next;
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map(|(_, h)| h.0)
        .unwrap_or_default();
    Ok(best)
}
