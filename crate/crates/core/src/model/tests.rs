use super::*;
use crate::corrupt::{corrupt_csp, CorruptionPolicy, TrainingExample};
use crate::lexicon::TranslationLexicon;
use crate::rng;
use crate::subword::Special;
use rand::Rng as _;
use std::collections::BTreeMap;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers_enc: 2,
        layers_dec: 2,
        d_model: 8,
        d_ffn: 12,
        heads: 2,
        dropout: 0.0,
        vocab_size: vocab,
        max_positions: 16,
        tie_embeddings: true,
        label_smoothing: 0.0,
    }
}

fn batch(v: u32, seed: u64) -> Vec<TrainingExample> {
    let mut r = rng::rng_from(seed);
    let mut e = BTreeMap::new();
    for s in 5..v {
        e.insert(s, vec![(5 + (s * 7) % (v - 5), 0.7), (5 + (s * 3) % (v - 5), 0.3)]);
    }
    let lex = TranslationLexicon::new(2, "t", e).unwrap();
    let mut out: Vec<TrainingExample> = (0..3)
        .map(|i| {
            let x: Vec<u32> = (0..4 + i).map(|_| r.gen_range(5..v)).collect();
            corrupt_csp(&x, &lex, &CorruptionPolicy::default(), &(5..v), &mut r).unwrap().example
        })
        .collect();
    out.push(TrainingExample::translation(vec![6, 7, 8], &[9, 10]).with_encoder_prefix(5));
    out
}

fn net_of<'a>(c: &'a Checkpoint, p: &'a Params<f64>) -> Net<'a, f64> {
    Net { cfg: &c.config, idx: &c.layout.index, p: &p.data }
}

fn fd_check(cfg: ModelConfig, dropout_seed: Option<u64>) {
    let ck = Checkpoint::init(cfg, 3).unwrap();
    let mut p: Params<f64> = ck.params.cast();
    // perturb biases and gains off their init values so every path is generic
    let mut r = rng::rng_from(11);
    for v in p.data.iter_mut() {
        *v += r.gen_range(-0.05..0.05);
    }
    let b = batch(13, 4);
    let loss = |p: &Params<f64>| -> f64 {
        let mut dr = dropout_seed.map(rng::rng_from);
        forward(&net_of(&ck, p), &b, dr.as_mut()).unwrap().mean_loss()
    };
    let mut dr = dropout_seed.map(rng::rng_from);
    let (_, g) = loss_and_grad(&net_of(&ck, &p), &b, dr.as_mut()).unwrap();
    let mut checked = 0;
    let mut groups = std::collections::BTreeSet::new();
    let h = 1e-5;
    for t in &ck.layout.tensors {
        let live: Vec<usize> = t.range().filter(|&i| g.data[i].abs() > 1e-7).collect();
        for k in 0..5.min(live.len()) {
            let i = live[r.gen_range(0..live.len())];
            let _ = k;
            let orig = p.data[i];
            p.data[i] = orig + h;
            let up = loss(&p);
            p.data[i] = orig - h;
            let down = loss(&p);
            p.data[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (num - g.data[i]).abs() / num.abs().max(g.data[i].abs());
            assert!(rel < 1e-4, "{} [{}]: analytic {} numeric {num} rel {rel}", t.name, i - t.offset, g.data[i]);
            checked += 1;
            groups.insert(t.group);
        }
    }
    assert!(checked >= 200, "{checked}");
    assert_eq!(groups.len(), Group::ALL.len());
}

#[test]
fn gradients_match_finite_differences() {
    fd_check(tiny(13), None);
}

#[test]
fn gradients_match_with_dropout_and_smoothing() {
    let mut cfg = tiny(13);
    cfg.dropout = 0.2;
    cfg.label_smoothing = 0.1;
    fd_check(cfg, Some(8));
}

#[test]
fn zeroed_output_path_is_uniform() {
    let mut ck = Checkpoint::init(ModelConfig::desk(119), 1).unwrap();
    ck.zero_output_path();
    let f = forward(&ck.net(), &batch(119, 2), None).unwrap();
    assert!((f.mean_loss() - 119f64.ln()).abs() < 1e-3);
    assert!((f.mean_nll().exp() / 119.0 - 1.0).abs() < 0.01);
}

#[test]
fn batch_semantics() {
    let ck = Checkpoint::init(tiny(13), 5).unwrap();
    let b = batch(13, 6);
    let base = forward(&ck.net(), &b, None).unwrap().mean_loss();
    let doubled: Vec<_> = b.iter().chain(&b).cloned().collect();
    assert!((forward(&ck.net(), &doubled, None).unwrap().mean_loss() - base).abs() < 1e-6);
    let rev: Vec<_> = b.iter().rev().cloned().collect();
    assert!((forward(&ck.net(), &rev, None).unwrap().mean_loss() - base).abs() < 1e-6);
    let mut changed = b.clone();
    for ex in &mut changed {
        for (t, m) in ex.tgt.iter_mut().zip(&ex.loss_mask) {
            if !m {
                *t = 12;
            }
        }
    }
    assert_eq!(forward(&ck.net(), &changed, None).unwrap().mean_loss(), base);
}

#[test]
fn softmax_rows_sum_to_one() {
    let ck = Checkpoint::init(ModelConfig::desk(40), 5).unwrap();
    let f = forward(&ck.net(), &batch(40, 7), None).unwrap();
    for row in f.probs.chunks(40) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn unused_positions_get_zero_gradient_and_grads_are_deterministic() {
    let ck = Checkpoint::init(tiny(13), 5).unwrap();
    let b = batch(13, 8);
    let (_, g1) = loss_and_grad(&ck.net(), &b, None).unwrap();
    let (_, g2) = loss_and_grad(&ck.net(), &b, None).unwrap();
    assert_eq!(g1, g2);
    let pos = ck.layout.tensor("encoder.positions").unwrap();
    let d = ck.config.d_model;
    assert!(g1.data[pos.offset + 10 * d..pos.offset + 16 * d].iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_batches_rejected() {
    let ck = Checkpoint::init(tiny(13), 5).unwrap();
    let mut b = batch(13, 9);
    b[0].enc_ids[0] = 13;
    assert!(matches!(forward(&ck.net(), &b, None), Err(crate::Error::IdOutOfRange { .. })));
    let mut e = TrainingExample::translation(vec![5, 6], &[7]);
    e.loss_mask.fill(false);
    assert!(forward(&ck.net(), &[e], None).is_err());
}

/// Next-token distribution from the full (non-incremental) forward pass.
fn full_next(ck: &Checkpoint, src: &[u32], prefix: &[u32]) -> Vec<f32> {
    let ex = TrainingExample::translation(src.to_vec(), prefix);
    let f = forward(&ck.net(), &[ex], None).unwrap();
    let v = ck.config.vocab_size;
    f.probs[prefix.len() * v..(prefix.len() + 1) * v].to_vec()
}

#[test]
fn greedy_equals_stepwise_argmax_oracle() {
    let mut cfg = tiny(13);
    cfg.d_model = 16;
    let ck = Checkpoint::init(cfg, 21).unwrap();
    let src = [5u32, 9, 7, 11];
    let mut oracle = Vec::new();
    for _ in 0..8 {
        let p = full_next(&ck, &src, &oracle);
        let t = argmax(&p) as u32;
        if t == Special::Eos.id() {
            break;
        }
        oracle.push(t);
    }
    assert_eq!(decode(&ck, &src, 1, 8).unwrap(), oracle);
    let batched = greedy(&ck.net(), &[&src[..], &[6, 6]], &[8, 8]).unwrap();
    assert_eq!(batched[0], oracle);
}

#[test]
fn incremental_logits_match_full_forward() {
    let ck = Checkpoint::init(tiny(13), 22).unwrap();
    let src = [5u32, 6, 7];
    let prefix = [8u32, 9, 10];
    let net = ck.net();
    let mem = encode(&net, &[&src]).unwrap();
    let mut s = vec![Stream::new(&net, 0)];
    let mut tok = Special::Bos.id();
    for i in 0..=prefix.len() {
        let logits = step(&net, &mem, &mut s, &[tok]).unwrap();
        let max = logits.iter().cloned().fold(f32::MIN, f32::max);
        let z: f32 = logits.iter().map(|l| (l - max).exp()).sum();
        let full = full_next(&ck, &src, &prefix[..i]);
        for (l, p) in logits.iter().zip(&full) {
            assert!(((l - max).exp() / z - p).abs() < 1e-5);
        }
        if i < prefix.len() {
            tok = prefix[i];
        }
    }
}

#[test]
fn decode_contracts() {
    let ck = Checkpoint::init(tiny(13), 23).unwrap();
    let src = [5u32, 6, 7];
    assert!(decode(&ck, &src, 1, 1).unwrap().len() <= 1);
    assert!(decode(&ck, &src, 3, 1).unwrap().len() <= 1);
    assert!(decode(&ck, &src, 0, 5).is_err());
    let b = decode(&ck, &src, 4, 6).unwrap();
    assert!(b.len() <= 6 && !b.contains(&Special::Eos.id()));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::init(tiny(13), 24).unwrap();
    ck.step = 17;
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
