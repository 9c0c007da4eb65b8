use super::*;
use crate::lexicon::TranslationLexicon;
use crate::model::{decode, ModelConfig};
use std::collections::BTreeMap;

const TAGS: [u32; 2] = [18, 19];

fn cfg_model() -> ModelConfig {
    ModelConfig {
        layers_enc: 1,
        layers_dec: 1,
        d_model: 32,
        d_ffn: 64,
        heads: 4,
        dropout: 0.0,
        vocab_size: 20,
        max_positions: 32,
        tie_embeddings: true,
        label_smoothing: 0.0,
    }
}

fn corpus(seed: u64, n: usize) -> Vec<Vec<u32>> {
    let mut r = rng::rng_from(seed);
    (0..n)
        .map(|_| {
            let len = rand::Rng::gen_range(&mut r, 3..8);
            (0..len).map(|_| rand::Rng::gen_range(&mut r, 5..18)).collect()
        })
        .collect()
}

fn shift_lexicon() -> TranslationLexicon {
    let mut e = BTreeMap::new();
    for s in 5..18u32 {
        e.insert(s, vec![(5 + (s - 5 + 1) % 13, 1.0)]);
    }
    TranslationLexicon::new(1, "a-b", e).unwrap()
}

fn pretrain_task(seed: u64) -> PretrainTask {
    PretrainTask::new(
        [corpus(1, 60), corpus(2, 60)],
        [shift_lexicon(), shift_lexicon()],
        TAGS,
        5..18,
        CorruptionPolicy::default(),
        3,
        60,
        seed,
    )
    .unwrap()
}

fn tcfg() -> TrainConfig {
    TrainConfig { warmup_steps: 10, lr: 3e-3, batch_tokens: 60, ..TrainConfig::default() }
}

#[test]
fn zero_steps_is_a_no_op() {
    let ck = Checkpoint::init(cfg_model(), 1).unwrap();
    let mut t = Trainer::new(ck.clone(), tcfg()).unwrap();
    let rec = t.run(&mut pretrain_task(1), 0, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    assert!(rec.is_empty());
    assert_eq!(t.ckpt, ck);
}

#[test]
fn resume_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg_model();
    cfg.dropout = 0.1;
    let ck = Checkpoint::init(cfg, 2).unwrap();
    let mut full = Trainer::new(ck.clone(), tcfg()).unwrap();
    full.run(&mut pretrain_task(3), 8, |_, _| Ok(ControlFlow::Continue(()))).unwrap();

    let mut first = Trainer::new(ck, tcfg()).unwrap();
    first.run(&mut pretrain_task(3), 5, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    let path = dir.path().join("p.ckpt");
    first.save(&path).unwrap();
    let mut second = Trainer::load(&path, tcfg()).unwrap();
    second.run(&mut pretrain_task(3), 3, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    assert_eq!(second.ckpt, full.ckpt);
    assert_eq!(second.opt, full.opt);
}

#[test]
fn workers_reduce_to_the_same_gradient_without_dropout() {
    let ck = Checkpoint::init(cfg_model(), 4).unwrap();
    let b = pretrain_task(4).batch(1, &ck).unwrap().examples;
    let serial = Trainer::new(ck.clone(), tcfg()).unwrap().gradient(&b, 1).unwrap();
    let par = Trainer::new(ck, TrainConfig { workers: 3, ..tcfg() }).unwrap().gradient(&b, 1).unwrap();
    assert!((serial.0 - par.0).abs() < 1e-6);
    for (a, c) in serial.2.data.iter().zip(&par.2.data) {
        assert!((a - c).abs() < 1e-5);
    }
}

#[test]
fn pretraining_batches_alternate_and_lead_with_tags() {
    let ck = Checkpoint::init(cfg_model(), 1).unwrap();
    let mut t = pretrain_task(5);
    for step in 1..=4u64 {
        let b = t.batch(step, &ck).unwrap();
        let lang = ((step - 1) % 2) as usize;
        assert!(b.examples.iter().all(|e| e.enc_ids[0] == TAGS[lang]));
    }
}

#[test]
fn selective_init_contracts() {
    let pre = Checkpoint::init(cfg_model(), 1).unwrap();
    let mut pre = pre;
    pre.step = 9;
    let fresh = Checkpoint::init(cfg_model(), 2).unwrap();
    let all = selective_init(&pre, &fresh, &Group::ALL).unwrap();
    assert_eq!(all.params, pre.params);
    assert_eq!(all.step, 0);
    assert_eq!(selective_init(&pre, &fresh, &[]).unwrap(), fresh);
    let no_dec: Vec<Group> = Group::ALL.into_iter().filter(|&g| g != Group::Decoder).collect();
    let mixed = selective_init(&pre, &fresh, &no_dec).unwrap();
    for t in &pre.layout.tensors {
        let src = if t.group == Group::Decoder { &fresh } else { &pre };
        assert_eq!(mixed.params.data[t.range()], src.params.data[t.range()], "{}", t.name);
    }
    let mut other = cfg_model();
    other.d_ffn = 32;
    assert!(selective_init(&pre, &Checkpoint::init(other, 1).unwrap(), &[]).is_err());
}

#[test]
fn supervised_rejects_misaligned_corpora() {
    assert!(SupervisedTask::new(corpus(1, 3), corpus(2, 4), TAGS[1], 60, 1).is_err());
}

#[test]
fn copy_task_is_learned() {
    let src = corpus(7, 1000);
    let mut t = Trainer::new(Checkpoint::init(cfg_model(), 7).unwrap(), tcfg()).unwrap();
    let mut task = SupervisedTask::new(src.clone(), src.clone(), TAGS[0], 60, 7).unwrap();
    t.run(&mut task, 1500, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    let held = corpus(99, 20);
    let ok = held
        .iter()
        .filter(|s| {
            let input: Vec<u32> = std::iter::once(TAGS[0]).chain(s.iter().copied()).collect();
            decode(&t.ckpt, &input, 1, 20).unwrap() == **s
        })
        .count();
    assert!(ok >= 18, "{ok}/20 copied");
}

#[test]
fn unsupervised_schedule_and_tags() {
    let ck = Checkpoint::init(cfg_model(), 1).unwrap();
    let mut t = UnsupervisedTask::new([corpus(1, 40), corpus(2, 40)], TAGS, UnsupervisedConfig::default(), 60, 1).unwrap();
    let kinds: Vec<&str> = (1..=8u64)
        .map(|s| {
            let b = t.batch(s, &ck).unwrap();
            let lang = ((s - 1) / 2 % 2) as usize;
            assert!(b.examples.iter().all(|e| e.enc_ids[0] == TAGS[lang]));
            b.kind
        })
        .collect();
    assert_eq!(kinds[..4], ["dae.a", "bt.a", "dae.b", "bt.b"]);
    let mut no_bt = UnsupervisedTask::new(
        [corpus(1, 40), corpus(2, 40)],
        TAGS,
        UnsupervisedConfig { backtranslation: false, ..Default::default() },
        60,
        1,
    )
    .unwrap();
    assert_eq!(no_bt.batch(2, &ck).unwrap().kind, "dae.b");
}

#[test]
fn backtranslation_sizes() {
    let ck = Checkpoint::init(cfg_model(), 1).unwrap();
    assert!(backtranslate(&ck, &[], TAGS[0], 1).unwrap().pairs.is_empty());
    let bt = backtranslate(&ck, &corpus(3, 10), TAGS[0], 1).unwrap();
    assert_eq!(bt.pairs.len() + bt.skipped.len(), 10);
}

proptest::proptest! {
    #[test]
    fn noise_is_a_local_subsequence_shuffle(x in proptest::collection::vec(0u32..1000, 1..30), seed in 0u64..1000) {
        let x: Vec<u32> = { let mut v = x; v.sort(); v.dedup(); v };
        let y = noise(&x, &NoiseConfig::default(), &mut rng::rng_from(seed));
        proptest::prop_assert!(!y.is_empty() && y.len() <= x.len());
        proptest::prop_assert!(y.iter().all(|t| x.contains(t)));
        let shuffle_only = NoiseConfig { drop: 0.0, shuffle_window: 3 };
        let z = noise(&x, &shuffle_only, &mut rng::rng_from(seed));
        proptest::prop_assert_eq!(z.len(), x.len());
        for (i, t) in z.iter().enumerate() {
            let orig = x.iter().position(|v| v == t).unwrap();
            proptest::prop_assert!(orig.abs_diff(i) < 3);
        }
    }
}
