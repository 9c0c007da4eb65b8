//! Fine-tunes a->b for a fixed budget from the full CSP checkpoint and from
//! versions with one component re-initialized, and compares BLEU.

use std::ops::ControlFlow;

use codeswitch::eval::evaluate_bleu;
use codeswitch::model::{Checkpoint, Group, ModelConfig};
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};
use codeswitch::train::{selective_init, PretrainTask, SupervisedTask, TrainConfig, Trainer};

fn main() -> codeswitch::Result<()> {
    let budget: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let cfg = TrainConfig { max_steps: 3000, ..TrainConfig::default() };
    let model = ModelConfig::desk(p.vocab.len());
    let mut t = Trainer::new(Checkpoint::init(model.clone(), 1)?, cfg.clone())?;
    let mut task = PretrainTask::new(p.mono.clone(), p.lexicons.clone(), p.tags, p.random_ids(), cfg.policy, cfg.k, cfg.batch_tokens, 1)?;
    t.run(&mut task, cfg.max_steps, |_, _| Ok(ControlFlow::Continue(())))?;
    let fresh = Checkpoint::init(model, 101)?;

    let refs: Vec<String> = p.valid.b.iter().map(|r| p.text(r)).collect();
    let ft = TrainConfig { lr: 1e-3, warmup_steps: 200, ..TrainConfig::default() };
    let mut rows = vec![("full model".to_string(), Group::ALL.to_vec())];
    for g in [Group::Embeddings, Group::Encoder, Group::CrossAttention, Group::Decoder] {
        rows.push((format!("no pre-trained {}", g.name()), Group::ALL.into_iter().filter(|&x| x != g).collect()));
    }
    rows.push(("random init".into(), Vec::new()));
    for (name, groups) in rows {
        let mut f = Trainer::new(selective_init(&t.ckpt, &fresh, &groups)?, ft.clone())?;
        let mut task = SupervisedTask::new(p.train.a.clone(), p.train.b.clone(), p.tags[1], ft.batch_tokens, ft.seed)?;
        f.run(&mut task, budget, |_, _| Ok(ControlFlow::Continue(())))?;
        let b = evaluate_bleu(&f.ckpt, &p.valid.a, &refs, p.tags[1], &p.vocab, 1)?;
        println!("{name:<32} BLEU {b:6.2} after {budget} steps");
    }
    Ok(())
}
