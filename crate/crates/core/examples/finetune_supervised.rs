//! Supervised fine-tuning a->b from a CSP checkpoint and from random
//! initialization, reporting validation BLEU every 50 steps until 90.
//! Pass a checkpoint written by `pretrain_csp`, or one is trained first.

use std::ops::ControlFlow;

use codeswitch::eval::{evaluate_bleu, translate_all};
use codeswitch::model::{Checkpoint, ModelConfig};
use codeswitch::pipeline::{prepare_pair, PrepareConfig, Prepared};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};
use codeswitch::train::{PretrainTask, SupervisedTask, TrainConfig, Trainer};

fn pretrained(p: &Prepared) -> codeswitch::Result<Checkpoint> {
    if let Some(path) = std::env::args().nth(1) {
        return Checkpoint::load(path.as_ref());
    }
    let cfg = TrainConfig { max_steps: 3000, ..TrainConfig::default() };
    let mut t = Trainer::new(Checkpoint::init(ModelConfig::desk(p.vocab.len()), 1)?, cfg.clone())?;
    let mut task = PretrainTask::new(p.mono.clone(), p.lexicons.clone(), p.tags, p.random_ids(), cfg.policy, cfg.k, cfg.batch_tokens, 1)?;
    t.run(&mut task, cfg.max_steps, |_, _| Ok(ControlFlow::Continue(())))?;
    Ok(t.ckpt)
}

fn main() -> codeswitch::Result<()> {
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let pre = pretrained(&p)?;
    let refs: Vec<String> = p.valid.b.iter().map(|r| p.text(r)).collect();
    let cfg = TrainConfig { lr: 1e-3, warmup_steps: 200, ..TrainConfig::default() };
    for (name, init) in [("csp", Checkpoint { step: 0, ..pre.clone() }), ("random", Checkpoint::init(pre.config.clone(), 101)?)] {
        let mut t = Trainer::new(init, cfg.clone())?;
        let mut task = SupervisedTask::new(p.train.a.clone(), p.train.b.clone(), p.tags[1], cfg.batch_tokens, cfg.seed)?;
        t.run(&mut task, 3000, |t, r| {
            if r.step % 50 != 0 {
                return Ok(ControlFlow::Continue(()));
            }
            let b = evaluate_bleu(&t.ckpt, &p.valid.a, &refs, p.tags[1], &p.vocab, 1)?;
            println!("{name:>6} step {:>4}  loss {:.3}  BLEU {b:.2}", r.step, r.loss);
            Ok(if b >= 90.0 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        })?;
        let hyp = translate_all(&t.ckpt, &p.test.a[..1], p.tags[1], 4)?;
        println!("{name:>6} beam 4: {} => {}\n", p.text(&p.test.a[0]), p.text(&hyp[0]));
    }
    Ok(())
}
