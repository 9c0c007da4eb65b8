//! Unsupervised fine-tuning from a CSP checkpoint: denoising plus on-the-fly
//! back-translation in both directions, with validation BLEU every 200 steps.
//! Passing `--no-bt` keeps only the denoising batches.

use std::ops::ControlFlow;

use codeswitch::eval::evaluate_bleu;
use codeswitch::model::{Checkpoint, ModelConfig};
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};
use codeswitch::train::{PretrainTask, TrainConfig, Trainer, UnsupervisedConfig, UnsupervisedTask};

fn main() -> codeswitch::Result<()> {
    let backtranslation = !std::env::args().any(|a| a == "--no-bt");
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let cfg = TrainConfig { max_steps: 3000, ..TrainConfig::default() };
    let mut t = Trainer::new(Checkpoint::init(ModelConfig::desk(p.vocab.len()), 1)?, cfg.clone())?;
    let mut task = PretrainTask::new(p.mono.clone(), p.lexicons.clone(), p.tags, p.random_ids(), cfg.policy, cfg.k, cfg.batch_tokens, 1)?;
    t.run(&mut task, cfg.max_steps, |_, _| Ok(ControlFlow::Continue(())))?;

    let refs_b: Vec<String> = p.valid.b.iter().map(|r| p.text(r)).collect();
    let refs_a: Vec<String> = p.valid.a.iter().map(|r| p.text(r)).collect();
    let ft = TrainConfig { lr: 1e-3, warmup_steps: 200, ..TrainConfig::default() };
    let mut u = Trainer::new(Checkpoint { step: 0, ..t.ckpt }, ft.clone())?;
    let ucfg = UnsupervisedConfig { backtranslation, ..UnsupervisedConfig::default() };
    let mut task = UnsupervisedTask::new(p.mono.clone(), p.tags, ucfg, ft.batch_tokens, ft.seed)?;
    u.run(&mut task, 2000, |u, r| {
        if r.step % 200 == 0 {
            let ab = evaluate_bleu(&u.ckpt, &p.valid.a, &refs_b, p.tags[1], &p.vocab, 1)?;
            let ba = evaluate_bleu(&u.ckpt, &p.valid.b, &refs_a, p.tags[0], &p.vocab, 1)?;
            println!("step {:>5} ({})  BLEU a->b {ab:.2}  b->a {ba:.2}", r.step, r.task);
        }
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(())
}
