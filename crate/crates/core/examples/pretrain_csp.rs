//! Code-switching pre-training on the toy pair. Prints the loss averaged
//! over windows of 100 steps and the held-out perplexity, then saves the
//! checkpoint (and optimizer state) to `pretrain.ckpt` or the first argument.
//!
//! `cargo run --release --example pretrain_csp -- out.ckpt 3000`

use std::ops::ControlFlow;
use std::path::PathBuf;

use codeswitch::eval::{perplexity, PplSet};
use codeswitch::model::{Checkpoint, ModelConfig};
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};
use codeswitch::train::{PretrainTask, TrainConfig, Trainer};

fn main() -> codeswitch::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "pretrain.ckpt".into()));
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let model = ModelConfig::desk(p.vocab.len());
    println!("{} parameters, vocabulary {}", model.parameter_count(), p.vocab.len());
    let cfg = TrainConfig { max_steps: steps, ..TrainConfig::default() };
    let mut trainer = Trainer::new(Checkpoint::init(model, cfg.seed)?, cfg.clone())?;
    let mut task = PretrainTask::new(p.mono.clone(), p.lexicons.clone(), p.tags, p.random_ids(), cfg.policy, cfg.k, cfg.batch_tokens, cfg.seed)?;
    let mut window = Vec::new();
    trainer.run(&mut task, steps, |_, r| {
        window.push(r.loss);
        if window.len() == 100 {
            println!("step {:>5}  loss {:.3}  lr {:.2e}", r.step, window.iter().sum::<f64>() / 100.0, r.lr);
            window.clear();
        }
        Ok(ControlFlow::Continue(()))
    })?;
    let sets = [
        PplSet { sentences: &p.valid.a, lexicon: &p.lexicons[0], tag: p.tags[0] },
        PplSet { sentences: &p.valid.b, lexicon: &p.lexicons[1], tag: p.tags[1] },
    ];
    let ppl = perplexity(&trainer.ckpt, &sets, &p.random_ids(), &cfg.policy, 1)?;
    println!("held-out perplexity {:.3} (a {:.3}, b {:.3})", ppl.mean, ppl.per_language[0], ppl.per_language[1]);
    trainer.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
