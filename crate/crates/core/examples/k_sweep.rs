//! Sweeps the lexicon size k with small budgets and prints the TSV table
//! (perplexity after pre-training, BLEU after fine-tuning, per k).

use codeswitch::eval::{k_sweep, sweep_tsv, SweepSetup, DEFAULT_K_VALUES};
use codeswitch::model::ModelConfig;
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};
use codeswitch::train::TrainConfig;

fn main() -> codeswitch::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let setup = SweepSetup {
        aligned: &p.aligned,
        vocab: &p.vocab,
        names: ("a", "b"),
        tags: p.tags,
        mono: [&p.mono[0], &p.mono[1]],
        valid_mono: [&p.valid.a, &p.valid.b],
        train: (&p.train.a, &p.train.b),
        test: (&p.test.a, &p.test.b),
        model: ModelConfig::desk(p.vocab.len()),
        model_seed: 1,
        pretrain: TrainConfig { max_steps: steps, ..TrainConfig::default() },
        finetune: TrainConfig { max_steps: steps / 2, lr: 1e-3, warmup_steps: 100, ..TrainConfig::default() },
    };
    print!("{}", sweep_tsv(&k_sweep(&setup, &DEFAULT_K_VALUES)?));
    Ok(())
}
