//! Builds code-switched pre-training examples from toy sentences and
//! contrasts them with plain masked-span corruption.

use codeswitch::corrupt::{corrupt_corpus, corrupt_csp, corrupt_mass, CorruptionPolicy};
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::rng;
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let policy = CorruptionPolicy::default();
    let random = p.random_ids();
    let x = &p.mono[0][0];
    let mut r = rng::rng_from(7);
    let csp = corrupt_csp(x, &p.lexicons[0], &policy, &random, &mut r)?;
    println!("code-switched span {:?}, actions {:?}\n{}", csp.example.span, csp.actions, csp.example.dump(&p.vocab));
    let mass = corrupt_mass(x, &policy, &random, &mut r)?;
    println!("masked span {:?}\n{}", mass.example.span, mass.example.dump(&p.vocab));
    let (_, stats) = corrupt_corpus(&p.mono[0], &p.lexicons[0], &policy, &random, 1)?;
    let n = stats.span_tokens as f64;
    println!(
        "corpus: {} sentences, span fraction {:.3}, translated {:.3} masked {:.3} random {:.3} kept {:.3}",
        stats.sentences,
        n / stats.sentence_tokens as f64,
        stats.translated as f64 / n,
        stats.masked as f64 / n,
        stats.random as f64 / n,
        stats.kept as f64 / n
    );
    Ok(())
}
