//! Builds a code-switched test set: a fixed share of each source sentence's
//! tokens replaced by their top-1 lexicon translation, with a manifest.

use codeswitch::eval::build_codeswitch_testset;
use codeswitch::pipeline::{prepare_pair, PrepareConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let ratio: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let p = prepare_pair(&data.mono_a, &data.mono_b, &data.train, &data.valid, &data.test, &PrepareConfig::default())?;
    let cs = build_codeswitch_testset(&p.test.a, &p.lexicons[0], ratio, 1)?;
    println!("{} replacements over {} sentences, {} flagged", cs.manifest.len(), cs.sentences.len(), cs.flagged.len());
    for i in 0..3 {
        println!("  {}\n  {}\n", p.text(&p.test.a[i]), p.text(&cs.sentences[i]));
    }
    for r in cs.manifest.iter().take(5) {
        let tok = |id| p.vocab.token(id).unwrap_or("?");
        println!("sentence {} position {}: {} -> {}", r.sentence, r.position, tok(r.original), tok(r.replacement));
    }
    Ok(())
}
