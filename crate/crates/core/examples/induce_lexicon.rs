//! Induces translation lexicons between the two toy languages from
//! monolingual text alone and scores them against the known cipher.

use codeswitch::eval::lexicon_precision;
use codeswitch::pipeline::{encode_corpus, induce_lexicons, language_embeddings, shared_subwords, InductionConfig, SubwordConfig};
use codeswitch::embedding::SgnsConfig;
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let (bpe, vocab) = shared_subwords(&data.mono_a, &data.mono_b, &SubwordConfig::default())?;
    let sgns = SgnsConfig { dim: 32, ..SgnsConfig::default() };
    let (ea, _) = language_embeddings(&encode_corpus(&data.mono_a, &bpe, &vocab), &vocab, &sgns)?;
    let (eb, _) = language_embeddings(&encode_corpus(&data.mono_b, &bpe, &vocab), &vocab, &SgnsConfig { seed: 2, ..sgns })?;
    let (ab, ba, info) = induce_lexicons(&ea, &eb, &vocab, None, &InductionConfig::default(), ("a", "b"))?;
    println!(
        "{} seed pairs; self-learning ran {} / {} iterations",
        info.seed_pairs, info.forward.iterations, info.backward.iterations
    );
    println!("induced pairs per iteration (a->b): {:?}", info.forward.pair_counts);
    let gold: Vec<(u32, u32)> = data.gold.iter().filter_map(|(a, b)| Some((vocab.id(a)?, vocab.id(b)?))).collect();
    let reverse: Vec<(u32, u32)> = gold.iter().map(|&(a, b)| (b, a)).collect();
    println!(
        "a->b P@1 {:.3} P@3 {:.3}   b->a P@1 {:.3}",
        lexicon_precision(&ab, &gold, 1)?,
        lexicon_precision(&ab, &gold, 3)?,
        lexicon_precision(&ba, &reverse, 1)?
    );
    for (src, entry) in ab.entries().take(5) {
        let shown: Vec<String> = entry.iter().map(|(t, p)| format!("{} {p:.3}", vocab.token(*t).unwrap_or("?"))).collect();
        println!("{:>10} -> {}", vocab.token(src).unwrap_or("?"), shown.join(", "));
    }
    Ok(())
}
