//! Trains skip-gram embeddings on one toy language and prints the nearest
//! neighbours of a few frequent tokens.

use codeswitch::embedding::{cosine, SgnsConfig};
use codeswitch::pipeline::{encode_corpus, language_embeddings, shared_subwords, SubwordConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let (bpe, vocab) = shared_subwords(&data.mono_a, &data.mono_b, &SubwordConfig::default())?;
    let ids = encode_corpus(&data.mono_a, &bpe, &vocab);
    let (emb, report) = language_embeddings(&ids, &vocab, &SgnsConfig { dim: 32, ..SgnsConfig::default() })?;
    println!("{} rows of dimension {}", emb.rows(), emb.dim());
    println!("loss per epoch: {:.4?}", report.epoch_losses);
    let v = emb.vocab();
    for q in v.regular_ids().take(5) {
        let mut near: Vec<(f64, u32)> = v
            .regular_ids()
            .filter(|&j| j != q)
            .map(|j| (cosine(emb.row(q as usize), emb.row(j as usize)), j))
            .collect();
        near.sort_by(|a, b| b.0.total_cmp(&a.0));
        let shown: Vec<String> = near.iter().take(4).map(|(c, j)| format!("{} {c:.2}", v.token(*j).unwrap_or("?"))).collect();
        println!("{:>10}: {}", v.token(q).unwrap_or("?"), shown.join(", "));
    }
    Ok(())
}
