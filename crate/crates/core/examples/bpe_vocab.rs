//! Learns one BPE model over both toy languages and shows how sentences are
//! segmented and mapped to ids in the shared vocabulary.

use codeswitch::pipeline::{shared_subwords, SubwordConfig};
use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    let cfg = SubwordConfig { merges: 300, ..SubwordConfig::default() };
    let (bpe, vocab) = shared_subwords(&data.mono_a, &data.mono_b, &cfg)?;
    println!("{} merges learned, {} vocabulary entries", bpe.merges().len(), vocab.len());
    println!("direction tags: {:?}", vocab.tag_ids().map(|i| vocab.token(i).unwrap_or("?")).collect::<Vec<_>>());
    for s in [data.mono_a.sentences()[0].as_str(), data.mono_b.sentences()[0].as_str()] {
        let pieces = bpe.apply(s);
        println!("\n{s}\n  pieces {pieces:?}\n  ids    {:?}", vocab.encode(&pieces));
        println!("  back   {}", codeswitch::subword::detokenize(&pieces));
    }
    Ok(())
}
