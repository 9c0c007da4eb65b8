//! Writes the bundled toy language pair (a base language and its cipher)
//! to `data/toy`, or to the directory given as the first argument.

use codeswitch::toy::{ToyConfig, ToyDataset, ToyLanguagePair, ToySizes};

fn main() -> codeswitch::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/toy".into());
    let data = ToyDataset::generate(&ToyLanguagePair::new(ToyConfig::default()), &ToySizes::default())?;
    data.write(&dir)?;
    println!(
        "{dir}: {} + {} monolingual, {}/{}/{} parallel, {} gold pairs",
        data.mono_a.len(),
        data.mono_b.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.gold.len()
    );
    for (a, b) in data.train.iter().take(3) {
        println!("  {a}\n  {b}\n");
    }
    Ok(())
}
