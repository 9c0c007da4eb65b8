//! Synthetic language pair for desk-scale experiments.
//!
//! The base language is a sparse random Markov chain over invented words,
//! so every word has its own distributional signature. The second language
//! is a cipher of the first: a bijective word substitution that leaves a
//! small set of numeral tokens unchanged (those give identical-string seed
//! pairs for embedding mapping). Translation between the two is therefore
//! exact, monotone, and known.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::SentenceCorpus;
use crate::error::Result;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Number of word types in the base language, shared numerals included.
    pub words: usize,
    /// How many of those are numerals spelled identically in both languages.
    pub shared: usize,
    pub out_degree: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            words: 60,
            shared: 8,
            out_degree: 4,
            min_len: 4,
            max_len: 12,
            seed: 2020,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyLanguagePair {
    pub config: ToyConfig,
    base_words: Vec<String>,
    cipher_words: Vec<String>,
    start: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    stop: Vec<f64>,
}

fn invent_words(n: usize, consonants: &[char], rng: &mut Rng, taken: &mut HashSet<String>) -> Vec<String> {
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| [*consonants.choose(rng).unwrap(), *VOWELS.choose(rng).unwrap()])
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sample_weighted(items: &[(usize, f64)], rng: &mut Rng) -> usize {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in items {
        if r < *w {
            return *i;
        }
        r -= w;
    }
    items.last().unwrap().0
}

impl ToyLanguagePair {
    pub fn new(config: ToyConfig) -> Self {
        assert!(config.shared < config.words && config.out_degree >= 1);
        let mut rng = rng::stream(config.seed, rng::label("toy.lexicon"));
        let n = config.words;
        let mut taken = HashSet::new();
        let shared: Vec<String> = (1..=config.shared).map(|i| i.to_string()).collect();
        let mut base_words = invent_words(n - config.shared, &['k', 'l', 'm', 'n', 'p', 'r', 's', 't'], &mut rng, &mut taken);
        let mut cipher_words = invent_words(n - config.shared, &['b', 'd', 'f', 'g', 'h', 'v', 'z'], &mut rng, &mut taken);
        base_words.extend(shared.iter().cloned());
        cipher_words.extend(shared);

        // a random cycle keeps the chain irreducible; other successors are random
        let mut cycle: Vec<usize> = (0..n).collect();
        cycle.shuffle(&mut rng);
        let mut next_on_cycle = vec![0; n];
        for i in 0..n {
            next_on_cycle[cycle[i]] = cycle[(i + 1) % n];
        }
        let successors = (0..n)
            .map(|w| {
                let mut succ = vec![next_on_cycle[w]];
                while succ.len() < config.out_degree.min(n) {
                    let s = rng.gen_range(0..n);
                    if !succ.contains(&s) {
                        succ.push(s);
                    }
                }
                succ.into_iter().map(|s| (s, 0.2 + rng.gen::<f64>())).collect()
            })
            .collect();
        let start = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
        let stop = (0..n).map(|_| 0.1 + 0.4 * rng.gen::<f64>()).collect();
        Self {
            config,
            base_words,
            cipher_words,
            start,
            successors,
            stop,
        }
    }

    fn sample_ids(&self, rng: &mut Rng) -> Vec<usize> {
        let starts: Vec<(usize, f64)> = self.start.iter().copied().enumerate().collect();
        let mut w = sample_weighted(&starts, rng);
        let mut out = vec![w];
        while out.len() < self.config.max_len {
            if out.len() >= self.config.min_len && rng.gen::<f64>() < self.stop[w] {
                break;
            }
            w = sample_weighted(&self.successors[w], rng);
            out.push(w);
        }
        out
    }

    fn render(words: &[String], ids: &[usize]) -> String {
        ids.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// `n` base-language sentences from random stream `stream`.
    pub fn base_sentences(&self, n: usize, stream: u64) -> Vec<String> {
        let mut rng = rng::stream(self.config.seed, stream);
        (0..n).map(|_| Self::render(&self.base_words, &self.sample_ids(&mut rng))).collect()
    }

    /// Parallel (base, cipher) pairs from random stream `stream`.
    pub fn parallel(&self, n: usize, stream: u64) -> Vec<(String, String)> {
        let mut rng = rng::stream(self.config.seed, stream);
        (0..n)
            .map(|_| {
                let ids = self.sample_ids(&mut rng);
                (Self::render(&self.base_words, &ids), Self::render(&self.cipher_words, &ids))
            })
            .collect()
    }

    /// Word-for-word cipher of a base-language sentence.
    pub fn encipher(&self, sentence: &str) -> Option<String> {
        let map: BTreeMap<&str, &str> = self.gold_pairs().into_iter().collect();
        sentence
            .split_whitespace()
            .map(|w| map.get(w).copied())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.join(" "))
    }

    /// Ground-truth (base word, cipher word) pairs.
    pub fn gold_pairs(&self) -> Vec<(&str, &str)> {
        self.base_words
            .iter()
            .zip(&self.cipher_words)
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect()
    }
}

/// The bundled dataset: two monolingual corpora drawn from independent
/// streams plus parallel train/valid/test splits.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub mono_a: SentenceCorpus,
    pub mono_b: SentenceCorpus,
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub gold: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct ToySizes {
    pub mono: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self {
            mono: 10_000,
            train: 1_000,
            valid: 200,
            test: 200,
        }
    }
}

impl ToyDataset {
    pub fn generate(pair: &ToyLanguagePair, sizes: &ToySizes) -> Result<Self> {
        let mono_a = SentenceCorpus::new("a", pair.base_sentences(sizes.mono, 1))?;
        let b: Vec<String> = pair
            .base_sentences(sizes.mono, 2)
            .iter()
            .map(|s| pair.encipher(s).expect("generated words are in the lexicon"))
            .collect();
        let mono_b = SentenceCorpus::new("b", b)?;
        Ok(Self {
            mono_a,
            mono_b,
            train: pair.parallel(sizes.train, 3),
            valid: pair.parallel(sizes.valid, 4),
            test: pair.parallel(sizes.test, 5),
            gold: pair
                .gold_pairs()
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        })
    }

    /// Writes `mono.a`, `mono.b`, `{train,valid,test}.{a,b}` and `gold.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        self.mono_a.save(dir.join("mono.a"))?;
        self.mono_b.save(dir.join("mono.b"))?;
        for (name, pairs) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let (a, b): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            SentenceCorpus::new("a", a)?.save(dir.join(format!("{name}.a")))?;
            SentenceCorpus::new("b", b)?.save(dir.join(format!("{name}.b")))?;
        }
        let gold: String = self.gold.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
        let path = dir.join("gold.tsv");
        std::fs::write(&path, gold).map_err(|e| crate::Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cipher_is_a_bijection_with_shared_numerals() {
        let pair = ToyLanguagePair::new(ToyConfig::default());
        let gold = pair.gold_pairs();
        let a: HashSet<_> = gold.iter().map(|p| p.0).collect();
        let b: HashSet<_> = gold.iter().map(|p| p.1).collect();
        assert_eq!(a.len(), 60);
        assert_eq!(b.len(), 60);
        assert_eq!(gold.iter().filter(|(x, y)| x == y).count(), 8);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let pair = ToyLanguagePair::new(ToyConfig::default());
        let s1 = pair.base_sentences(50, 9);
        assert_eq!(s1, pair.base_sentences(50, 9));
        for s in &s1 {
            let n = s.split_whitespace().count();
            assert!((4..=12).contains(&n));
        }
        for (a, b) in pair.parallel(20, 3) {
            assert_eq!(pair.encipher(&a).unwrap(), b);
        }
    }
}
