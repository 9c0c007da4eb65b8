//! Stage glue shared by the CLI, the examples and the acceptance suite:
//! shared vocabulary construction, per-language embeddings over restricted
//! vocabularies, and lexicon induction in both directions.

use crate::corpus::{sample_balanced, SentenceCorpus};
use crate::embedding::{train_sgns, EmbeddingMatrix, SgnsConfig, SgnsReport};
use crate::error::{Error, Result};
use crate::lexicon::{extract_lexicon, ExtractionReport, TranslationLexicon};
use crate::mapping::{
    expand_seeds, normalize_embeddings, seed_pairs_identical, self_learn, OrthogonalMap, Retrieval, SeedPairs, SelfLearnConfig,
    SelfLearnReport,
};
use crate::subword::{build_vocab, learn_bpe, BpeModel, Vocab};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubwordConfig {
    pub merges: usize,
    pub vocab_size: usize,
    /// Balanced sample size (sentences, both languages together).
    pub sample: usize,
    pub seed: u64,
}

impl Default for SubwordConfig {
    fn default() -> Self {
        Self {
            merges: 4000,
            vocab_size: 6000,
            sample: 20_000,
            seed: 1,
        }
    }
}

impl SubwordConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 || self.sample < 2 {
            return Err(Error::InvalidArgument("vocabulary needs at least 8 entries and the sample 2 sentences".into()));
        }
        Ok(())
    }
}

/// Tag prepended to the encoder input when the output must be in language `lang`.
pub fn direction_tag(lang: &str) -> String {
    format!("<2{lang}>")
}

/// Learns one BPE model and one vocabulary over a balanced sample of both
/// corpora, then appends the two direction tags.
pub fn shared_subwords(a: &SentenceCorpus, b: &SentenceCorpus, cfg: &SubwordConfig) -> Result<(BpeModel, Vocab)> {
    cfg.validate()?;
    let n = cfg.sample.min(2 * a.len().max(b.len())) & !1;
    let sample = sample_balanced(a, b, n.max(2), cfg.seed)?;
    let bpe = learn_bpe(&sample.corpus, cfg.merges)?;
    let tokenized = bpe.apply_corpus(&sample.corpus);
    let mut vocab = build_vocab(&tokenized, cfg.vocab_size.saturating_sub(2))?;
    vocab.add_tags(&[&direction_tag(&a.language), &direction_tag(&b.language)])?;
    Ok((bpe, vocab))
}

pub fn encode_corpus(corpus: &SentenceCorpus, bpe: &BpeModel, vocab: &Vocab) -> Vec<Vec<u32>> {
    bpe.apply_corpus(corpus).iter().map(|s| vocab.encode(s)).collect()
}

/// Restricts the shared vocabulary to the tokens occurring in `ids` and
/// returns the corpus re-expressed in that sub-vocabulary.
pub fn restrict_to_corpus(ids: &[Vec<u32>], shared: &Vocab) -> (Vocab, Vec<Vec<u32>>) {
    let present: Vec<&str> = {
        let mut seen = vec![false; shared.len()];
        for s in ids {
            for &i in s {
                seen[i as usize] = true;
            }
        }
        shared
            .regular_ids()
            .filter(|&i| seen[i as usize])
            .filter_map(|i| shared.token(i))
            .collect()
    };
    let sub = shared.restrict(present);
    let remapped = ids
        .iter()
        .map(|s| {
            s.iter()
                .map(|&i| shared.token(i).and_then(|t| sub.id(t)).unwrap_or(crate::subword::Special::Unk.id()))
                .collect()
        })
        .collect();
    (sub, remapped)
}

/// Trains embeddings for one language over the tokens it actually uses.
pub fn language_embeddings(
    ids: &[Vec<u32>],
    shared: &Vocab,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingMatrix, SgnsReport)> {
    let (sub, remapped) = restrict_to_corpus(ids, shared);
    train_sgns(&remapped, &sub, cfg)
}

#[derive(Debug, Clone, Default)]
pub struct LexiconInduction {
    pub seed_pairs: usize,
    pub forward: SelfLearnReport,
    pub backward: SelfLearnReport,
    pub extraction: Vec<ExtractionReport>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InductionConfig {
    pub self_learn: SelfLearnConfig,
    pub k: usize,
    /// Grow identical-string seeds with anchor-signature matches first.
    pub expand_seeds: bool,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            self_learn: SelfLearnConfig::default(),
            k: crate::lexicon::DEFAULT_K,
            expand_seeds: true,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("lexicon k must be positive".into()));
        }
        self.self_learn.validate()
    }
}

/// Both spaces normalized and mapped onto each other.
#[derive(Debug, Clone)]
pub struct AlignedSpaces {
    pub xa: EmbeddingMatrix,
    pub xb: EmbeddingMatrix,
    pub map_ab: OrthogonalMap,
    pub map_ba: OrthogonalMap,
    pub retrieval: Retrieval,
    pub info: LexiconInduction,
}

impl AlignedSpaces {
    /// Extracts top-`k` lexicons in both directions, in shared-vocabulary ids.
    pub fn lexicons(&self, k: usize, shared: &Vocab, names: (&str, &str)) -> Result<(TranslationLexicon, TranslationLexicon, Vec<ExtractionReport>)> {
        let dir_ab = format!("{}-{}", names.0, names.1);
        let dir_ba = format!("{}-{}", names.1, names.0);
        let (lab, rab) = extract_lexicon(&self.map_ab.apply(&self.xa)?, &self.xb, k, self.retrieval, &dir_ab)?;
        let (lba, rba) = extract_lexicon(&self.map_ba.apply(&self.xb)?, &self.xa, k, self.retrieval, &dir_ba)?;
        let lab = lab.remap(self.xa.vocab(), self.xb.vocab(), shared)?;
        let lba = lba.remap(self.xb.vocab(), self.xa.vocab(), shared)?;
        Ok((lab, lba, vec![rab, rba]))
    }
}

/// Seeds (identical strings unless given), optional seed expansion, then
/// self-learning in both directions.
pub fn align_spaces(emb_a: &EmbeddingMatrix, emb_b: &EmbeddingMatrix, seeds: Option<SeedPairs>, cfg: &InductionConfig) -> Result<AlignedSpaces> {
    cfg.validate()?;
    let xa = normalize_embeddings(emb_a)?;
    let xb = normalize_embeddings(emb_b)?;
    let seeds = match seeds {
        Some(s) => s,
        None => seed_pairs_identical(xa.vocab(), xb.vocab())?,
    };
    let seeds = if cfg.expand_seeds {
        expand_seeds(&xa, &xb, &seeds, cfg.self_learn.retrieval)?
    } else {
        seeds
    };
    let reversed = SeedPairs::new(seeds.pairs().iter().map(|&(s, t)| (t, s)).collect())?;
    let (map_ab, forward) = self_learn(&xa, &xb, &seeds, &cfg.self_learn)?;
    let (map_ba, backward) = self_learn(&xb, &xa, &reversed, &cfg.self_learn)?;
    let info = LexiconInduction { seed_pairs: seeds.len(), forward, backward, extraction: Vec::new() };
    Ok(AlignedSpaces { xa, xb, map_ab, map_ba, retrieval: cfg.self_learn.retrieval, info })
}

/// Maps each space onto the other and extracts lexicons in both
/// directions, re-expressed in the shared vocabulary.
pub fn induce_lexicons(
    emb_a: &EmbeddingMatrix,
    emb_b: &EmbeddingMatrix,
    shared: &Vocab,
    seeds: Option<SeedPairs>,
    cfg: &InductionConfig,
    names: (&str, &str),
) -> Result<(TranslationLexicon, TranslationLexicon, LexiconInduction)> {
    let aligned = align_spaces(emb_a, emb_b, seeds, cfg)?;
    let (lab, lba, extraction) = aligned.lexicons(cfg.k, shared, names)?;
    let mut info = aligned.info;
    info.extraction = extraction;
    Ok((lab, lba, info))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub subword: SubwordConfig,
    pub sgns: SgnsConfig,
    pub induction: InductionConfig,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            subword: SubwordConfig::default(),
            sgns: SgnsConfig { dim: 32, ..SgnsConfig::default() },
            induction: InductionConfig::default(),
        }
    }
}

/// Aligned sentence pairs as (language a, language b) id sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelIds {
    pub a: Vec<Vec<u32>>,
    pub b: Vec<Vec<u32>>,
}

impl ParallelIds {
    /// Sources and targets for direction `a → b` (`reverse == false`) or `b → a`.
    pub fn direction(&self, reverse: bool) -> (&[Vec<u32>], &[Vec<u32>]) {
        if reverse {
            (&self.b, &self.a)
        } else {
            (&self.a, &self.b)
        }
    }
}

/// Every pre-model artifact of a language pair.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub names: (String, String),
    pub bpe: BpeModel,
    pub vocab: Vocab,
    /// Direction tags of language a and b.
    pub tags: [u32; 2],
    pub mono: [Vec<Vec<u32>>; 2],
    pub train: ParallelIds,
    pub valid: ParallelIds,
    pub test: ParallelIds,
    pub aligned: AlignedSpaces,
    /// Lexicons a→b and b→a at the configured k, in shared-vocabulary ids.
    pub lexicons: [TranslationLexicon; 2],
}

impl Prepared {
    pub fn random_ids(&self) -> std::ops::Range<u32> {
        let r = self.vocab.regular_ids();
        r.start..r.end
    }

    /// Text of `ids` in the shared vocabulary, BPE joined.
    pub fn text(&self, ids: &[u32]) -> String {
        crate::subword::detokenize(&self.vocab.decode_regular(ids))
    }
}

fn encode_pairs(pairs: &[(String, String)], bpe: &BpeModel, vocab: &Vocab, names: (&str, &str)) -> Result<ParallelIds> {
    let (a, b): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    let ca = SentenceCorpus::new(names.0, a)?;
    let cb = SentenceCorpus::new(names.1, b)?;
    Ok(ParallelIds { a: encode_corpus(&ca, bpe, vocab), b: encode_corpus(&cb, bpe, vocab) })
}

/// Shared subwords, encoded corpora, per-language embeddings, alignment and
/// lexicons in both directions.
pub fn prepare_pair(
    mono_a: &SentenceCorpus,
    mono_b: &SentenceCorpus,
    train: &[(String, String)],
    valid: &[(String, String)],
    test: &[(String, String)],
    cfg: &PrepareConfig,
) -> Result<Prepared> {
    let names = (mono_a.language.as_str(), mono_b.language.as_str());
    let (bpe, vocab) = shared_subwords(mono_a, mono_b, &cfg.subword)?;
    let tag = |l: &str| vocab.id(&direction_tag(l)).expect("tags were added");
    let tags = [tag(names.0), tag(names.1)];
    let mono = [encode_corpus(mono_a, &bpe, &vocab), encode_corpus(mono_b, &bpe, &vocab)];
    let (ea, _) = language_embeddings(&mono[0], &vocab, &cfg.sgns)?;
    let (eb, _) = language_embeddings(&mono[1], &vocab, &SgnsConfig { seed: crate::rng::derive(cfg.sgns.seed, 1), ..cfg.sgns.clone() })?;
    let aligned = align_spaces(&ea, &eb, None, &cfg.induction)?;
    let (lab, lba, extraction) = aligned.lexicons(cfg.induction.k, &vocab, names)?;
    let mut aligned = aligned;
    aligned.info.extraction = extraction;
    Ok(Prepared {
        names: (names.0.to_string(), names.1.to_string()),
        train: encode_pairs(train, &bpe, &vocab, names)?,
        valid: encode_pairs(valid, &bpe, &vocab, names)?,
        test: encode_pairs(test, &bpe, &vocab, names)?,
        bpe,
        vocab,
        tags,
        mono,
        aligned,
        lexicons: [lab, lba],
    })
}
