//! Plain-text corpora: one sentence per line, UTF-8, LF-terminated.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Default cap on sentence length (in subword tokens) for training sets.
pub const DEFAULT_MAX_TOKENS: usize = 175;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceCorpus {
    pub language: String,
    sentences: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub dropped_blank: usize,
    pub warnings: Vec<String>,
}

impl SentenceCorpus {
    /// Builds a corpus from in-memory sentences. Blank sentences are dropped
    /// and surrounding whitespace is trimmed; embedded newlines are rejected.
    pub fn new(language: impl Into<String>, sentences: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut kept = Vec::new();
        for s in sentences {
            if s.contains('\n') {
                return Err(Error::InvalidArgument("sentence contains a newline".into()));
            }
            let t = s.trim();
            if !t.is_empty() {
                kept.push(t.to_string());
            }
        }
        Ok(Self {
            language: language.into(),
            sentences: kept,
        })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a corpus file. Blank lines are dropped and counted.
pub fn load_corpus(path: impl AsRef<Path>, language: &str) -> Result<(SentenceCorpus, LoadReport)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    let mut report = LoadReport::default();
    let mut sentences = Vec::new();
    for line in text.split('\n') {
        report.lines += 1;
        let t = line.trim();
        if t.is_empty() {
            report.dropped_blank += 1;
        } else {
            sentences.push(t.to_string());
        }
    }
    // the empty string after a terminating LF is not a line
    if text.ends_with('\n') || text.is_empty() {
        report.lines -= 1;
        report.dropped_blank -= 1;
    }
    if sentences.is_empty() {
        let msg = format!("{}: corpus is empty", path.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    if report.dropped_blank > 0 {
        log::info!("{}: dropped {} blank lines", path.display(), report.dropped_blank);
    }
    Ok((
        SentenceCorpus {
            language: language.to_string(),
            sentences,
        },
        report,
    ))
}

/// Which input corpus a balanced-sample sentence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    A,
    B,
}

#[derive(Debug, Clone)]
pub struct BalancedSample {
    pub corpus: SentenceCorpus,
    pub origins: Vec<Origin>,
    /// Set when the corresponding corpus had fewer than n/2 sentences and
    /// was sampled with replacement.
    pub with_replacement_a: bool,
    pub with_replacement_b: bool,
}

/// Draws n/2 sentences from each corpus, without replacement when possible.
pub fn sample_balanced(a: &SentenceCorpus, b: &SentenceCorpus, n: usize, seed: u64) -> Result<BalancedSample> {
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sample size {n} must be even")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("balanced sampling needs two non-empty corpora".into()));
    }
    let half = n / 2;
    let mut rng = rng::stream(seed, rng::label("sample_balanced"));
    let draw = |c: &SentenceCorpus, rng: &mut rng::Rng| -> (Vec<String>, bool) {
        if c.len() >= half {
            let idx = index::sample(rng, c.len(), half);
            (idx.iter().map(|i| c.sentences[i].clone()).collect(), false)
        } else {
            let picks = (0..half).map(|_| c.sentences[rng.gen_range(0..c.len())].clone()).collect();
            (picks, true)
        }
    };
    let (sa, rep_a) = draw(a, &mut rng);
    let (sb, rep_b) = draw(b, &mut rng);
    let mut tagged: Vec<(String, Origin)> = sa
        .into_iter()
        .map(|s| (s, Origin::A))
        .chain(sb.into_iter().map(|s| (s, Origin::B)))
        .collect();
    tagged.shuffle(&mut rng);
    let (sentences, origins) = tagged.into_iter().unzip();
    Ok(BalancedSample {
        corpus: SentenceCorpus {
            language: format!("{}+{}", a.language, b.language),
            sentences,
        },
        origins,
        with_replacement_a: rep_a,
        with_replacement_b: rep_b,
    })
}

/// Drops (never truncates) token sequences longer than `max_tokens`.
/// Returns the kept sequences with their original indices, and the drop count.
pub fn drop_long<T: Clone>(seqs: &[Vec<T>], max_tokens: usize) -> (Vec<(usize, Vec<T>)>, usize) {
    let kept: Vec<_> = seqs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() <= max_tokens)
        .map(|(i, s)| (i, s.clone()))
        .collect();
    let dropped = seqs.len() - kept.len();
    (kept, dropped)
}
