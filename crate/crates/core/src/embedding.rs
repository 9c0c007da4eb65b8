//! Monolingual token embeddings trained with skip-gram negative sampling,
//! plus the plain-text `V d` / `token v1 .. vd` file format.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::subword::Vocab;

/// A `V x d` row-major matrix bound to a vocabulary (row `i` is token id `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: Vocab,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocab, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab.len() * dim {
            return Err(Error::Shape {
                expected: format!("{}x{}", vocab.len(), dim),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value in row `{}`",
                vocab.token((pos / dim) as u32).unwrap_or("?")
            )));
        }
        Ok(Self { vocab, dim, data })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vocab.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            vocab: self.vocab.clone(),
            dim: self.dim,
            data,
        }
    }

    /// Writes the text format with shortest round-trip decimal representations.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{} {}\n", self.rows(), self.dim);
        for (i, tok) in self.vocab.tokens().iter().enumerate() {
            out.push_str(tok);
            for v in self.row(i) {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a file whose rows cover exactly the tokens of `vocab` (any order).
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_embedding_text(path)?;
        if raw.tokens.len() != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "{}: header lists {} rows, vocabulary has {}",
                path.display(),
                raw.tokens.len(),
                vocab.len()
            )));
        }
        let d = raw.dim;
        let mut data = vec![f64::NAN; vocab.len() * d];
        let mut seen = vec![false; vocab.len()];
        for (r, tok) in raw.tokens.iter().enumerate() {
            let id = vocab
                .id(tok)
                .ok_or_else(|| Error::VocabMismatch(format!("token `{tok}` not in vocabulary")))? as usize;
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::parse(path, r + 2, format!("duplicate row for `{tok}`")));
            }
            data[id * d..(id + 1) * d].copy_from_slice(&raw.values[r * d..(r + 1) * d]);
        }
        Self::new(vocab.clone(), d, data)
    }

    /// Loads a file and rebuilds the vocabulary from its row order.
    pub fn load_with_vocab(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_embedding_text(path)?;
        let vocab = Vocab::from_regular(
            raw.tokens
                .iter()
                .filter(|t| !t.starts_with('<') || !t.ends_with('>'))
                .cloned(),
        );
        Self::load(path, &vocab)
    }
}

/// Parsed contents of an embedding text file.
#[derive(Debug, Clone)]
pub struct RawEmbeddings {
    pub tokens: Vec<String>,
    pub dim: usize,
    pub values: Vec<f64>,
}

pub fn read_embedding_text(path: impl AsRef<Path>) -> Result<RawEmbeddings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, 1, "missing `V d` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|x| x.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, 1, "header must be `V d`"))?;
    let [rows, dim] = dims[..] else {
        return Err(Error::parse(path, 1, "header must be `V d`"));
    };
    let mut tokens = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows * dim);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split(' ');
        let tok = parts.next().unwrap_or_default();
        let row: Vec<f64> = parts
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, i + 2, "non-numeric value"))?;
        if row.len() != dim {
            return Err(Error::Shape {
                expected: format!("dimension {dim} (line {})", i + 2),
                found: format!("dimension {}", row.len()),
            });
        }
        tokens.push(tok.to_string());
        values.extend(row);
    }
    if tokens.len() != rows {
        return Err(Error::Shape {
            expected: format!("{rows} rows"),
            found: format!("{} rows", tokens.len()),
        });
    }
    Ok(RawEmbeddings { tokens, dim, values })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 2".into()));
        }
        if self.window == 0 || self.negatives == 0 {
            return Err(Error::InvalidArgument("window and negatives must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SgnsReport {
    /// Mean per-pair loss (positive term plus negatives) for each epoch.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Trains input vectors with skip-gram negative sampling, single-threaded
/// and fully deterministic given the seed.
///
/// `corpus` holds token ids of `vocab`. Negatives are drawn from the
/// unigram distribution raised to 0.75; the learning rate decays linearly
/// to `lr * 1e-4`. Each center token uses a window size drawn uniformly
/// from `1..=window`.
pub fn train_sgns(corpus: &[Vec<u32>], vocab: &Vocab, cfg: &SgnsConfig) -> Result<(EmbeddingMatrix, SgnsReport)> {
    cfg.validate()?;
    let v = vocab.len();
    let d = cfg.dim;
    for sent in corpus {
        if let Some(&id) = sent.iter().find(|&&id| id as usize >= v) {
            return Err(Error::VocabMismatch(format!("corpus id {id} outside vocabulary of size {v}")));
        }
    }
    let mut rng = rng::stream(cfg.seed, rng::label("sgns"));
    let mut input: Vec<f64> = (0..v * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0f64; v * d];
    let mut report = SgnsReport::default();
    if cfg.epochs == 0 {
        return Ok((EmbeddingMatrix::new(vocab.clone(), d, input)?, report));
    }

    let mut counts = vec![0u64; v];
    for sent in corpus {
        for &id in sent {
            if vocab.is_regular(id) {
                counts[id as usize] += 1;
            }
        }
    }
    let mut cumulative = Vec::with_capacity(v);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    if acc == 0.0 {
        return Err(Error::Empty("corpus has no regular tokens".into()));
    }
    let draw_negative = |rng: &mut rng::Rng| -> usize {
        let r = rng.gen::<f64>() * acc;
        cumulative.partition_point(|&c| c <= r).min(v - 1)
    };

    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    let total_work = (total_tokens * cfg.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut grad_in = vec![0.0f64; d];
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for sent in corpus {
            for (i, &center) in sent.iter().enumerate() {
                processed += 1;
                if !vocab.is_regular(center) {
                    continue;
                }
                let lr = cfg.lr * (1.0 - processed as f64 / total_work).max(1e-4);
                let b = rng.gen_range(1..=cfg.window.max(1));
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(sent.len() - 1);
                for (j, &ctx) in sent.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i || !vocab.is_regular(ctx) {
                        continue;
                    }
                    let c_in = center as usize * d;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx as usize, 1.0)
                        } else {
                            let t = draw_negative(&mut rng);
                            if t == ctx as usize {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let t_out = target * d;
                        let dot: f64 = (0..d).map(|x| input[c_in + x] * output[t_out + x]).sum();
                        loss_sum -= if label > 0.0 { log_sigmoid(dot) } else { log_sigmoid(-dot) };
                        let g = (label - sigmoid(dot)) * lr;
                        for x in 0..d {
                            grad_in[x] += g * output[t_out + x];
                            output[t_out + x] += g * input[c_in + x];
                        }
                    }
                    for x in 0..d {
                        input[c_in + x] += grad_in[x];
                    }
                    pairs += 1;
                }
            }
        }
        report.pairs_per_epoch = pairs;
        report.epoch_losses.push(loss_sum / pairs.max(1) as f64);
    }
    Ok((EmbeddingMatrix::new(vocab.clone(), d, input)?, report))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    /// Tokens 5 (A) and 6 (B) always appear together; 7 (C) lives in
    /// sentences that never contain A. Filler tokens 8.. pad both kinds.
    fn cooccurrence_corpus() -> (Vocab, Vec<Vec<u32>>) {
        let vocab = Vocab::from_regular((0..20).map(|i| format!("t{i}")));
        let mut rng = rng::rng_from(5);
        let mut corpus = Vec::new();
        for i in 0..600 {
            let mut s: Vec<u32> = (0..6).map(|_| rng.gen_range(8..16)).collect();
            if i % 2 == 0 {
                s.extend([5, 6]);
            } else {
                s.extend((0..2).map(|_| rng.gen_range(16..25)));
                s.push(7);
            }
            s.shuffle(&mut rng);
            corpus.push(s);
        }
        (vocab, corpus)
    }

    fn cfg() -> SgnsConfig {
        SgnsConfig {
            dim: 16,
            window: 2,
            epochs: 5,
            ..SgnsConfig::default()
        }
    }

    #[test]
    fn cooccurring_tokens_end_up_closer() {
        let (vocab, corpus) = cooccurrence_corpus();
        let (e, _) = train_sgns(&corpus, &vocab, &cfg()).unwrap();
        assert!(cosine(e.row(5), e.row(6)) > cosine(e.row(5), e.row(7)));
    }

    #[test]
    fn loss_does_not_increase_over_first_epochs() {
        let (vocab, corpus) = cooccurrence_corpus();
        let (_, report) = train_sgns(&corpus, &vocab, &cfg()).unwrap();
        assert!(report.epoch_losses.windows(2).take(2).all(|w| w[1] <= w[0]), "{:?}", report.epoch_losses);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (vocab, corpus) = cooccurrence_corpus();
        let c0 = SgnsConfig { epochs: 0, ..cfg() };
        let (a, _) = train_sgns(&corpus, &vocab, &c0).unwrap();
        let (b, _) = train_sgns(&[], &vocab, &c0).unwrap();
        assert_eq!(a, b);
        let (trained, _) = train_sgns(&corpus, &vocab, &cfg()).unwrap();
        assert_ne!(a, trained);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (vocab, corpus) = cooccurrence_corpus();
        let (a, _) = train_sgns(&corpus, &vocab, &cfg()).unwrap();
        let (b, _) = train_sgns(&corpus, &vocab, &cfg()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn out_of_vocab_ids_rejected() {
        let vocab = Vocab::from_regular(["a".to_string()]);
        assert!(matches!(train_sgns(&[vec![5, 99]], &vocab, &cfg()), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let (vocab, corpus) = cooccurrence_corpus();
        let (e, _) = train_sgns(&corpus, &vocab, &SgnsConfig { epochs: 1, ..cfg() }).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        e.save(f.path()).unwrap();
        let back = EmbeddingMatrix::load(f.path(), &vocab).unwrap();
        let max_diff = e.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff <= 1e-6);
        assert_eq!(EmbeddingMatrix::load_with_vocab(f.path()).unwrap(), back);
    }

    #[test]
    fn wrong_dimension_is_reported() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "2 3\na 1 2 3\nb 1 2\n").unwrap();
        match read_embedding_text(f.path()) {
            Err(Error::Shape { expected, found }) => {
                assert!(expected.contains('3') && found.contains('2'), "{expected} / {found}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_file_parses_to_expected_shape() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "2 3\na 1 2 3\nb 4 5 6.5\n").unwrap();
        let raw = read_embedding_text(f.path()).unwrap();
        assert_eq!(raw.tokens, vec!["a", "b"]);
        assert_eq!(raw.dim, 3);
        assert_eq!(raw.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
    }
}
