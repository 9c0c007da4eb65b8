//! Probabilistic translation lexicons: for each source token, its top-k
//! target neighbors in the shared space with normalized similarity scores
//! used as translation probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::mapping::{regular_rows, score_table, Retrieval};
use crate::subword::Vocab;

pub const DEFAULT_K: usize = 3;
/// Floor added to every shifted score before normalizing.
pub const SCORE_EPSILON: f64 = 1e-6;

/// Shifts scores by `min(0, smallest)`, adds [`SCORE_EPSILON`], and divides
/// by the sum.
pub fn normalize_scores(sims: &[f64]) -> Vec<f64> {
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let shifted: Vec<f64> = sims.iter().map(|s| s - lo + SCORE_EPSILON).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|s| s / total).collect()
}

/// Source id → `(target id, probability)` entries, sorted by descending
/// probability then ascending target id.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationLexicon {
    pub k: usize,
    pub direction: String,
    entries: BTreeMap<u32, Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionReport {
    pub sources: usize,
    /// Source tokens whose candidates all scored `<= 0` before shifting.
    pub low_confidence: Vec<u32>,
}

fn sort_entry(entry: &mut [(u32, f64)]) {
    entry.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

fn check_entry(entry: &[(u32, f64)]) -> std::result::Result<(), String> {
    if entry.is_empty() {
        return Err("empty entry".into());
    }
    if entry.iter().any(|(_, p)| !(*p > 0.0)) {
        return Err("probabilities must be positive".into());
    }
    let sum: f64 = entry.iter().map(|(_, p)| p).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

impl TranslationLexicon {
    pub fn new(k: usize, direction: impl Into<String>, entries: BTreeMap<u32, Vec<(u32, f64)>>) -> Result<Self> {
        let mut entries = entries;
        for (src, e) in entries.iter_mut() {
            if e.len() > k {
                return Err(Error::InvalidArgument(format!("entry for {src} has {} > k={k} targets", e.len())));
            }
            check_entry(e).map_err(|m| Error::InvalidArgument(format!("entry for {src}: {m}")))?;
            sort_entry(e);
        }
        Ok(Self {
            k,
            direction: direction.into(),
            entries,
        })
    }

    pub fn get(&self, src: u32) -> Option<&[(u32, f64)]> {
        self.entries.get(&src).map(Vec::as_slice)
    }

    pub fn top1(&self, src: u32) -> Option<u32> {
        self.get(src).map(|e| e[0].0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, &[(u32, f64)])> {
        self.entries.iter().map(|(s, e)| (*s, e.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only the `k` best entries of each source, renormalized.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::InvalidArgument(format!("cannot truncate a k={} lexicon to {k}", self.k)));
        }
        let entries = self
            .entries
            .iter()
            .map(|(s, e)| {
                let kept = &e[..k.min(e.len())];
                let total: f64 = kept.iter().map(|(_, p)| p).sum();
                (*s, kept.iter().map(|(t, p)| (*t, p / total)).collect())
            })
            .collect();
        Self::new(k, self.direction.clone(), entries)
    }

    /// Re-expresses ids through token strings in another vocabulary.
    /// Entries whose source or targets are missing there are dropped;
    /// partially missing targets are renormalized.
    pub fn remap(&self, src_vocab: &Vocab, tgt_vocab: &Vocab, into: &Vocab) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (s, e) in &self.entries {
            let Some(ns) = src_vocab.token(*s).and_then(|t| into.id(t)) else { continue };
            let kept: Vec<(u32, f64)> = e
                .iter()
                .filter_map(|(t, p)| tgt_vocab.token(*t).and_then(|tok| into.id(tok)).map(|nt| (nt, *p)))
                .collect();
            let total: f64 = kept.iter().map(|(_, p)| p).sum();
            if !kept.is_empty() {
                entries.insert(ns, kept.into_iter().map(|(t, p)| (t, p / total)).collect());
            }
        }
        Self::new(self.k, self.direction.clone(), entries)
    }

    /// `src<TAB>tgt<TAB>prob` lines grouped by source, best first.
    pub fn save(&self, path: impl AsRef<Path>, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (s, e) in &self.entries {
            let st = src_vocab.token(*s).ok_or(Error::IdOutOfRange { id: *s, size: src_vocab.len() })?;
            for (t, p) in e {
                let tt = tgt_vocab.token(*t).ok_or(Error::IdOutOfRange { id: *t, size: tgt_vocab.len() })?;
                out.push_str(&format!("{st}\t{tt}\t{p:.6}\n"));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads the TSV format. Probabilities are renormalized after the
    /// 6-decimal rounding of the file, but a group whose stored values do
    /// not sum to 1 (within rounding) is rejected.
    pub fn load(
        path: impl AsRef<Path>,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        direction: impl Into<String>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
        let mut first_line: BTreeMap<u32, usize> = BTreeMap::new();
        let mut k = 1;
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, i + 1, format!("expected 3 fields, found {}", fields.len())));
            }
            let s = src_vocab
                .id(fields[0])
                .ok_or_else(|| Error::parse(path, i + 1, format!("unknown source token `{}`", fields[0])))?;
            let t = tgt_vocab
                .id(fields[1])
                .ok_or_else(|| Error::parse(path, i + 1, format!("unknown target token `{}`", fields[1])))?;
            let p: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "probability is not a number"))?;
            first_line.entry(s).or_insert(i + 1);
            let e = entries.entry(s).or_default();
            e.push((t, p));
            k = k.max(e.len());
        }
        for (s, e) in entries.iter_mut() {
            let sum: f64 = e.iter().map(|(_, p)| p).sum();
            let tolerance = 1e-6 + 5e-7 * e.len() as f64;
            if (sum - 1.0).abs() > tolerance || e.iter().any(|(_, p)| !(*p > 0.0)) {
                return Err(Error::parse(path, first_line[s], format!("probabilities sum to {sum}, not 1")));
            }
            e.iter_mut().for_each(|(_, p)| *p /= sum);
        }
        Self::new(k, direction, entries)
    }
}

/// For each regular source token, its `k` best regular targets by
/// `retrieval` score (CSLS by default), with probabilities from
/// [`normalize_scores`].
pub fn extract_lexicon(
    mapped_x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
    retrieval: Retrieval,
    direction: &str,
) -> Result<(TranslationLexicon, ExtractionReport)> {
    let tgt_rows = regular_rows(y);
    if k == 0 || k > tgt_rows.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be between 1 and the target vocabulary size {}",
            tgt_rows.len()
        )));
    }
    let table = score_table(mapped_x, y, regular_rows(mapped_x), tgt_rows, retrieval, 1)?;
    let mut entries = BTreeMap::new();
    let mut report = ExtractionReport::default();
    for (i, &src) in table.src_rows.iter().enumerate() {
        let row = table.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(table.tgt_rows[a].cmp(&table.tgt_rows[b])));
        order.truncate(k);
        let sims: Vec<f64> = order.iter().map(|&j| row[j]).collect();
        if sims.iter().all(|&s| s <= 0.0) {
            report.low_confidence.push(src);
        }
        let probs = normalize_scores(&sims);
        entries.insert(src, order.iter().map(|&j| table.tgt_rows[j]).zip(probs).collect());
    }
    report.sources = entries.len();
    Ok((TranslationLexicon::new(k, direction, entries)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::testing::rotated_pair;
    use crate::mapping::{csls_scores, normalize_embeddings, self_learn, SeedPairs, SelfLearnConfig};
    use crate::subword::NUM_SPECIALS;

    #[test]
    fn normalization_examples() {
        let p = normalize_scores(&[0.9, 0.9, 0.9]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(normalize_scores(&[0.7]), vec![1.0]);
        let p = normalize_scores(&[0.8, 0.4]);
        // (0.8 + ε) / (1.2 + 2ε)
        let expected = (0.8 + 1e-6) / (1.2 + 2e-6);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.666).abs() < 1e-3 && (p[1] - 0.333).abs() < 1e-3);
        let p = normalize_scores(&[-0.2, -0.2]);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn normalized_scores_are_monotone_distributions(v in proptest::collection::vec(-2.0f64..2.0, 1..12)) {
            let p = normalize_scores(&v);
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..v.len() {
                proptest::prop_assert!(p[i] > 0.0);
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        proptest::prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn self_retrieval_with_k1() {
        let (x, _, _) = rotated_pair(40, 8, 1);
        let (lex, _) = extract_lexicon(&x, &x, 1, Retrieval::default(), "a-a").unwrap();
        assert_eq!(lex.len(), 40);
        for (s, e) in lex.entries() {
            assert_eq!(e, &[(s, 1.0)]);
        }
    }

    /// Exhaustive top-k over the full CSLS table restricted to regular rows.
    #[test]
    fn matches_brute_force_top_k() {
        let (x, y, _) = rotated_pair(15, 6, 2);
        let noisy = normalize_embeddings(&x.with_data(
            x.data().iter().enumerate().map(|(i, v)| v + 0.3 * ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect(),
        ))
        .unwrap();
        let k = 3;
        let (lex, _) = extract_lexicon(&noisy, &y, k, Retrieval::Csls(4), "a-b").unwrap();
        // oracle: regular sub-matrices, brute-force CSLS, full sort
        let regular = |e: &EmbeddingMatrix| -> Vec<Vec<f64>> {
            e.vocab().regular_ids().map(|i| e.row(i as usize).to_vec()).collect()
        };
        let (xs, ys) = (regular(&noisy), regular(&y));
        let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let knn = |v: &[f64], space: &[Vec<f64>]| {
            let mut s: Vec<f64> = space.iter().map(|w| dotp(v, w)).collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[..4].iter().sum::<f64>() / 4.0
        };
        for (i, xv) in xs.iter().enumerate() {
            let mut scored: Vec<(u32, f64)> = ys
                .iter()
                .enumerate()
                .map(|(j, yv)| ((j + NUM_SPECIALS) as u32, 2.0 * dotp(xv, yv) - knn(xv, &ys) - knn(yv, &xs)))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected_ids: Vec<u32> = scored[..k].iter().map(|p| p.0).collect();
            let probs = normalize_scores(&scored[..k].iter().map(|p| p.1).collect::<Vec<_>>());
            let got = lex.get((i + NUM_SPECIALS) as u32).unwrap();
            assert_eq!(got.iter().map(|e| e.0).collect::<Vec<_>>(), expected_ids);
            for (g, p) in got.iter().zip(probs) {
                assert!((g.1 - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn k_larger_than_target_vocab_rejected() {
        let (x, y, _) = rotated_pair(10, 4, 3);
        assert!(extract_lexicon(&x, &y, 11, Retrieval::Cosine, "a-b").is_err());
    }

    #[test]
    fn rotation_pair_top1_is_ground_truth() {
        let (x, y, _) = rotated_pair(500, 16, 4);
        let seed = SeedPairs::new(x.vocab().regular_ids().step_by(10).map(|i| (i, i)).collect()).unwrap();
        let (w, _) = self_learn(&x, &y, &seed, &SelfLearnConfig::default()).unwrap();
        let (lex, _) = extract_lexicon(&w.apply(&x).unwrap(), &y, 3, Retrieval::default(), "a-b").unwrap();
        let hits = lex.entries().filter(|(s, _)| lex.top1(*s) == Some(*s)).count();
        assert!(hits as f64 / lex.len() as f64 >= 0.99);
        for (_, e) in lex.entries() {
            assert!((e.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(e.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn extraction_commutes_with_source_permutation() {
        let (x, y, _) = rotated_pair(30, 6, 5);
        let n = x.rows();
        // reverse the regular rows
        let perm: Vec<usize> = (0..n).map(|i| if i < NUM_SPECIALS { i } else { n - 1 - (i - NUM_SPECIALS) }).collect();
        let tokens: Vec<String> = perm[NUM_SPECIALS..].iter().map(|&i| x.vocab().tokens()[i].clone()).collect();
        let pv = Vocab::from_regular(tokens);
        let data: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let px = EmbeddingMatrix::new(pv, x.dim(), data).unwrap();
        let (a, _) = extract_lexicon(&x, &y, 2, Retrieval::default(), "a-b").unwrap();
        let (b, _) = extract_lexicon(&px, &y, 2, Retrieval::default(), "a-b").unwrap();
        for (s, e) in a.entries() {
            let moved = perm.iter().position(|&i| i == s as usize).unwrap() as u32;
            let f = b.get(moved).unwrap();
            assert_eq!(e.iter().map(|p| p.0).collect::<Vec<_>>(), f.iter().map(|p| p.0).collect::<Vec<_>>());
            for (p, q) in e.iter().zip(f) {
                assert!((p.1 - q.1).abs() < 1e-9);
            }
        }
        // the full-table variant also exists for callers that want every row
        assert_eq!(csls_scores(&x, &y, 3).unwrap().scores.len(), n * n);
    }

    fn vocabs() -> (Vocab, Vocab) {
        (
            Vocab::from_regular(["haus", "katze"].map(String::from)),
            Vocab::from_regular(["house", "home", "cat"].map(String::from)),
        )
    }

    #[test]
    fn tsv_round_trip() {
        let (a, b) = vocabs();
        let mut entries = BTreeMap::new();
        entries.insert(5, vec![(5, 0.7), (6, 0.3)]);
        entries.insert(6, vec![(7, 1.0)]);
        let lex = TranslationLexicon::new(2, "a-b", entries).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        lex.save(f.path(), &a, &b).unwrap();
        let back = TranslationLexicon::load(f.path(), &a, &b, "a-b").unwrap();
        assert_eq!(back.len(), 2);
        for ((s1, e1), (s2, e2)) in lex.entries().zip(back.entries()) {
            assert_eq!(s1, s2);
            for (p, q) in e1.iter().zip(e2) {
                assert_eq!(p.0, q.0);
                assert!((p.1 - q.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hand_written_fixture() {
        let (a, b) = vocabs();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "haus\thouse\t0.600000\nhaus\thome\t0.400000\n").unwrap();
        let lex = TranslationLexicon::load(f.path(), &a, &b, "a-b").unwrap();
        assert_eq!(lex.get(5).unwrap(), &[(5, 0.6), (6, 0.4)]);
        assert_eq!(lex.k, 2);
    }

    #[test]
    fn malformed_lines_rejected() {
        let (a, b) = vocabs();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "haus\thouse\t1.0\nkatze\tcat\n").unwrap();
        assert!(matches!(
            TranslationLexicon::load(f.path(), &a, &b, "a-b"),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(f.path(), "haus\thouse\t0.5\nhaus\thome\t0.2\n").unwrap();
        assert!(matches!(TranslationLexicon::load(f.path(), &a, &b, "a-b"), Err(Error::Parse { line: 1, .. })));
    }
}
