//! Training-example construction: a contiguous span of the sentence is
//! replaced in the encoder input (by sampled translations, or by MASK for
//! the baseline) and the decoder is laid out to reconstruct exactly that
//! span.
//!
//! Positions are 1-based in spans, matching `x = (x1 .. xm)`; vectors are
//! 0-based, so position `t` lives at index `t - 1`.

use std::ops::Range;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::lexicon::TranslationLexicon;
use crate::rng::{self, Rng};
use crate::subword::{Special, Vocab};

/// Encoder ids, teacher-forced decoder inputs, targets and loss mask.
///
/// For corruption examples all four vectors have the sentence length `m`.
/// Translation examples (see [`TrainingExample::translation`]) have a
/// decoder side of target length + 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub enc_ids: Vec<u32>,
    pub dec_in: Vec<u32>,
    pub tgt: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Inclusive 1-based decoder span carrying the loss.
    pub span: (usize, usize),
}

impl TrainingExample {
    /// Full-sentence teacher forcing: `dec_in = BOS y1 .. yn`,
    /// `tgt = y1 .. yn EOS`, every position in the loss.
    pub fn translation(src: Vec<u32>, tgt: &[u32]) -> Self {
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(Special::Bos.id());
        dec_in.extend_from_slice(tgt);
        let mut t = tgt.to_vec();
        t.push(Special::Eos.id());
        let n = t.len();
        Self {
            enc_ids: src,
            dec_in,
            tgt: t,
            loss_mask: vec![true; n],
            span: (1, n),
        }
    }

    /// Prepends a token (a direction tag) to the encoder input.
    pub fn with_encoder_prefix(mut self, tag: u32) -> Self {
        self.enc_ids.insert(0, tag);
        self
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Writes the original sentence back over the span of the encoder input.
    pub fn reconstruct(&self) -> Vec<u32> {
        let mut x = self.enc_ids.clone();
        for t in self.span.0..=self.span.1 {
            x[t - 1] = self.tgt[t - 1];
        }
        x
    }

    /// Four aligned rows (enc / dec_in / tgt / mask) for inspection.
    pub fn dump(&self, vocab: &Vocab) -> String {
        let show = |id: u32| -> String {
            if id == Special::Pad.id() {
                "-".to_string()
            } else {
                vocab.token(id).unwrap_or("?").to_string()
            }
        };
        let n = self.enc_ids.len().max(self.dec_in.len());
        let cell = |v: &[u32], i: usize| v.get(i).map(|&id| show(id)).unwrap_or_default();
        let rows: [(&str, Vec<String>); 4] = [
            ("enc", (0..n).map(|i| cell(&self.enc_ids, i)).collect()),
            ("dec_in", (0..n).map(|i| cell(&self.dec_in, i)).collect()),
            ("tgt", (0..n).map(|i| cell(&self.tgt, i)).collect()),
            (
                "mask",
                (0..n)
                    .map(|i| match self.loss_mask.get(i) {
                        Some(true) => "1".into(),
                        Some(false) => "0".into(),
                        None => String::new(),
                    })
                    .collect(),
            ),
        ];
        let widths: Vec<usize> = (0..n)
            .map(|i| rows.iter().map(|(_, r)| r[i].chars().count()).max().unwrap_or(1))
            .collect();
        let mut out = String::new();
        for (name, cells) in &rows {
            out.push_str(&format!("{name:<7}"));
            for (c, w) in cells.iter().zip(&widths) {
                out.push_str(&format!(" {c:<w$}"));
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
        out
    }
}

/// Span ratio and the per-token replacement split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionPolicy {
    pub ratio: f64,
    /// Probability of the primary replacement: a sampled translation, or
    /// MASK for the baseline.
    pub p_replace: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            p_replace: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
        }
    }
}

impl CorruptionPolicy {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_replace, self.p_random, self.p_keep];
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("span ratio {} outside (0, 1]", self.ratio)));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("replacement probabilities {probs:?} must sum to 1")));
        }
        Ok(())
    }
}

/// What happened to one span token in the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Translated,
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrupted {
    pub example: TrainingExample,
    /// One action per span position, in order.
    pub actions: Vec<Action>,
    /// Span positions whose token had no lexicon entry.
    pub missing_lexicon: usize,
}

/// Aggregate corruption counts, reported per training epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CorruptionStats {
    pub sentences: usize,
    pub sentence_tokens: usize,
    pub span_tokens: usize,
    pub translated: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
    pub missing_lexicon: usize,
}

impl CorruptionStats {
    pub fn add(&mut self, c: &Corrupted) {
        self.sentences += 1;
        self.sentence_tokens += c.example.enc_ids.len();
        self.span_tokens += c.actions.len();
        self.missing_lexicon += c.missing_lexicon;
        for a in &c.actions {
            match a {
                Action::Translated => self.translated += 1,
                Action::Masked => self.masked += 1,
                Action::Random => self.random += 1,
                Action::Kept => self.kept += 1,
            }
        }
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_lexicon as f64 / self.span_tokens.max(1) as f64
    }
}

/// Span of `L = max(1, round(ratio·m))` tokens starting uniformly in `1..=m−L+1`.
pub fn choose_span(m: usize, ratio: f64, rng: &mut Rng) -> Result<(usize, usize)> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("sentence of length {m} is too short to corrupt")));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("span ratio {ratio} outside (0, 1]")));
    }
    let len = ((ratio * m as f64).round() as usize).clamp(1, m);
    let u = rng.gen_range(1..=m - len + 1);
    Ok((u, u + len - 1))
}

/// Multinomial draw over the token's translation entries.
pub fn sample_translation(token: u32, lexicon: &TranslationLexicon, rng: &mut Rng) -> Result<u32> {
    let entry = lexicon.get(token).ok_or(Error::MissingLexiconEntry(token))?;
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for &(t, p) in entry {
        acc += p;
        if r < acc {
            return Ok(t);
        }
    }
    Ok(entry[entry.len() - 1].0)
}

fn layout(x: &[u32], enc_ids: Vec<u32>, span: (usize, usize)) -> TrainingExample {
    let m = x.len();
    let pad = Special::Pad.id();
    let mut dec_in = vec![pad; m];
    let mut tgt = vec![pad; m];
    let mut loss_mask = vec![false; m];
    for t in span.0..=span.1 {
        dec_in[t - 1] = if t == 1 { Special::Bos.id() } else { x[t - 2] };
        tgt[t - 1] = x[t - 1];
        loss_mask[t - 1] = true;
    }
    TrainingExample {
        enc_ids,
        dec_in,
        tgt,
        loss_mask,
        span,
    }
}

/// Source of uniformly random replacement tokens.
pub fn random_token(ids: &Range<u32>, rng: &mut Rng) -> u32 {
    rng.gen_range(ids.clone())
}

/// Code-switching corruption: each span token is replaced by a translation
/// sampled from `lexicon` (`p_replace`), by a random regular token
/// (`p_random`), or kept (`p_keep`). Tokens without a lexicon entry split
/// the translation mass between random and keep in proportion.
pub fn corrupt_csp(
    x: &[u32],
    lexicon: &TranslationLexicon,
    policy: &CorruptionPolicy,
    random_ids: &Range<u32>,
    rng: &mut Rng,
) -> Result<Corrupted> {
    policy.validate()?;
    let span = choose_span(x.len(), policy.ratio, rng)?;
    let mut enc = x.to_vec();
    let mut actions = Vec::with_capacity(span.1 - span.0 + 1);
    let mut missing = 0;
    for t in span.0..=span.1 {
        let tok = x[t - 1];
        let r: f64 = rng.gen();
        let action = if lexicon.get(tok).is_some() {
            if r < policy.p_replace {
                Action::Translated
            } else if r < policy.p_replace + policy.p_random {
                Action::Random
            } else {
                Action::Kept
            }
        } else {
            missing += 1;
            let rest = policy.p_random + policy.p_keep;
            if rest > 0.0 && r < policy.p_random / rest {
                Action::Random
            } else {
                Action::Kept
            }
        };
        enc[t - 1] = match action {
            Action::Translated => sample_translation(tok, lexicon, rng)?,
            Action::Random => random_token(random_ids, rng),
            _ => tok,
        };
        actions.push(action);
    }
    Ok(Corrupted {
        example: layout(x, enc, span),
        actions,
        missing_lexicon: missing,
    })
}

/// Masked baseline: same span and decoder layout, span tokens become MASK
/// (`p_replace`), a random token (`p_random`) or stay (`p_keep`).
pub fn corrupt_mass(
    x: &[u32],
    policy: &CorruptionPolicy,
    random_ids: &Range<u32>,
    rng: &mut Rng,
) -> Result<Corrupted> {
    policy.validate()?;
    let span = choose_span(x.len(), policy.ratio, rng)?;
    let mut enc = x.to_vec();
    let mut actions = Vec::with_capacity(span.1 - span.0 + 1);
    for t in span.0..=span.1 {
        let r: f64 = rng.gen();
        let action = if r < policy.p_replace {
            Action::Masked
        } else if r < policy.p_replace + policy.p_random {
            Action::Random
        } else {
            Action::Kept
        };
        match action {
            Action::Masked => enc[t - 1] = Special::Mask.id(),
            Action::Random => enc[t - 1] = random_token(random_ids, rng),
            _ => {}
        }
        actions.push(action);
    }
    Ok(Corrupted {
        example: layout(x, enc, span),
        actions,
        missing_lexicon: 0,
    })
}

/// Seed for sentence `index` under `seed`; corruption of a sentence depends
/// on nothing else.
pub fn sentence_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, index as u64)
}

/// Corrupts every sentence independently with per-sentence seeds.
pub fn corrupt_corpus(
    sentences: &[Vec<u32>],
    lexicon: &TranslationLexicon,
    policy: &CorruptionPolicy,
    random_ids: &Range<u32>,
    seed: u64,
) -> Result<(Vec<Corrupted>, CorruptionStats)> {
    let mut stats = CorruptionStats::default();
    let out = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::rng_from(sentence_seed(seed, i));
            let c = corrupt_csp(s, lexicon, policy, random_ids, &mut rng)?;
            stats.add(&c);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    const RANDOM: Range<u32> = 5..205;

    /// Source tokens 5..105 translate to 105..205 (three candidates each).
    fn lexicon() -> TranslationLexicon {
        let mut e = BTreeMap::new();
        for s in 5..105u32 {
            e.insert(s, vec![(s + 100, 0.6), (s + 101, 0.3), (s + 102, 0.1)]);
        }
        TranslationLexicon::new(3, "a-b", e).unwrap()
    }

    #[test]
    fn figure_layout_span_three_to_six() {
        let x: Vec<u32> = (11..18).collect();
        // search a seed that picks the span 3..6 of a 7-token sentence
        let c = (0..1000)
            .map(|s| corrupt_csp(&x, &lexicon(), &CorruptionPolicy::default(), &RANDOM, &mut rng::rng_from(s)).unwrap())
            .find(|c| c.example.span == (3, 6))
            .unwrap();
        let e = &c.example;
        assert_eq!(e.enc_ids[..2], x[..2]);
        assert_eq!(e.enc_ids[6], x[6]);
        assert_eq!(e.tgt, vec![0, 0, 13, 14, 15, 16, 0]);
        assert_eq!(e.dec_in, vec![0, 0, 12, 13, 14, 15, 0]);
        assert_eq!(e.loss_mask, vec![false, false, true, true, true, true, false]);
        for (t, a) in (3..=6).zip(&c.actions) {
            if *a == Action::Translated {
                assert!((x[t - 1] + 100..x[t - 1] + 103).contains(&e.enc_ids[t - 1]));
            }
        }
    }

    #[test]
    fn span_lengths() {
        let mut r = rng::rng_from(0);
        let (u, v) = choose_span(7, 0.5, &mut r).unwrap();
        assert_eq!(v - u + 1, 4);
        for _ in 0..50 {
            let (u, v) = choose_span(2, 0.5, &mut r).unwrap();
            assert_eq!(u, v);
            assert!(u == 1 || u == 2);
        }
        assert!(choose_span(1, 0.5, &mut r).is_err());
    }

    #[test]
    fn span_starts_are_uniform() {
        let mut r = rng::rng_from(1);
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            let (u, v) = choose_span(10, 0.5, &mut r).unwrap();
            assert_eq!(v - u + 1, 5);
            counts[u - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn deterministic_entry_always_sampled() {
        let mut e = BTreeMap::new();
        e.insert(7, vec![(9, 1.0)]);
        let lex = TranslationLexicon::new(1, "x", e).unwrap();
        let mut r = rng::rng_from(2);
        assert!((0..100).all(|_| sample_translation(7, &lex, &mut r).unwrap() == 9));
        assert!(matches!(sample_translation(8, &lex, &mut r), Err(Error::MissingLexiconEntry(8))));
    }

    #[test]
    fn keep_all_policy_leaves_encoder_untouched() {
        let x: Vec<u32> = (20..32).collect();
        let policy = CorruptionPolicy {
            ratio: 0.5,
            p_replace: 0.0,
            p_random: 0.0,
            p_keep: 1.0,
        };
        let c = corrupt_csp(&x, &lexicon(), &policy, &RANDOM, &mut rng::rng_from(3)).unwrap();
        assert_eq!(c.example.enc_ids, x);
        assert_eq!(c.example.masked_count(), 6);
    }

    #[test]
    fn invalid_policy_rejected() {
        let bad = CorruptionPolicy {
            p_keep: 0.3,
            ..CorruptionPolicy::default()
        };
        assert!(corrupt_csp(&[5, 6, 7], &lexicon(), &bad, &RANDOM, &mut rng::rng_from(0)).is_err());
    }

    #[test]
    fn missing_entries_split_between_random_and_keep() {
        let x = vec![150u32; 40]; // no lexicon entries
        let mut stats = CorruptionStats::default();
        for s in 0..500 {
            let c = corrupt_csp(&x, &lexicon(), &CorruptionPolicy::default(), &RANDOM, &mut rng::rng_from(s)).unwrap();
            stats.add(&c);
        }
        assert_eq!(stats.translated, 0);
        assert_eq!(stats.missing_lexicon, stats.span_tokens);
        let frac = stats.random as f64 / stats.span_tokens as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn mask_baseline_shares_layout() {
        let x: Vec<u32> = (30..41).collect();
        let all_mask = CorruptionPolicy {
            p_replace: 1.0,
            p_random: 0.0,
            p_keep: 0.0,
            ..CorruptionPolicy::default()
        };
        let m = corrupt_mass(&x, &all_mask, &RANDOM, &mut rng::rng_from(4)).unwrap();
        let (u, v) = m.example.span;
        assert!(m.example.enc_ids[u - 1..v].iter().all(|&t| t == Special::Mask.id()));
        let c = corrupt_csp(&x, &lexicon(), &CorruptionPolicy::default(), &RANDOM, &mut rng::rng_from(4)).unwrap();
        assert_eq!(c.example.span, m.example.span);
        assert_eq!(c.example.tgt, m.example.tgt);
        assert_eq!(c.example.dec_in, m.example.dec_in);
        assert_eq!(c.example.loss_mask, m.example.loss_mask);
    }

    #[test]
    fn corpus_corruption_is_batch_independent() {
        let sents: Vec<Vec<u32>> = (0..20).map(|i| (5..(10 + i as u32 % 7)).collect()).collect();
        let (all, _) = corrupt_corpus(&sents, &lexicon(), &CorruptionPolicy::default(), &RANDOM, 99).unwrap();
        let (alone, _) = corrupt_corpus(&sents[..1], &lexicon(), &CorruptionPolicy::default(), &RANDOM, 99).unwrap();
        assert_eq!(all[0], alone[0]);
        let mut r = rng::rng_from(sentence_seed(99, 13));
        let c13 = corrupt_csp(&sents[13], &lexicon(), &CorruptionPolicy::default(), &RANDOM, &mut r).unwrap();
        assert_eq!(all[13], c13);
    }

    #[test]
    fn dump_has_four_aligned_rows() {
        let vocab = Vocab::from_regular((0..10).map(|i| format!("w{i}")));
        let x: Vec<u32> = (5..12).collect();
        let c = corrupt_mass(&x, &CorruptionPolicy::default(), &(5..15), &mut rng::rng_from(5)).unwrap();
        let d = c.example.dump(&vocab);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("enc") && lines[3].starts_with("mask"));
    }

    #[test]
    fn translation_example_layout() {
        let e = TrainingExample::translation(vec![7, 8], &[9, 10, 11]);
        assert_eq!(e.dec_in, vec![Special::Bos.id(), 9, 10, 11]);
        assert_eq!(e.tgt, vec![9, 10, 11, Special::Eos.id()]);
        assert_eq!(e.masked_count(), 4);
        assert_eq!(e.with_encoder_prefix(3).enc_ids, vec![3, 7, 8]);
    }

    proptest::proptest! {
        #[test]
        fn examples_reconstruct_and_count(
            x in proptest::collection::vec(5u32..205, 2..40),
            ratio in 0.05f64..=1.0,
            seed in 0u64..10_000,
        ) {
            let policy = CorruptionPolicy { ratio, ..CorruptionPolicy::default() };
            let c = corrupt_csp(&x, &lexicon(), &policy, &RANDOM, &mut rng::rng_from(seed)).unwrap();
            let e = &c.example;
            proptest::prop_assert_eq!(e.reconstruct(), x.clone());
            let expected = ((ratio * x.len() as f64).round() as usize).max(1);
            proptest::prop_assert_eq!(e.masked_count(), expected);
            proptest::prop_assert_eq!(e.span.1 - e.span.0 + 1, expected);
            proptest::prop_assert!(1 <= e.span.0 && e.span.1 <= x.len());
            for (i, &m) in e.loss_mask.iter().enumerate() {
                let t = i + 1;
                if m {
                    proptest::prop_assert_eq!(e.tgt[i], x[i]);
                    let prev = if t == 1 { Special::Bos.id() } else { x[i - 1] };
                    proptest::prop_assert_eq!(e.dec_in[i], prev);
                } else {
                    proptest::prop_assert_eq!(e.tgt[i], Special::Pad.id());
                    proptest::prop_assert_eq!(e.dec_in[i], Special::Pad.id());
                    proptest::prop_assert_eq!(e.enc_ids[i], x[i]);
                }
            }
        }
    }
}
