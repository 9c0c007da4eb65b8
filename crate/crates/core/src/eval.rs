//! BLEU, perplexity, lexicon precision, the k-sweep experiment and
//! code-switched test-set construction.

use std::collections::HashMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::corrupt::{corrupt_csp, CorruptionPolicy, TrainingExample};
use crate::error::{Error, Result};
use crate::lexicon::TranslationLexicon;
use crate::model::{beam_search, forward, greedy, Checkpoint, ModelConfig};
use crate::pipeline::AlignedSpaces;
use crate::rng;
use crate::subword::{detokenize, Vocab};
use crate::train::{bt_max_len, PretrainTask, SupervisedTask, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuStats {
    pub bleu: f64,
    /// Modified n-gram precisions, n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams(toks: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on lowercased whitespace tokens, clipped counts, no
/// smoothing: any zero precision gives 0. An order with no hypothesis
/// n-grams at all has nothing unmatched and counts as precision 1.
pub fn bleu_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU over an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = h.as_ref().to_lowercase();
        let r = r.as_ref().to_lowercase();
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let hc = ngrams(&ht, n);
            let rc = ngrams(&rt, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let precisions = std::array::from_fn(|i| if total[i] == 0 { 1.0 } else { matched[i] as f64 / total[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p: &f64| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuStats { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    bleu_stats(hyps, refs).map(|s| s.bleu)
}

/// Regular tokens of `ids` as detokenized text.
pub fn ids_to_text(ids: &[u32], vocab: &Vocab) -> String {
    detokenize(&vocab.decode_regular(ids))
}

/// Translates every source (the tag is prepended here) with length cap
/// [`bt_max_len`].
pub fn translate_all(ckpt: &Checkpoint, srcs: &[Vec<u32>], tag: u32, beam: usize) -> Result<Vec<Vec<u32>>> {
    let net = ckpt.net();
    let max = ckpt.config.max_positions;
    let inputs: Vec<Vec<u32>> = srcs.iter().map(|s| std::iter::once(tag).chain(s.iter().copied()).collect()).collect();
    let lens: Vec<usize> = srcs.iter().map(|s| bt_max_len(s.len()).min(max)).collect();
    if beam == 1 {
        let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let mut out = Vec::with_capacity(refs.len());
        for (c, l) in refs.chunks(64).zip(lens.chunks(64)) {
            out.extend(greedy(&net, c, l)?);
        }
        Ok(out)
    } else {
        inputs.iter().zip(&lens).map(|(s, &l)| beam_search(&net, s, beam, l)).collect()
    }
}

/// BLEU of `ckpt` translating `srcs` against reference texts.
pub fn evaluate_bleu(ckpt: &Checkpoint, srcs: &[Vec<u32>], refs: &[String], tag: u32, vocab: &Vocab, beam: usize) -> Result<f64> {
    let hyps: Vec<String> = translate_all(ckpt, srcs, tag, beam)?.iter().map(|h| ids_to_text(h, vocab)).collect();
    bleu(&hyps, refs)
}

/// One validation language for [`perplexity`].
pub struct PplSet<'a> {
    pub sentences: &'a [Vec<u32>],
    /// Lexicon from this language into the other.
    pub lexicon: &'a TranslationLexicon,
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PplReport {
    /// Per-language perplexities, in input order.
    pub per_language: Vec<f64>,
    /// Mean of the per-language values.
    pub mean: f64,
    pub tokens: usize,
    pub policy: CorruptionPolicy,
    pub seed: u64,
}

fn content_seed(seed: u64, s: &[u32]) -> u64 {
    let h = s.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &t| (h ^ t as u64).wrapping_mul(0x100_0000_01b3));
    rng::derive(seed, h)
}

/// `exp` of the mean masked-token NLL under the training corruption, drawn
/// per sentence from (seed, sentence content) so sentence order is irrelevant.
pub fn perplexity(ckpt: &Checkpoint, sets: &[PplSet], random_ids: &std::ops::Range<u32>, policy: &CorruptionPolicy, seed: u64) -> Result<PplReport> {
    if sets.is_empty() || sets.iter().any(|s| s.sentences.iter().all(|x| x.len() < 2)) {
        return Err(Error::Empty("perplexity needs sentences of at least two tokens".into()));
    }
    let net = ckpt.net();
    let mut per_language = Vec::with_capacity(sets.len());
    let mut tokens = 0;
    for set in sets {
        let examples: Vec<TrainingExample> = set
            .sentences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| {
                let mut r = rng::rng_from(content_seed(seed, s));
                corrupt_csp(s, set.lexicon, policy, random_ids, &mut r).map(|c| c.example.with_encoder_prefix(set.tag))
            })
            .collect::<Result<_>>()?;
        let (mut nll, mut n) = (0.0, 0);
        for chunk in examples.chunks(64) {
            let f = forward(&net, chunk, None)?;
            nll += f.nll_sum;
            n += f.tokens();
        }
        tokens += n;
        per_language.push((nll / n as f64).exp());
    }
    let mean = per_language.iter().sum::<f64>() / per_language.len() as f64;
    Ok(PplReport { per_language, mean, tokens, policy: *policy, seed })
}

/// Fraction of gold source tokens whose gold translation is among their
/// first `k` lexicon entries.
pub fn lexicon_precision(lex: &TranslationLexicon, gold: &[(u32, u32)], k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold dictionary".into()));
    }
    if k == 0 || k > lex.k {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={}", lex.k)));
    }
    let mut by_src: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(s, t) in gold {
        by_src.entry(s).or_default().push(t);
    }
    let hits = by_src
        .iter()
        .filter(|(s, ts)| lex.get(**s).is_some_and(|e| e.iter().take(k).any(|(t, _)| ts.contains(t))))
        .count();
    Ok(hits as f64 / by_src.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n_sentences: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(metric: &str, value: f64, n_sentences: usize, config: serde_json::Value) -> Result<Self> {
        let ok = value.is_finite()
            && match metric {
                "bleu" => (0.0..=100.0).contains(&value),
                "ppl" => value >= 1.0,
                _ => true,
            };
        if !ok {
            return Err(Error::Numerical(format!("{metric} value {value} out of range")));
        }
        Ok(Self { metric: metric.into(), value, n_sentences, config })
    }

    /// Appends the report as one JSON line.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

pub const DEFAULT_K_VALUES: [usize; 5] = [1, 3, 5, 7, 9];

/// Everything a k-sweep run holds fixed.
pub struct SweepSetup<'a> {
    pub aligned: &'a AlignedSpaces,
    pub vocab: &'a Vocab,
    pub names: (&'a str, &'a str),
    pub tags: [u32; 2],
    pub mono: [&'a [Vec<u32>]; 2],
    pub valid_mono: [&'a [Vec<u32>]; 2],
    /// Parallel training pairs (language a, language b).
    pub train: (&'a [Vec<u32>], &'a [Vec<u32>]),
    /// Test sources (ids) and references (text) for both directions.
    pub test: (&'a [Vec<u32>], &'a [Vec<u32>]),
    pub model: ModelConfig,
    pub model_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub ppl_a: f64,
    pub ppl_b: f64,
    pub bleu_ab: f64,
    pub bleu_ba: f64,
    pub seed: u64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
}

/// For each k: extract lexicons at k, pre-train, report PPL on the
/// validation sets, fine-tune each direction and report test BLEU. Seeds
/// and budgets are identical across rows.
pub fn k_sweep(setup: &SweepSetup, k_values: &[usize]) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Empty("k values".into()));
    }
    let regular = setup.vocab.regular_ids();
    let random_ids = regular.start..regular.end;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let (lab, lba, _) = setup.aligned.lexicons(k, setup.vocab, setup.names)?;
        let mut task = PretrainTask::new(
            [setup.mono[0].to_vec(), setup.mono[1].to_vec()],
            [lab.clone(), lba.clone()],
            setup.tags,
            random_ids.clone(),
            setup.pretrain.policy,
            k,
            setup.pretrain.batch_tokens,
            setup.pretrain.seed,
        )?;
        let mut t = Trainer::new(Checkpoint::init(setup.model.clone(), setup.model_seed)?, setup.pretrain.clone())?;
        t.run(&mut task, setup.pretrain.max_steps, |_, _| Ok(ControlFlow::Continue(())))?;
        let pre = t.ckpt;
        let ppl = perplexity(
            &pre,
            &[
                PplSet { sentences: setup.valid_mono[0], lexicon: &lab, tag: setup.tags[0] },
                PplSet { sentences: setup.valid_mono[1], lexicon: &lba, tag: setup.tags[1] },
            ],
            &random_ids,
            &setup.pretrain.policy,
            setup.pretrain.seed,
        )?;
        let mut bleus = [0.0; 2];
        for dir in 0..2 {
            let (src, tgt) = if dir == 0 { (setup.train.0, setup.train.1) } else { (setup.train.1, setup.train.0) };
            let (tsrc, tref) = if dir == 0 { (setup.test.0, setup.test.1) } else { (setup.test.1, setup.test.0) };
            let tag = setup.tags[1 - dir];
            let mut ft = Trainer::new(
                Checkpoint { step: 0, ..pre.clone() },
                setup.finetune.clone(),
            )?;
            let mut task = SupervisedTask::new(src.to_vec(), tgt.to_vec(), tag, setup.finetune.batch_tokens, setup.finetune.seed)?;
            ft.run(&mut task, setup.finetune.max_steps, |_, _| Ok(ControlFlow::Continue(())))?;
            let refs: Vec<String> = tref.iter().map(|r| ids_to_text(r, setup.vocab)).collect();
            bleus[dir] = evaluate_bleu(&ft.ckpt, tsrc, &refs, tag, setup.vocab, 1)?;
        }
        log::info!("k={k}: ppl {:.3}/{:.3} bleu {:.2}/{:.2}", ppl.per_language[0], ppl.per_language[1], bleus[0], bleus[1]);
        rows.push(SweepRow {
            k,
            ppl_a: ppl.per_language[0],
            ppl_b: ppl.per_language[1],
            bleu_ab: bleus[0],
            bleu_ba: bleus[1],
            seed: setup.pretrain.seed,
            pretrain_steps: setup.pretrain.max_steps,
            finetune_steps: setup.finetune.max_steps,
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "k\tppl_a\tppl_b\tbleu_ab\tbleu_ba\tseed\tpretrain_steps\tfinetune_steps";

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{}\t{}\t{}\n",
            r.k, r.ppl_a, r.ppl_b, r.bleu_ab, r.bleu_ba, r.seed, r.pretrain_steps, r.finetune_steps
        ));
    }
    s
}

/// One replacement made while building a code-switched test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Replacement {
    pub sentence: usize,
    pub position: usize,
    pub original: u32,
    pub replacement: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CodeSwitchSet {
    pub sentences: Vec<Vec<u32>>,
    pub manifest: Vec<Replacement>,
    /// Sentences left untouched because fewer than the required tokens had
    /// lexicon entries.
    pub flagged: Vec<usize>,
}

/// Replaces `round(ratio·m)` random tokens of each sentence by their top-1
/// lexicon entries. Positions are drawn among tokens that have an entry; a
/// sentence without enough of them passes through unchanged and is flagged.
pub fn build_codeswitch_testset(sentences: &[Vec<u32>], lex: &TranslationLexicon, ratio: f64, seed: u64) -> Result<CodeSwitchSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("replace ratio {ratio} outside [0, 1]")));
    }
    let mut out = CodeSwitchSet { sentences: Vec::with_capacity(sentences.len()), manifest: Vec::new(), flagged: Vec::new() };
    for (i, s) in sentences.iter().enumerate() {
        let want = (ratio * s.len() as f64).round() as usize;
        let mut candidates: Vec<usize> = (0..s.len()).filter(|&p| lex.top1(s[p]).is_some()).collect();
        if want == 0 {
            out.sentences.push(s.clone());
            continue;
        }
        if candidates.len() < want {
            out.flagged.push(i);
            out.sentences.push(s.clone());
            continue;
        }
        let mut r = rng::rng_from(rng::derive(seed, i as u64));
        candidates.shuffle(&mut r);
        let mut chosen = candidates[..want].to_vec();
        chosen.sort_unstable();
        let mut cs = s.clone();
        for p in chosen {
            let rep = lex.top1(s[p]).expect("candidate has an entry");
            cs[p] = rep;
            out.manifest.push(Replacement { sentence: i, position: p, original: s[p], replacement: rep });
        }
        out.sentences.push(cs);
    }
    Ok(out)
}
