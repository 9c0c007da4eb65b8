use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{BatchSchedule, Task, TaskBatch};
use crate::corrupt::{corrupt_csp, CorruptionPolicy, CorruptionStats, TrainingExample};
use crate::error::{Error, Result};
use crate::lexicon::TranslationLexicon;
use crate::model::{beam_search, greedy, Checkpoint};
use crate::rng::{self, Rng};

fn lengths(s: &[Vec<u32>]) -> Vec<usize> {
    s.iter().map(|x| x.len() + 1).collect()
}

/// Code-switching pre-training over two languages, alternating per step.
/// Language `l` is corrupted with `lexicons[l]` (its tokens to the other
/// language) and its direction tag leads the encoder input.
pub struct PretrainTask {
    corpora: [Vec<Vec<u32>>; 2],
    lexicons: [TranslationLexicon; 2],
    tags: [u32; 2],
    random_ids: Range<u32>,
    policy: CorruptionPolicy,
    schedules: [BatchSchedule; 2],
    seed: u64,
    stats: [(u64, CorruptionStats); 2],
    /// Sentences shorter than two tokens, which cannot carry a span.
    pub skipped_short: usize,
}

impl PretrainTask {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        corpora: [Vec<Vec<u32>>; 2],
        lexicons: [TranslationLexicon; 2],
        tags: [u32; 2],
        random_ids: Range<u32>,
        policy: CorruptionPolicy,
        k: usize,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        policy.validate()?;
        let mut skipped_short = 0;
        let corpora = corpora.map(|c| {
            let before = c.len();
            let kept: Vec<Vec<u32>> = c.into_iter().filter(|s| s.len() >= 2).collect();
            skipped_short += before - kept.len();
            kept
        });
        let schedules = [
            BatchSchedule::new(lengths(&corpora[0]), batch_tokens, rng::derive(seed, 10))?,
            BatchSchedule::new(lengths(&corpora[1]), batch_tokens, rng::derive(seed, 11))?,
        ];
        let [la, lb] = lexicons;
        let lexicons = [la.truncated(k.min(la.k))?, lb.truncated(k.min(lb.k))?];
        Ok(Self {
            corpora,
            lexicons,
            tags,
            random_ids,
            policy,
            schedules,
            seed,
            stats: Default::default(),
            skipped_short,
        })
    }
}

impl Task for PretrainTask {
    fn batch(&mut self, step: u64, _: &Checkpoint) -> Result<TaskBatch> {
        let lang = ((step - 1) % 2) as usize;
        let (epoch, idx) = self.schedules[lang].get((step - 1) / 2);
        let epoch_seed = rng::derive(self.seed ^ rng::label("corrupt"), (epoch << 1) | lang as u64);
        let mut examples = Vec::with_capacity(idx.len());
        let (stats_epoch, stats) = &mut self.stats[lang];
        let epoch_stats = if *stats_epoch != epoch {
            *stats_epoch = epoch;
            Some(std::mem::take(stats))
        } else {
            None
        };
        for i in idx {
            let mut r = rng::rng_from(rng::derive(epoch_seed, i as u64));
            let c = corrupt_csp(&self.corpora[lang][i], &self.lexicons[lang], &self.policy, &self.random_ids, &mut r)?;
            stats.add(&c);
            examples.push(c.example.with_encoder_prefix(self.tags[lang]));
        }
        Ok(TaskBatch { examples, kind: if lang == 0 { "csp.a" } else { "csp.b" }, epoch_stats })
    }
}

/// Teacher-forced translation of aligned pairs; the target tag leads the source.
pub struct SupervisedTask {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    tag: u32,
    schedule: BatchSchedule,
}

impl SupervisedTask {
    pub fn new(src: Vec<Vec<u32>>, tgt: Vec<Vec<u32>>, tag: u32, batch_tokens: usize, seed: u64) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::InvalidArgument(format!(
                "parallel corpus misaligned: {} source vs {} target sentences",
                src.len(),
                tgt.len()
            )));
        }
        let lens = src.iter().zip(&tgt).map(|(s, t)| s.len().max(t.len()) + 1).collect();
        let schedule = BatchSchedule::new(lens, batch_tokens, rng::derive(seed, 20))?;
        Ok(Self { pairs: src.into_iter().zip(tgt).collect(), tag, schedule })
    }
}

impl Task for SupervisedTask {
    fn batch(&mut self, step: u64, _: &Checkpoint) -> Result<TaskBatch> {
        let (_, idx) = self.schedule.get(step - 1);
        let examples = idx
            .into_iter()
            .map(|i| TrainingExample::translation(self.pairs[i].0.clone(), &self.pairs[i].1).with_encoder_prefix(self.tag))
            .collect();
        Ok(TaskBatch { examples, kind: "supervised", epoch_stats: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub drop: f64,
    pub shuffle_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { drop: 0.1, shuffle_window: 3 }
    }
}

/// Denoising-autoencoder noise: each token dropped with `drop` (at least one
/// survives), then a local shuffle that moves no token `shuffle_window` or
/// more places.
pub fn noise(x: &[u32], cfg: &NoiseConfig, r: &mut Rng) -> Vec<u32> {
    let mut kept: Vec<u32> = x.iter().copied().filter(|_| r.gen::<f64>() >= cfg.drop).collect();
    if kept.is_empty() && !x.is_empty() {
        kept.push(x[r.gen_range(0..x.len())]);
    }
    if cfg.shuffle_window > 1 {
        let w = cfg.shuffle_window as f64;
        let mut keyed: Vec<(f64, u32)> = kept.iter().enumerate().map(|(i, &t)| (i as f64 + r.gen::<f64>() * w, t)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        kept = keyed.into_iter().map(|(_, t)| t).collect();
    }
    kept
}

/// Length cap for generated back-translations.
pub fn bt_max_len(src_len: usize) -> usize {
    src_len + src_len / 2 + 3
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackTranslation {
    /// (generated source, original target).
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    /// Indices of target sentences that produced no usable source.
    pub skipped: Vec<usize>,
}

/// Translates each target sentence with `ckpt` (prefixed by `src_tag`, the
/// tag of the language to generate) and pairs the output with its input.
pub fn backtranslate(ckpt: &Checkpoint, targets: &[Vec<u32>], src_tag: u32, beam: usize) -> Result<BackTranslation> {
    let net = ckpt.net();
    let inputs: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| std::iter::once(src_tag).chain(t.iter().copied()).collect())
        .collect();
    let max = ckpt.config.max_positions;
    let lens: Vec<usize> = targets.iter().map(|t| bt_max_len(t.len()).min(max)).collect();
    let outputs = if beam == 1 {
        let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let mut out = Vec::with_capacity(refs.len());
        for (chunk, l) in refs.chunks(64).zip(lens.chunks(64)) {
            out.extend(greedy(&net, chunk, l)?);
        }
        out
    } else {
        inputs
            .iter()
            .zip(&lens)
            .map(|(s, &l)| beam_search(&net, s, beam, l))
            .collect::<Result<Vec<_>>>()?
    };
    let mut bt = BackTranslation { pairs: Vec::with_capacity(targets.len()), skipped: Vec::new() };
    for (i, (src, tgt)) in outputs.into_iter().zip(targets).enumerate() {
        if src.is_empty() || src.len() + 1 > max {
            bt.skipped.push(i);
        } else {
            bt.pairs.push((src, tgt.clone()));
        }
    }
    Ok(bt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnsupervisedConfig {
    pub noise: NoiseConfig,
    pub backtranslation: bool,
}

impl Default for UnsupervisedConfig {
    fn default() -> Self {
        Self { noise: NoiseConfig::default(), backtranslation: true }
    }
}

/// Round-robin over (denoise a, back-translate into a, denoise b,
/// back-translate into b); without back-translation the two denoising
/// batches alternate.
pub struct UnsupervisedTask {
    mono: [Vec<Vec<u32>>; 2],
    tags: [u32; 2],
    schedules: [BatchSchedule; 2],
    cfg: UnsupervisedConfig,
    seed: u64,
    /// Back-translated sentences dropped because generation produced nothing.
    pub bt_skipped: usize,
}

impl UnsupervisedTask {
    pub fn new(mono: [Vec<Vec<u32>>; 2], tags: [u32; 2], cfg: UnsupervisedConfig, batch_tokens: usize, seed: u64) -> Result<Self> {
        let schedules = [
            BatchSchedule::new(mono[0].iter().map(|s| bt_max_len(s.len()) + 1).collect(), batch_tokens, rng::derive(seed, 30))?,
            BatchSchedule::new(mono[1].iter().map(|s| bt_max_len(s.len()) + 1).collect(), batch_tokens, rng::derive(seed, 31))?,
        ];
        Ok(Self { mono, tags, schedules, cfg, seed, bt_skipped: 0 })
    }
}

impl Task for UnsupervisedTask {
    fn batch(&mut self, step: u64, ckpt: &Checkpoint) -> Result<TaskBatch> {
        let s = step - 1;
        let (lang, bt, n) = if self.cfg.backtranslation {
            ((s / 2 % 2) as usize, s % 2 == 1, s / 4 * 2 + s % 2)
        } else {
            ((s % 2) as usize, false, s / 2)
        };
        let (_, idx) = self.schedules[lang].get(n);
        let tag = self.tags[lang];
        let sents: Vec<Vec<u32>> = idx.iter().map(|&i| self.mono[lang][i].clone()).collect();
        if bt {
            let out = backtranslate(ckpt, &sents, self.tags[1 - lang], 1)?;
            self.bt_skipped += out.skipped.len();
            let examples = out
                .pairs
                .into_iter()
                .map(|(src, t)| TrainingExample::translation(src, &t).with_encoder_prefix(tag))
                .collect::<Vec<_>>();
            if examples.is_empty() {
                return Err(Error::Empty(format!("back-translation produced nothing at step {step}")));
            }
            return Ok(TaskBatch { examples, kind: if lang == 0 { "bt.a" } else { "bt.b" }, epoch_stats: None });
        }
        let mut r = rng::rng_from(rng::derive(self.seed ^ rng::label("noise"), step));
        let examples = sents
            .iter()
            .map(|x| TrainingExample::translation(noise(x, &self.cfg.noise, &mut r), x).with_encoder_prefix(tag))
            .collect();
        Ok(TaskBatch { examples, kind: if lang == 0 { "dae.a" } else { "dae.b" }, epoch_stats: None })
    }
}
