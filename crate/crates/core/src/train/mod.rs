//! Optimisation loop and the training tasks built on it: CSP pre-training,
//! supervised fine-tuning, back-translation and unsupervised fine-tuning.

mod batch;
mod optim;
mod tasks;

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use batch::BatchSchedule;
pub use optim::{learning_rate, Adam, AdamConfig, OPTIMIZER_MAGIC};
pub use tasks::{
    backtranslate, bt_max_len, noise, BackTranslation, NoiseConfig, PretrainTask, SupervisedTask, UnsupervisedConfig,
    UnsupervisedTask,
};

use crate::corrupt::{CorruptionPolicy, CorruptionStats, TrainingExample};
use crate::error::{Error, Result};
use crate::lexicon::DEFAULT_K;
use crate::model::{backward, forward, Checkpoint, Group, Net, Params};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub policy: CorruptionPolicy,
    pub k: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            adam: AdamConfig::default(),
            warmup_steps: 500,
            batch_tokens: 1000,
            max_steps: 2000,
            seed: 1,
            policy: CorruptionPolicy::default(),
            k: DEFAULT_K,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_tokens == 0 || self.workers == 0 || self.k == 0 {
            return Err(Error::InvalidArgument("batch_tokens, workers and k must be positive".into()));
        }
        self.policy.validate()
    }
}

/// One optimisation step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub task: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
    pub tokens_per_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionStats>,
}

/// Examples of one step and anything worth logging about them.
pub struct TaskBatch {
    pub examples: Vec<TrainingExample>,
    pub kind: &'static str,
    /// Corruption counts of an epoch that just finished.
    pub epoch_stats: Option<CorruptionStats>,
}

/// Source of training batches; `step` is 1-based and the model is the one
/// about to be updated.
pub trait Task {
    fn batch(&mut self, step: u64, ckpt: &Checkpoint) -> Result<TaskBatch>;
}

pub struct Trainer {
    pub ckpt: Checkpoint,
    pub opt: Adam<f32>,
    pub cfg: TrainConfig,
    log: Option<Box<dyn Write>>,
}

impl Trainer {
    pub fn new(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(ckpt.params.data.len(), cfg.adam);
        Ok(Self { ckpt, opt, cfg, log: None })
    }

    pub fn resume(ckpt: Checkpoint, opt: Adam<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if opt.m.len() != ckpt.params.data.len() || opt.t != ckpt.step {
            return Err(Error::Format(format!(
                "optimizer state (t={}, n={}) does not match checkpoint (step={}, n={})",
                opt.t,
                opt.m.len(),
                ckpt.step,
                ckpt.params.data.len()
            )));
        }
        Ok(Self { ckpt, opt, cfg, log: None })
    }

    /// Writes one JSON record per step to `w`.
    pub fn with_log(mut self, w: Box<dyn Write>) -> Self {
        self.log = Some(w);
        self
    }

    fn gradient(&self, batch: &[TrainingExample], step: u64) -> Result<(f64, usize, Params<f32>)> {
        let net = self.ckpt.net();
        let step_seed = rng::derive(self.cfg.seed ^ rng::label("dropout"), step);
        let workers = self.cfg.workers.min(batch.len()).max(1);
        if workers == 1 {
            let mut r = rng::rng_from(step_seed);
            let f = forward(&net, batch, Some(&mut r))?;
            let g = backward(&net, &f, 1.0 / f.tokens() as f32);
            return Ok((f.mean_loss(), f.tokens(), g));
        }
        let chunk = batch.len().div_ceil(workers);
        let parts: Vec<Result<_>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .enumerate()
                .map(|(w, part)| {
                    s.spawn(move || -> Result<_> {
                        let mut r = rng::rng_from(rng::derive(step_seed, w as u64));
                        forward(&net, part, Some(&mut r)).map(|f| {
                            let g = backward(&net, &f, 1.0);
                            (f.loss_sum, f.tokens(), g)
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut total = 0;
        let mut loss = 0.0;
        let mut grad = Params::<f32> { data: vec![0.0; net.p.len()] };
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        for (l, n, _) in &parts {
            loss += l;
            total += n;
        }
        let scale = 1.0 / total as f32;
        for (_, _, g) in parts {
            for (a, b) in grad.data.iter_mut().zip(&g.data) {
                *a += b * scale;
            }
        }
        Ok((loss / total as f64, total, grad))
    }

    /// One Adam update on `batch`; returns (loss, tokens).
    pub fn step(&mut self, batch: &[TrainingExample]) -> Result<(f64, usize)> {
        let step = self.ckpt.step + 1;
        let (loss, tokens, grad) = self.gradient(batch, step)?;
        let lr = learning_rate(self.cfg.lr, self.cfg.warmup_steps, step);
        self.opt.step(&mut self.ckpt.params.data, &grad.data, lr);
        self.ckpt.step = step;
        Ok((loss, tokens))
    }

    /// Trains for `steps` more steps; `each` sees every record and may stop early.
    pub fn run<F>(&mut self, task: &mut dyn Task, steps: u64, mut each: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<ControlFlow<()>>,
    {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let start = Instant::now();
            let b = task.batch(self.ckpt.step + 1, &self.ckpt)?;
            let (loss, tokens) = self.step(&b.examples)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            let rec = StepRecord {
                step: self.ckpt.step,
                task: b.kind,
                loss,
                lr: learning_rate(self.cfg.lr, self.cfg.warmup_steps, self.ckpt.step),
                tokens,
                tokens_per_s: tokens as f64 / secs,
                corruption: b.epoch_stats,
            };
            if let Some(w) = self.log.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            log::debug!("step {} {} loss {:.4}", rec.step, rec.task, rec.loss);
            let flow = each(self, &rec)?;
            records.push(rec);
            if flow.is_break() {
                break;
            }
        }
        Ok(records)
    }

    /// Checkpoint at `path`, optimizer moments next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.ckpt.save(path)?;
        self.opt.save(&optimizer_path(path))
    }

    pub fn load(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let opt = Adam::load(&optimizer_path(path))?;
        Self::resume(ckpt, opt, cfg)
    }
}

pub fn optimizer_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

/// Pretrained tensors for the chosen groups, fresh ones elsewhere; step 0.
pub fn selective_init(pretrained: &Checkpoint, fresh: &Checkpoint, components: &[Group]) -> Result<Checkpoint> {
    if pretrained.config != fresh.config {
        return Err(Error::InvalidArgument("selective_init needs identical model configs".into()));
    }
    let mut out = fresh.clone();
    for t in &pretrained.layout.tensors {
        if components.contains(&t.group) {
            out.params.data[t.range()].copy_from_slice(&pretrained.params.data[t.range()]);
        }
    }
    out.step = 0;
    Ok(out)
}

/// Mean loss of a batch without dropout.
pub fn evaluate_loss(net: &Net<f32>, batch: &[TrainingExample]) -> Result<(f64, usize)> {
    let f = forward(net, batch, None)?;
    Ok((f.nll_sum, f.tokens()))
}

#[cfg(test)]
mod tests;
