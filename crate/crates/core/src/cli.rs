//! The `codeswitch` command line: one subcommand per pipeline stage, a TOML
//! experiment config, and a manifest per run that is enough to replay it.
//!
//! Stages talk only through files:
//! - corpora are UTF-8 text with one sentence per line;
//! - tokenized corpora carry space-separated subword tokens;
//! - everything else uses the formats of the owning modules.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{drop_long, load_corpus};
use crate::embedding::{EmbeddingMatrix, SgnsConfig};
use crate::error::{Error, Result};
use crate::eval::{
    bleu, build_codeswitch_testset, ids_to_text, k_sweep, perplexity, sweep_tsv, translate_all, EvalReport, PplSet,
    SweepSetup, DEFAULT_K_VALUES,
};
use crate::lexicon::{extract_lexicon, TranslationLexicon, DEFAULT_K};
use crate::mapping::{normalize_embeddings, OrthogonalMap, SeedPairs, SelfLearnConfig};
use crate::model::{Checkpoint, Group, ModelConfig};
use crate::pipeline::{align_spaces, direction_tag, language_embeddings, prepare_pair, shared_subwords, InductionConfig, PrepareConfig, SubwordConfig};
use crate::rng;
use crate::subword::{BpeModel, Vocab};
use crate::train::{
    backtranslate, selective_init, PretrainTask, SupervisedTask, Task, TrainConfig, Trainer, UnsupervisedConfig,
    UnsupervisedTask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub lang_a: String,
    pub lang_b: String,
    /// Sentences longer than this (in subword tokens) are left out of training.
    pub max_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { lang_a: "a".into(), lang_b: "b".into(), max_tokens: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub self_learn: SelfLearnConfig,
    pub expand_seeds: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        let d = InductionConfig::default();
        Self { self_learn: d.self_learn, expand_seeds: d.expand_seeds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexiconConfig {
    pub k: usize,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

/// Model hyper-parameters; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub label_smoothing: f64,
    /// Seed of freshly initialized parameters.
    pub seed: u64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        Self {
            layers_enc: d.layers_enc,
            layers_dec: d.layers_dec,
            d_model: d.d_model,
            d_ffn: d.d_ffn,
            heads: d.heads,
            dropout: d.dropout,
            max_positions: d.max_positions,
            label_smoothing: d.label_smoothing,
            seed: 1,
        }
    }
}

impl ModelBlock {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers_enc: self.layers_enc,
            layers_dec: self.layers_dec,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            heads: self.heads,
            dropout: self.dropout,
            vocab_size,
            max_positions: self.max_positions,
            tie_embeddings: true,
            label_smoothing: self.label_smoothing,
        }
    }
}

fn pretrain_defaults() -> TrainConfig {
    TrainConfig { max_steps: 3000, ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub unsupervised: UnsupervisedConfig,
    /// Parameter groups copied from the initial checkpoint.
    pub components: Vec<Group>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { lr: 1e-3, warmup_steps: 200, max_steps: 1000, ..TrainConfig::default() },
            unsupervised: UnsupervisedConfig::default(),
            components: Group::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: usize,
    /// Seed of the corruption used for perplexity and of code-switch positions.
    pub seed: u64,
    pub cs_ratio: f64,
    pub k_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam: 1, seed: 1, cs_ratio: 0.3, k_values: DEFAULT_K_VALUES.to_vec() }
    }
}

/// Every stage's parameters. A top-level `seed` overrides all stage seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub bpe: SubwordConfig,
    pub embeddings: SgnsConfig,
    pub mapping: MappingConfig,
    pub lexicon: LexiconConfig,
    pub model: ModelBlock,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            corpus: CorpusConfig::default(),
            bpe: SubwordConfig::default(),
            embeddings: SgnsConfig { dim: 32, ..SgnsConfig::default() },
            mapping: MappingConfig::default(),
            lexicon: LexiconConfig::default(),
            model: ModelBlock::default(),
            pretrain: pretrain_defaults(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and invalid values are validation errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let c = &self.corpus;
        for l in [&c.lang_a, &c.lang_b] {
            if l.is_empty() || l.chars().any(|ch| ch.is_whitespace() || ch == '<' || ch == '>') {
                return bad(format!("language name {l:?} must be a non-empty word"));
            }
        }
        if c.lang_a == c.lang_b {
            return bad("the two language names must differ".into());
        }
        if c.max_tokens == 0 {
            return bad("corpus.max_tokens must be positive".into());
        }
        self.bpe.validate()?;
        self.embeddings.validate()?;
        self.induction().validate()?;
        self.model.config(8).validate()?;
        if c.max_tokens + 2 > self.model.max_positions {
            return bad(format!("corpus.max_tokens {} needs max_positions of at least {}", c.max_tokens, c.max_tokens + 2));
        }
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if !(0.0..1.0).contains(&self.finetune.unsupervised.noise.drop) {
            return bad("noise drop probability outside [0, 1)".into());
        }
        if self.eval.beam == 0 {
            return bad("eval.beam must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval.cs_ratio) {
            return bad(format!("eval.cs_ratio {} outside [0, 1]", self.eval.cs_ratio));
        }
        if self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            return bad("eval.k_values must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn induction(&self) -> InductionConfig {
        InductionConfig { self_learn: self.mapping.self_learn.clone(), k: self.lexicon.k, expand_seeds: self.mapping.expand_seeds }
    }

    /// Applies the global seed and worker count to every stage.
    fn resolve(mut self, seed: Option<u64>, workers: Option<usize>) -> Result<Self> {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.bpe.seed = s;
            self.embeddings.seed = s;
            self.model.seed = s;
            self.pretrain.seed = s;
            self.finetune.train.seed = s;
            self.eval.seed = s;
        }
        if let Some(w) = workers {
            if w == 0 {
                return Err(Error::InvalidArgument("--workers must be positive".into()));
            }
            self.mapping.self_learn.workers = w;
            self.pretrain.workers = w;
            self.finetune.train.workers = w;
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "codeswitch", version, about = "Code-switching pre-training for machine translation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every stage (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the deterministic mode.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory [default: config `out`, else `out`].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Learn joint BPE merges and the shared vocabulary from both corpora.
    LearnBpe {
        #[arg(long)]
        corpus_a: PathBuf,
        #[arg(long)]
        corpus_b: PathBuf,
    },
    /// Segment a raw corpus into subword tokens.
    ApplyBpe {
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file name [default: input name + `.tok`].
        #[arg(long)]
        name: Option<String>,
    },
    /// Train skip-gram embeddings for one language.
    TrainEmbeddings {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lang: String,
    },
    /// Learn orthogonal maps between two embedding spaces, both directions.
    MapEmbeddings {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Seed dictionary (`src<TAB>tgt`); identical strings otherwise.
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
    /// Extract a top-k translation lexicon through a learned map.
    ExtractLexicon {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Direction label [default: `<lang_a>-<lang_b>`].
        #[arg(long)]
        direction: Option<String>,
    },
    /// Code-switching pre-training on both monolingual corpora.
    Pretrain {
        #[command(flatten)]
        mono: MonoArgs,
        #[arg(long)]
        lex_ab: PathBuf,
        #[arg(long)]
        lex_ba: PathBuf,
        /// Continue from this checkpoint (its `.adam` file must sit next to it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune on parallel data in one direction.
    FinetuneSupervised {
        #[arg(long)]
        vocab: PathBuf,
        /// Initial checkpoint; random initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated groups copied from `--init`, `all` or `none`.
        #[arg(long)]
        components: Option<String>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Target language.
        #[arg(long)]
        to: String,
    },
    /// Fine-tune with denoising and on-the-fly back-translation.
    FinetuneUnsupervised {
        #[command(flatten)]
        mono: MonoArgs,
        #[arg(long)]
        init: PathBuf,
    },
    /// Generate synthetic sources for target-language sentences.
    Backtranslate {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Language to generate.
        #[arg(long)]
        to: String,
    },
    /// Translate a tokenized corpus.
    Translate {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        to: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Corpus BLEU of a hypothesis file, or of a checkpoint's translations.
    EvaluateBleu {
        /// Reference text, one sentence per line.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, conflicts_with_all = ["ckpt", "src"])]
        hyp: Option<PathBuf>,
        #[arg(long, requires_all = ["src", "vocab", "to"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Tokenized sources.
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Perplexity of the pre-training objective on held-out monolingual text.
    EvaluatePpl {
        #[command(flatten)]
        mono: MonoArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lex_ab: PathBuf,
        #[arg(long)]
        lex_ba: PathBuf,
    },
    /// Sweep the lexicon size k from raw toy-layout data.
    KSweep {
        /// Directory holding `mono.*`, `{train,valid,test}.*` per language.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated k values [default: config `eval.k_values`].
        #[arg(long)]
        k: Option<String>,
    },
    /// Build a code-switched test set with a replacement manifest.
    BuildCsTestset {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lex: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Write a checkpoint that keeps only some pretrained groups.
    AblateInit {
        #[arg(long)]
        pretrained: PathBuf,
        /// Comma-separated groups to keep, `all` or `none`.
        #[arg(long)]
        components: String,
    },
    /// Re-run a recorded command into `--out` and compare artifact hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct MonoArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Tokenized monolingual corpus of language a.
    #[arg(long)]
    pub mono_a: PathBuf,
    #[arg(long)]
    pub mono_b: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::LearnBpe { .. } => "learn-bpe",
            Command::ApplyBpe { .. } => "apply-bpe",
            Command::TrainEmbeddings { .. } => "train-embeddings",
            Command::MapEmbeddings { .. } => "map-embeddings",
            Command::ExtractLexicon { .. } => "extract-lexicon",
            Command::Pretrain { .. } => "pretrain",
            Command::FinetuneSupervised { .. } => "finetune-supervised",
            Command::FinetuneUnsupervised { .. } => "finetune-unsupervised",
            Command::Backtranslate { .. } => "backtranslate",
            Command::Translate { .. } => "translate",
            Command::EvaluateBleu { .. } => "evaluate-bleu",
            Command::EvaluatePpl { .. } => "evaluate-ppl",
            Command::KSweep { .. } => "k-sweep",
            Command::BuildCsTestset { .. } => "build-cs-testset",
            Command::AblateInit { .. } => "ablate-init",
            Command::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// What a run read and wrote. Logs are listed but not hashed: they carry
/// wall-clock throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub version: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileHash>,
    pub logs: Vec<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Manifests are named after the first artifact of the run, so repeated
/// commands into one directory keep distinct records.
pub fn manifest_path(out: &Path, first_artifact: &str) -> PathBuf {
    out.join(format!("{first_artifact}.manifest.json"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses `argv` (program name first) and runs it. Returns the exit status:
/// 0 success, 1 runtime failure, 2 usage error, 3 validation failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                3
            } else {
                1
            }
        }
    }
}

/// Runs a parsed command and writes its manifest.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let report = replay(manifest, &out)?;
        for (path, ok) in &report {
            println!("{}\t{}", if *ok { "identical" } else { "DIFFERS" }, path.display());
        }
        if report.iter().any(|(_, ok)| !ok) {
            return Err(Error::Format("replayed artifacts differ from the manifest".into()));
        }
        return Ok(());
    }
    let cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve(cli.global.seed, cli.global.workers)?;
    let out = cli.global.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut run = Run::new(out, cfg)?;
    if let Some(p) = &cli.global.config {
        run.inputs.push(p.clone());
    }
    run.dispatch(&cli.command)?;
    run.write_manifest(cli.command.name(), argv)
}

/// Re-runs the command of a manifest into `out` with the recorded config and
/// reports, per recorded artifact, whether the new bytes hash the same.
pub fn replay(manifest: &Path, out: &Path) -> Result<Vec<(PathBuf, bool)>> {
    let m = Manifest::load(manifest)?;
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    if cwd != m.cwd {
        return Err(Error::InvalidArgument(format!("replay must run from {}", m.cwd.display())));
    }
    for input in &m.inputs {
        if sha256_file(&input.path)? != input.sha256 {
            return Err(Error::InvalidArgument(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let cli = Cli::try_parse_from(&m.argv).map_err(|e| Error::InvalidArgument(format!("recorded argv: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::InvalidArgument("a replay manifest cannot be replayed".into()));
    }
    m.config.validate()?;
    let mut run = Run::new(out.to_path_buf(), m.config.clone())?;
    run.dispatch(&cli.command)?;
    m.artifacts
        .iter()
        .map(|a| Ok((a.path.clone(), sha256_file(&out.join(&a.path))? == a.sha256)))
        .collect()
}

struct Run {
    out: PathBuf,
    cfg: ExperimentConfig,
    inputs: Vec<PathBuf>,
    artifacts: Vec<String>,
    logs: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8 { path: path.to_path_buf(), offset: e.utf8_error().valid_up_to() })?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn tokens_line(ids: &[u32], vocab: &Vocab) -> String {
    vocab.decode_regular(ids).join(" ")
}

fn parse_components(s: &str) -> Result<Vec<Group>> {
    match s.trim() {
        "all" => Ok(Group::ALL.to_vec()),
        "none" | "" => Ok(Vec::new()),
        list => list.split(',').map(|g| Group::parse(g.trim())).collect(),
    }
}

fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|k| k.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad k value {k:?}"))))
        .collect()
}

impl Run {
    fn new(out: PathBuf, cfg: ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { out, cfg, inputs: Vec::new(), artifacts: Vec::new(), logs: Vec::new() })
    }

    fn input<'p>(&mut self, p: &'p Path) -> &'p Path {
        self.inputs.push(p.to_path_buf());
        p
    }

    fn artifact(&mut self, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let p = self.out.join(&name);
        self.artifacts.push(name);
        p
    }

    fn log_file(&mut self, name: &str) -> Result<Box<dyn std::io::Write>> {
        self.logs.push(name.to_string());
        let p = self.out.join(name);
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Box::new(std::io::BufWriter::new(f)))
    }

    fn write_manifest(&self, command: &str, argv: &[String]) -> Result<()> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let mut inputs = Vec::new();
        for p in &self.inputs {
            let abs = cwd.join(p);
            if !inputs.iter().any(|h: &FileHash| h.path == abs) {
                inputs.push(FileHash { sha256: sha256_file(&abs)?, path: abs });
            }
        }
        let artifacts = self
            .artifacts
            .iter()
            .map(|a| Ok(FileHash { path: a.into(), sha256: sha256_file(&self.out.join(a))? }))
            .collect::<Result<_>>()?;
        let m = Manifest {
            command: command.into(),
            argv: argv.to_vec(),
            cwd,
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.cfg.clone(),
            inputs,
            artifacts,
            logs: self.logs.iter().map(PathBuf::from).collect(),
        };
        let first = self.artifacts.first().map(String::as_str).unwrap_or(command);
        write_json(&manifest_path(&self.out, first), &m)
    }

    fn vocab(&mut self, p: &Path) -> Result<Vocab> {
        Vocab::load(self.input(p))
    }

    fn ckpt(&mut self, p: &Path) -> Result<Checkpoint> {
        Checkpoint::load(self.input(p))
    }

    fn ids(&mut self, p: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
        let lines = read_lines(self.input(p))?;
        Ok(lines.iter().map(|l| vocab.encode(&l.split_whitespace().collect::<Vec<_>>())).collect())
    }

    /// Non-empty sentences within the length limit.
    fn training_ids(&mut self, p: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
        let ids: Vec<Vec<u32>> = self.ids(p, vocab)?.into_iter().filter(|s| !s.is_empty()).collect();
        let (kept, dropped) = drop_long(&ids, self.cfg.corpus.max_tokens);
        if dropped > 0 {
            log::info!("{}: dropped {dropped} sentences over {} tokens", p.display(), self.cfg.corpus.max_tokens);
        }
        Ok(kept.into_iter().map(|(_, s)| s).collect())
    }

    fn lexicon(&mut self, p: &Path, vocab: &Vocab, direction: &str) -> Result<TranslationLexicon> {
        TranslationLexicon::load(self.input(p), vocab, vocab, direction)
    }

    fn tag(&self, vocab: &Vocab, lang: &str) -> Result<u32> {
        vocab
            .id(&direction_tag(lang))
            .ok_or_else(|| Error::VocabMismatch(format!("vocabulary has no tag for language {lang:?}")))
    }

    fn tags(&self, vocab: &Vocab) -> Result<[u32; 2]> {
        Ok([self.tag(vocab, &self.cfg.corpus.lang_a)?, self.tag(vocab, &self.cfg.corpus.lang_b)?])
    }

    fn directions(&self) -> (String, String) {
        let c = &self.cfg.corpus;
        (format!("{}-{}", c.lang_a, c.lang_b), format!("{}-{}", c.lang_b, c.lang_a))
    }

    fn train(&mut self, trainer: Trainer, task: &mut dyn Task, name: &str) -> Result<()> {
        let steps = trainer.cfg.max_steps.saturating_sub(trainer.ckpt.step);
        let mut trainer = trainer.with_log(self.log_file(&format!("{name}.log.jsonl"))?);
        trainer.run(task, steps, |_, r| {
            if r.step % 100 == 0 {
                log::info!("{name} step {} {} loss {:.4}", r.step, r.task, r.loss);
            }
            Ok(ControlFlow::Continue(()))
        })?;
        trainer.ckpt.save(&self.artifact(format!("{name}.ckpt")))?;
        trainer.opt.save(&self.artifact(format!("{name}.ckpt.adam")))
    }

    fn dispatch(&mut self, cmd: &Command) -> Result<()> {
        let cfg = self.cfg.clone();
        match cmd {
            Command::LearnBpe { corpus_a, corpus_b } => {
                let (a, _) = load_corpus(self.input(corpus_a), &cfg.corpus.lang_a)?;
                let (b, _) = load_corpus(self.input(corpus_b), &cfg.corpus.lang_b)?;
                let (bpe, vocab) = shared_subwords(&a, &b, &cfg.bpe)?;
                bpe.save(self.artifact("bpe.merges"))?;
                vocab.save(self.artifact("vocab.txt"))?;
                println!("{} merges, {} vocabulary entries", bpe.merges().len(), vocab.len());
            }
            Command::ApplyBpe { bpe, input, name } => {
                let bpe = BpeModel::load(self.input(bpe))?;
                let lines = read_lines(self.input(input))?;
                let name = match name {
                    Some(n) => n.clone(),
                    None => format!("{}.tok", input.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()),
                };
                write_lines(&self.artifact(name), lines.iter().map(|l| bpe.apply(l).join(" ")))?;
            }
            Command::TrainEmbeddings { vocab, input, lang } => {
                let vocab = self.vocab(vocab)?;
                let ids = self.ids(input, &vocab)?;
                // language b draws from its own stream so the two spaces differ
                let seed = if *lang == cfg.corpus.lang_b { rng::derive(cfg.embeddings.seed, 1) } else { cfg.embeddings.seed };
                let (emb, report) = language_embeddings(&ids, &vocab, &SgnsConfig { seed, ..cfg.embeddings.clone() })?;
                emb.save(self.artifact(format!("emb.{lang}.txt")))?;
                println!("{} rows, final epoch loss {:?}", emb.rows(), report.epoch_losses.last());
            }
            Command::MapEmbeddings { src, tgt, seeds } => {
                let x = EmbeddingMatrix::load_with_vocab(self.input(src))?;
                let y = EmbeddingMatrix::load_with_vocab(self.input(tgt))?;
                let seeds = match seeds {
                    Some(p) => Some(SeedPairs::load(self.input(p), x.vocab(), y.vocab())?),
                    None => None,
                };
                let aligned = align_spaces(&x, &y, seeds, &cfg.induction())?;
                let (ab, ba) = self.directions();
                aligned.map_ab.save(self.artifact(format!("map.{ab}.txt")))?;
                aligned.map_ba.save(self.artifact(format!("map.{ba}.txt")))?;
                let info = &aligned.info;
                let report = serde_json::json!({
                    "seed_pairs": info.seed_pairs,
                    "forward": { "iterations": info.forward.iterations, "pair_counts": info.forward.pair_counts },
                    "backward": { "iterations": info.backward.iterations, "pair_counts": info.backward.pair_counts },
                });
                write_json(&self.artifact("mapping.json"), &report)?;
                println!("{} seed pairs, {} / {} iterations", info.seed_pairs, info.forward.iterations, info.backward.iterations);
            }
            Command::ExtractLexicon { src, tgt, map, k, direction } => {
                let x = normalize_embeddings(&EmbeddingMatrix::load_with_vocab(self.input(src))?)?;
                let y = normalize_embeddings(&EmbeddingMatrix::load_with_vocab(self.input(tgt))?)?;
                let w = OrthogonalMap::load(self.input(map))?;
                let k = k.unwrap_or(cfg.lexicon.k);
                let direction = direction.clone().unwrap_or_else(|| self.directions().0);
                let (lex, report) = extract_lexicon(&w.apply(&x)?, &y, k, cfg.mapping.self_learn.retrieval, &direction)?;
                lex.save(self.artifact(format!("lexicon.{direction}.tsv")), x.vocab(), y.vocab())?;
                println!("{} entries, {} low-confidence sources", lex.len(), report.low_confidence.len());
            }
            Command::Pretrain { mono, lex_ab, lex_ba, resume } => {
                let vocab = self.vocab(&mono.vocab)?;
                let corpora = [self.training_ids(&mono.mono_a, &vocab)?, self.training_ids(&mono.mono_b, &vocab)?];
                let (ab, ba) = self.directions();
                let lexicons = [self.lexicon(lex_ab, &vocab, &ab)?, self.lexicon(lex_ba, &vocab, &ba)?];
                let trainer = match resume {
                    Some(p) => {
                        self.input(&crate::train::optimizer_path(p));
                        Trainer::load(self.input(p), cfg.pretrain.clone())?
                    }
                    None => Trainer::new(Checkpoint::init(cfg.model.config(vocab.len()), cfg.model.seed)?, cfg.pretrain.clone())?,
                };
                if trainer.ckpt.config.vocab_size != vocab.len() {
                    return Err(Error::VocabMismatch("checkpoint and vocabulary sizes differ".into()));
                }
                let r = vocab.regular_ids();
                let p = &cfg.pretrain;
                let mut task = PretrainTask::new(corpora, lexicons, self.tags(&vocab)?, r.start..r.end, p.policy, p.k, p.batch_tokens, p.seed)?;
                self.train(trainer, &mut task, "pretrain")?;
            }
            Command::FinetuneSupervised { vocab, init, components, src, tgt, to } => {
                let vocab = self.vocab(vocab)?;
                let tag = self.tag(&vocab, to)?;
                let src = self.ids(src, &vocab)?;
                let tgt = self.ids(tgt, &vocab)?;
                if src.len() != tgt.len() {
                    return Err(Error::InvalidArgument(format!("parallel files hold {} and {} lines", src.len(), tgt.len())));
                }
                let max = cfg.corpus.max_tokens;
                let (src, tgt): (Vec<_>, Vec<_>) = src
                    .into_iter()
                    .zip(tgt)
                    .filter(|(s, t)| !s.is_empty() && !t.is_empty() && s.len() <= max && t.len() <= max)
                    .unzip();
                let ckpt = self.initial(init.as_deref(), components.as_deref(), vocab.len())?;
                let ft = &cfg.finetune.train;
                let mut task = SupervisedTask::new(src, tgt, tag, ft.batch_tokens, ft.seed)?;
                self.train(Trainer::new(ckpt, ft.clone())?, &mut task, "supervised")?;
            }
            Command::FinetuneUnsupervised { mono, init } => {
                let vocab = self.vocab(&mono.vocab)?;
                let corpora = [self.training_ids(&mono.mono_a, &vocab)?, self.training_ids(&mono.mono_b, &vocab)?];
                let ckpt = self.initial(Some(init), None, vocab.len())?;
                let ft = &cfg.finetune;
                let mut task = UnsupervisedTask::new(corpora, self.tags(&vocab)?, ft.unsupervised.clone(), ft.train.batch_tokens, ft.train.seed)?;
                self.train(Trainer::new(ckpt, ft.train.clone())?, &mut task, "unsupervised")?;
            }
            Command::Backtranslate { vocab, ckpt, input, to } => {
                let vocab = self.vocab(vocab)?;
                let ckpt = self.ckpt(ckpt)?;
                let tag = self.tag(&vocab, to)?;
                let targets: Vec<Vec<u32>> = self.ids(input, &vocab)?.into_iter().filter(|s| !s.is_empty()).collect();
                let bt = backtranslate(&ckpt, &targets, tag, cfg.eval.beam)?;
                write_lines(&self.artifact(format!("bt.src.{to}.tok")), bt.pairs.iter().map(|(s, _)| tokens_line(s, &vocab)))?;
                write_lines(&self.artifact("bt.tgt.tok"), bt.pairs.iter().map(|(_, t)| tokens_line(t, &vocab)))?;
                println!("{} pairs, {} skipped", bt.pairs.len(), bt.skipped.len());
            }
            Command::Translate { vocab, ckpt, input, to, beam } => {
                let vocab = self.vocab(vocab)?;
                let ckpt = self.ckpt(ckpt)?;
                let tag = self.tag(&vocab, to)?;
                let srcs = self.ids(input, &vocab)?;
                let hyps = translate_all(&ckpt, &srcs, tag, beam.unwrap_or(cfg.eval.beam))?;
                write_lines(&self.artifact(format!("translations.{to}.tok")), hyps.iter().map(|h| tokens_line(h, &vocab)))?;
                write_lines(&self.artifact(format!("translations.{to}.txt")), hyps.iter().map(|h| ids_to_text(h, &vocab)))?;
            }
            Command::EvaluateBleu { reference, hyp, ckpt, vocab, src, to } => {
                let refs = read_lines(self.input(reference))?;
                let hyps = match (hyp, ckpt, vocab, src, to) {
                    (Some(h), ..) => read_lines(self.input(h))?,
                    (None, Some(c), Some(v), Some(s), Some(to)) => {
                        let vocab = self.vocab(v)?;
                        let ckpt = self.ckpt(c)?;
                        let tag = self.tag(&vocab, to)?;
                        let srcs = self.ids(s, &vocab)?;
                        translate_all(&ckpt, &srcs, tag, cfg.eval.beam)?.iter().map(|h| ids_to_text(h, &vocab)).collect()
                    }
                    _ => return Err(Error::InvalidArgument("give --hyp, or --ckpt with --vocab, --src and --to".into())),
                };
                let value = bleu(&hyps, &refs)?;
                let echo = serde_json::json!({ "beam": cfg.eval.beam, "reference": reference });
                self.report(EvalReport::new("bleu", value, refs.len(), echo)?, "bleu.json")?;
                println!("BLEU {value:.2}");
            }
            Command::EvaluatePpl { mono, ckpt, lex_ab, lex_ba } => {
                let vocab = self.vocab(&mono.vocab)?;
                let ckpt = self.ckpt(ckpt)?;
                let a = self.training_ids(&mono.mono_a, &vocab)?;
                let b = self.training_ids(&mono.mono_b, &vocab)?;
                let (ab, ba) = self.directions();
                let lab = self.lexicon(lex_ab, &vocab, &ab)?;
                let lba = self.lexicon(lex_ba, &vocab, &ba)?;
                let tags = self.tags(&vocab)?;
                let sets = [PplSet { sentences: &a, lexicon: &lab, tag: tags[0] }, PplSet { sentences: &b, lexicon: &lba, tag: tags[1] }];
                let r = vocab.regular_ids();
                let report = perplexity(&ckpt, &sets, &(r.start..r.end), &cfg.pretrain.policy, cfg.eval.seed)?;
                let echo = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
                self.report(EvalReport::new("ppl", report.mean, a.len() + b.len(), echo)?, "ppl.json")?;
                println!("PPL {:.4} ({:.4} / {:.4})", report.mean, report.per_language[0], report.per_language[1]);
            }
            Command::KSweep { data, k } => {
                let k_values = match k {
                    Some(s) => parse_k_list(s)?,
                    None => cfg.eval.k_values.clone(),
                };
                let (la, lb) = (cfg.corpus.lang_a.clone(), cfg.corpus.lang_b.clone());
                let (mono_a, _) = load_corpus(self.input(&data.join(format!("mono.{la}"))), &la)?;
                let (mono_b, _) = load_corpus(self.input(&data.join(format!("mono.{lb}"))), &lb)?;
                let mut splits = Vec::new();
                for split in ["train", "valid", "test"] {
                    let a = read_lines(self.input(&data.join(format!("{split}.{la}"))))?;
                    let b = read_lines(self.input(&data.join(format!("{split}.{lb}"))))?;
                    if a.len() != b.len() {
                        return Err(Error::InvalidArgument(format!("{split} files hold {} and {} lines", a.len(), b.len())));
                    }
                    splits.push(a.into_iter().zip(b).filter(|(x, y)| !x.is_empty() && !y.is_empty()).collect::<Vec<_>>());
                }
                let pc = PrepareConfig { subword: cfg.bpe.clone(), sgns: cfg.embeddings.clone(), induction: cfg.induction() };
                let p = prepare_pair(&mono_a, &mono_b, &splits[0], &splits[1], &splits[2], &pc)?;
                let setup = SweepSetup {
                    aligned: &p.aligned,
                    vocab: &p.vocab,
                    names: (&la, &lb),
                    tags: p.tags,
                    mono: [&p.mono[0], &p.mono[1]],
                    valid_mono: [&p.valid.a, &p.valid.b],
                    train: (&p.train.a, &p.train.b),
                    test: (&p.test.a, &p.test.b),
                    model: cfg.model.config(p.vocab.len()),
                    model_seed: cfg.model.seed,
                    pretrain: cfg.pretrain.clone(),
                    finetune: cfg.finetune.train.clone(),
                };
                let tsv = sweep_tsv(&k_sweep(&setup, &k_values)?);
                let path = self.artifact("sweep.tsv");
                std::fs::write(&path, &tsv).map_err(|e| Error::io(&path, e))?;
                print!("{tsv}");
            }
            Command::BuildCsTestset { vocab, input, lex, ratio } => {
                let vocab = self.vocab(vocab)?;
                let sentences = self.ids(input, &vocab)?;
                let lex = self.lexicon(lex, &vocab, &self.directions().0)?;
                let ratio = ratio.unwrap_or(cfg.eval.cs_ratio);
                let cs = build_codeswitch_testset(&sentences, &lex, ratio, cfg.eval.seed)?;
                write_lines(&self.artifact("cs.tok"), cs.sentences.iter().map(|s| tokens_line(s, &vocab)))?;
                write_lines(&self.artifact("cs.txt"), cs.sentences.iter().map(|s| ids_to_text(s, &vocab)))?;
                let tok = |id: u32| vocab.token(id).unwrap_or("<unk>").to_string();
                let replacements: Vec<_> = cs
                    .manifest
                    .iter()
                    .map(|r| serde_json::json!({ "sentence": r.sentence, "position": r.position, "original": tok(r.original), "replacement": tok(r.replacement) }))
                    .collect();
                let m = serde_json::json!({ "ratio": ratio, "seed": cfg.eval.seed, "flagged": cs.flagged, "replacements": replacements });
                write_json(&self.artifact("cs.replacements.json"), &m)?;
                println!("{} replacements, {} sentences flagged", cs.manifest.len(), cs.flagged.len());
            }
            Command::AblateInit { pretrained, components } => {
                let pre = self.ckpt(pretrained)?;
                let fresh = Checkpoint::init(pre.config.clone(), cfg.model.seed)?;
                let out = selective_init(&pre, &fresh, &parse_components(components)?)?;
                out.save(&self.artifact("ablated.ckpt"))?;
            }
            Command::Replay { .. } => unreachable!("handled by execute"),
        }
        Ok(())
    }

    fn report(&mut self, report: EvalReport, name: &str) -> Result<()> {
        let path = self.artifact(name);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        report.append_to(&path)
    }

    /// Fine-tuning start point: selected groups of `init` over a fresh model.
    fn initial(&mut self, init: Option<&Path>, components: Option<&str>, vocab_size: usize) -> Result<Checkpoint> {
        match init {
            None => Checkpoint::init(self.cfg.model.config(vocab_size), self.cfg.model.seed),
            Some(p) => {
                let pre = self.ckpt(p)?;
                if pre.config.vocab_size != vocab_size {
                    return Err(Error::VocabMismatch("checkpoint and vocabulary sizes differ".into()));
                }
                let groups = match components {
                    Some(s) => parse_components(s)?,
                    None => self.cfg.finetune.components.clone(),
                };
                let fresh = Checkpoint::init(pre.config.clone(), self.cfg.model.seed)?;
                selective_init(&pre, &fresh, &groups)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3\n").unwrap_err().is_validation());
        assert!(ExperimentConfig::from_toml("[model]\nheads = 3\n").unwrap_err().is_validation());
        assert!(ExperimentConfig::from_toml("[pretrain.policy]\nratio = 1.5\n").unwrap_err().is_validation());
        assert!(ExperimentConfig::from_toml("[eval]\nk_values = []\n").unwrap_err().is_validation());
        let cfg = ExperimentConfig::from_toml("seed = 9\n[lexicon]\nk = 5\n").unwrap();
        assert_eq!(cfg.lexicon.k, 5);
    }

    #[test]
    fn global_seed_reaches_every_stage() {
        let cfg = ExperimentConfig::default().resolve(Some(42), Some(2)).unwrap();
        assert_eq!((cfg.bpe.seed, cfg.embeddings.seed, cfg.model.seed), (42, 42, 42));
        assert_eq!((cfg.pretrain.seed, cfg.finetune.train.seed, cfg.eval.seed), (42, 42, 42));
        assert_eq!((cfg.pretrain.workers, cfg.mapping.self_learn.workers), (2, 2));
        assert!(ExperimentConfig::default().resolve(None, Some(0)).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_command(["codeswitch", "frobnicate"]), 2);
        assert_eq!(run_command(["codeswitch", "learn-bpe", "--no-such-flag"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[model]\nheads = 0\n").unwrap();
        let out = dir.path().join("out");
        let args = |cfg: &Path| {
            vec![
                "codeswitch".to_string(),
                "--config".into(),
                cfg.display().to_string(),
                "--out".into(),
                out.display().to_string(),
                "learn-bpe".into(),
                "--corpus-a".into(),
                dir.path().join("missing.a").display().to_string(),
                "--corpus-b".into(),
                dir.path().join("missing.b").display().to_string(),
            ]
        };
        assert_eq!(run_command(args(&bad)), 3);
        let good = dir.path().join("good.toml");
        std::fs::write(&good, "").unwrap();
        assert_eq!(run_command(args(&good)), 1);
    }

    #[test]
    fn components_parse() {
        assert_eq!(parse_components("all").unwrap(), Group::ALL.to_vec());
        assert!(parse_components("none").unwrap().is_empty());
        assert_eq!(parse_components("encoder, decoder").unwrap(), vec![Group::Encoder, Group::Decoder]);
        assert!(parse_components("encoders").unwrap_err().is_validation());
    }
}
