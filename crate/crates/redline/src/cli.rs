//! Command-line surface: flat-file configuration, hash-named run
//! directories, and the six pipeline commands (train, evaluate, align,
//! annotate, analyze, report).
//!
//! Configuration is a flat `key = value` file with dotted keys. `--set
//! key=value` flags override file values, and dedicated flags like
//! `--approach` override both. Every command resolves one [`RunConfig`],
//! validates it reporting every violation at once, then writes outputs
//! under `<out-dir>/<command>-<config-hash>/` next to a `manifest.json`
//! recording the resolved configuration, the root seed, and the creation
//! time, so a run directory is reproducible from its manifest alone. All
//! run randomness derives from the single root seed; timestamps honor
//! `SOURCE_DATE_EPOCH` so seeded reruns are byte-identical.
//!
//! Exit codes, one per error class: 0 success, 2 configuration, 3 file
//! I/O, 4 data, 5 backend, 6 training, 7 evaluation, 8 alignment and
//! annotation, 9 analysis. Argument parse errors also exit 2.
//!
//! Remote-backend credentials come from environment variables only
//! (`REDLINE_REMOTE_ENDPOINT`, `REDLINE_REMOTE_TOKEN`); they are never
//! accepted as flags and never written to run directories or logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::alignment::{
    classify_residual, derive_edits, prealign, AlignError, AlignParams, AlignmentResult,
    ClassifierScorer, PairStatus, ResidualScorer,
};
use crate::analysis::{self, AnalysisError};
use crate::approaches::{ApproachKind, Classifier, TransformKind};
use crate::autoannotate::{
    self, AnnotateConfig, AnnotateError, AnnotateOutcome, AnnotatedRevision, Provenance,
};
use crate::backend::stub::HashEmbedder;
use crate::backend::tiny::{TinyEncoder, TinyLm};
use crate::backend::{splitmix64, Backend, BackendError, FinetuneConfig, FinetuneMode, TrainableBackend};
use crate::corpus::{jsonl, tasks, CorpusError, DatasetSplit, DocumentRevision, EditSample, InputArity, TaskSpec};
use crate::evaluation::{self, EvalError, MetricsReport};
use crate::prompting::{build_input, InputFormat, TemplateRole};
use crate::training::{self, SelectionMetric, TrainError, TrainRun};

/// Seed salts: every stage draws its randomness from the root seed mixed
/// with a distinct constant, so stages stay independent but reproducible.
const BACKEND_SEED_SALT: u64 = 0x6bac_0001;
const RESIDUAL_SEED_SALT: u64 = 0x6bac_0002;
const FINETUNE_SEED_SALT: u64 = 0x6bac_0003;
const REVIEW_SEED_SALT: u64 = 0x6bac_0004;

// ---------------------------------------------------------------------------
// Errors and exit codes

/// One error class per nonzero exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; carries every violation found. Exit 2.
    Config(Vec<String>),
    /// File system failure. Exit 3.
    Io(String),
    /// Malformed or inconsistent input data. Exit 4.
    Data(String),
    /// Backend construction or capability failure. Exit 5.
    Backend(String),
    /// Training failure. Exit 6.
    Training(String),
    /// Evaluation failure. Exit 7.
    Evaluation(String),
    /// Alignment or annotation failure. Exit 8.
    Alignment(String),
    /// Analysis failure. Exit 9.
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
            CliError::Backend(_) => 5,
            CliError::Training(_) => 6,
            CliError::Evaluation(_) => 7,
            CliError::Alignment(_) => 8,
            CliError::Analysis(_) => 9,
        }
    }

    /// Lines to print on stderr.
    pub fn messages(&self) -> Vec<String> {
        match self {
            CliError::Config(violations) => {
                let mut lines = vec![format!(
                    "error: invalid configuration ({} problem{})",
                    violations.len(),
                    if violations.len() == 1 { "" } else { "s" }
                )];
                lines.extend(violations.iter().map(|v| format!("  - {v}")));
                lines
            }
            CliError::Io(m) => vec![format!("error: {m}")],
            CliError::Data(m) => vec![format!("error: {m}")],
            CliError::Backend(m) => vec![format!("error: {m}")],
            CliError::Training(m) => vec![format!("error: {m}")],
            CliError::Evaluation(m) => vec![format!("error: {m}")],
            CliError::Alignment(m) => vec![format!("error: {m}")],
            CliError::Analysis(m) => vec![format!("error: {m}")],
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.messages().join("\n"))
    }
}

impl std::error::Error for CliError {}

fn corpus_err(e: CorpusError) -> CliError {
    match e {
        CorpusError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Io { .. } => CliError::Io(e.to_string()),
        TrainError::Restore { .. } => CliError::Data(e.to_string()),
        TrainError::Backend(b) => CliError::Backend(b.to_string()),
        other => CliError::Training(other.to_string()),
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        CliError::Alignment(e.to_string())
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        CliError::Alignment(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluation(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Configuration file and key registry

/// Every configuration key, with the description printed on violations.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("task", "task id from the built-in registry"),
    ("approach", "gen | seqc | snet | xnet"),
    (
        "transform",
        "none | diff | abs-diff | new-abs-diff | new-old | new-abs-diff-old",
    ),
    (
        "format",
        "natural | structured | natural+instruction | structured+instruction",
    ),
    (
        "backend",
        "backend spec: hash:dim=N[,seed=N] | tiny:dim=N[,seed=N][,vocab=N] | tiny-lm:dim=N[,seed=N] | remote:model=NAME[,endpoint=URL]",
    ),
    ("seed", "root seed; all run randomness derives from it"),
    ("parallelism", "worker count for document-parallel stages"),
    ("selection", "checkpoint selection metric: macro-f1 | accuracy"),
    ("finetune.mode", "full | adapter"),
    ("finetune.rank", "adapter rank"),
    ("finetune.alpha", "adapter scale numerator"),
    ("finetune.dropout", "adapter dropout probability, in [0, 1)"),
    ("finetune.epochs", "training epoch budget"),
    ("optimizer.learning-rate", "override of the mode-default learning rate"),
    ("optimizer.batch-size", "optimizer batch size"),
    ("data.train", "training split JSONL"),
    ("data.validation", "validation split JSONL"),
    ("data.test", "test split JSONL"),
    ("data.revisions", "document revisions JSONL"),
    ("data.annotated", "annotated corpus JSONL (annotate output)"),
    ("split", "which split evaluate reads: train | validation | test"),
    (
        "checkpoint",
        "checkpoint directory: an epoch directory, or a run directory containing selection.json",
    ),
    (
        "residual-checkpoint",
        "binary classifier checkpoint for the second alignment stage",
    ),
    (
        "residual-backend",
        "backend spec for the residual classifier (defaults to `backend`)",
    ),
    ("align.theta-high", "pre-alignment similarity threshold, in (0, 1]"),
    ("align.window", "alignment position window, >= 0"),
    (
        "annotate.review-sample",
        "documents to sample into the review worksheet (0 = none)",
    ),
    ("analyze.bins", "position histogram bin count"),
    ("report.inputs", "comma-separated run directories to summarize"),
];

/// Parses flat `key = value` text. Blank lines and `#` comments are
/// skipped; problems are reported per line, never just the first.
pub fn parse_config_text(text: &str, origin: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            violations.push(format!("{origin}:{lineno}: expected `key = value`, got `{line}`"));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            violations.push(format!("{origin}:{lineno}: empty key"));
            continue;
        }
        if !seen.insert(key.clone()) {
            violations.push(format!(
                "{origin}:{lineno}: duplicate key `{key}` (use --set to override file values)"
            ));
            continue;
        }
        pairs.push((key, value));
    }
    (pairs, violations)
}

// ---------------------------------------------------------------------------
// Backend specs

/// Parsed backend selector. `seed: None` derives the backend seed from the
/// root seed, so specs without one stay reproducible per run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Hash { dim: usize, seed: Option<u64> },
    Tiny { dim: usize, seed: Option<u64>, vocab: Option<usize> },
    TinyLm { dim: usize, seed: Option<u64> },
    Remote { model: String, endpoint: Option<String> },
}

impl BackendSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let (kind, rest) = match text.split_once(':') {
            Some((k, r)) => (k.trim(), r),
            None => (text.trim(), ""),
        };
        let mut params: BTreeMap<String, String> = BTreeMap::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let Some((k, v)) = part.split_once('=') else {
                return Err(format!("backend parameter `{}` is not key=value", part.trim()));
            };
            if params.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(format!("backend parameter `{}` given twice", k.trim()));
            }
        }
        let mut take_num = |name: &str, default: Option<u64>| -> Result<Option<u64>, String> {
            match params.remove(name) {
                Some(v) => v
                    .parse::<u64>()
                    .map(Some)
                    .map_err(|_| format!("backend parameter {name}={v} is not a non-negative integer")),
                None => Ok(default),
            }
        };
        let spec = match kind {
            "hash" => BackendSpec::Hash {
                dim: take_num("dim", Some(32))?.unwrap() as usize,
                seed: take_num("seed", None)?,
            },
            "tiny" => BackendSpec::Tiny {
                dim: take_num("dim", Some(32))?.unwrap() as usize,
                seed: take_num("seed", None)?,
                vocab: take_num("vocab", None)?.map(|v| v as usize),
            },
            "tiny-lm" => BackendSpec::TinyLm {
                dim: take_num("dim", Some(32))?.unwrap() as usize,
                seed: take_num("seed", None)?,
            },
            "remote" => BackendSpec::Remote {
                model: params
                    .remove("model")
                    .ok_or("remote backend needs model=NAME")?,
                endpoint: params.remove("endpoint"),
            },
            other => {
                return Err(format!(
                    "unknown backend kind `{other}` (known: hash, tiny, tiny-lm, remote)"
                ))
            }
        };
        if let Some(stray) = params.keys().next() {
            return Err(format!("unknown backend parameter `{stray}` for kind `{kind}`"));
        }
        match &spec {
            BackendSpec::Hash { dim, .. }
            | BackendSpec::Tiny { dim, .. }
            | BackendSpec::TinyLm { dim, .. }
                if *dim == 0 =>
            {
                return Err("backend dim must be at least 1".into())
            }
            _ => {}
        }
        Ok(spec)
    }

    /// Canonical display form; used as the model row label in reports.
    pub fn label(&self) -> String {
        let seed_suffix = |seed: &Option<u64>| seed.map(|s| format!(",seed={s}")).unwrap_or_default();
        match self {
            BackendSpec::Hash { dim, seed } => format!("hash:dim={dim}{}", seed_suffix(seed)),
            BackendSpec::Tiny { dim, seed, vocab } => format!(
                "tiny:dim={dim}{}{}",
                seed_suffix(seed),
                vocab.map(|v| format!(",vocab={v}")).unwrap_or_default()
            ),
            BackendSpec::TinyLm { dim, seed } => format!("tiny-lm:dim={dim}{}", seed_suffix(seed)),
            BackendSpec::Remote { model, .. } => format!("remote:model={model}"),
        }
    }

    fn effective_seed(&self, root: u64, salt: u64) -> u64 {
        let stated = match self {
            BackendSpec::Hash { seed, .. }
            | BackendSpec::Tiny { seed, .. }
            | BackendSpec::TinyLm { seed, .. } => *seed,
            BackendSpec::Remote { .. } => None,
        };
        stated.unwrap_or_else(|| splitmix64(root ^ salt))
    }

    /// Builds an inference-only handle. `vocab_texts` seeds the closed
    /// vocabulary of the bag-of-words language model; other kinds ignore it.
    pub fn build(
        &self,
        root_seed: u64,
        salt: u64,
        vocab_texts: &[String],
    ) -> Result<Box<dyn Backend>, CliError> {
        let seed = self.effective_seed(root_seed, salt);
        match self {
            BackendSpec::Hash { dim, .. } => Ok(Box::new(HashEmbedder::new(*dim, seed))),
            BackendSpec::Tiny { dim, vocab, .. } => Ok(Box::new(match vocab {
                Some(v) => TinyEncoder::with_vocab_buckets(*dim, seed, *v),
                None => TinyEncoder::new(*dim, seed),
            })),
            BackendSpec::TinyLm { dim, .. } => Ok(Box::new(TinyLm::with_vocab_from_texts(
                *dim,
                seed,
                vocab_texts.iter().map(String::as_str),
            ))),
            BackendSpec::Remote { model, endpoint } => build_remote(model, endpoint.as_deref()),
        }
    }

    /// Builds a handle and restores trained state from a checkpoint's
    /// backend payload. Stateless kinds accept only empty payloads.
    pub fn build_restored(
        &self,
        root_seed: u64,
        salt: u64,
        backend_state: &serde_json::Value,
        finetune: Option<&FinetuneConfig>,
    ) -> Result<Box<dyn Backend>, CliError> {
        let has_state = backend_state.as_object().is_some_and(|o| !o.is_empty());
        let seed = self.effective_seed(root_seed, salt);
        match self {
            BackendSpec::Hash { .. } | BackendSpec::Remote { .. } => {
                if has_state {
                    return Err(CliError::Backend(format!(
                        "checkpoint carries trained backend state that `{}` cannot restore; \
                         use the backend kind the run was trained with",
                        self.label()
                    )));
                }
                self.build(root_seed, salt, &[])
            }
            BackendSpec::Tiny { dim, vocab, .. } => {
                let mut b = match vocab {
                    Some(v) => TinyEncoder::with_vocab_buckets(*dim, seed, *v),
                    None => TinyEncoder::new(*dim, seed),
                };
                if has_state {
                    restore_state(&mut b, finetune, backend_state)?;
                }
                Ok(Box::new(b))
            }
            BackendSpec::TinyLm { dim, .. } => {
                let mut b = TinyLm::with_vocab_from_texts(*dim, seed, []);
                if has_state {
                    restore_state(&mut b, finetune, backend_state)?;
                }
                Ok(Box::new(b))
            }
        }
    }
}

#[cfg(feature = "remote")]
fn build_remote(model: &str, endpoint: Option<&str>) -> Result<Box<dyn Backend>, CliError> {
    use crate::backend::remote::RemoteBackend;
    let backend = match endpoint {
        // The bearer token is read from the environment inside the client
        // and never passes through configuration or logs.
        Some(url) => RemoteBackend::new(model, url, std::env::var("REDLINE_REMOTE_TOKEN").ok()),
        None => RemoteBackend::from_env(model)?,
    };
    Ok(Box::new(backend))
}

#[cfg(not(feature = "remote"))]
fn build_remote(_model: &str, _endpoint: Option<&str>) -> Result<Box<dyn Backend>, CliError> {
    Err(CliError::Backend(
        "this build has no remote backend support (enable the `remote` feature)".into(),
    ))
}

/// Applies a checkpoint's backend payload on top of a fresh handle's
/// exported state, so partial payloads (adapter-only checkpoints) merge
/// with constructor-provided base weights.
fn restore_state<B: TrainableBackend>(
    backend: &mut B,
    finetune: Option<&FinetuneConfig>,
    patch: &serde_json::Value,
) -> Result<(), CliError> {
    let finetune = finetune.ok_or_else(|| {
        CliError::Data(
            "checkpoint has trained backend state but no run.json was found next to it; \
             cannot reconstruct the fine-tune configuration"
                .into(),
        )
    })?;
    backend.apply_finetune(finetune)?;
    let mut state = backend.export_state();
    let (Some(template), Some(patch_obj)) = (state.as_object_mut(), patch.as_object()) else {
        return Err(CliError::Data("checkpoint backend state is not an object".into()));
    };
    // A checkpoint that omits the base weights (adapter runs store only
    // the delta) reproduces the trained model only over the base the run
    // started from, which is derived from the backend seed. Restoring it
    // onto a differently seeded base would silently yield a wrong model.
    if !patch_obj.contains_key("weights") {
        if let (Some(current), Some(trained)) = (template.get("seed"), patch_obj.get("seed")) {
            if current != trained {
                return Err(CliError::Backend(format!(
                    "checkpoint was trained on a backend seeded {trained}, but this \
                     configuration derives backend seed {current}; rerun with the \
                     training-time root seed or pin seed=... in the backend spec"
                )));
            }
        }
    }
    for (key, value) in patch_obj {
        template.insert(key.clone(), value.clone());
    }
    backend.import_state(&state)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resolved configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

/// A command's fully resolved, validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub approach: ApproachKind,
    pub transform: Option<TransformKind>,
    pub input_format: InputFormat,
    pub backend: BackendSpec,
    pub residual_backend: Option<BackendSpec>,
    pub seed: u64,
    pub parallelism: usize,
    pub selection: SelectionMetric,
    pub finetune_mode: FinetuneMode,
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub data_train: Option<PathBuf>,
    pub data_validation: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub data_revisions: Option<PathBuf>,
    pub data_annotated: Option<PathBuf>,
    pub split: SplitName,
    pub checkpoint: Option<PathBuf>,
    pub residual_checkpoint: Option<PathBuf>,
    pub align: AlignParams,
    pub review_sample: usize,
    pub bins: usize,
    pub report_inputs: Vec<PathBuf>,
    /// Effective key-value view: every consumed key with its final value
    /// (defaults included). Hashed into the run directory name and stored
    /// in the manifest.
    pub resolved: BTreeMap<String, String>,
}

struct Resolver {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    violations: Vec<String>,
}

impl Resolver {
    fn new(values: BTreeMap<String, String>, violations: Vec<String>) -> Self {
        Self {
            values,
            consumed: BTreeSet::new(),
            resolved: BTreeMap::new(),
            violations,
        }
    }

    /// Resolves one key against a default, recording the effective value.
    /// Returns `None` only when the value failed to parse (a violation is
    /// recorded).
    fn take<T>(
        &mut self,
        key: &str,
        default: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Option<T> {
        self.consumed.insert(key.to_string());
        let text = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        match parse(&text) {
            Ok(v) => {
                self.resolved.insert(key.to_string(), text);
                Some(v)
            }
            Err(m) => {
                self.violations.push(format!("{key}: {m}"));
                None
            }
        }
    }

    /// Resolves a key with no default; absent keys yield `None` silently.
    fn take_optional<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Option<T> {
        self.consumed.insert(key.to_string());
        let text = self.values.get(key)?.clone();
        match parse(&text) {
            Ok(v) => {
                self.resolved.insert(key.to_string(), text);
                Some(v)
            }
            Err(m) => {
                self.violations.push(format!("{key}: {m}"));
                None
            }
        }
    }

    fn flag_unknown_keys(&mut self) {
        for key in self.values.keys() {
            if !self.consumed.contains(key) {
                self.violations.push(format!(
                    "unknown configuration key `{key}` (run with a bad key lists nothing else; known keys: {})",
                    KNOWN_KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
                ));
            }
        }
    }
}

fn parse_usize_min(min: usize) -> impl Fn(&str) -> Result<usize, String> {
    move |s| match s.parse::<usize>() {
        Ok(v) if v >= min => Ok(v),
        Ok(v) => Err(format!("{v} is below the minimum of {min}")),
        Err(_) => Err(format!("`{s}` is not a non-negative integer")),
    }
}

fn parse_path(s: &str) -> Result<PathBuf, String> {
    if s.is_empty() {
        Err("path is empty".into())
    } else {
        Ok(PathBuf::from(s))
    }
}

impl RunConfig {
    /// Resolves a config file plus ordered overrides into a validated
    /// configuration, collecting every violation before failing.
    pub fn resolve(
        config_file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, CliError> {
        let (pairs, file_violations) = match config_file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                parse_config_text(&text, &path.display().to_string())
            }
            None => (Vec::new(), Vec::new()),
        };
        let mut values: BTreeMap<String, String> = pairs.into_iter().collect();
        for (key, value) in overrides {
            values.insert(key.clone(), value.clone());
        }
        let mut r = Resolver::new(values, file_violations);

        let known_tasks = || {
            tasks::builtin()
                .iter()
                .map(|t| t.task_id.clone())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let task = r.take("task", "eic", |s| {
            tasks::by_id(s).ok_or_else(|| format!("unknown task `{s}` (known: {})", known_tasks()))
        });
        let approach = r.take("approach", "seqc", |s| {
            ApproachKind::parse(s).ok_or_else(|| format!("unknown approach `{s}` (known: gen, seqc, snet, xnet)"))
        });
        let transform = r.take("transform", "none", |s| {
            if s == "none" {
                Ok(None)
            } else {
                TransformKind::parse(s).map(Some).ok_or_else(|| {
                    format!(
                        "unknown transform `{s}` (known: none, {})",
                        TransformKind::ALL.map(|t| t.name()).join(", ")
                    )
                })
            }
        });
        let input_format = r.take("format", "structured", |s| {
            InputFormat::parse(s).ok_or_else(|| {
                format!("unknown format `{s}` (known: natural, structured, natural+instruction, structured+instruction)")
            })
        });
        let backend = r.take("backend", "hash:dim=32", |s| BackendSpec::parse(s));
        let residual_backend = r.take_optional("residual-backend", |s| BackendSpec::parse(s));
        let seed = r.take("seed", "7", |s| {
            s.parse::<u64>().map_err(|_| format!("`{s}` is not a 64-bit unsigned integer"))
        });
        let parallelism = r.take("parallelism", "1", parse_usize_min(1));
        let selection = r.take("selection", "macro-f1", |s| match s {
            "macro-f1" => Ok(SelectionMetric::MacroF1),
            "accuracy" => Ok(SelectionMetric::Accuracy),
            _ => Err(format!("unknown selection metric `{s}` (known: macro-f1, accuracy)")),
        });
        let finetune_mode_name = r.take("finetune.mode", "adapter", |s| match s {
            "full" | "adapter" => Ok(s.to_string()),
            _ => Err(format!("unknown fine-tune mode `{s}` (known: full, adapter)")),
        });
        let rank = r.take("finetune.rank", "32", parse_usize_min(1));
        let alpha = r.take("finetune.alpha", "32", parse_usize_min(1));
        let dropout = r.take("finetune.dropout", "0.1", |s| match s.parse::<f64>() {
            Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
            Ok(v) => Err(format!("{v} is outside [0, 1)")),
            Err(_) => Err(format!("`{s}` is not a number")),
        });
        let epochs = r.take("finetune.epochs", "10", parse_usize_min(1));
        let learning_rate = r.take_optional("optimizer.learning-rate", |s| match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
            Ok(v) => Err(format!("{v} is not a positive finite number")),
            Err(_) => Err(format!("`{s}` is not a number")),
        });
        let batch_size = r.take("optimizer.batch-size", "16", parse_usize_min(1));
        let data_train = r.take_optional("data.train", parse_path);
        let data_validation = r.take_optional("data.validation", parse_path);
        let data_test = r.take_optional("data.test", parse_path);
        let data_revisions = r.take_optional("data.revisions", parse_path);
        let data_annotated = r.take_optional("data.annotated", parse_path);
        let split = r.take("split", "test", |s| match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("unknown split `{s}` (known: train, validation, test)")),
        });
        let checkpoint = r.take_optional("checkpoint", parse_path);
        let residual_checkpoint = r.take_optional("residual-checkpoint", parse_path);
        let theta_high = r.take("align.theta-high", "0.5", |s| match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
            Ok(v) => Err(format!("{v} is outside (0, 1]")),
            Err(_) => Err(format!("`{s}` is not a number")),
        });
        let window = r.take("align.window", "10", |s| match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
            Ok(v) => Err(format!("{v} is not a non-negative finite number")),
            Err(_) => Err(format!("`{s}` is not a number")),
        });
        let review_sample = r.take("annotate.review-sample", "0", parse_usize_min(0));
        let bins = r.take("analyze.bins", "10", parse_usize_min(1));
        let report_inputs = r.take_optional("report.inputs", |s| {
            let paths: Vec<PathBuf> = s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(PathBuf::from)
                .collect();
            if paths.is_empty() {
                Err("no run directories listed".into())
            } else {
                Ok(paths)
            }
        });

        // Cross-field rule: only the two-representation approaches take a
        // transform, and they require one.
        if let (Some(a), Some(t)) = (&approach, &transform) {
            match (a.uses_transform(), t) {
                (true, None) => r.violations.push(format!(
                    "transform: approach `{}` needs one of {}",
                    a.name(),
                    TransformKind::ALL.map(|t| t.name()).join(", ")
                )),
                (false, Some(t)) => r.violations.push(format!(
                    "transform: approach `{}` does not take a transform (`{}` given); set transform=none",
                    a.name(),
                    t.name()
                )),
                _ => {}
            }
        }

        r.flag_unknown_keys();
        if !r.violations.is_empty() {
            return Err(CliError::Config(r.violations));
        }

        let finetune_mode = if finetune_mode_name.as_deref() == Some("full") {
            FinetuneMode::Full
        } else {
            FinetuneMode::Adapter {
                rank: rank.unwrap(),
                alpha: alpha.unwrap(),
                dropout: dropout.unwrap(),
            }
        };
        Ok(RunConfig {
            task: task.unwrap(),
            approach: approach.unwrap(),
            transform: transform.unwrap(),
            input_format: input_format.unwrap(),
            backend: backend.unwrap(),
            residual_backend,
            seed: seed.unwrap(),
            parallelism: parallelism.unwrap(),
            selection: selection.unwrap(),
            finetune_mode,
            epochs: epochs.unwrap(),
            learning_rate,
            batch_size: batch_size.unwrap(),
            data_train,
            data_validation,
            data_test,
            data_revisions,
            data_annotated,
            split: split.unwrap(),
            checkpoint,
            residual_checkpoint,
            align: AlignParams {
                theta_high: theta_high.unwrap(),
                window: window.unwrap(),
            },
            review_sample: review_sample.unwrap(),
            bins: bins.unwrap(),
            report_inputs: report_inputs.unwrap_or_default(),
            resolved: r.resolved,
        })
    }

    fn data_path_for(&self, split: SplitName) -> Option<&PathBuf> {
        match split {
            SplitName::Train => self.data_train.as_ref(),
            SplitName::Validation => self.data_validation.as_ref(),
            SplitName::Test => self.data_test.as_ref(),
        }
    }
}

// ---------------------------------------------------------------------------
// Run directories and manifests

fn config_hash(resolved: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (key, value) in resolved {
        hasher.update(key.as_bytes());
        hasher.update(b"=");
        hasher.update(value.as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    created_unix: u64,
    seed: u64,
    config_sha256: &'a str,
    config: &'a BTreeMap<String, String>,
}

/// Creates `<out>/<command>-<hash12>/` and writes its manifest.
fn create_run_dir(out: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let hash = config_hash(&cfg.resolved);
    let dir = out.join(format!("{command}-{}", &hash[..12]));
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        created_unix: autoannotate::pipeline_timestamp(),
        seed: cfg.seed,
        config_sha256: &hash,
        config: &cfg.resolved,
    };
    write_json_file(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("run outputs serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_jsonl_file<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for record in records {
        text.push_str(&serde_json::to_string(record).expect("run outputs serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_json_file(path: &Path) -> Result<serde_json::Value, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Table rendering

/// Renders a fixed-width text table with a header rule.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let columns = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(columns) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let render_row = |cells: &[String]| {
        let mut line = String::new();
        for (i, width) in widths.iter().enumerate() {
            if i > 0 {
                line.push_str(" | ");
            }
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            line.push_str(cell);
            for _ in cell.chars().count()..*width {
                line.push(' ');
            }
        }
        line.trim_end().to_string()
    };
    let mut out = render_row(headers);
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Shared command plumbing

/// Loads a labeled sample file in the shape the task expects.
fn load_samples(path: &Path, task: &TaskSpec) -> Result<Vec<EditSample>, CliError> {
    match task.input_arity {
        InputArity::Pair => jsonl::load_edits(path, Some(&task.labels)).map_err(corpus_err),
        InputArity::Single => jsonl::load_singles(path, Some(&task.labels)).map_err(corpus_err),
    }
}

/// Human-readable approach/format identity, used as a report column.
fn setting_label(approach: ApproachKind, transform: Option<TransformKind>, format: InputFormat) -> String {
    let t = transform.map(|t| format!("/{}", t.name())).unwrap_or_default();
    format!("{}{t} {}", approach.name(), format.name())
}

/// Resolves a checkpoint argument to a concrete epoch directory plus the
/// run root that holds `run.json`. Accepts either an epoch directory or a
/// run directory containing `selection.json`.
fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    if path.join(training::CHECKPOINT_FILE).is_file() {
        let root = path.parent().unwrap_or(path).to_path_buf();
        return Ok((path.to_path_buf(), root));
    }
    let selection = path.join(training::SELECTION_FILE);
    if selection.is_file() {
        let value = read_json_file(&selection)?;
        let epoch = value["selected_epoch"].as_u64().ok_or_else(|| {
            CliError::Data(format!("{}: no selected_epoch field", selection.display()))
        })?;
        return Ok((path.join(format!("epoch-{epoch}")), path.to_path_buf()));
    }
    Err(CliError::Data(format!(
        "{}: neither {} nor {} found; pass an epoch directory or a training run directory",
        path.display(),
        training::CHECKPOINT_FILE,
        training::SELECTION_FILE
    )))
}

/// Checkpoint payload split into the pieces restore paths need.
struct LoadedCheckpoint {
    classifier: Classifier,
    backend_state: serde_json::Value,
    finetune: Option<FinetuneConfig>,
    epoch_dir: PathBuf,
}

fn load_checkpoint_bundle(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let (epoch_dir, run_root) = resolve_checkpoint(path)?;
    let payload = training::load_checkpoint(&epoch_dir).map_err(train_err)?;
    let classifier: Classifier = serde_json::from_value(payload["classifier"].clone())
        .map_err(|e| CliError::Data(format!("{}: bad classifier payload: {e}", epoch_dir.display())))?;
    let run_file = run_root.join(training::RUN_FILE);
    let finetune = if run_file.is_file() {
        let run: TrainRun = serde_json::from_value(read_json_file(&run_file)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", run_file.display())))?;
        Some(run.finetune)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        classifier,
        backend_state: payload["backend"].clone(),
        finetune,
        epoch_dir,
    })
}

/// Splits `items` into at most `workers` contiguous chunks and runs `work`
/// on each in its own thread, preserving input order in the output.
fn run_chunked<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    work: impl Fn(&[T]) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.max(1).min(items.len());
    if workers == 1 {
        return Ok(vec![work(items)?]);
    }
    let chunk_len = items.len().div_ceil(workers);
    let chunks: Vec<&[T]> = items.chunks(chunk_len).collect();
    let results: Vec<Result<R, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(|| work(chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Everything a worker needs to build its own residual scorer.
struct ResidualContext {
    classifier: Classifier,
    backend_state: serde_json::Value,
    finetune: Option<FinetuneConfig>,
    spec: BackendSpec,
}

fn residual_context(cfg: &RunConfig) -> Result<Option<ResidualContext>, CliError> {
    let Some(path) = &cfg.residual_checkpoint else {
        return Ok(None);
    };
    let bundle = load_checkpoint_bundle(path)?;
    Ok(Some(ResidualContext {
        classifier: bundle.classifier,
        backend_state: bundle.backend_state,
        finetune: bundle.finetune,
        spec: cfg.residual_backend.clone().unwrap_or_else(|| cfg.backend.clone()),
    }))
}

// ---------------------------------------------------------------------------
// train

/// Prompts plus label names: the closed vocabulary a generation run needs.
fn generation_vocab_texts(data: &DatasetSplit, task: &TaskSpec, format: InputFormat) -> Vec<String> {
    let mut texts: Vec<String> = data
        .train
        .iter()
        .chain(&data.validation)
        .chain(&data.test)
        .map(|s| build_input(s, task, format, TemplateRole::Generation).text)
        .collect();
    texts.extend(task.labels.names().iter().cloned());
    texts
}

fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let mut missing = Vec::new();
    for (key, path) in [
        ("data.train", &cfg.data_train),
        ("data.validation", &cfg.data_validation),
        ("data.test", &cfg.data_test),
    ] {
        if path.is_none() {
            missing.push(format!("{key}: required by train"));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Config(missing));
    }

    let train = load_samples(cfg.data_train.as_ref().unwrap(), &cfg.task)?;
    let validation = load_samples(cfg.data_validation.as_ref().unwrap(), &cfg.task)?;
    let test = load_samples(cfg.data_test.as_ref().unwrap(), &cfg.task)?;
    let data = DatasetSplit::new(train, validation, test, cfg.task.labels.clone());

    let classifier = Classifier::new(cfg.approach, cfg.transform, cfg.input_format, cfg.task.clone())
        .map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let finetune = FinetuneConfig {
        mode: cfg.finetune_mode,
        epochs: cfg.epochs,
        seed: splitmix64(cfg.seed ^ FINETUNE_SEED_SALT),
    };

    let run_dir = create_run_dir(out_dir, "train", cfg)?;
    let mut run = TrainRun::new(classifier, finetune, cfg.seed, run_dir.join("checkpoints"));
    run.selection = cfg.selection;
    run.optimizer = run.optimizer.with_batch_size(cfg.batch_size);
    if let Some(lr) = cfg.learning_rate {
        run.optimizer = run.optimizer.with_learning_rate(lr);
    }

    let backend_seed_salt = BACKEND_SEED_SALT;
    let outcome = match &cfg.backend {
        BackendSpec::Tiny { dim, vocab, .. } => {
            let seed = cfg.backend.effective_seed(cfg.seed, backend_seed_salt);
            let mut backend = match vocab {
                Some(v) => TinyEncoder::with_vocab_buckets(*dim, seed, *v),
                None => TinyEncoder::new(*dim, seed),
            };
            training::train(&mut run, &data, &mut backend).map_err(train_err)?
        }
        BackendSpec::TinyLm { dim, .. } => {
            let seed = cfg.backend.effective_seed(cfg.seed, backend_seed_salt);
            let texts = generation_vocab_texts(&data, &cfg.task, cfg.input_format);
            let mut backend =
                TinyLm::with_vocab_from_texts(*dim, seed, texts.iter().map(String::as_str));
            training::train(&mut run, &data, &mut backend).map_err(train_err)?
        }
        other => {
            return Err(CliError::Backend(format!(
                "backend `{}` is not trainable; train against tiny:... or tiny-lm:...",
                other.label()
            )))
        }
    };

    write_json_file(
        &run_dir.join("outcome.json"),
        &serde_json::json!({
            "selected_epoch": outcome.selected_epoch,
            "selected_dir": outcome.selected_dir,
            "trace": outcome.trace,
        }),
    )?;

    let winner = &outcome.trace[outcome.selected_epoch - 1];
    println!(
        "trained {} for {} epoch(s) on {} sample(s)",
        setting_label(cfg.approach, cfg.transform, cfg.input_format),
        outcome.trace.len(),
        data.train.len(),
    );
    println!(
        "selected epoch {}: validation accuracy {:.4}, macro-F1 {:.4}",
        outcome.selected_epoch, winner.validation.accuracy, winner.validation.macro_f1,
    );
    println!("checkpoint: {}", outcome.selected_dir.display());
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn cmd_evaluate(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let checkpoint = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["checkpoint: required by evaluate".into()]))?;
    let data_key = format!("data.{}", cfg.split.name());
    let data_path = cfg.data_path_for(cfg.split).ok_or_else(|| {
        CliError::Config(vec![format!("{data_key}: required by evaluate with split={}", cfg.split.name())])
    })?;

    let bundle = load_checkpoint_bundle(checkpoint)?;
    let samples = load_samples(data_path, &bundle.classifier.task)?;
    let mut backend = cfg.backend.build_restored(
        cfg.seed,
        BACKEND_SEED_SALT,
        &bundle.backend_state,
        bundle.finetune.as_ref(),
    )?;

    let run_dir = create_run_dir(out_dir, "evaluate", cfg)?;
    let (metrics, preds) =
        evaluation::evaluate_batch(&bundle.classifier, backend.as_mut(), &samples)?;

    write_json_file(&run_dir.join("metrics.json"), &metrics)?;
    let prediction_lines: Vec<serde_json::Value> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            serde_json::json!({
                "edit_id": s.edit_id,
                "gold": s.intent,
                "prediction": p,
            })
        })
        .collect();
    write_jsonl_file(&run_dir.join("predictions.jsonl"), &prediction_lines)?;

    let setting = setting_label(
        bundle.classifier.approach,
        bundle.classifier.transform,
        bundle.classifier.input_format,
    );
    let summary = serde_json::json!({
        "model": cfg.backend.label(),
        "setting": setting,
        "task": bundle.classifier.task.task_id,
        "split": cfg.split.name(),
        "checkpoint": bundle.epoch_dir,
        "metrics": metrics,
    });
    write_json_file(&run_dir.join("summary.json"), &summary)?;

    let mut table = render_table(
        &["model", "setting", "n", "accuracy", "macro-F1", "AIR", "samples/s"].map(String::from),
        &[vec![
            cfg.backend.label(),
            setting,
            metrics.n.to_string(),
            format!("{:.4}", metrics.accuracy),
            format!("{:.4}", metrics.macro_f1),
            format!("{:.4}", metrics.air),
            format!("{:.1}", metrics.throughput),
        ]],
    );
    table.push('\n');
    table.push_str(&render_table(
        &["class", "precision", "recall", "F1"].map(String::from),
        &metrics
            .per_class
            .iter()
            .map(|c| {
                vec![
                    c.label.clone(),
                    format!("{:.4}", c.precision),
                    format!("{:.4}", c.recall),
                    format!("{:.4}", c.f1),
                ]
            })
            .collect::<Vec<_>>(),
    ));
    fs::write(run_dir.join("table.txt"), &table)
        .map_err(|e| CliError::Io(format!("{}: {e}", run_dir.join("table.txt").display())))?;
    print!("{table}");
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// align

#[derive(Serialize)]
struct AlignmentRecord {
    doc_id: String,
    #[serde(flatten)]
    result: AlignmentResult,
}

fn align_documents(
    docs: &[DocumentRevision],
    cfg: &RunConfig,
    residual: Option<&ResidualContext>,
) -> Result<Vec<(AlignmentRecord, Vec<EditSample>)>, CliError> {
    let per_chunk = run_chunked(docs, cfg.parallelism, |chunk| {
        // Each worker gets its own backend handle; scorers are stateful
        // model sessions and must not be shared across threads. The scorer
        // borrows the backend, so the backend binding must come first.
        let mut backend_store: Option<Box<dyn Backend>> = match residual {
            Some(ctx) => Some(ctx.spec.build_restored(
                cfg.seed,
                RESIDUAL_SEED_SALT,
                &ctx.backend_state,
                ctx.finetune.as_ref(),
            )?),
            None => None,
        };
        let mut scorer_store: Option<ClassifierScorer> = match (&mut backend_store, residual) {
            (Some(backend), Some(ctx)) => {
                Some(ClassifierScorer::new(&ctx.classifier, backend.as_mut())?)
            }
            _ => None,
        };
        let mut records = Vec::with_capacity(chunk.len());
        for doc in chunk {
            let mut result = prealign(&doc.old_sentences, &doc.new_sentences, &cfg.align);
            if let Some(scorer) = scorer_store.as_mut() {
                result = classify_residual(
                    result,
                    &doc.old_sentences,
                    &doc.new_sentences,
                    &cfg.align,
                    scorer,
                )?;
            }
            result.validate(doc.old_sentences.len(), doc.new_sentences.len())?;
            let edits = derive_edits(&doc.doc_id, &result, &doc.old_sentences, &doc.new_sentences);
            records.push((
                AlignmentRecord {
                    doc_id: doc.doc_id.clone(),
                    result,
                },
                edits,
            ));
        }
        Ok(records)
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

fn cmd_align(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let revisions_path = cfg
        .data_revisions
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["data.revisions: required by align".into()]))?;
    let docs = jsonl::load_revisions(revisions_path).map_err(corpus_err)?;
    let residual = residual_context(cfg)?;

    let run_dir = create_run_dir(out_dir, "align", cfg)?;
    let aligned = align_documents(&docs, cfg, residual.as_ref())?;

    let records: Vec<&AlignmentRecord> = aligned.iter().map(|(r, _)| r).collect();
    write_jsonl_file(&run_dir.join("alignments.jsonl"), &records)?;
    let edits: Vec<&EditSample> = aligned.iter().flat_map(|(_, e)| e).collect();
    write_jsonl_file(&run_dir.join("edits.jsonl"), &edits)?;

    let unchanged: usize = aligned
        .iter()
        .map(|(r, _)| r.result.pairs.iter().filter(|p| p.status == PairStatus::Unchanged).count())
        .sum();
    let modified: usize = aligned
        .iter()
        .map(|(r, _)| r.result.pairs.iter().filter(|p| p.status == PairStatus::Modified).count())
        .sum();
    let added: usize = aligned.iter().map(|(r, _)| r.result.added.len()).sum();
    let deleted: usize = aligned.iter().map(|(r, _)| r.result.deleted.len()).sum();
    println!(
        "aligned {} document(s): {unchanged} unchanged, {modified} modified, {added} added, {deleted} deleted sentence(s); {} edit(s)",
        docs.len(),
        edits.len(),
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// annotate

fn cmd_annotate(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let revisions_path = cfg
        .data_revisions
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["data.revisions: required by annotate".into()]))?;
    let checkpoint = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["checkpoint: required by annotate".into()]))?;

    let docs = jsonl::load_revisions(revisions_path).map_err(corpus_err)?;
    let intent = load_checkpoint_bundle(checkpoint)?;
    let residual = residual_context(cfg)?;
    let annotate_config = AnnotateConfig {
        align: cfg.align,
        provenance: Provenance::new(intent.epoch_dir.display().to_string()),
    };

    let run_dir = create_run_dir(out_dir, "annotate", cfg)?;
    let per_chunk = run_chunked(&docs, cfg.parallelism, |chunk| {
        let mut backend = cfg.backend.build_restored(
            cfg.seed,
            BACKEND_SEED_SALT,
            &intent.backend_state,
            intent.finetune.as_ref(),
        )?;
        let mut residual_backend_store: Option<Box<dyn Backend>> = match residual.as_ref() {
            Some(ctx) => Some(ctx.spec.build_restored(
                cfg.seed,
                RESIDUAL_SEED_SALT,
                &ctx.backend_state,
                ctx.finetune.as_ref(),
            )?),
            None => None,
        };
        let mut scorer_store: Option<ClassifierScorer> = match (&mut residual_backend_store, residual.as_ref())
        {
            (Some(backend), Some(ctx)) => {
                Some(ClassifierScorer::new(&ctx.classifier, backend.as_mut())?)
            }
            _ => None,
        };
        let outcome = autoannotate::annotate(
            chunk,
            &annotate_config,
            &intent.classifier,
            backend.as_mut(),
            scorer_store.as_mut().map(|s| s as &mut dyn ResidualScorer),
        )?;
        Ok(outcome)
    })?;
    let mut outcome = AnnotateOutcome {
        annotated: Vec::new(),
        failures: Vec::new(),
    };
    for part in per_chunk {
        outcome.annotated.extend(part.annotated);
        outcome.failures.extend(part.failures);
    }

    write_jsonl_file(&run_dir.join("annotated.jsonl"), &outcome.annotated)?;
    write_json_file(&run_dir.join("failures.json"), &outcome.failures)?;
    let stats = autoannotate::corpus_stats(&outcome.annotated);
    write_json_file(&run_dir.join("stats.json"), &stats)?;
    if cfg.review_sample > 0 {
        let worksheet = autoannotate::sample_for_review(
            &outcome.annotated,
            cfg.review_sample,
            splitmix64(cfg.seed ^ REVIEW_SEED_SALT),
        )?;
        fs::write(run_dir.join("worksheet.csv"), worksheet)
            .map_err(|e| CliError::Io(format!("{}: {e}", run_dir.join("worksheet.csv").display())))?;
    }

    println!(
        "annotated {} of {} document(s) with {} edit(s); {} failure(s)",
        outcome.annotated.len(),
        docs.len(),
        outcome.total_edits(),
        outcome.failures.len(),
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

fn read_annotated(path: &Path) -> Result<Vec<AnnotatedRevision>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut annotated = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rev: AnnotatedRevision = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        rev.validate()
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        annotated.push(rev);
    }
    Ok(annotated)
}

fn cmd_analyze(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let annotated_path = cfg
        .data_annotated
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["data.annotated: required by analyze".into()]))?;
    let revisions_path = cfg
        .data_revisions
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["data.revisions: required by analyze".into()]))?;

    let annotated = read_annotated(annotated_path)?;
    let revisions = jsonl::load_revisions(revisions_path).map_err(corpus_err)?;
    let run_dir = create_run_dir(out_dir, "analyze", cfg)?;

    let report = analysis::analyze(&annotated, &revisions, cfg.bins)?;
    write_json_file(&run_dir.join("analysis.json"), &report)?;

    println!(
        "analyzed {} document(s), {} edit(s): {} successful, {} unsuccessful, {} unlabeled",
        report.n_documents,
        report.n_edits,
        report.success.successful,
        report.success.unsuccessful,
        report.success.unlabeled,
    );
    match (&report.regression, &report.regression_note) {
        (Some(fit), _) => println!(
            "regression: {} coefficient(s), LLR {:.3} (p = {:.4})",
            fit.coefficients.len(),
            fit.llr_statistic,
            fit.llr_p,
        ),
        (None, Some(note)) => println!("regression: skipped ({note})"),
        (None, None) => {}
    }
    if let Some(note) = &report.group_tests_note {
        println!("group tests: skipped ({note})");
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug)]
struct EvaluateRow {
    model: String,
    setting: String,
    metrics: MetricsReport,
}

fn render_report(
    evaluations: &[EvaluateRow],
    analyses: &[(String, analysis::AnalysisReport)],
) -> String {
    let mut out = String::new();
    if !evaluations.is_empty() {
        let models: BTreeSet<&String> = evaluations.iter().map(|r| &r.model).collect();
        let settings: BTreeSet<&String> = evaluations.iter().map(|r| &r.setting).collect();
        let mut cells: BTreeMap<(&String, &String), &MetricsReport> = BTreeMap::new();
        for row in evaluations {
            cells.insert((&row.model, &row.setting), &row.metrics);
        }
        let mut headers = vec!["model".to_string()];
        headers.extend(settings.iter().map(|s| (*s).clone()));
        let rows: Vec<Vec<String>> = models
            .iter()
            .map(|model| {
                let mut row = vec![(*model).clone()];
                for setting in &settings {
                    row.push(match cells.get(&(*model, *setting)) {
                        Some(m) => format!("{:.1} / {:.1}", m.accuracy * 100.0, m.macro_f1 * 100.0),
                        None => "-".to_string(),
                    });
                }
                row
            })
            .collect();
        out.push_str("accuracy / macro-F1 (%, rows = model, columns = setting)\n\n");
        out.push_str(&render_table(&headers, &rows));
        out.push('\n');

        out.push_str("per-run details\n\n");
        out.push_str(&render_table(
            &["model", "setting", "n", "AIR", "samples/s"].map(String::from),
            &evaluations
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        r.setting.clone(),
                        r.metrics.n.to_string(),
                        format!("{:.4}", r.metrics.air),
                        format!("{:.1}", r.metrics.throughput),
                    ]
                })
                .collect::<Vec<_>>(),
        ));
        out.push('\n');
    }
    for (origin, report) in analyses {
        out.push_str(&format!("analysis ({origin})\n\n"));
        out.push_str(&format!(
            "documents: {}; edits: {}; success {} / {} / {} (successful / unsuccessful / unlabeled)\n\n",
            report.n_documents,
            report.n_edits,
            report.success.successful,
            report.success.unsuccessful,
            report.success.unlabeled,
        ));
        match (&report.regression, &report.regression_note) {
            (Some(fit), _) => {
                let mut rows = vec![vec![
                    "(intercept)".to_string(),
                    format!("{:.4}", fit.intercept),
                    format!("{:.4}", fit.intercept_se),
                    format!("{:.4}", fit.intercept_wald_p),
                ]];
                for ((name, coef), (se, p)) in report
                    .focus_regressors
                    .iter()
                    .zip(&fit.coefficients)
                    .zip(fit.std_errors.iter().zip(&fit.wald_p))
                {
                    rows.push(vec![
                        name.clone(),
                        format!("{coef:.4}"),
                        format!("{se:.4}"),
                        format!("{p:.4}"),
                    ]);
                }
                out.push_str(&render_table(
                    &["regressor", "coefficient", "std error", "Wald p"].map(String::from),
                    &rows,
                ));
                out.push_str(&format!(
                    "\nlikelihood ratio vs intercept-only: {:.3} (p = {:.4})\n\n",
                    fit.llr_statistic, fit.llr_p,
                ));
            }
            (None, Some(note)) => out.push_str(&format!("regression skipped: {note}\n\n")),
            (None, None) => {}
        }
        if let Some(tests) = &report.group_tests {
            out.push_str("group mean comparisons (successful vs unsuccessful)\n\n");
            out.push_str(&render_table(
                &["edits per document", "mean (successful)", "mean (unsuccessful)", "p"]
                    .map(String::from),
                &tests
                    .iter()
                    .map(|t| {
                        vec![
                            t.label.clone(),
                            format!("{:.3}", t.mean_a),
                            format!("{:.3}", t.mean_b),
                            format!("{:.4}", t.p_value),
                        ]
                    })
                    .collect::<Vec<_>>(),
            ));
            out.push('\n');
        } else if let Some(note) = &report.group_tests_note {
            out.push_str(&format!("group tests skipped: {note}\n\n"));
        }
    }
    if out.is_empty() {
        out.push_str("nothing to report\n");
    }
    out
}

fn cmd_report(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    if cfg.report_inputs.is_empty() {
        return Err(CliError::Config(vec![
            "report.inputs: required by report (pass run directories as arguments)".into(),
        ]));
    }
    let mut evaluations = Vec::new();
    let mut analyses = Vec::new();
    for dir in &cfg.report_inputs {
        let manifest = read_json_file(&dir.join("manifest.json"))?;
        match manifest["command"].as_str() {
            Some("evaluate") => {
                let summary = read_json_file(&dir.join("summary.json"))?;
                let metrics: MetricsReport = serde_json::from_value(summary["metrics"].clone())
                    .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
                evaluations.push(EvaluateRow {
                    model: summary["model"].as_str().unwrap_or("?").to_string(),
                    setting: summary["setting"].as_str().unwrap_or("?").to_string(),
                    metrics,
                });
            }
            Some("analyze") => {
                let report: analysis::AnalysisReport =
                    serde_json::from_value(read_json_file(&dir.join("analysis.json"))?)
                        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
                analyses.push((dir.display().to_string(), report));
            }
            Some(other) => {
                return Err(CliError::Data(format!(
                    "{}: is a `{other}` run; report reads evaluate and analyze runs",
                    dir.display()
                )))
            }
            None => {
                return Err(CliError::Data(format!(
                    "{}: manifest has no command field",
                    dir.display()
                )))
            }
        }
    }

    let run_dir = create_run_dir(out_dir, "report", cfg)?;
    let text = render_report(&evaluations, &analyses);
    fs::write(run_dir.join("report.txt"), &text)
        .map_err(|e| CliError::Io(format!("{}: {e}", run_dir.join("report.txt").display())))?;
    print!("{text}");
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Parser, Debug)]
#[command(
    name = "redline",
    version,
    about = "Sentence-edit classification, revision alignment, and corpus analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(clap::Args, Debug)]
pub struct Common {
    /// Flat `key = value` configuration file with dotted keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set finetune.epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", action = ArgAction::Append)]
    pub set: Vec<String>,
    /// Directory run outputs are created under
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out_dir: PathBuf,
}

macro_rules! push_override {
    ($list:expr, $key:literal, $value:expr) => {
        if let Some(v) = &$value {
            $list.push(($key.to_string(), v.clone()));
        }
    };
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Task id (key `task`)
    #[arg(long, value_name = "ID")]
    pub task: Option<String>,
    /// Classification approach: gen | seqc | snet | xnet (key `approach`)
    #[arg(long, value_name = "NAME")]
    pub approach: Option<String>,
    /// Representation transform, `none` for approaches without one (key `transform`)
    #[arg(long, value_name = "NAME")]
    pub transform: Option<String>,
    /// Input format (key `format`)
    #[arg(long, value_name = "NAME")]
    pub format: Option<String>,
    /// Backend spec (key `backend`)
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Root seed (key `seed`)
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// Training epoch budget (key `finetune.epochs`)
    #[arg(long, value_name = "N")]
    pub epochs: Option<String>,
    /// Training split JSONL (key `data.train`)
    #[arg(long = "train", value_name = "FILE")]
    pub train_data: Option<String>,
    /// Validation split JSONL (key `data.validation`)
    #[arg(long = "validation", value_name = "FILE")]
    pub validation_data: Option<String>,
    /// Test split JSONL (key `data.test`)
    #[arg(long = "test", value_name = "FILE")]
    pub test_data: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list = Vec::new();
        push_override!(list, "task", self.task);
        push_override!(list, "approach", self.approach);
        push_override!(list, "transform", self.transform);
        push_override!(list, "format", self.format);
        push_override!(list, "backend", self.backend);
        push_override!(list, "seed", self.seed);
        push_override!(list, "finetune.epochs", self.epochs);
        push_override!(list, "data.train", self.train_data);
        push_override!(list, "data.validation", self.validation_data);
        push_override!(list, "data.test", self.test_data);
        list
    }
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory: an epoch dir or a training run dir (key `checkpoint`)
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<String>,
    /// Split to evaluate: train | validation | test (key `split`)
    #[arg(long, value_name = "NAME")]
    pub split: Option<String>,
    /// Backend spec; must match what the checkpoint was trained on (key `backend`)
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Root seed (key `seed`)
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// Training split JSONL (key `data.train`)
    #[arg(long = "train", value_name = "FILE")]
    pub train_data: Option<String>,
    /// Validation split JSONL (key `data.validation`)
    #[arg(long = "validation", value_name = "FILE")]
    pub validation_data: Option<String>,
    /// Test split JSONL (key `data.test`)
    #[arg(long = "test", value_name = "FILE")]
    pub test_data: Option<String>,
}

impl EvaluateArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list = Vec::new();
        push_override!(list, "checkpoint", self.checkpoint);
        push_override!(list, "split", self.split);
        push_override!(list, "backend", self.backend);
        push_override!(list, "seed", self.seed);
        push_override!(list, "data.train", self.train_data);
        push_override!(list, "data.validation", self.validation_data);
        push_override!(list, "data.test", self.test_data);
        list
    }
}

#[derive(clap::Args, Debug)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: Common,
    /// Document revisions JSONL (key `data.revisions`)
    #[arg(long, value_name = "FILE")]
    pub revisions: Option<String>,
    /// Pre-alignment similarity threshold (key `align.theta-high`)
    #[arg(long = "theta-high", value_name = "X")]
    pub theta_high: Option<String>,
    /// Position window (key `align.window`)
    #[arg(long, value_name = "X")]
    pub window: Option<String>,
    /// Binary classifier checkpoint for stage 2 (key `residual-checkpoint`)
    #[arg(long = "residual-checkpoint", value_name = "DIR")]
    pub residual_checkpoint: Option<String>,
    /// Backend spec for the residual classifier (key `residual-backend`)
    #[arg(long = "residual-backend", value_name = "SPEC")]
    pub residual_backend: Option<String>,
    /// Worker count (key `parallelism`)
    #[arg(long, value_name = "N")]
    pub parallelism: Option<String>,
    /// Root seed (key `seed`)
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
}

impl AlignArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list = Vec::new();
        push_override!(list, "data.revisions", self.revisions);
        push_override!(list, "align.theta-high", self.theta_high);
        push_override!(list, "align.window", self.window);
        push_override!(list, "residual-checkpoint", self.residual_checkpoint);
        push_override!(list, "residual-backend", self.residual_backend);
        push_override!(list, "parallelism", self.parallelism);
        push_override!(list, "seed", self.seed);
        list
    }
}

#[derive(clap::Args, Debug)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Document revisions JSONL (key `data.revisions`)
    #[arg(long, value_name = "FILE")]
    pub revisions: Option<String>,
    /// Intent classifier checkpoint (key `checkpoint`)
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<String>,
    /// Backend spec; must match what the checkpoint was trained on (key `backend`)
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Binary classifier checkpoint for stage 2 (key `residual-checkpoint`)
    #[arg(long = "residual-checkpoint", value_name = "DIR")]
    pub residual_checkpoint: Option<String>,
    /// Backend spec for the residual classifier (key `residual-backend`)
    #[arg(long = "residual-backend", value_name = "SPEC")]
    pub residual_backend: Option<String>,
    /// Pre-alignment similarity threshold (key `align.theta-high`)
    #[arg(long = "theta-high", value_name = "X")]
    pub theta_high: Option<String>,
    /// Position window (key `align.window`)
    #[arg(long, value_name = "X")]
    pub window: Option<String>,
    /// Documents to sample into the review worksheet (key `annotate.review-sample`)
    #[arg(long = "review-sample", value_name = "N")]
    pub review_sample: Option<String>,
    /// Worker count (key `parallelism`)
    #[arg(long, value_name = "N")]
    pub parallelism: Option<String>,
    /// Root seed (key `seed`)
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
}

impl AnnotateArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list = Vec::new();
        push_override!(list, "data.revisions", self.revisions);
        push_override!(list, "checkpoint", self.checkpoint);
        push_override!(list, "backend", self.backend);
        push_override!(list, "residual-checkpoint", self.residual_checkpoint);
        push_override!(list, "residual-backend", self.residual_backend);
        push_override!(list, "align.theta-high", self.theta_high);
        push_override!(list, "align.window", self.window);
        push_override!(list, "annotate.review-sample", self.review_sample);
        push_override!(list, "parallelism", self.parallelism);
        push_override!(list, "seed", self.seed);
        list
    }
}

#[derive(clap::Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Annotated corpus JSONL (key `data.annotated`)
    #[arg(long, value_name = "FILE")]
    pub annotated: Option<String>,
    /// Document revisions JSONL with review decisions (key `data.revisions`)
    #[arg(long, value_name = "FILE")]
    pub revisions: Option<String>,
    /// Position histogram bin count (key `analyze.bins`)
    #[arg(long, value_name = "N")]
    pub bins: Option<String>,
}

impl AnalyzeArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list = Vec::new();
        push_override!(list, "data.annotated", self.annotated);
        push_override!(list, "data.revisions", self.revisions);
        push_override!(list, "analyze.bins", self.bins);
        list
    }
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directories to summarize (evaluate and analyze runs)
    #[arg(value_name = "RUN_DIR", required = true)]
    pub inputs: Vec<PathBuf>,
}

impl ReportArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let joined = self
            .inputs
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![("report.inputs".to_string(), joined)]
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier, checkpointing every epoch
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split
    Evaluate(EvaluateArgs),
    /// Align old/new sentences of document revisions and derive edits
    Align(AlignArgs),
    /// Align revisions and label every edit with a trained classifier
    Annotate(AnnotateArgs),
    /// Analyze an annotated corpus against review decisions
    Analyze(AnalyzeArgs),
    /// Render tables from evaluate and analyze run directories
    Report(ReportArgs),
}

fn collect_overrides(common: &Common, sugar: Vec<(String, String)>) -> Result<Vec<(String, String)>, CliError> {
    let mut list = Vec::new();
    let mut violations = Vec::new();
    for entry in &common.set {
        match entry.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                list.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => violations.push(format!("--set {entry}: expected KEY=VALUE")),
        }
    }
    if !violations.is_empty() {
        return Err(CliError::Config(violations));
    }
    list.extend(sugar);
    Ok(list)
}

/// Executes one parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_train(&cfg, &args.common.out_dir)
        }
        Command::Evaluate(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_evaluate(&cfg, &args.common.out_dir)
        }
        Command::Align(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_align(&cfg, &args.common.out_dir)
        }
        Command::Annotate(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_annotate(&cfg, &args.common.out_dir)
        }
        Command::Analyze(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_analyze(&cfg, &args.common.out_dir)
        }
        Command::Report(args) => {
            let overrides = collect_overrides(&args.common, args.overrides())?;
            let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides)?;
            cmd_report(&cfg, &args.common.out_dir)
        }
    }
}
