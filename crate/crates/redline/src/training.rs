//! Fine-tuning loop with per-epoch checkpointing and validation-based
//! model selection.
//!
//! One [`train`] call owns its backend exclusively and runs the classic
//! recipe: seeded per-epoch shuffles, mini-batch adaptive-moment updates
//! with a linear learning-rate warmup, a validation pass after every
//! epoch, and one checkpoint per epoch. Selection picks the epoch that
//! maximizes the validation metric, breaking ties with the other metric
//! and then toward the earlier epoch.
//!
//! Everything that influences a weight is either in the run configuration
//! or in the checkpoint (optimizer moments, RNG states), so [`resume`]
//! continues a run bit-identically: interrupting after epoch `k` and
//! resuming yields byte-identical later checkpoints, traces, and
//! selection.
//!
//! Checkpoint directory layout, under `TrainRun::checkpoint_dir`:
//!
//! ```text
//! run.json             run configuration, written at start
//! metrics.json         per-epoch trace, rewritten after each epoch
//! selection.json       winning epoch and the metric that chose it
//! epoch-N/checkpoint.json         payload (backend + head + optimizer)
//! epoch-N/checkpoint.json.sha256  integrity sidecar
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::approaches::{
    head_backward, softmax_cross_entropy, ApproachError, ApproachKind, Classifier, ClassifierHead,
};
use crate::backend::{splitmix64, BackendError, FinetuneConfig, FinetuneMode, TrainableBackend};
use crate::corpus::{DatasetSplit, EditSample};
use crate::evaluation::{evaluate_batch, EvalError, MetricsReport};
use crate::prompting::{build_input, build_siamese_inputs, TemplateRole};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{which} split is empty")]
    EmptySplit { which: &'static str },
    #[error("non-finite loss at epoch {epoch}, step {step}; aborting")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("training sample {edit_id} has no gold label")]
    MissingGold { edit_id: String },
    #[error("training sample {edit_id} is labeled {label:?}, which is not in the task's label set")]
    UnknownLabel { edit_id: String, label: String },
    #[error("cannot restore from {path}: {reason}")]
    Restore { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Approach(#[from] ApproachError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Default learning rate when only adapters train.
pub const ADAPTER_LEARNING_RATE: f64 = 2e-4;
/// Default learning rate when every weight trains.
pub const FULL_LEARNING_RATE: f64 = 2e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
/// Fraction of total optimizer steps spent ramping the learning rate.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.03;

/// Mini-batch optimizer settings. The defaults follow common fine-tuning
/// practice for the two modes; every field is overridable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of total steps over which the learning rate ramps linearly
    /// from zero; it stays constant afterwards.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn for_mode(mode: &FinetuneMode) -> Self {
        let learning_rate = match mode {
            FinetuneMode::Adapter { .. } => ADAPTER_LEARNING_RATE,
            FinetuneMode::Full => FULL_LEARNING_RATE,
        };
        Self {
            learning_rate,
            batch_size: DEFAULT_BATCH_SIZE,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    /// Learning rate at 1-based optimizer step `step` of `total_steps`.
    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        let warmup = ((self.warmup_fraction * total_steps as f64).round() as u64).max(1);
        if step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / warmup as f64
        }
    }
}

/// Which validation metric picks the winning epoch. The other metric
/// breaks ties; remaining ties go to the earlier epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    MacroF1,
    Accuracy,
}

/// One epoch of the metric trace.
///
/// The validation report's wall-clock throughput is zeroed before
/// recording, so runs with identical seeds produce byte-identical traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub validation: MetricsReport,
}

/// A training run: the classifier being trained, what fine-tuning updates,
/// optimizer settings, seeds, and where checkpoints go.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub classifier: Classifier,
    pub finetune: FinetuneConfig,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionMetric,
    /// Seeds head initialization and the per-epoch shuffles. Adapter
    /// initialization and dropout draw from `finetune.seed` instead.
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Filled by [`train`]/[`resume`]: the per-epoch validation trace.
    #[serde(default)]
    pub epoch_metrics: Vec<EpochRecord>,
    /// Filled by [`train`]/[`resume`]: 1-based winning epoch.
    #[serde(default)]
    pub selected_epoch: Option<usize>,
}

impl TrainRun {
    /// A run with mode-appropriate optimizer defaults and macro-F1
    /// selection.
    pub fn new(
        classifier: Classifier,
        finetune: FinetuneConfig,
        seed: u64,
        checkpoint_dir: impl Into<PathBuf>,
    ) -> Self {
        let optimizer = OptimizerConfig::for_mode(&finetune.mode);
        Self {
            classifier,
            finetune,
            optimizer,
            selection: SelectionMetric::MacroF1,
            seed,
            checkpoint_dir: checkpoint_dir.into(),
            epoch_metrics: Vec::new(),
            selected_epoch: None,
        }
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir.join(format!("epoch-{epoch}"))
    }
}

/// Result of a completed (or resumed-to-completion) run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// 1-based epoch whose checkpoint won validation selection.
    pub selected_epoch: usize,
    pub selected_dir: PathBuf,
    pub trace: Vec<EpochRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKSUM_FILE: &str = "checkpoint.json.sha256";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_FILE: &str = "run.json";
pub const SELECTION_FILE: &str = "selection.json";
const CHECKPOINT_FORMAT: u32 = 1;
const HEAD_SEED_SALT: u64 = 0x4ead;

/// Adaptive-moment optimizer state over one flat parameter vector laid out
/// as `[backend trainable parameters | head weights | head bias]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Adam {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one slice of the flat vector. `scale` converts the summed
    /// batch gradients into means.
    fn update(
        &mut self,
        cfg: &OptimizerConfig,
        lr: f64,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        scale: f64,
    ) {
        debug_assert_eq!(params.len(), grads.len());
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (j, p) in params.iter_mut().enumerate() {
            let g = grads[j] * scale;
            let m = &mut self.m[offset + j];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            let v = &mut self.v[offset + j];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
        }
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn head_param_count(classifier: &Classifier) -> usize {
    classifier
        .head
        .as_ref()
        .map(ClassifierHead::parameter_count)
        .unwrap_or(0)
}

fn check_splits(data: &DatasetSplit) -> Result<(), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptySplit { which: "validation" });
    }
    Ok(())
}

/// Gold label strings and label-set indices for every training sample,
/// resolved once up front so label problems surface before any training.
fn resolve_golds(
    samples: &[EditSample],
    classifier: &Classifier,
) -> Result<Vec<(String, usize)>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let gold = s.intent.clone().ok_or_else(|| TrainError::MissingGold {
                edit_id: s.edit_id.clone(),
            })?;
            let idx = classifier.task.labels.index_of(&gold).ok_or_else(|| {
                TrainError::UnknownLabel {
                    edit_id: s.edit_id.clone(),
                    label: gold.clone(),
                }
            })?;
            Ok((gold, idx))
        })
        .collect()
}

fn head_loss(
    head: &ClassifierHead,
    x: &[f64],
    gold: usize,
) -> Result<(f64, crate::approaches::HeadGradients), ApproachError> {
    let logits = head.logits(x)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, gold);
    Ok((loss, head_backward(head, x, &dlogits)))
}

fn accumulate(into: &mut [f64], from: &[f64]) {
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Forward and backward for one sample. Backend gradients accumulate in
/// the backend; head gradients accumulate into `head_dw`/`head_db`.
/// Returns the sample's loss.
fn train_sample<B: TrainableBackend>(
    backend: &mut B,
    classifier: &Classifier,
    sample: &EditSample,
    gold: &str,
    gold_idx: usize,
    head_dw: &mut [f64],
    head_db: &mut [f64],
) -> Result<f64, TrainError> {
    let task = &classifier.task;
    let fmt = classifier.input_format;
    match classifier.approach {
        ApproachKind::Gen => {
            let input = build_input(sample, task, fmt, TemplateRole::Generation);
            Ok(backend.generation_loss_train(&input, gold)?)
        }
        ApproachKind::SeqC => {
            let head = require_head(classifier)?;
            let input = build_input(sample, task, fmt, TemplateRole::Encoding);
            let state = backend.encode_last_train(&input)?;
            let (loss, hg) = head_loss(head, &state, gold_idx)?;
            accumulate(head_dw, &hg.dweights);
            accumulate(head_db, &hg.dbias);
            backend.backprop_last(&hg.dinput);
            Ok(loss)
        }
        ApproachKind::XNet => {
            let head = require_head(classifier)?;
            let transform = classifier.transform.expect("XNet carries a transform");
            let input = build_input(sample, task, fmt, TemplateRole::Encoding);
            let spans = backend.encode_spans_train(&input)?;
            let u = transform.apply(&spans.old, &spans.new)?;
            let (loss, hg) = head_loss(head, &u, gold_idx)?;
            accumulate(head_dw, &hg.dweights);
            accumulate(head_db, &hg.dbias);
            let (dold, dnew) = transform.backward(&spans.old, &spans.new, &hg.dinput);
            backend.backprop_spans(&dold, &dnew);
            Ok(loss)
        }
        ApproachKind::SNet => {
            let head = require_head(classifier)?;
            let transform = classifier.transform.expect("SNet carries a transform");
            let (old_input, new_input) = build_siamese_inputs(sample, fmt);
            let o = backend.encode_last_train(&old_input)?;
            let n = backend.encode_last_train(&new_input)?;
            let u = transform.apply(&o, &n)?;
            let (loss, hg) = head_loss(head, &u, gold_idx)?;
            accumulate(head_dw, &hg.dweights);
            accumulate(head_db, &hg.dbias);
            let (dold, dnew) = transform.backward(&o, &n, &hg.dinput);
            // Encoder traces pop last-in first-out; the new side was
            // encoded second, so its gradient goes back first.
            backend.backprop_last(&dnew);
            backend.backprop_last(&dold);
            Ok(loss)
        }
    }
}

fn require_head(classifier: &Classifier) -> Result<&ClassifierHead, TrainError> {
    classifier.head.as_ref().ok_or_else(|| {
        TrainError::Config(format!(
            "{} needs a head; none is set",
            classifier.approach.name()
        ))
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_at(path))
}

fn save_checkpoint<B: TrainableBackend>(
    run: &TrainRun,
    epoch: usize,
    backend: &B,
    adam: &Adam,
) -> Result<(), TrainError> {
    let dir = run.epoch_dir(epoch);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let mut state = backend.export_state();
    if matches!(run.finetune.mode, FinetuneMode::Adapter { .. }) {
        // Base weights are frozen in adapter mode and reproducible from
        // the backend constructor, so checkpoints keep only what training
        // can change (adapter, head, RNG, optimizer).
        if let Some(obj) = state.as_object_mut() {
            obj.remove("weights");
        }
    }
    let payload = serde_json::json!({
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "backend": state,
        "classifier": run.classifier,
        "optimizer": adam,
    });
    let bytes = serde_json::to_vec(&payload).expect("checkpoint serializes");
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, &bytes).map_err(io_at(&path))?;
    let checksum_path = dir.join(CHECKSUM_FILE);
    let line = format!("{}  {CHECKPOINT_FILE}\n", sha256_hex(&bytes));
    fs::write(&checksum_path, line).map_err(io_at(&checksum_path))
}

/// Reads and checksum-verifies one epoch directory's checkpoint payload.
pub fn load_checkpoint(dir: &Path) -> Result<serde_json::Value, TrainError> {
    let path = dir.join(CHECKPOINT_FILE);
    let restore = |reason: String| TrainError::Restore {
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| restore(e.to_string()))?;
    let checksum_path = dir.join(CHECKSUM_FILE);
    let recorded = fs::read_to_string(&checksum_path).map_err(|e| TrainError::Restore {
        path: checksum_path.clone(),
        reason: e.to_string(),
    })?;
    let recorded_hex = recorded.split_whitespace().next().unwrap_or("");
    let actual = sha256_hex(&bytes);
    if recorded_hex != actual {
        return Err(restore(format!(
            "checksum mismatch: sidecar says {recorded_hex}, file hashes to {actual}"
        )));
    }
    serde_json::from_slice(&bytes).map_err(|e| restore(e.to_string()))
}

/// 1-based index of the epoch maximizing the selection metric; the other
/// metric breaks ties, remaining ties go to the earliest epoch. `None`
/// only for an empty trace.
pub fn select_epoch(trace: &[EpochRecord], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<(f64, f64, usize)> = None;
    for r in trace {
        let (primary, secondary) = match metric {
            SelectionMetric::MacroF1 => (r.validation.macro_f1, r.validation.accuracy),
            SelectionMetric::Accuracy => (r.validation.accuracy, r.validation.macro_f1),
        };
        let better = match &best {
            None => true,
            Some((bp, bs, _)) => primary > *bp || (primary == *bp && secondary > *bs),
        };
        if better {
            best = Some((primary, secondary, r.epoch));
        }
    }
    best.map(|(_, _, epoch)| epoch)
}

/// Trains `run.finetune.epochs` passes over the shuffled train split,
/// validating and checkpointing after every epoch, then selects the
/// winning epoch. The backend must be freshly constructed; this call
/// configures fine-tuning on it.
pub fn train<B: TrainableBackend>(
    run: &mut TrainRun,
    data: &DatasetSplit,
    backend: &mut B,
) -> Result<TrainOutcome, TrainError> {
    check_splits(data)?;
    if run.finetune.epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    backend.apply_finetune(&run.finetune)?;
    if run.classifier.approach.uses_head() && run.classifier.head.is_none() {
        let hidden = backend.info().hidden_dim;
        run.classifier
            .init_head(hidden, splitmix64(run.seed ^ HEAD_SEED_SALT));
    }
    fs::create_dir_all(&run.checkpoint_dir).map_err(io_at(&run.checkpoint_dir))?;
    write_json(&run.checkpoint_dir.join(RUN_FILE), run)?;

    let n = backend.trainable_parameters() + head_param_count(&run.classifier);
    let mut adam = Adam::new(n);
    let mut trace = Vec::new();
    run_epochs(run, data, backend, &mut adam, 1, &mut trace)?;
    finish(run, trace)
}

/// Restores the state saved after `checkpoint_index` epochs and continues
/// the run to completion. The backend must be freshly constructed with the
/// same configuration as the original run; full-mode checkpoints carry
/// every weight, adapter-mode checkpoints only the adapter, head, and RNG
/// states (base weights come from the constructor).
///
/// Resuming from the final epoch retrains nothing and just recomputes the
/// selection.
pub fn resume<B: TrainableBackend>(
    run: &mut TrainRun,
    data: &DatasetSplit,
    backend: &mut B,
    checkpoint_index: usize,
) -> Result<TrainOutcome, TrainError> {
    check_splits(data)?;
    let epochs = run.finetune.epochs;
    if checkpoint_index == 0 || checkpoint_index > epochs {
        return Err(TrainError::Config(format!(
            "checkpoint index {checkpoint_index} outside 1..={epochs}"
        )));
    }
    let dir = run.epoch_dir(checkpoint_index);
    let ckpt = load_checkpoint(&dir)?;
    let restore = |reason: String| TrainError::Restore {
        path: dir.join(CHECKPOINT_FILE),
        reason,
    };

    run.classifier = serde_json::from_value(ckpt["classifier"].clone())
        .map_err(|e| restore(format!("bad classifier payload: {e}")))?;

    backend.apply_finetune(&run.finetune)?;
    let mut state = backend.export_state();
    match (state.as_object_mut(), ckpt["backend"].as_object()) {
        (Some(template), Some(patch)) => {
            for (key, value) in patch {
                template.insert(key.clone(), value.clone());
            }
        }
        _ => return Err(restore("backend state is not an object".into())),
    }
    backend.import_state(&state)?;

    let mut adam: Adam = serde_json::from_value(ckpt["optimizer"].clone())
        .map_err(|e| restore(format!("bad optimizer payload: {e}")))?;
    let n = backend.trainable_parameters() + head_param_count(&run.classifier);
    if adam.m.len() != n || adam.v.len() != n {
        return Err(restore(format!(
            "optimizer state holds {} parameters, run needs {n}",
            adam.m.len()
        )));
    }

    let metrics_path = run.checkpoint_dir.join(METRICS_FILE);
    let metrics_text = fs::read_to_string(&metrics_path).map_err(|e| TrainError::Restore {
        path: metrics_path.clone(),
        reason: e.to_string(),
    })?;
    let mut trace: Vec<EpochRecord> =
        serde_json::from_str(&metrics_text).map_err(|e| TrainError::Restore {
            path: metrics_path.clone(),
            reason: e.to_string(),
        })?;
    if trace.len() < checkpoint_index {
        return Err(TrainError::Restore {
            path: metrics_path,
            reason: format!(
                "trace covers {} epochs, resume needs {checkpoint_index}",
                trace.len()
            ),
        });
    }
    trace.truncate(checkpoint_index);

    run_epochs(run, data, backend, &mut adam, checkpoint_index + 1, &mut trace)?;
    finish(run, trace)
}

fn finish(run: &mut TrainRun, trace: Vec<EpochRecord>) -> Result<TrainOutcome, TrainError> {
    let selected = select_epoch(&trace, run.selection).expect("trace is non-empty");
    run.epoch_metrics = trace.clone();
    run.selected_epoch = Some(selected);
    write_json(
        &run.checkpoint_dir.join(SELECTION_FILE),
        &serde_json::json!({
            "selected_epoch": selected,
            "metric": run.selection,
        }),
    )?;
    Ok(TrainOutcome {
        selected_epoch: selected,
        selected_dir: run.epoch_dir(selected),
        trace,
    })
}

fn run_epochs<B: TrainableBackend>(
    run: &mut TrainRun,
    data: &DatasetSplit,
    backend: &mut B,
    adam: &mut Adam,
    start_epoch: usize,
    trace: &mut Vec<EpochRecord>,
) -> Result<(), TrainError> {
    let epochs = run.finetune.epochs;
    let batch_size = run.optimizer.batch_size.max(1);
    let batches_per_epoch = data.train.len().div_ceil(batch_size);
    let total_steps = (batches_per_epoch * epochs) as u64;
    let golds = resolve_golds(&data.train, &run.classifier)?;
    let n_backend = backend.trainable_parameters();

    for epoch in start_epoch..=epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(run.seed, epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            backend.zero_grads();
            let (mut head_dw, mut head_db) = match &run.classifier.head {
                Some(h) => (vec![0.0; h.weights.len()], vec![0.0; h.bias.len()]),
                None => (Vec::new(), Vec::new()),
            };
            let mut batch_loss = 0.0;
            for &i in batch {
                let (gold, gold_idx) = &golds[i];
                batch_loss += train_sample(
                    backend,
                    &run.classifier,
                    &data.train[i],
                    gold,
                    *gold_idx,
                    &mut head_dw,
                    &mut head_db,
                )?;
            }
            let scale = 1.0 / batch.len() as f64;
            let mean_loss = batch_loss * scale;
            if !mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: adam.step as usize + 1,
                });
            }
            adam.begin_step();
            let lr = run.optimizer.learning_rate_at(adam.step, total_steps);
            {
                let (params, grads) = backend.params_and_grads();
                adam.update(&run.optimizer, lr, 0, params, grads, scale);
            }
            if let Some(head) = run.classifier.head.as_mut() {
                let kd = head.weights.len();
                adam.update(&run.optimizer, lr, n_backend, &mut head.weights, &head_dw, scale);
                adam.update(
                    &run.optimizer,
                    lr,
                    n_backend + kd,
                    &mut head.bias,
                    &head_db,
                    scale,
                );
            }
            loss_sum += mean_loss;
        }

        let (mut report, _) = evaluate_batch(&run.classifier, backend, &data.validation)?;
        // Wall-clock throughput would make otherwise-identical traces
        // differ; the trace keeps only reproducible numbers.
        report.throughput = 0.0;
        trace.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            validation: report,
        });

        save_checkpoint(run, epoch, backend, adam)?;
        write_json(&run.checkpoint_dir.join(METRICS_FILE), trace)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approaches::TransformKind;
    use crate::backend::tiny::{TinyEncoder, TinyLm};
    use crate::backend::Backend;
    use crate::corpus::{InputArity, LabelSet, TaskSpec};
    use crate::prompting::InputFormat;

    /// Trivially separable data: class `c`'s new text carries the marker
    /// token `sig{c}`.
    fn signature_dataset(labels: &[&str], train_per_class: usize, val_per_class: usize) -> DatasetSplit {
        let label_set = LabelSet::new(labels.to_vec()).unwrap();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut idx = 0;
        for (c, label) in labels.iter().enumerate() {
            for j in 0..train_per_class + val_per_class {
                let sample = EditSample::pair(
                    format!("doc{idx}"),
                    format!("e{idx}"),
                    format!("plain text number {j}"),
                    format!("plain text number {j} sig{c}"),
                )
                .with_intent(*label);
                if j < train_per_class {
                    train.push(sample);
                } else {
                    validation.push(sample);
                }
                idx += 1;
            }
        }
        DatasetSplit::new(train, validation, Vec::new(), label_set)
    }

    fn sig_task(labels: &LabelSet) -> TaskSpec {
        let instruction = format!(
            "Classify the edit. The possible labels are: {}.",
            labels.names().join(", ")
        );
        TaskSpec::new("sig", InputArity::Pair, labels.clone(), instruction).unwrap()
    }

    fn seqc_run(data: &DatasetSplit, epochs: usize, dir: &Path) -> TrainRun {
        let classifier = Classifier::new(
            ApproachKind::SeqC,
            None,
            InputFormat::STRUCTURED,
            sig_task(&data.labels),
        )
        .unwrap();
        TrainRun::new(classifier, FinetuneConfig::full(epochs, 5), 11, dir)
    }

    #[test]
    fn ten_epochs_write_ten_checkpoints() {
        let data = signature_dataset(&["alpha", "beta", "gamma"], 6, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 10, dir.path());
        let mut backend = TinyEncoder::new(16, 7);
        let outcome = train(&mut run, &data, &mut backend).unwrap();

        for epoch in 1..=10 {
            let edir = run.epoch_dir(epoch);
            assert!(edir.join(CHECKPOINT_FILE).is_file(), "epoch {epoch} payload");
            assert!(edir.join(CHECKSUM_FILE).is_file(), "epoch {epoch} checksum");
        }
        assert!(!run.epoch_dir(11).exists());
        let trace: Vec<EpochRecord> = serde_json::from_str(
            &fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(),
        )
        .unwrap();
        assert_eq!(trace.len(), 10);
        assert_eq!(trace.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert!(outcome.selected_epoch >= 1 && outcome.selected_epoch <= 10);
        assert_eq!(outcome.trace, run.epoch_metrics);
        assert_eq!(run.selected_epoch, Some(outcome.selected_epoch));
        assert!(dir.path().join(RUN_FILE).is_file());
        assert!(dir.path().join(SELECTION_FILE).is_file());
        for r in &trace {
            assert_eq!(r.validation.throughput, 0.0, "traces keep no wall-clock numbers");
        }
    }

    fn record(epoch: usize, macro_f1: f64, accuracy: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0,
            validation: MetricsReport {
                n: 10,
                accuracy,
                macro_f1,
                air: 1.0,
                throughput: 0.0,
                per_class: Vec::new(),
            },
        }
    }

    #[test]
    fn selection_prefers_metric_then_tiebreak_then_earlier_epoch() {
        let distinct = [record(1, 0.3, 0.9), record(2, 0.9, 0.1), record(3, 0.5, 0.5)];
        assert_eq!(select_epoch(&distinct, SelectionMetric::MacroF1), Some(2));
        assert_eq!(select_epoch(&distinct, SelectionMetric::Accuracy), Some(1));

        let tied_primary = [record(1, 0.5, 0.6), record(2, 0.5, 0.8), record(3, 0.5, 0.7)];
        assert_eq!(select_epoch(&tied_primary, SelectionMetric::MacroF1), Some(2));

        let tied_fully = [record(1, 0.5, 0.5), record(2, 0.5, 0.5)];
        assert_eq!(select_epoch(&tied_fully, SelectionMetric::MacroF1), Some(1));
        assert_eq!(select_epoch(&[], SelectionMetric::MacroF1), None);
    }

    #[test]
    fn identical_seeds_produce_identical_runs() {
        let data = signature_dataset(&["alpha", "beta"], 8, 3);
        let transform = Some(TransformKind::NewAbsDiff);
        let make_run = |dir: &Path| {
            let classifier = Classifier::new(
                ApproachKind::XNet,
                transform,
                InputFormat::NATURAL,
                sig_task(&data.labels),
            )
            .unwrap();
            let finetune = FinetuneConfig::adapter(2, 4, 0.2, 4, 13);
            TrainRun::new(classifier, finetune, 21, dir)
        };

        let dir_a = tempfile::tempdir().unwrap();
        let mut run_a = make_run(dir_a.path());
        let mut backend_a = TinyEncoder::new(12, 3);
        let out_a = train(&mut run_a, &data, &mut backend_a).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut run_b = make_run(dir_b.path());
        let mut backend_b = TinyEncoder::new(12, 3);
        let out_b = train(&mut run_b, &data, &mut backend_b).unwrap();

        assert_eq!(out_a.trace, out_b.trace);
        assert_eq!(out_a.selected_epoch, out_b.selected_epoch);
        for epoch in 1..=4 {
            let bytes_a = fs::read(run_a.epoch_dir(epoch).join(CHECKPOINT_FILE)).unwrap();
            let bytes_b = fs::read(run_b.epoch_dir(epoch).join(CHECKPOINT_FILE)).unwrap();
            assert_eq!(bytes_a, bytes_b, "epoch {epoch} checkpoints diverge");
        }
        let metrics_a = fs::read(dir_a.path().join(METRICS_FILE)).unwrap();
        let metrics_b = fs::read(dir_b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics_a, metrics_b);
    }

    #[test]
    fn separable_task_is_learned() {
        let data = signature_dataset(&["alpha", "beta", "gamma"], 12, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 8, dir.path());
        run.optimizer = run.optimizer.with_learning_rate(0.05).with_batch_size(8);
        let mut backend = TinyEncoder::new(16, 7);
        let outcome = train(&mut run, &data, &mut backend).unwrap();

        let first = outcome.trace.first().unwrap().train_loss;
        let last = outcome.trace.last().unwrap().train_loss;
        assert!(last < first, "loss failed to drop: {first} -> {last}");

        let (train_report, _) = evaluate_batch(&run.classifier, &mut backend, &data.train).unwrap();
        assert!(
            train_report.accuracy >= 0.95,
            "train accuracy {} below 0.95",
            train_report.accuracy
        );
    }

    #[test]
    fn resume_is_bit_identical_to_uninterrupted_run() {
        let data = signature_dataset(&["alpha", "beta"], 8, 3);
        let make_run = |dir: &Path| {
            let classifier = Classifier::new(
                ApproachKind::XNet,
                Some(TransformKind::NewAbsDiffOld),
                InputFormat::STRUCTURED,
                sig_task(&data.labels),
            )
            .unwrap();
            TrainRun::new(classifier, FinetuneConfig::adapter(2, 4, 0.25, 5, 17), 31, dir)
        };

        let dir = tempfile::tempdir().unwrap();
        let mut run_full = make_run(dir.path());
        let mut backend_full = TinyEncoder::new(12, 9);
        let out_full = train(&mut run_full, &data, &mut backend_full).unwrap();

        let snapshot = |name: &Path| fs::read(name).unwrap();
        let final_ckpt = snapshot(&run_full.epoch_dir(5).join(CHECKPOINT_FILE));
        let metrics = snapshot(&dir.path().join(METRICS_FILE));
        let selection = snapshot(&dir.path().join(SELECTION_FILE));

        // Fresh run struct and fresh backend, as after a real interruption.
        let mut run_resumed = make_run(dir.path());
        let mut backend_resumed = TinyEncoder::new(12, 9);
        let out_resumed = resume(&mut run_resumed, &data, &mut backend_resumed, 2).unwrap();

        assert_eq!(out_resumed.trace, out_full.trace);
        assert_eq!(out_resumed.selected_epoch, out_full.selected_epoch);
        assert_eq!(
            snapshot(&run_resumed.epoch_dir(5).join(CHECKPOINT_FILE)),
            final_ckpt,
            "resumed final checkpoint diverges from uninterrupted run"
        );
        assert_eq!(snapshot(&dir.path().join(METRICS_FILE)), metrics);
        assert_eq!(snapshot(&dir.path().join(SELECTION_FILE)), selection);
    }

    #[test]
    fn resume_from_final_epoch_is_a_noop() {
        let data = signature_dataset(&["alpha", "beta"], 6, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 3, dir.path());
        let mut backend = TinyEncoder::new(12, 4);
        let out = train(&mut run, &data, &mut backend).unwrap();
        let metrics_before = fs::read(dir.path().join(METRICS_FILE)).unwrap();
        let ckpt_before = fs::read(run.epoch_dir(3).join(CHECKPOINT_FILE)).unwrap();

        let mut run2 = seqc_run(&data, 3, dir.path());
        let mut backend2 = TinyEncoder::new(12, 4);
        let out2 = resume(&mut run2, &data, &mut backend2, 3).unwrap();

        assert_eq!(out2.trace, out.trace);
        assert_eq!(out2.selected_epoch, out.selected_epoch);
        assert_eq!(fs::read(dir.path().join(METRICS_FILE)).unwrap(), metrics_before);
        assert_eq!(fs::read(run.epoch_dir(3).join(CHECKPOINT_FILE)).unwrap(), ckpt_before);
    }

    #[test]
    fn corrupt_or_missing_checkpoints_fail_restore() {
        let data = signature_dataset(&["alpha", "beta"], 6, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 3, dir.path());
        let mut backend = TinyEncoder::new(12, 4);
        train(&mut run, &data, &mut backend).unwrap();

        // Flip payload bytes: the checksum must catch it.
        let path = run.epoch_dir(2).join(CHECKPOINT_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] = bytes[last].wrapping_add(1);
        fs::write(&path, &bytes).unwrap();
        let mut run2 = seqc_run(&data, 3, dir.path());
        let mut backend2 = TinyEncoder::new(12, 4);
        let err = resume(&mut run2, &data, &mut backend2, 2).unwrap_err();
        assert!(
            matches!(&err, TrainError::Restore { reason, .. } if reason.contains("checksum")),
            "unexpected error: {err}"
        );

        fs::remove_file(&path).unwrap();
        let mut run3 = seqc_run(&data, 3, dir.path());
        let mut backend3 = TinyEncoder::new(12, 4);
        assert!(matches!(
            resume(&mut run3, &data, &mut backend3, 2),
            Err(TrainError::Restore { .. })
        ));

        // Out-of-range index is a configuration error, not a restore error.
        let mut run4 = seqc_run(&data, 3, dir.path());
        let mut backend4 = TinyEncoder::new(12, 4);
        assert!(matches!(
            resume(&mut run4, &data, &mut backend4, 4),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn adapter_checkpoints_omit_frozen_base_weights() {
        let data = signature_dataset(&["alpha", "beta"], 6, 2);

        let dir = tempfile::tempdir().unwrap();
        let classifier = Classifier::new(
            ApproachKind::SeqC,
            None,
            InputFormat::STRUCTURED,
            sig_task(&data.labels),
        )
        .unwrap();
        let mut run = TrainRun::new(classifier, FinetuneConfig::adapter(2, 4, 0.1, 2, 5), 11, dir.path());
        let mut backend = TinyEncoder::new(12, 4);
        train(&mut run, &data, &mut backend).unwrap();
        let ckpt = load_checkpoint(&run.epoch_dir(2)).unwrap();
        assert!(ckpt["backend"].get("weights").is_none(), "base weights saved");
        assert!(ckpt["backend"].get("adapter").is_some());
        assert!(ckpt["classifier"].get("head").is_some());

        let dir_full = tempfile::tempdir().unwrap();
        let mut run_full = seqc_run(&data, 2, dir_full.path());
        let mut backend_full = TinyEncoder::new(12, 4);
        train(&mut run_full, &data, &mut backend_full).unwrap();
        let ckpt_full = load_checkpoint(&run_full.epoch_dir(2)).unwrap();
        assert!(ckpt_full["backend"].get("weights").is_some());
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let data = signature_dataset(&["alpha", "beta"], 10, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 3, dir.path());
        // A poisoned learning rate turns every parameter into NaN at the
        // first step; the second batch's loss must trip the guard.
        run.optimizer = run.optimizer.with_learning_rate(f64::NAN).with_batch_size(8);
        let mut backend = TinyEncoder::new(12, 4);
        let err = train(&mut run, &data, &mut backend).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch, step } => {
                assert_eq!(epoch, 1);
                assert_eq!(step, 2);
            }
            other => panic!("expected a non-finite loss abort, got {other}"),
        }
    }

    #[test]
    fn unknown_or_missing_train_labels_are_rejected() {
        let mut data = signature_dataset(&["alpha", "beta"], 4, 2);
        data.train[0].intent = Some("zeta".into());
        let dir = tempfile::tempdir().unwrap();
        let mut run = seqc_run(&data, 2, dir.path());
        let mut backend = TinyEncoder::new(12, 4);
        assert!(matches!(
            train(&mut run, &data, &mut backend),
            Err(TrainError::UnknownLabel { label, .. }) if label == "zeta"
        ));

        data.train[0].intent = None;
        let dir2 = tempfile::tempdir().unwrap();
        let mut run2 = seqc_run(&data, 2, dir2.path());
        let mut backend2 = TinyEncoder::new(12, 4);
        assert!(matches!(
            train(&mut run2, &data, &mut backend2),
            Err(TrainError::MissingGold { .. })
        ));

        let empty = DatasetSplit::new(Vec::new(), Vec::new(), Vec::new(), data.labels.clone());
        let dir3 = tempfile::tempdir().unwrap();
        let mut run3 = seqc_run(&data, 2, dir3.path());
        let mut backend3 = TinyEncoder::new(12, 4);
        assert!(matches!(
            train(&mut run3, &empty, &mut backend3),
            Err(TrainError::EmptySplit { which: "train" })
        ));
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            batch_size: 16,
            warmup_fraction: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        // 100 steps -> 3 warmup steps.
        assert!((cfg.learning_rate_at(1, 100) - 1.0 / 3.0).abs() < 1e-15);
        assert!((cfg.learning_rate_at(2, 100) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(3, 100), 1.0);
        assert_eq!(cfg.learning_rate_at(99, 100), 1.0);
        // Warmup never shrinks below one step.
        let no_warmup = OptimizerConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert_eq!(no_warmup.learning_rate_at(1, 10), 1.0);
    }

    #[test]
    fn adam_matches_hand_computation() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            batch_size: 1,
            warmup_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut adam = Adam::new(1);
        let mut params = [1.0];
        // Constant gradient: bias correction makes every step lr-sized.
        adam.begin_step();
        adam.update(&cfg, 0.1, 0, &mut params, &[2.0], 1.0);
        assert!((params[0] - 0.9).abs() < 1e-8, "step 1 gave {}", params[0]);
        adam.begin_step();
        adam.update(&cfg, 0.1, 0, &mut params, &[2.0], 1.0);
        assert!((params[0] - 0.8).abs() < 1e-8, "step 2 gave {}", params[0]);
        assert!((adam.m[0] - 0.38).abs() < 1e-12);
        assert!((adam.v[0] - 0.007996).abs() < 1e-12);
    }

    #[test]
    fn generation_approach_trains_with_tiny_lm() {
        let data = signature_dataset(&["alpha", "beta"], 6, 2);
        let task = sig_task(&data.labels);
        let classifier =
            Classifier::new(ApproachKind::Gen, None, InputFormat::NATURAL, task.clone()).unwrap();

        // The closed vocabulary must cover the prompts and the labels.
        let texts: Vec<String> = data
            .train
            .iter()
            .chain(&data.validation)
            .map(|s| {
                build_input(s, &task, InputFormat::NATURAL, TemplateRole::Generation).text
            })
            .chain(data.labels.names().iter().cloned())
            .collect();
        let mut backend =
            TinyLm::with_vocab_from_texts(12, 3, texts.iter().map(String::as_str));

        let dir = tempfile::tempdir().unwrap();
        let mut run = TrainRun::new(classifier, FinetuneConfig::full(2, 5), 7, dir.path());
        run.optimizer = run.optimizer.with_batch_size(4);
        let outcome = train(&mut run, &data, &mut backend).unwrap();

        assert_eq!(outcome.trace.len(), 2);
        assert!(run.classifier.head.is_none(), "generation trains no head");
        for r in &outcome.trace {
            assert!(r.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.validation.air));
        }
        let ckpt = load_checkpoint(&run.epoch_dir(2)).unwrap();
        assert!(ckpt["classifier"].get("head").is_none());
    }

    /// Finite differences through a whole SNet training step. This guards
    /// the trace pop order: the new side is encoded second, so its
    /// gradient must be backpropagated first.
    #[test]
    fn snet_sample_gradients_match_finite_differences() {
        let labels = LabelSet::new(["alpha", "beta"]).unwrap();
        let task = sig_task(&labels);
        let mut classifier = Classifier::new(
            ApproachKind::SNet,
            Some(TransformKind::NewAbsDiffOld),
            InputFormat::STRUCTURED,
            task,
        )
        .unwrap();
        classifier.init_head(6, 41);
        let sample = EditSample::pair("d", "e", "the old wording here", "a newer wording now")
            .with_intent("alpha");

        let mut backend = TinyEncoder::new(6, 2);
        backend
            .apply_finetune(&FinetuneConfig::full(1, 3))
            .unwrap();

        // Keep clear of the absolute-value kinks so finite differences are
        // valid: both encodings must differ in every coordinate.
        {
            let old = backend
                .encode_last(&build_siamese_inputs(&sample, InputFormat::STRUCTURED).0)
                .unwrap();
            let new = backend
                .encode_last(&build_siamese_inputs(&sample, InputFormat::STRUCTURED).1)
                .unwrap();
            for (o, n) in old.iter().zip(&new) {
                assert!((o - n).abs() > 1e-4, "test vectors sit on a kink");
            }
        }

        let head = classifier.head.as_ref().unwrap();
        let mut head_dw = vec![0.0; head.weights.len()];
        let mut head_db = vec![0.0; head.bias.len()];
        train_sample(&mut backend, &classifier, &sample, "alpha", 0, &mut head_dw, &mut head_db)
            .unwrap();
        let analytic: Vec<f64> = backend.params_and_grads().1.to_vec();

        let loss_with = |backend: &TinyEncoder, j: usize, delta: f64| -> f64 {
            let mut probe = backend.clone();
            let mut dw = vec![0.0; head_dw.len()];
            let mut db = vec![0.0; head_db.len()];
            probe.params_and_grads().0[j] += delta;
            train_sample(&mut probe, &classifier, &sample, "alpha", 0, &mut dw, &mut db).unwrap()
        };

        let eps = 1e-5;
        let n = analytic.len();
        // Probe a spread of parameters rather than all of them.
        for j in (0..n).step_by((n / 24).max(1)) {
            let numeric = (loss_with(&backend, j, eps) - loss_with(&backend, j, -eps)) / (2.0 * eps);
            assert!(
                (numeric - analytic[j]).abs() <= 1e-4 * numeric.abs().max(1.0),
                "parameter {j}: numeric {numeric} vs analytic {}",
                analytic[j]
            );
        }
    }
}
