//! The four classifier assemblies and the five pair-transformation
//! functions, plus the linear classification head they share.
//!
//! All four approaches answer the same question (which label fits this
//! old/new pair?) at very different costs:
//!
//! * [`predict_gen`]: prompt a generation-capable model and parse the label
//!   out of at most ten completion tokens;
//! * [`predict_seqc`]: one forward pass, linear head on the last hidden
//!   state;
//! * [`predict_xnet`]: one forward pass over both segments, head on a
//!   transform of the two segment-end states;
//! * [`predict_snet`]: twin encodes (shared weights), head on a transform
//!   of the two summaries.
//!
//! The transform vocabulary is fixed: with `o` and `n` the old/new
//! representations and `⊕` concatenation, the five kinds compute `n - o`,
//! `|n - o|`, `n ⊕ |n - o|`, `n ⊕ o`, and `n ⊕ |n - o| ⊕ o`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, FinetuneMode};
use crate::corpus::{EditSample, LabelSet, TaskSpec};
use crate::prompting::{build_input, build_siamese_inputs, InputFormat, TemplateRole};

/// Completion budget for label generation; label strings are guaranteed to
/// fit within it, so a cooperative model can always answer in budget.
pub const GEN_MAX_NEW_TOKENS: usize = 10;

/// Errors from assembling or running a classifier.
#[derive(Debug, Error)]
pub enum ApproachError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("vector length mismatch: old is {old}, new is {new}")]
    LengthMismatch { old: usize, new: usize },
    #[error("head expects {expected}-dim inputs but would receive {actual}")]
    HeadDim { expected: usize, actual: usize },
    #[error("head scores {heads} classes but the label set has {labels}")]
    ClassCount { heads: usize, labels: usize },
    #[error("{0}")]
    Config(String),
}

/// How the old/new representation pair collapses into one classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// `n - o` (dimension d). Antisymmetric.
    Diff,
    /// `|n - o|` (dimension d). Symmetric.
    AbsDiff,
    /// `n ⊕ |n - o|` (dimension 2d).
    NewAbsDiff,
    /// `n ⊕ o` (dimension 2d).
    NewOld,
    /// `n ⊕ |n - o| ⊕ o` (dimension 3d).
    NewAbsDiffOld,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Diff,
        TransformKind::AbsDiff,
        TransformKind::NewAbsDiff,
        TransformKind::NewOld,
        TransformKind::NewAbsDiffOld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Diff => "diff",
            TransformKind::AbsDiff => "abs-diff",
            TransformKind::NewAbsDiff => "new-abs-diff",
            TransformKind::NewOld => "new-old",
            TransformKind::NewAbsDiffOld => "new-abs-diff-old",
        }
    }

    pub fn parse(name: &str) -> Option<TransformKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Classifier input width for hidden dimension `d`.
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            TransformKind::Diff | TransformKind::AbsDiff => d,
            TransformKind::NewAbsDiff | TransformKind::NewOld => 2 * d,
            TransformKind::NewAbsDiffOld => 3 * d,
        }
    }

    /// Applies the transform. Errors when the two vectors differ in length.
    pub fn apply(self, old: &[f64], new: &[f64]) -> Result<Vec<f64>, ApproachError> {
        if old.len() != new.len() {
            return Err(ApproachError::LengthMismatch {
                old: old.len(),
                new: new.len(),
            });
        }
        let diff = || new.iter().zip(old).map(|(n, o)| n - o);
        let out = match self {
            TransformKind::Diff => diff().collect(),
            TransformKind::AbsDiff => diff().map(f64::abs).collect(),
            TransformKind::NewAbsDiff => {
                let mut u = new.to_vec();
                u.extend(diff().map(f64::abs));
                u
            }
            TransformKind::NewOld => {
                let mut u = new.to_vec();
                u.extend_from_slice(old);
                u
            }
            TransformKind::NewAbsDiffOld => {
                let mut u = new.to_vec();
                u.extend(diff().map(f64::abs));
                u.extend_from_slice(old);
                u
            }
        };
        Ok(out)
    }

    /// Vector-Jacobian product: maps a gradient w.r.t. the transform output
    /// back to gradients w.r.t. `old` and `new`. At `|.|` kinks (exact
    /// zeros) the subgradient 0 is used.
    pub fn backward(self, old: &[f64], new: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = old.len();
        debug_assert_eq!(dout.len(), self.output_dim(d));
        let sign = |i: usize| match (new[i] - old[i]).partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        };
        let mut dold = vec![0.0; d];
        let mut dnew = vec![0.0; d];
        match self {
            TransformKind::Diff => {
                for i in 0..d {
                    dnew[i] = dout[i];
                    dold[i] = -dout[i];
                }
            }
            TransformKind::AbsDiff => {
                for i in 0..d {
                    let s = sign(i);
                    dnew[i] = s * dout[i];
                    dold[i] = -s * dout[i];
                }
            }
            TransformKind::NewAbsDiff => {
                for i in 0..d {
                    let s = sign(i);
                    dnew[i] = dout[i] + s * dout[d + i];
                    dold[i] = -s * dout[d + i];
                }
            }
            TransformKind::NewOld => {
                for i in 0..d {
                    dnew[i] = dout[i];
                    dold[i] = dout[d + i];
                }
            }
            TransformKind::NewAbsDiffOld => {
                for i in 0..d {
                    let s = sign(i);
                    dnew[i] = dout[i] + s * dout[d + i];
                    dold[i] = -s * dout[d + i] + dout[2 * d + i];
                }
            }
        }
        (dold, dnew)
    }
}

/// Linear classification head: `logits = W x + b` with `W` of shape
/// `k x in_dim` (row major) and `b` of length `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub in_dim: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    /// Seeded initialization: weights uniform in `±1/sqrt(in_dim)`, bias
    /// zero.
    pub fn new_seeded(k: usize, in_dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            k,
            weights: (0..k * in_dim).map(|_| rng.gen_range(-scale..scale)).collect(),
            bias: vec![0.0; k],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ApproachError> {
        if x.len() != self.in_dim {
            return Err(ApproachError::HeadDim {
                expected: self.in_dim,
                actual: x.len(),
            });
        }
        Ok((0..self.k)
            .map(|c| {
                let row = &self.weights[c * self.in_dim..(c + 1) * self.in_dim];
                self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    /// Total parameter count (weights plus bias).
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Index of the largest logit; ties break toward the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |best, (i, &l)| {
            if l > best.1 {
                (i, l)
            } else {
                best
            }
        })
        .0
}

/// Gradients of a head application.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    /// Same layout as [`ClassifierHead::weights`].
    pub dweights: Vec<f64>,
    pub dbias: Vec<f64>,
    /// Gradient w.r.t. the head input.
    pub dinput: Vec<f64>,
}

/// Backward pass for `logits = W x + b` given `dlogits`.
pub fn head_backward(head: &ClassifierHead, x: &[f64], dlogits: &[f64]) -> HeadGradients {
    let (k, d) = (head.k, head.in_dim);
    let mut dweights = vec![0.0; k * d];
    let mut dinput = vec![0.0; d];
    for c in 0..k {
        let row = &head.weights[c * d..(c + 1) * d];
        for j in 0..d {
            dweights[c * d + j] = dlogits[c] * x[j];
            dinput[j] += row[j] * dlogits[c];
        }
    }
    HeadGradients {
        dweights,
        dbias: dlogits.to_vec(),
        dinput,
    }
}

/// Numerically stable softmax cross-entropy: returns the loss and the
/// gradient w.r.t. the logits (`softmax - onehot(gold)`).
pub fn softmax_cross_entropy(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(logits[gold] - max - z.ln());
    let dlogits = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == gold { 1.0 } else { 0.0 })
        .collect();
    (loss, dlogits)
}

/// One classification outcome.
///
/// Head-based approaches always carry `logits`, set `label` to the argmax
/// class, and have `answer_included = true` by construction. Generation
/// carries `raw_output` and parses the label out of it; when no label
/// string occurs, `label` is absent and `answer_included` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    pub answer_included: bool,
}

/// Scans generated text for label-string occurrences. The match at the
/// earliest character position wins. Occurrences whose alphanumeric edges
/// touch other alphanumeric characters do not count, so a label "no" will
/// not match inside "not".
pub fn parse_label(raw_output: &str, labels: &LabelSet) -> (Option<String>, bool) {
    let chars: Vec<char> = raw_output.chars().collect();
    let mut best: Option<(usize, usize)> = None;
    for (idx, name) in labels.names().iter().enumerate() {
        if let Some(pos) = find_bounded(&chars, name) {
            if best.map_or(true, |(bp, _)| pos < bp) {
                best = Some((pos, idx));
            }
        }
    }
    match best {
        Some((_, idx)) => (Some(labels.names()[idx].clone()), true),
        None => (None, false),
    }
}

/// Earliest occurrence of `needle` in `haystack` whose boundaries respect
/// word edges: where the needle starts or ends with an alphanumeric
/// character, the neighbouring haystack character (if any) must not be
/// alphanumeric.
fn find_bounded(haystack: &[char], needle: &str) -> Option<usize> {
    let needle: Vec<char> = needle.chars().collect();
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    let head_alnum = needle[0].is_alphanumeric();
    let tail_alnum = needle[needle.len() - 1].is_alphanumeric();
    'outer: for start in 0..=(haystack.len() - needle.len()) {
        for (i, ch) in needle.iter().enumerate() {
            if haystack[start + i] != *ch {
                continue 'outer;
            }
        }
        if head_alnum && start > 0 && haystack[start - 1].is_alphanumeric() {
            continue;
        }
        let after = start + needle.len();
        if tail_alnum && after < haystack.len() && haystack[after].is_alphanumeric() {
            continue;
        }
        return Some(start);
    }
    None
}

fn head_prediction(
    head: &ClassifierHead,
    labels: &LabelSet,
    input: &[f64],
) -> Result<Prediction, ApproachError> {
    if head.k != labels.k() {
        return Err(ApproachError::ClassCount {
            heads: head.k,
            labels: labels.k(),
        });
    }
    let logits = head.logits(input)?;
    let label = labels.names()[argmax(&logits)].clone();
    Ok(Prediction {
        label: Some(label),
        logits: Some(logits),
        raw_output: None,
        answer_included: true,
    })
}

/// Label generation: prompt the model, cap the completion at
/// [`GEN_MAX_NEW_TOKENS`] tokens, and scan it for a label.
pub fn predict_gen(
    backend: &mut dyn Backend,
    task: &TaskSpec,
    fmt: InputFormat,
    sample: &EditSample,
) -> Result<Prediction, ApproachError> {
    if !backend.capabilities().generate {
        return Err(BackendError::Unsupported {
            model: backend.info().name.clone(),
            operation: "generation".into(),
        }
        .into());
    }
    let input = build_input(sample, task, fmt, TemplateRole::Generation);
    let raw = backend.generate(&input, GEN_MAX_NEW_TOKENS)?;
    let (label, answer_included) = parse_label(&raw, &task.labels);
    Ok(Prediction {
        label,
        logits: None,
        raw_output: Some(raw),
        answer_included,
    })
}

/// Sequence classification: head on the last hidden state of one pass.
pub fn predict_seqc(
    backend: &mut dyn Backend,
    head: &ClassifierHead,
    task: &TaskSpec,
    fmt: InputFormat,
    sample: &EditSample,
) -> Result<Prediction, ApproachError> {
    let input = build_input(sample, task, fmt, TemplateRole::Encoding);
    let state = backend.encode_last(&input)?;
    head_prediction(head, &task.labels, &state)
}

/// Cross-segment classification: one pass over the pair, head on a
/// transform of the two segment-end states.
pub fn predict_xnet(
    backend: &mut dyn Backend,
    head: &ClassifierHead,
    transform: TransformKind,
    task: &TaskSpec,
    fmt: InputFormat,
    sample: &EditSample,
) -> Result<Prediction, ApproachError> {
    let input = build_input(sample, task, fmt, TemplateRole::Encoding);
    let spans = backend.encode_spans(&input)?;
    let u = transform.apply(&spans.old, &spans.new)?;
    head_prediction(head, &task.labels, &u)
}

/// Siamese classification: the two sides are encoded independently by the
/// same weights, then combined by a transform.
pub fn predict_snet(
    backend: &mut dyn Backend,
    head: &ClassifierHead,
    transform: TransformKind,
    task: &TaskSpec,
    fmt: InputFormat,
    sample: &EditSample,
) -> Result<Prediction, ApproachError> {
    let (old_input, new_input) = build_siamese_inputs(sample, fmt);
    let o = backend.encode_last(&old_input)?;
    let n = backend.encode_last(&new_input)?;
    let u = transform.apply(&o, &n)?;
    head_prediction(head, &task.labels, &u)
}

/// The four classification approaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproachKind {
    /// Label generation from a decoder.
    Gen,
    /// Last-state sequence classification.
    SeqC,
    /// Siamese twin encoders plus transform.
    SNet,
    /// Single-pass cross-segment encoder plus transform.
    XNet,
}

impl ApproachKind {
    pub const ALL: [ApproachKind; 4] = [
        ApproachKind::Gen,
        ApproachKind::SeqC,
        ApproachKind::SNet,
        ApproachKind::XNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ApproachKind::Gen => "gen",
            ApproachKind::SeqC => "seqc",
            ApproachKind::SNet => "snet",
            ApproachKind::XNet => "xnet",
        }
    }

    pub fn parse(name: &str) -> Option<ApproachKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether this approach combines two representations via a transform.
    pub fn uses_transform(self) -> bool {
        matches!(self, ApproachKind::SNet | ApproachKind::XNet)
    }

    pub fn uses_head(self) -> bool {
        self != ApproachKind::Gen
    }
}

/// Default adapter settings per approach: generation trains rank/scale
/// 256/256, the head approaches 128/128, with a smaller 64/64 and 32/32
/// tier for small datasets. Dropout is 0.1 across the board.
pub fn adapter_preset(kind: ApproachKind, small_dataset: bool) -> FinetuneMode {
    let (rank, alpha) = match (kind, small_dataset) {
        (ApproachKind::Gen, false) => (256, 256),
        (ApproachKind::Gen, true) => (64, 64),
        (_, false) => (128, 128),
        (_, true) => (32, 32),
    };
    FinetuneMode::Adapter {
        rank,
        alpha,
        dropout: 0.1,
    }
}

/// Default fine-tuning epoch budget.
pub const DEFAULT_EPOCHS: usize = 10;
/// Epoch budget for large single-input datasets.
pub const LARGE_SINGLE_INPUT_EPOCHS: usize = 5;

/// Version stamp written into classifier payloads.
pub const CLASSIFIER_FORMAT: u32 = 1;

/// A complete, serializable classifier: approach, transform, input format,
/// task (with label set), and head weights. Together with a backend state
/// this is everything needed to reproduce predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub format_version: u32,
    pub approach: ApproachKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformKind>,
    pub input_format: InputFormat,
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<ClassifierHead>,
}

impl Classifier {
    /// Assembles a classifier without a head; call [`Classifier::init_head`]
    /// (or deserialize one) before predicting with a head approach.
    pub fn new(
        approach: ApproachKind,
        transform: Option<TransformKind>,
        input_format: InputFormat,
        task: TaskSpec,
    ) -> Result<Self, ApproachError> {
        match (approach.uses_transform(), transform) {
            (true, None) => {
                return Err(ApproachError::Config(format!(
                    "{} needs a transform",
                    approach.name()
                )))
            }
            (false, Some(t)) => {
                return Err(ApproachError::Config(format!(
                    "{} does not take a transform ({} given)",
                    approach.name(),
                    t.name()
                )))
            }
            _ => {}
        }
        Ok(Self {
            format_version: CLASSIFIER_FORMAT,
            approach,
            transform,
            input_format,
            task,
            head: None,
        })
    }

    /// Head input width for a backend of hidden dimension `d`, or `None`
    /// for the generation approach.
    pub fn head_input_dim(&self, hidden_dim: usize) -> Option<usize> {
        match self.approach {
            ApproachKind::Gen => None,
            ApproachKind::SeqC => Some(hidden_dim),
            ApproachKind::SNet | ApproachKind::XNet => Some(
                self.transform
                    .expect("transform approaches carry a transform")
                    .output_dim(hidden_dim),
            ),
        }
    }

    /// Creates the seeded head sized for `hidden_dim`.
    pub fn init_head(&mut self, hidden_dim: usize, seed: u64) {
        if let Some(in_dim) = self.head_input_dim(hidden_dim) {
            self.head = Some(ClassifierHead::new_seeded(self.task.labels.k(), in_dim, seed));
        }
    }

    pub fn predict(
        &self,
        backend: &mut dyn Backend,
        sample: &EditSample,
    ) -> Result<Prediction, ApproachError> {
        let head = || {
            self.head.as_ref().ok_or_else(|| {
                ApproachError::Config(format!("{} needs a head; none is set", self.approach.name()))
            })
        };
        match self.approach {
            ApproachKind::Gen => predict_gen(backend, &self.task, self.input_format, sample),
            ApproachKind::SeqC => {
                predict_seqc(backend, head()?, &self.task, self.input_format, sample)
            }
            ApproachKind::SNet => predict_snet(
                backend,
                head()?,
                self.transform.unwrap(),
                &self.task,
                self.input_format,
                sample,
            ),
            ApproachKind::XNet => predict_xnet(
                backend,
                head()?,
                self.transform.unwrap(),
                &self.task,
                self.input_format,
                sample,
            ),
        }
    }
}
