//! Data model for edit-classification corpora: samples, label sets, task
//! specs, document revisions, and dataset splits.
//!
//! The on-disk formats are JSON-lines (see [`jsonl`]); sampling utilities
//! (class balancing, stratified subsampling) live in [`sampling`]; the
//! built-in task registry lives in [`tasks`].

pub mod jsonl;
pub mod sampling;
pub mod tasks;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by corpus loading, validation, and sampling.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("label set needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("label {0:?} is empty or duplicated")]
    BadLabel(String),
    #[error("label {inner:?} is a substring of label {outer:?}")]
    SubstringLabel { inner: String, outer: String },
    #[error("sample {edit_id}: intent {intent:?} is not in the label set")]
    UnknownIntent { edit_id: String, intent: String },
    #[error("sample {edit_id}: {message}")]
    BadSample { edit_id: String, message: String },
    #[error("instruction mentions label {label:?} {count} times (want exactly 1)")]
    InstructionMention { label: String, count: usize },
    #[error("operation requires a binary label set, got {0} labels")]
    NotBinary(usize),
    #[error("cannot balance: {positives} positives exceed {negatives} negatives")]
    MorePositivesThanNegatives { positives: usize, negatives: usize },
    #[error("requested {requested} samples but only {available} available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("sample {edit_id} has no intent label; stratification needs labels")]
    UnlabeledSample { edit_id: String },
}

/// The set of class labels for a task.
///
/// Invariants enforced at construction: at least two labels, all non-empty
/// and unique, and no label is a substring of another (this keeps
/// string-based answer matching unambiguous).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(CorpusError::TooFewLabels(names.len()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || names[..i].contains(name) {
                return Err(CorpusError::BadLabel(name.clone()));
            }
        }
        for a in &names {
            for b in &names {
                if a != b && b.contains(a.as_str()) {
                    return Err(CorpusError::SubstringLabel {
                        inner: a.clone(),
                        outer: b.clone(),
                    });
                }
            }
        }
        Ok(Self { names })
    }

    /// The five edit-intent classes, spelled exactly as they appear in
    /// training data and model outputs.
    pub fn edit_intents() -> Self {
        Self::new(["Grammar", "Clarity", "Fact/Evidence", "Claim", "Other"])
            .expect("built-in label set is valid")
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn is_binary(&self) -> bool {
        self.names.len() == 2
    }

    /// The positive class for binary tasks: by convention the first label.
    pub fn positive(&self) -> Result<&str, CorpusError> {
        if !self.is_binary() {
            return Err(CorpusError::NotBinary(self.names.len()));
        }
        Ok(&self.names[0])
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;
    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

/// What happened to a sentence in a revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditAction {
    Add,
    Delete,
    Modify,
}

impl EditAction {
    pub const ALL: [EditAction; 3] = [EditAction::Add, EditAction::Delete, EditAction::Modify];

    pub fn name(&self) -> &'static str {
        match self {
            EditAction::Add => "Add",
            EditAction::Delete => "Delete",
            EditAction::Modify => "Modify",
        }
    }
}

impl std::fmt::Display for EditAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One sentence edit: the old and/or new sentence plus optional action and
/// intent labels.
///
/// Single-input tasks store their text in `new_text` and leave `old_text`
/// and `action` unset. `old_index`/`new_index` are sentence positions in the
/// source document; the alignment pipeline fills them so downstream
/// analytics can locate edits, and plain classification datasets omit them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSample {
    pub doc_id: String,
    pub edit_id: String,
    #[serde(rename = "old", default, skip_serializing_if = "Option::is_none")]
    pub old_text: Option<String>,
    #[serde(rename = "new", default, skip_serializing_if = "Option::is_none")]
    pub new_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<EditAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_index: Option<usize>,
}

impl EditSample {
    /// A pair sample with both sentences present.
    pub fn pair(
        doc_id: impl Into<String>,
        edit_id: impl Into<String>,
        old: impl Into<String>,
        new: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            edit_id: edit_id.into(),
            old_text: Some(old.into()),
            new_text: Some(new.into()),
            action: None,
            intent: None,
            old_index: None,
            new_index: None,
        }
    }

    /// A single-input sample; the text lives on the `new` side.
    pub fn single(id: impl Into<String>, text: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            doc_id: id.clone(),
            edit_id: id,
            old_text: None,
            new_text: Some(text.into()),
            action: None,
            intent: None,
            old_index: None,
            new_index: None,
        }
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> Self {
        self.intent = Some(intent.into());
        self
    }

    pub fn with_action(mut self, action: EditAction) -> Self {
        self.action = Some(action);
        self
    }

    /// Action implied by which sentences are present: both present means
    /// Modify, only new means Add, only old means Delete.
    pub fn implied_action(&self) -> Option<EditAction> {
        match (&self.old_text, &self.new_text) {
            (Some(_), Some(_)) => Some(EditAction::Modify),
            (None, Some(_)) => Some(EditAction::Add),
            (Some(_), None) => Some(EditAction::Delete),
            (None, None) => None,
        }
    }

    /// The explicit action if set, otherwise the one implied by the texts.
    pub fn action_or_implied(&self) -> Option<EditAction> {
        self.action.or_else(|| self.implied_action())
    }

    /// Checks structural invariants and (when a label set is given) intent
    /// membership.
    pub fn validate(&self, labels: Option<&LabelSet>) -> Result<(), CorpusError> {
        let bad = |message: &str| CorpusError::BadSample {
            edit_id: self.edit_id.clone(),
            message: message.to_string(),
        };
        if self.old_text.is_none() && self.new_text.is_none() {
            return Err(bad("neither old nor new text present"));
        }
        if let Some(action) = self.action {
            let implied = self.implied_action();
            let consistent = match action {
                // A Modify edit needs both sides; Add forbids old; Delete forbids new.
                EditAction::Modify => implied == Some(EditAction::Modify),
                EditAction::Add => implied == Some(EditAction::Add),
                EditAction::Delete => implied == Some(EditAction::Delete),
            };
            if !consistent {
                return Err(bad(&format!(
                    "action {action} conflicts with which texts are present"
                )));
            }
        }
        if let (Some(labels), Some(intent)) = (labels, &self.intent) {
            if !labels.contains(intent) {
                return Err(CorpusError::UnknownIntent {
                    edit_id: self.edit_id.clone(),
                    intent: intent.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Domain category of a document revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainCategory {
    Nlp,
    Case,
    Med,
    Tool,
    Nat,
    Soc,
    Other,
}

impl DomainCategory {
    pub const ALL: [DomainCategory; 7] = [
        DomainCategory::Nlp,
        DomainCategory::Case,
        DomainCategory::Med,
        DomainCategory::Tool,
        DomainCategory::Nat,
        DomainCategory::Soc,
        DomainCategory::Other,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DomainCategory::Nlp => "nlp",
            DomainCategory::Case => "case",
            DomainCategory::Med => "med",
            DomainCategory::Tool => "tool",
            DomainCategory::Nat => "nat",
            DomainCategory::Soc => "soc",
            DomainCategory::Other => "other",
        }
    }
}

impl std::fmt::Display for DomainCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A peer-review decision on a document version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewDecision {
    #[serde(rename = "reject")]
    Reject,
    #[serde(rename = "approve-with-reservations")]
    ApproveWithReservations,
    #[serde(rename = "approve")]
    Approve,
}

impl ReviewDecision {
    /// Numeric score used when averaging decisions: reject = 1,
    /// approve-with-reservations = 2, approve = 3.
    pub fn score(&self) -> f64 {
        match self {
            ReviewDecision::Reject => 1.0,
            ReviewDecision::ApproveWithReservations => 2.0,
            ReviewDecision::Approve => 3.0,
        }
    }
}

/// Two versions of a document as sentence lists, with optional domain and
/// per-version review decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRevision {
    pub doc_id: String,
    pub old_sentences: Vec<String>,
    pub new_sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_category: Option<DomainCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_scores_old: Option<Vec<ReviewDecision>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_scores_new: Option<Vec<ReviewDecision>>,
}

/// Whether a task classifies a single text or an old/new pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputArity {
    Single,
    Pair,
}

/// A classification task: its identity, input arity, label set, and the
/// instruction sentence used by instruction-bearing input formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub input_arity: InputArity,
    pub labels: LabelSet,
    pub instruction: String,
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        input_arity: InputArity,
        labels: LabelSet,
        instruction: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let spec = Self {
            task_id: task_id.into(),
            input_arity,
            labels,
            instruction: instruction.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The instruction must mention every label exactly once so a reader
    /// (human or model) sees the full label inventory without repetition.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for label in self.labels.names() {
            let count = count_occurrences(&self.instruction, label);
            if count != 1 {
                return Err(CorpusError::InstructionMention {
                    label: label.clone(),
                    count,
                });
            }
        }
        Ok(())
    }
}

/// Non-overlapping occurrences of `needle` in `haystack`.
pub(crate) fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut rest = haystack;
    while let Some(pos) = rest.find(needle) {
        count += 1;
        rest = &rest[pos + needle.len()..];
    }
    count
}

/// Train/validation/test partition of a labeled dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<EditSample>,
    pub validation: Vec<EditSample>,
    pub test: Vec<EditSample>,
    pub labels: LabelSet,
}

impl DatasetSplit {
    pub fn new(
        train: Vec<EditSample>,
        validation: Vec<EditSample>,
        test: Vec<EditSample>,
        labels: LabelSet,
    ) -> Self {
        Self {
            train,
            validation,
            test,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
