//! End-to-end corpus construction: align each document revision, label
//! the surviving edits with a trained intent classifier, and emit an
//! annotated corpus plus the bookkeeping around it (per-category stats,
//! a failure manifest, and seeded human-review worksheets with their
//! scoring companion).
//!
//! The pipeline is deterministic for a fixed classifier checkpoint and
//! alignment settings; wall-clock only enters through the emission
//! timestamp, which honors `SOURCE_DATE_EPOCH` for reproducible runs.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{classify_residual, derive_edits, prealign, AlignParams, ResidualScorer};
use crate::approaches::{ApproachError, ApproachKind, Classifier, Prediction};
use crate::backend::Backend;
use crate::corpus::{DocumentRevision, DomainCategory, EditSample, LabelSet};
use crate::evaluation::{self, ClassMetrics, EvalError};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("intent model must use the sequence-classification approach, got {found}")]
    WrongApproach { found: String },
    #[error("intent model has no trained head")]
    MissingHead,
    #[error("cannot sample {requested} documents from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("edit {edit_id} references unknown document {doc_id}")]
    UnknownDocument { edit_id: String, doc_id: String },
    #[error("worksheet row {row}: {problem}")]
    Worksheet { row: usize, problem: String },
    #[error("worksheet parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Approach(#[from] ApproachError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Where an annotated corpus came from: the classifier checkpoint that
/// labeled the edits and the pipeline release that produced the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub intent_checkpoint: String,
    pub pipeline_version: String,
}

impl Provenance {
    pub fn new(intent_checkpoint: impl Into<String>) -> Self {
        Self {
            intent_checkpoint: intent_checkpoint.into(),
            pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Per-document size counters. Words and sentences describe the revised
/// (new) version of the document; edits counts the labeled edit samples.
/// The old-document sentence count is kept so deletion positions stay
/// interpretable after the source document is gone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub words: usize,
    pub sentences: usize,
    pub edits: usize,
    pub old_sentences: usize,
}

/// One fully annotated document revision: every edit carries both an
/// action (from alignment) and an intent (from the classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRevision {
    pub doc_id: String,
    pub edits: Vec<EditSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_category: Option<DomainCategory>,
    pub counts: EditCounts,
    pub provenance: Provenance,
}

impl AnnotatedRevision {
    /// Builds a record from a document and its labeled edits, computing
    /// the counts. Fails if any edit belongs to a different document.
    pub fn from_parts(
        doc: &DocumentRevision,
        edits: Vec<EditSample>,
        provenance: Provenance,
    ) -> Result<Self, AnnotateError> {
        for e in &edits {
            if e.doc_id != doc.doc_id {
                return Err(AnnotateError::UnknownDocument {
                    edit_id: e.edit_id.clone(),
                    doc_id: e.doc_id.clone(),
                });
            }
        }
        let words = doc
            .new_sentences
            .iter()
            .map(|s| s.split_whitespace().count())
            .sum();
        let counts = EditCounts {
            words,
            sentences: doc.new_sentences.len(),
            edits: edits.len(),
            old_sentences: doc.old_sentences.len(),
        };
        Ok(Self {
            doc_id: doc.doc_id.clone(),
            edits,
            domain_category: doc.domain_category,
            counts,
            provenance,
        })
    }

    /// Checks internal consistency: counts match, every edit belongs to
    /// this document and is fully labeled.
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.counts.edits != self.edits.len() {
            return Err(AnnotateError::Worksheet {
                row: 0,
                problem: format!(
                    "document {}: edit count {} disagrees with {} edits",
                    self.doc_id,
                    self.counts.edits,
                    self.edits.len()
                ),
            });
        }
        for e in &self.edits {
            if e.doc_id != self.doc_id {
                return Err(AnnotateError::UnknownDocument {
                    edit_id: e.edit_id.clone(),
                    doc_id: e.doc_id.clone(),
                });
            }
            if e.action.is_none() || e.intent.is_none() {
                return Err(AnnotateError::Worksheet {
                    row: 0,
                    problem: format!("edit {} is missing its action or intent", e.edit_id),
                });
            }
        }
        Ok(())
    }
}

/// One document the pipeline could not annotate, with the stage that
/// failed. The pipeline records these and moves on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocFailure {
    pub doc_id: String,
    pub stage: String,
    pub message: String,
}

/// Result of an annotation run: the corpus plus the failure manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateOutcome {
    pub annotated: Vec<AnnotatedRevision>,
    pub failures: Vec<DocFailure>,
}

impl AnnotateOutcome {
    pub fn total_edits(&self) -> usize {
        self.annotated.iter().map(|a| a.edits.len()).sum()
    }
}

/// Pipeline settings: alignment thresholds plus the provenance stamped
/// onto every emitted document.
#[derive(Debug, Clone)]
pub struct AnnotateConfig {
    pub align: AlignParams,
    pub provenance: Provenance,
}

impl AnnotateConfig {
    pub fn new(intent_checkpoint: impl Into<String>) -> Self {
        Self {
            align: AlignParams::default(),
            provenance: Provenance::new(intent_checkpoint),
        }
    }
}

/// Runs the two-stage pipeline over a batch of revisions: align, then
/// label every derived edit with the intent classifier. The classifier
/// must use the sequence-classification approach with a trained head
/// (the single-pass deployment choice). Documents that fail are isolated
/// in the failure manifest; the run continues.
pub fn annotate(
    revisions: &[DocumentRevision],
    config: &AnnotateConfig,
    intent: &Classifier,
    backend: &mut dyn Backend,
    mut residual: Option<&mut dyn ResidualScorer>,
) -> Result<AnnotateOutcome, AnnotateError> {
    if intent.approach != ApproachKind::SeqC {
        return Err(AnnotateError::WrongApproach {
            found: format!("{:?}", intent.approach).to_lowercase(),
        });
    }
    if intent.head.is_none() {
        return Err(AnnotateError::MissingHead);
    }

    let mut annotated = Vec::new();
    let mut failures = Vec::new();
    for doc in revisions {
        let scorer: Option<&mut dyn ResidualScorer> = match residual {
            Some(ref mut s) => Some(&mut **s),
            None => None,
        };
        match annotate_one(doc, config, intent, backend, scorer) {
            Ok(rev) => annotated.push(rev),
            Err((stage, message)) => failures.push(DocFailure {
                doc_id: doc.doc_id.clone(),
                stage: stage.to_string(),
                message,
            }),
        }
    }
    Ok(AnnotateOutcome {
        annotated,
        failures,
    })
}

fn annotate_one(
    doc: &DocumentRevision,
    config: &AnnotateConfig,
    intent: &Classifier,
    backend: &mut dyn Backend,
    residual: Option<&mut dyn ResidualScorer>,
) -> Result<AnnotatedRevision, (&'static str, String)> {
    let stage_err = |stage: &'static str| move |e: String| (stage, e);

    let mut result = prealign(&doc.old_sentences, &doc.new_sentences, &config.align);
    if let Some(scorer) = residual {
        result = classify_residual(
            result,
            &doc.old_sentences,
            &doc.new_sentences,
            &config.align,
            scorer,
        )
        .map_err(|e| e.to_string())
        .map_err(stage_err("align"))?;
    }
    result
        .validate(doc.old_sentences.len(), doc.new_sentences.len())
        .map_err(|e| e.to_string())
        .map_err(stage_err("align"))?;

    let mut edits = derive_edits(&doc.doc_id, &result, &doc.old_sentences, &doc.new_sentences);
    for edit in &mut edits {
        let prediction = intent
            .predict(backend, edit)
            .map_err(|e| e.to_string())
            .map_err(stage_err("classify"))?;
        let label = prediction.label.ok_or_else(|| {
            stage_err("classify")(format!("no label produced for edit {}", edit.edit_id))
        })?;
        edit.intent = Some(label);
    }

    AnnotatedRevision::from_parts(doc, edits, config.provenance.clone())
        .map_err(|e| e.to_string())
        .map_err(stage_err("assemble"))
}

/// Joins already-labeled edits onto their documents, computing counts.
/// Every edit must reference a known document; documents with no edits
/// get an empty edit list.
pub fn assemble(
    revisions: &[DocumentRevision],
    edits: &[EditSample],
    provenance: &Provenance,
) -> Result<Vec<AnnotatedRevision>, AnnotateError> {
    let mut by_doc: HashMap<&str, Vec<EditSample>> = HashMap::new();
    let known: HashSet<&str> = revisions.iter().map(|d| d.doc_id.as_str()).collect();
    for e in edits {
        if !known.contains(e.doc_id.as_str()) {
            return Err(AnnotateError::UnknownDocument {
                edit_id: e.edit_id.clone(),
                doc_id: e.doc_id.clone(),
            });
        }
        by_doc.entry(e.doc_id.as_str()).or_default().push(e.clone());
    }
    revisions
        .iter()
        .map(|doc| {
            let doc_edits = by_doc.remove(doc.doc_id.as_str()).unwrap_or_default();
            AnnotatedRevision::from_parts(doc, doc_edits, provenance.clone())
        })
        .collect()
}

/// One row of the corpus summary: document and edit totals plus
/// per-document averages, for one domain category or overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: String,
    pub docs: usize,
    pub edits: usize,
    pub avg_words: f64,
    pub avg_sentences: f64,
    pub avg_edits: f64,
}

/// Summarizes an annotated corpus per domain category, in the canonical
/// category order, with uncategorized documents in their own row and an
/// `overall` row last. Empty input yields no rows.
pub fn corpus_stats(annotated: &[AnnotatedRevision]) -> Vec<CategoryStats> {
    if annotated.is_empty() {
        return Vec::new();
    }
    let mut groups: BTreeMap<usize, Vec<&AnnotatedRevision>> = BTreeMap::new();
    for rev in annotated {
        let order = match rev.domain_category {
            Some(cat) => DomainCategory::ALL
                .iter()
                .position(|c| *c == cat)
                .expect("every category is listed"),
            None => DomainCategory::ALL.len(),
        };
        groups.entry(order).or_default().push(rev);
    }
    let row = |name: &str, docs: &[&AnnotatedRevision]| {
        let n = docs.len();
        let edits: usize = docs.iter().map(|d| d.counts.edits).sum();
        let sum = |f: fn(&EditCounts) -> usize| {
            docs.iter().map(|d| f(&d.counts)).sum::<usize>() as f64 / n as f64
        };
        CategoryStats {
            category: name.to_string(),
            docs: n,
            edits,
            avg_words: sum(|c| c.words),
            avg_sentences: sum(|c| c.sentences),
            avg_edits: sum(|c| c.edits),
        }
    };
    let mut rows: Vec<CategoryStats> = groups
        .iter()
        .map(|(&order, docs)| {
            let name = DomainCategory::ALL
                .get(order)
                .map(|c| c.name())
                .unwrap_or("uncategorized");
            row(name, docs)
        })
        .collect();
    let all: Vec<&AnnotatedRevision> = annotated.iter().collect();
    rows.push(row("overall", &all));
    rows
}

pub const WORKSHEET_HEADERS: [&str; 8] = [
    "doc_id",
    "edit_id",
    "old_text",
    "new_text",
    "action",
    "intent",
    "human_action",
    "human_intent",
];

/// Draws a seeded uniform sample of documents and renders their edits as
/// a review worksheet: CSV with the model's labels filled in and blank
/// human columns, documents in corpus order.
pub fn sample_for_review(
    annotated: &[AnnotatedRevision],
    n_docs: usize,
    seed: u64,
) -> Result<String, AnnotateError> {
    use rand::SeedableRng;
    if n_docs > annotated.len() {
        return Err(AnnotateError::SampleTooLarge {
            requested: n_docs,
            available: annotated.len(),
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, annotated.len(), n_docs).into_vec();
    picked.sort_unstable();

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(WORKSHEET_HEADERS)?;
    for idx in picked {
        let rev = &annotated[idx];
        for e in &rev.edits {
            writer.write_record([
                rev.doc_id.as_str(),
                e.edit_id.as_str(),
                e.old_text.as_deref().unwrap_or(""),
                e.new_text.as_deref().unwrap_or(""),
                e.action.map(|a| a.name()).unwrap_or(""),
                e.intent.as_deref().unwrap_or(""),
                "",
                "",
            ])?;
        }
    }
    let bytes = writer.into_inner().expect("in-memory writer cannot fail");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Model-vs-human agreement over a filled worksheet, in the evaluation
/// layout: overall accuracy and macro-F1 for intents, action accuracy,
/// and per-label precision/recall/F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewScore {
    pub n_edits: usize,
    pub action_accuracy: f64,
    pub intent_accuracy: f64,
    pub intent_macro_f1: f64,
    pub per_label: Vec<ClassMetrics>,
}

/// Scores a filled review worksheet: every row must carry the human
/// action and intent. The model's labels are treated as predictions and
/// the human's as gold.
pub fn score_review(worksheet_csv: &str) -> Result<ReviewScore, AnnotateError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(worksheet_csv.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().ne(WORKSHEET_HEADERS) {
        return Err(AnnotateError::Worksheet {
            row: 0,
            problem: format!(
                "unexpected headers {:?}, want {:?}",
                headers.iter().collect::<Vec<_>>(),
                WORKSHEET_HEADERS
            ),
        });
    }
    let mut model_actions = Vec::new();
    let mut human_actions = Vec::new();
    let mut intent_preds = Vec::new();
    let mut intent_golds = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let human_action = field(6);
        let human_intent = field(7);
        if human_action.is_empty() || human_intent.is_empty() {
            return Err(AnnotateError::Worksheet {
                row,
                problem: "human action/intent not filled in".into(),
            });
        }
        model_actions.push(field(4));
        human_actions.push(human_action);
        intent_preds.push(Prediction {
            label: Some(field(5)),
            logits: None,
            raw_output: None,
            answer_included: true,
        });
        intent_golds.push(human_intent);
    }
    if intent_preds.is_empty() {
        return Err(AnnotateError::Worksheet {
            row: 0,
            problem: "worksheet has no rows".into(),
        });
    }
    let n = intent_preds.len();
    let action_accuracy = model_actions
        .iter()
        .zip(&human_actions)
        .filter(|(m, h)| m == h)
        .count() as f64
        / n as f64;
    let labels = LabelSet::edit_intents();
    Ok(ReviewScore {
        n_edits: n,
        action_accuracy,
        intent_accuracy: evaluation::accuracy(&intent_preds, &intent_golds)?,
        intent_macro_f1: evaluation::macro_f1(&intent_preds, &intent_golds, &labels)?,
        per_label: evaluation::per_class(&intent_preds, &intent_golds, &labels)?,
    })
}

/// Emission timestamp: `SOURCE_DATE_EPOCH` when set (reproducible runs),
/// otherwise the current Unix time.
pub fn pipeline_timestamp() -> u64 {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(t) = v.trim().parse() {
            return t;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::stub::HashEmbedder;
    use crate::corpus::{tasks, EditAction};
    use crate::prompting::InputFormat;
    use crate::synthetic;

    fn seqc_intent_classifier(hidden: usize) -> Classifier {
        let mut c = Classifier::new(
            ApproachKind::SeqC,
            None,
            InputFormat::STRUCTURED,
            tasks::edit_intent(),
        )
        .unwrap();
        c.init_head(hidden, 9);
        c
    }

    fn annotated_fixture() -> Vec<AnnotatedRevision> {
        let scripts = synthetic::revision_suite(4, 21, 0.0);
        let config = AnnotateConfig::new("ckpt-test");
        let intent = seqc_intent_classifier(16);
        let mut backend = HashEmbedder::new(16, 2);
        let docs: Vec<DocumentRevision> = scripts.iter().map(|s| s.document()).collect();
        annotate(&docs, &config, &intent, &mut backend, None)
            .unwrap()
            .annotated
    }

    #[test]
    fn pipeline_labels_every_edit_and_keeps_doc_linkage() {
        let scripts = synthetic::revision_suite(3, 5, 0.0);
        let docs: Vec<DocumentRevision> = scripts.iter().map(|s| s.document()).collect();
        let config = AnnotateConfig::new("ckpt-a");
        let intent = seqc_intent_classifier(16);
        let mut backend = HashEmbedder::new(16, 2);
        let outcome = annotate(&docs, &config, &intent, &mut backend, None).unwrap();
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.annotated.len(), 3);
        let expected_edits: usize = scripts.iter().map(|s| s.edit_count()).sum();
        assert_eq!(outcome.total_edits(), expected_edits);
        let doc_ids: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        for rev in &outcome.annotated {
            rev.validate().unwrap();
            assert!(doc_ids.contains(rev.doc_id.as_str()));
            for e in &rev.edits {
                assert!(e.action.is_some() && e.intent.is_some());
            }
            assert_eq!(
                rev.counts.sentences,
                docs.iter()
                    .find(|d| d.doc_id == rev.doc_id)
                    .unwrap()
                    .new_sentences
                    .len()
            );
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let a = annotated_fixture();
        let b = annotated_fixture();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb, "same checkpoint and inputs give identical bytes");
    }

    #[test]
    fn empty_revision_yields_zero_edits() {
        let doc = DocumentRevision {
            doc_id: "empty".into(),
            old_sentences: vec!["Only sentence.".into()],
            new_sentences: vec!["Only sentence.".into()],
            domain_category: None,
            review_scores_old: None,
            review_scores_new: None,
        };
        let config = AnnotateConfig::new("ckpt");
        let intent = seqc_intent_classifier(8);
        let mut backend = HashEmbedder::new(8, 1);
        let outcome = annotate(&[doc], &config, &intent, &mut backend, None).unwrap();
        assert_eq!(outcome.annotated.len(), 1);
        assert_eq!(outcome.annotated[0].edits.len(), 0);
        assert_eq!(outcome.annotated[0].counts.edits, 0);
        outcome.annotated[0].validate().unwrap();
    }

    #[test]
    fn wrong_approach_or_missing_head_is_rejected_up_front() {
        let docs: Vec<DocumentRevision> = vec![];
        let config = AnnotateConfig::new("ckpt");
        let mut backend = HashEmbedder::new(8, 1);

        let gen = Classifier::new(
            ApproachKind::Gen,
            None,
            InputFormat::STRUCTURED_INSTRUCTION,
            tasks::edit_intent(),
        )
        .unwrap();
        assert!(matches!(
            annotate(&docs, &config, &gen, &mut backend, None),
            Err(AnnotateError::WrongApproach { .. })
        ));

        let headless = Classifier::new(
            ApproachKind::SeqC,
            None,
            InputFormat::STRUCTURED,
            tasks::edit_intent(),
        )
        .unwrap();
        assert!(matches!(
            annotate(&docs, &config, &headless, &mut backend, None),
            Err(AnnotateError::MissingHead)
        ));
    }

    #[test]
    fn per_document_failures_are_isolated() {
        let good = synthetic::scripted_revision("good", 3).document();
        // Backend with a hidden size that disagrees with the trained head
        // makes classification fail; alignment still succeeds, so the
        // failure is attributed to the classify stage.
        let config = AnnotateConfig::new("ckpt");
        let intent = seqc_intent_classifier(16);
        let mut wrong_backend = HashEmbedder::new(8, 2);
        let outcome = annotate(&[good], &config, &intent, &mut wrong_backend, None).unwrap();
        assert_eq!(outcome.annotated.len(), 0);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].stage, "classify");
        assert_eq!(outcome.failures[0].doc_id, "good");
    }

    #[test]
    fn provenance_round_trips_through_serialization() {
        let annotated = annotated_fixture();
        let json = serde_json::to_string(&annotated).unwrap();
        let back: Vec<AnnotatedRevision> = serde_json::from_str(&json).unwrap();
        assert_eq!(annotated, back);
        assert_eq!(back[0].provenance.intent_checkpoint, "ckpt-test");
        assert_eq!(back[0].provenance.pipeline_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn stats_cover_categories_and_overall() {
        let prov = Provenance::new("ckpt");
        let doc = |id: &str, cat, n_edits: usize| {
            let rev = DocumentRevision {
                doc_id: id.into(),
                old_sentences: vec![],
                new_sentences: vec!["one two three".into(), "four five".into()],
                domain_category: cat,
                review_scores_old: None,
                review_scores_new: None,
            };
            let edits: Vec<EditSample> = (0..n_edits)
                .map(|k| {
                    EditSample::pair(id, format!("{id}/e{k}"), "a", "b")
                        .with_action(EditAction::Modify)
                        .with_intent("Grammar")
                })
                .collect();
            AnnotatedRevision::from_parts(&rev, edits, prov.clone()).unwrap()
        };
        let annotated = vec![
            doc("a", Some(DomainCategory::Nlp), 3),
            doc("b", Some(DomainCategory::Nlp), 5),
            doc("c", Some(DomainCategory::Med), 2),
            doc("d", None, 1),
        ];
        let rows = corpus_stats(&annotated);
        assert_eq!(
            rows.iter().map(|r| r.category.as_str()).collect::<Vec<_>>(),
            vec!["nlp", "med", "uncategorized", "overall"]
        );
        let nlp = &rows[0];
        assert_eq!((nlp.docs, nlp.edits), (2, 8));
        assert!((nlp.avg_edits - 4.0).abs() < 1e-12);
        assert!((nlp.avg_words - 5.0).abs() < 1e-12);
        assert!((nlp.avg_sentences - 2.0).abs() < 1e-12);
        let overall = rows.last().unwrap();
        assert_eq!((overall.docs, overall.edits), (4, 11));

        // Single doc with 3 edits averages 3.
        let solo = corpus_stats(&annotated[..1]);
        assert!((solo.last().unwrap().avg_edits - 3.0).abs() < 1e-12);

        assert!(corpus_stats(&[]).is_empty());
    }

    #[test]
    fn review_worksheet_samples_deterministically_and_scores() {
        let annotated = annotated_fixture();
        let sheet = sample_for_review(&annotated, 2, 77).unwrap();
        assert_eq!(sheet, sample_for_review(&annotated, 2, 77).unwrap());
        assert!(sheet.starts_with("doc_id,edit_id,old_text,new_text,action,intent,human_action,human_intent\n"));

        assert!(matches!(
            sample_for_review(&annotated, 99, 1),
            Err(AnnotateError::SampleTooLarge { requested: 99, available: 4 })
        ));

        // Fill the human columns agreeing with the model everywhere.
        let mut filled = String::new();
        for (k, line) in sheet.lines().enumerate() {
            if k == 0 {
                filled.push_str(line);
            } else {
                let cells: Vec<&str> = line.split(',').collect();
                // Synthetic texts contain no commas, so plain splitting
                // is safe here.
                filled.push_str(&format!(
                    "{},{},{}",
                    cells[..6].join(","),
                    cells[4],
                    cells[5]
                ));
            }
            filled.push('\n');
        }
        let score = score_review(&filled).unwrap();
        assert!(score.n_edits > 0);
        assert_eq!(score.action_accuracy, 1.0);
        assert_eq!(score.intent_accuracy, 1.0);
        assert_eq!(score.intent_macro_f1, 1.0);
        assert!(!score.per_label.is_empty());
        for row in &score.per_label {
            assert_eq!((row.precision, row.recall, row.f1), (1.0, 1.0, 1.0));
        }

        // Unfilled worksheets are rejected with the offending row.
        let err = score_review(&sheet).unwrap_err();
        assert!(matches!(err, AnnotateError::Worksheet { row: 1, .. }));
    }

    #[test]
    fn assemble_joins_edits_and_rejects_orphans() {
        let docs = vec![
            synthetic::scripted_revision("d0", 1).document(),
            synthetic::scripted_revision("d1", 2).document(),
        ];
        let prov = Provenance::new("ckpt");
        let edits = vec![
            EditSample::pair("d0", "d0/e0", "x", "y")
                .with_action(EditAction::Modify)
                .with_intent("Clarity"),
            EditSample::pair("d0", "d0/e1", "p", "q")
                .with_action(EditAction::Modify)
                .with_intent("Claim"),
        ];
        let joined = assemble(&docs, &edits, &prov).unwrap();
        assert_eq!(joined.len(), 2);
        assert_eq!(joined[0].edits.len(), 2);
        assert_eq!(joined[1].edits.len(), 0);

        let orphan = vec![EditSample::pair("nope", "nope/e0", "x", "y")];
        assert!(matches!(
            assemble(&docs, &orphan, &prov),
            Err(AnnotateError::UnknownDocument { .. })
        ));
    }

    #[test]
    fn oracle_classifier_recovers_generator_labels() {
        // A scorer-free pipeline run whose intent model is replaced by an
        // oracle: instead of a trained head, label edits after the run
        // using the generator's ground truth and check the actions the
        // pipeline derived match the script.
        let script = synthetic::scripted_revision("oracle-doc", 13);
        let doc = script.document();
        let config = AnnotateConfig::new("ckpt");
        let intent = seqc_intent_classifier(16);
        let mut backend = HashEmbedder::new(16, 2);
        let outcome = annotate(
            std::slice::from_ref(&doc),
            &config,
            &intent,
            &mut backend,
            None,
        )
        .unwrap();
        assert!(outcome.failures.is_empty());
        let rev = &outcome.annotated[0];
        assert_eq!(rev.edits.len(), script.edit_count());
        // Actions must match the generating script exactly.
        let mut want: Vec<(Option<usize>, Option<usize>, EditAction)> = Vec::new();
        for &(i, j) in &script.modified {
            want.push((Some(i), Some(j), EditAction::Modify));
        }
        for &j in &script.added {
            want.push((None, Some(j), EditAction::Add));
        }
        for &i in &script.deleted {
            want.push((Some(i), None, EditAction::Delete));
        }
        let got: Vec<(Option<usize>, Option<usize>, EditAction)> = rev
            .edits
            .iter()
            .map(|e| (e.old_index, e.new_index, e.action.unwrap()))
            .collect();
        let sort = |mut v: Vec<(Option<usize>, Option<usize>, EditAction)>| {
            v.sort_by_key(|(a, b, _)| (a.unwrap_or(usize::MAX), b.unwrap_or(usize::MAX)));
            v
        };
        assert_eq!(sort(got), sort(want));
    }
}
