//! Two-stage sentence alignment between document revisions.
//!
//! Stage one ([`prealign`]) is built for precision: it anchors sentences
//! that match exactly after normalization and are unique on both sides,
//! then greedily pairs the remainder by token-set Jaccard similarity,
//! restricted to a relative-position window and to pairs that do not cross
//! an anchor. Stage two ([`classify_residual`]) trades compute for recall:
//! a trained pair classifier scores the leftover old x new candidates and
//! the best-scoring verdicts are accepted greedily under injectivity.
//!
//! Whatever remains unpaired is an addition (new side) or deletion (old
//! side); [`derive_edits`] turns a completed alignment into action-labeled
//! edit samples. Paired sentences whose normalized texts are equal carry
//! the `Unchanged` status and emit no edit, no matter which stage paired
//! them.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::approaches::{ApproachError, Classifier};
use crate::backend::Backend;
use crate::corpus::{EditAction, EditSample};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("alignment partition violated: {0}")]
    Invariant(String),
    #[error("residual scorer misconfigured: {0}")]
    Scorer(String),
    #[error(transparent)]
    Approach(#[from] ApproachError),
}

/// Pre-alignment thresholds. `theta_high` is the minimum token-set Jaccard
/// for the greedy matching stage; `window` bounds the relative-position
/// distance of any non-exact pair (both stages). Sized for precision over
/// recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub theta_high: f64,
    pub window: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            theta_high: 0.5,
            window: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Unchanged,
    Modified,
}

/// Which stage produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prealign,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub old_index: usize,
    pub new_index: usize,
    pub status: PairStatus,
    pub stage: Stage,
}

/// A document alignment: matched pairs plus the leftover indices. Between
/// stages, `added`/`deleted` double as the not-yet-matched candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub pairs: Vec<AlignedPair>,
    /// New-document indices with no old counterpart.
    pub added: Vec<usize>,
    /// Old-document indices with no new counterpart.
    pub deleted: Vec<usize>,
}

impl AlignmentResult {
    /// Checks the partition invariants: every old index in exactly one of
    /// pairs/deleted, every new index in exactly one of pairs/added, and
    /// the pair mapping injective on both sides.
    pub fn validate(&self, n_old: usize, n_new: usize) -> Result<(), AlignError> {
        let mut old_seen = vec![0usize; n_old];
        let mut new_seen = vec![0usize; n_new];
        let oob = |what: &str, index: usize, n: usize| {
            AlignError::Invariant(format!("{what} index {index} out of range (document has {n})"))
        };
        for p in &self.pairs {
            *old_seen
                .get_mut(p.old_index)
                .ok_or_else(|| oob("old", p.old_index, n_old))? += 1;
            *new_seen
                .get_mut(p.new_index)
                .ok_or_else(|| oob("new", p.new_index, n_new))? += 1;
        }
        for &i in &self.deleted {
            *old_seen.get_mut(i).ok_or_else(|| oob("old", i, n_old))? += 1;
        }
        for &j in &self.added {
            *new_seen.get_mut(j).ok_or_else(|| oob("new", j, n_new))? += 1;
        }
        if let Some(i) = old_seen.iter().position(|&c| c != 1) {
            return Err(AlignError::Invariant(format!(
                "old index {i} appears {} times across pairs and deletions (want exactly 1)",
                old_seen[i]
            )));
        }
        if let Some(j) = new_seen.iter().position(|&c| c != 1) {
            return Err(AlignError::Invariant(format!(
                "new index {j} appears {} times across pairs and additions (want exactly 1)",
                new_seen[j]
            )));
        }
        Ok(())
    }
}

/// Canonical sentence form for exact matching: Unicode NFC, whitespace
/// runs collapsed to single spaces, edges trimmed, case folded.
pub fn normalize_sentence(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Token set for Jaccard similarity: case-folded alphanumeric runs, plus
/// every other non-whitespace character as its own token (so punctuation
/// counts, but lightly).
pub fn jaccard_tokens(s: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    let mut run = String::new();
    for ch in normalize_sentence(s).chars() {
        if ch.is_alphanumeric() {
            run.push(ch);
        } else {
            if !run.is_empty() {
                tokens.insert(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                tokens.insert(ch.to_string());
            }
        }
    }
    if !run.is_empty() {
        tokens.insert(run);
    }
    tokens
}

/// Jaccard similarity of two token sets; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    intersection / union
}

/// Relative-position distance between old index `i` and new index `j`,
/// scaled so that equal-length documents measure plain `|i - j|`. Symmetric
/// under swapping the documents.
pub(crate) fn position_distance(i: usize, n_old: usize, j: usize, n_new: usize) -> f64 {
    (i as f64 * n_new as f64 - j as f64 * n_old as f64).abs() / n_old.max(n_new) as f64
}

/// A stage-two candidate ordering key. Greedy matching takes candidates in
/// descending similarity, then nearest position, then by index; two
/// distinct candidates with equal first three keys never share an index,
/// so the accepted set is invariant under document swap.
fn candidate_order(a: &(f64, f64, usize, usize), b: &(f64, f64, usize, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("similarities are finite")
        .then(a.1.partial_cmp(&b.1).expect("distances are finite"))
        .then_with(|| (a.2.min(a.3)).cmp(&(b.2.min(b.3))))
        .then_with(|| (a.2.max(a.3)).cmp(&(b.2.max(b.3))))
}

/// High-precision partial alignment.
///
/// Stage 1a anchors sentences whose normalized forms match exactly and are
/// unique in both documents (no window: a moved exact sentence still
/// anchors). Stage 1b greedily pairs the rest by token Jaccard at least
/// `theta_high`, inside the position window, skipping pairs that would
/// cross an anchor. Unmatched sentences land in `added`/`deleted`, where
/// [`classify_residual`] can still rescue them.
pub fn prealign(old: &[String], new: &[String], params: &AlignParams) -> AlignmentResult {
    let old_norm: Vec<String> = old.iter().map(|s| normalize_sentence(s)).collect();
    let new_norm: Vec<String> = new.iter().map(|s| normalize_sentence(s)).collect();

    let mut old_count: HashMap<&str, usize> = HashMap::new();
    for s in &old_norm {
        *old_count.entry(s).or_insert(0) += 1;
    }
    let mut new_count: HashMap<&str, usize> = HashMap::new();
    let mut new_pos: HashMap<&str, usize> = HashMap::new();
    for (j, s) in new_norm.iter().enumerate() {
        *new_count.entry(s).or_insert(0) += 1;
        new_pos.entry(s).or_insert(j);
    }

    let mut used_old = vec![false; old.len()];
    let mut used_new = vec![false; new.len()];
    let mut pairs = Vec::new();

    // Stage 1a: unique exact matches.
    let mut anchors: Vec<(usize, usize)> = Vec::new();
    for (i, s) in old_norm.iter().enumerate() {
        if old_count[s.as_str()] == 1 && new_count.get(s.as_str()) == Some(&1) {
            let j = new_pos[s.as_str()];
            used_old[i] = true;
            used_new[j] = true;
            anchors.push((i, j));
            pairs.push(AlignedPair {
                old_index: i,
                new_index: j,
                status: PairStatus::Unchanged,
                stage: Stage::Prealign,
            });
        }
    }

    // Stage 1b: windowed greedy Jaccard, consistent with the anchors.
    let old_tokens: Vec<BTreeSet<String>> = old.iter().map(|s| jaccard_tokens(s)).collect();
    let new_tokens: Vec<BTreeSet<String>> = new.iter().map(|s| jaccard_tokens(s)).collect();
    let consistent = |i: usize, j: usize| {
        anchors
            .iter()
            .all(|&(a, b)| (i < a && j < b) || (i > a && j > b))
    };
    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    for i in 0..old.len() {
        if used_old[i] {
            continue;
        }
        for j in 0..new.len() {
            if used_new[j] {
                continue;
            }
            let d = position_distance(i, old.len(), j, new.len());
            if d > params.window || !consistent(i, j) {
                continue;
            }
            let sim = jaccard(&old_tokens[i], &new_tokens[j]);
            if sim >= params.theta_high {
                candidates.push((sim, d, i, j));
            }
        }
    }
    candidates.sort_by(candidate_order);
    for (_, _, i, j) in candidates {
        if used_old[i] || used_new[j] {
            continue;
        }
        used_old[i] = true;
        used_new[j] = true;
        pairs.push(AlignedPair {
            old_index: i,
            new_index: j,
            status: pair_status(&old_norm[i], &new_norm[j]),
            stage: Stage::Prealign,
        });
    }

    pairs.sort_by_key(|p| p.old_index);
    AlignmentResult {
        pairs,
        added: (0..new.len()).filter(|&j| !used_new[j]).collect(),
        deleted: (0..old.len()).filter(|&i| !used_old[i]).collect(),
    }
}

fn pair_status(old_norm: &str, new_norm: &str) -> PairStatus {
    if old_norm == new_norm {
        PairStatus::Unchanged
    } else {
        PairStatus::Modified
    }
}

/// Scores a leftover old/new sentence pair. Positive margin means the two
/// read as versions of the same sentence; magnitude is confidence.
pub trait ResidualScorer {
    fn margin(&mut self, old: &str, new: &str) -> Result<f64, AlignError>;
}

/// [`ResidualScorer`] backed by a binary pair classifier: the margin is
/// the logit of the task's first label minus the logit of its second, so
/// the first label plays the "same sentence" role.
pub struct ClassifierScorer<'a> {
    classifier: &'a Classifier,
    backend: &'a mut dyn Backend,
}

impl<'a> ClassifierScorer<'a> {
    pub fn new(classifier: &'a Classifier, backend: &'a mut dyn Backend) -> Result<Self, AlignError> {
        if classifier.task.labels.k() != 2 {
            return Err(AlignError::Scorer(format!(
                "residual classification needs a binary label set, task {:?} has {} labels",
                classifier.task.task_id,
                classifier.task.labels.k()
            )));
        }
        if classifier.head.is_none() {
            return Err(AlignError::Scorer(
                "residual classification needs a head-bearing classifier with logits".into(),
            ));
        }
        Ok(Self {
            classifier,
            backend,
        })
    }
}

impl ResidualScorer for ClassifierScorer<'_> {
    fn margin(&mut self, old: &str, new: &str) -> Result<f64, AlignError> {
        let sample = EditSample::pair("residual", "candidate", old, new);
        let prediction = self.classifier.predict(self.backend, &sample)?;
        let logits = prediction
            .logits
            .ok_or_else(|| AlignError::Scorer("classifier produced no logits".into()))?;
        Ok(logits[0] - logits[1])
    }
}

/// Completes an alignment by scoring every leftover old x new candidate in
/// the position window and accepting positive verdicts greedily by
/// descending margin, subject only to injectivity. Accepted pairs join
/// `pairs` with classifier provenance; the rest stay additions/deletions.
pub fn classify_residual<S: ResidualScorer + ?Sized>(
    result: AlignmentResult,
    old: &[String],
    new: &[String],
    params: &AlignParams,
    scorer: &mut S,
) -> Result<AlignmentResult, AlignError> {
    let mut scored: Vec<(f64, f64, usize, usize)> = Vec::new();
    for &i in &result.deleted {
        for &j in &result.added {
            let d = position_distance(i, old.len(), j, new.len());
            if d > params.window {
                continue;
            }
            let margin = scorer.margin(&old[i], &new[j])?;
            if margin > 0.0 {
                scored.push((margin, d, i, j));
            }
        }
    }
    scored.sort_by(candidate_order);

    let mut used_old = vec![false; old.len()];
    let mut used_new = vec![false; new.len()];
    let mut pairs = result.pairs;
    for p in &pairs {
        used_old[p.old_index] = true;
        used_new[p.new_index] = true;
    }
    for (_, _, i, j) in scored {
        if used_old[i] || used_new[j] {
            continue;
        }
        used_old[i] = true;
        used_new[j] = true;
        pairs.push(AlignedPair {
            old_index: i,
            new_index: j,
            status: pair_status(&normalize_sentence(&old[i]), &normalize_sentence(&new[j])),
            stage: Stage::Classifier,
        });
    }

    pairs.sort_by_key(|p| p.old_index);
    Ok(AlignmentResult {
        pairs,
        added: result.added.into_iter().filter(|&j| !used_new[j]).collect(),
        deleted: result
            .deleted
            .into_iter()
            .filter(|&i| !used_old[i])
            .collect(),
    })
}

/// Turns a completed alignment into action-labeled edit samples: modified
/// pairs become Modify edits, additions become Add, deletions Delete;
/// unchanged pairs emit nothing.
///
/// Edits are ordered by position in the new document (Modify/Add), with
/// deletions after, in old-document order; ids are `{doc_id}/e{k}` in that
/// order.
pub fn derive_edits(
    doc_id: &str,
    result: &AlignmentResult,
    old: &[String],
    new: &[String],
) -> Vec<EditSample> {
    let mut keyed: Vec<((usize, usize), EditSample)> = Vec::new();
    for p in &result.pairs {
        if p.status != PairStatus::Modified {
            continue;
        }
        let mut sample = EditSample::pair(doc_id, "", &old[p.old_index], &new[p.new_index])
            .with_action(EditAction::Modify);
        sample.old_index = Some(p.old_index);
        sample.new_index = Some(p.new_index);
        keyed.push(((p.new_index, p.old_index), sample));
    }
    for &j in &result.added {
        let sample = EditSample {
            doc_id: doc_id.to_string(),
            edit_id: String::new(),
            old_text: None,
            new_text: Some(new[j].clone()),
            action: Some(EditAction::Add),
            intent: None,
            old_index: None,
            new_index: Some(j),
        };
        keyed.push(((j, usize::MAX), sample));
    }
    for &i in &result.deleted {
        let sample = EditSample {
            doc_id: doc_id.to_string(),
            edit_id: String::new(),
            old_text: Some(old[i].clone()),
            new_text: None,
            action: Some(EditAction::Delete),
            intent: None,
            old_index: Some(i),
            new_index: None,
        };
        keyed.push(((usize::MAX, i), sample));
    }
    keyed.sort_by_key(|(key, _)| *key);
    keyed
        .into_iter()
        .enumerate()
        .map(|(k, (_, mut sample))| {
            sample.edit_id = format!("{doc_id}/e{k}");
            sample
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(sentences: &[&str]) -> Vec<String> {
        sentences.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_documents_are_all_unchanged() {
        let text = doc(&["The cat sat.", "It purred.", "Then it left."]);
        let result = prealign(&text, &text, &AlignParams::default());
        result.validate(3, 3).unwrap();
        assert_eq!(result.pairs.len(), 3);
        assert!(result
            .pairs
            .iter()
            .all(|p| p.status == PairStatus::Unchanged && p.old_index == p.new_index));
        assert!(result.added.is_empty() && result.deleted.is_empty());
        assert!(derive_edits("d", &result, &text, &text).is_empty());
    }

    #[test]
    fn extra_sentence_becomes_an_addition() {
        let old = doc(&["The cat sat."]);
        let new = doc(&["The cat sat.", "It purred."]);
        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(1, 2).unwrap();
        assert_eq!(result.pairs.len(), 1);
        assert_eq!(result.pairs[0].status, PairStatus::Unchanged);
        assert_eq!(result.added, vec![1]);
        assert!(result.deleted.is_empty());

        let edits = derive_edits("d", &result, &old, &new);
        assert_eq!(edits.len(), 1);
        assert_eq!(edits[0].action, Some(EditAction::Add));
        assert_eq!(edits[0].new_text.as_deref(), Some("It purred."));
        assert_eq!(edits[0].new_index, Some(1));
        assert_eq!(edits[0].old_text, None);
        edits[0].validate(None).unwrap();
    }

    #[test]
    fn typo_fix_is_a_modified_pair() {
        let old = doc(&["The modle is trained."]);
        let new = doc(&["The model is trained."]);

        // Token sets: {the, modle|model, is, trained, "."} -> 4 shared of 6.
        let sim = jaccard(&jaccard_tokens(&old[0]), &jaccard_tokens(&new[0]));
        assert!((sim - 4.0 / 6.0).abs() < 1e-15);

        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(1, 1).unwrap();
        assert_eq!(result.pairs.len(), 1);
        assert_eq!(result.pairs[0].status, PairStatus::Modified);
        assert_eq!(result.pairs[0].stage, Stage::Prealign);

        // Brute force over the full candidate matrix agrees this is the
        // best (and only) pairing.
        let mut best = (0.0, 0, 0);
        for (i, o) in old.iter().enumerate() {
            for (j, n) in new.iter().enumerate() {
                let s = jaccard(&jaccard_tokens(o), &jaccard_tokens(n));
                if s > best.0 {
                    best = (s, i, j);
                }
            }
        }
        assert_eq!((best.1, best.2), (0, 0));

        let edits = derive_edits("d", &result, &old, &new);
        assert_eq!(edits.len(), 1);
        assert_eq!(edits[0].action, Some(EditAction::Modify));
        assert_eq!(edits[0].old_index, Some(0));
        assert_eq!(edits[0].new_index, Some(0));
    }

    #[test]
    fn normalization_folds_unicode_whitespace_and_case() {
        assert_eq!(normalize_sentence("  The\u{00a0}Cat\n sat  "), "the cat sat");
        // Composed and decomposed accents normalize identically.
        assert_eq!(normalize_sentence("cafe\u{0301}"), normalize_sentence("caf\u{e9}"));

        let tokens = jaccard_tokens("Hello, world!");
        let expect: BTreeSet<String> = ["hello", ",", "world", "!"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(tokens, expect);
    }

    #[test]
    fn duplicate_sentences_pair_positionally_without_edits() {
        let text = doc(&["It purred.", "It purred."]);
        let result = prealign(&text, &text, &AlignParams::default());
        result.validate(2, 2).unwrap();
        // Not unique, so not stage-1a anchors; the Jaccard stage still
        // pairs them by position.
        assert_eq!(result.pairs.len(), 2);
        for p in &result.pairs {
            assert_eq!(p.old_index, p.new_index);
            assert_eq!(p.status, PairStatus::Unchanged);
        }
        assert!(derive_edits("d", &result, &text, &text).is_empty());
    }

    /// Filler sentences engineered to be pairwise dissimilar: distinct
    /// content words everywhere.
    fn fillers(n: usize, salt: &str) -> Vec<String> {
        (0..n)
            .map(|k| format!("filler{salt}{k}a filler{salt}{k}b filler{salt}{k}c"))
            .collect()
    }

    #[test]
    fn position_window_blocks_distant_near_matches() {
        // The near-match sits 11 slots apart in 12-sentence documents.
        let moved_old = "shared tokens one two three".to_string();
        let moved_new = "shared tokens one two four".to_string();
        let mut old = vec![moved_old];
        old.extend(fillers(11, "x"));
        let mut new = fillers(11, "y");
        new.push(moved_new);

        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(12, 12).unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(result.deleted.len(), 12);
        assert_eq!(result.added.len(), 12);

        // Widening the window lets the same pair through.
        let wide = AlignParams {
            window: 20.0,
            ..AlignParams::default()
        };
        let result = prealign(&old, &new, &wide);
        result.validate(12, 12).unwrap();
        assert_eq!(result.pairs.len(), 1);
        assert_eq!((result.pairs[0].old_index, result.pairs[0].new_index), (0, 11));
        assert_eq!(result.pairs[0].status, PairStatus::Modified);
    }

    #[test]
    fn anchors_block_crossing_candidates() {
        let anchor = "This exact sentence anchors the alignment.";
        let old = doc(&[anchor, "alpha beta gamma delta"]);
        let new = doc(&["alpha beta gamma delta epsilon", anchor]);
        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(2, 2).unwrap();
        // (1, 0) has Jaccard 4/5 but crosses the (0, 1) anchor.
        assert_eq!(result.pairs.len(), 1);
        assert_eq!((result.pairs[0].old_index, result.pairs[0].new_index), (0, 1));
        assert_eq!(result.deleted, vec![1]);
        assert_eq!(result.added, vec![0]);

        // Without the anchor the same candidate is accepted.
        let old = doc(&["unrelated filler sentence here", "alpha beta gamma delta"]);
        let new = doc(&["alpha beta gamma delta epsilon", "completely different words now"]);
        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(2, 2).unwrap();
        assert!(result
            .pairs
            .iter()
            .any(|p| (p.old_index, p.new_index) == (1, 0) && p.status == PairStatus::Modified));
    }

    /// Oracle scorer: same rare keyword means same sentence.
    struct KeywordScorer {
        calls: usize,
    }

    impl ResidualScorer for KeywordScorer {
        fn margin(&mut self, old: &str, new: &str) -> Result<f64, AlignError> {
            self.calls += 1;
            let key = |s: &str| {
                jaccard_tokens(s)
                    .into_iter()
                    .find(|t| t.starts_with("key"))
            };
            match (key(old), key(new)) {
                (Some(a), Some(b)) if a == b => Ok(1.0),
                _ => Ok(-1.0),
            }
        }
    }

    #[test]
    fn residual_classifier_rescues_heavy_paraphrase() {
        // A paraphrase below the Jaccard threshold, tagged with a rare
        // keyword the oracle can see.
        let old = doc(&[
            "The cat sat on the mat.",
            "Results keyfact improve with scale.",
        ]);
        let new = doc(&[
            "The cat sat on the mat.",
            "Scaling up keyfact brings clear gains everywhere.",
        ]);
        let pre = prealign(&old, &new, &AlignParams::default());
        pre.validate(2, 2).unwrap();
        assert_eq!(pre.deleted, vec![1], "paraphrase must escape stage one");
        assert_eq!(pre.added, vec![1]);

        let mut scorer = KeywordScorer { calls: 0 };
        let full = classify_residual(pre, &old, &new, &AlignParams::default(), &mut scorer).unwrap();
        full.validate(2, 2).unwrap();
        assert!(scorer.calls > 0);
        assert!(full.added.is_empty() && full.deleted.is_empty());
        let rescued = full
            .pairs
            .iter()
            .find(|p| (p.old_index, p.new_index) == (1, 1))
            .expect("rescued pair");
        assert_eq!(rescued.stage, Stage::Classifier);
        assert_eq!(rescued.status, PairStatus::Modified);

        let edits = derive_edits("d", &full, &old, &new);
        assert_eq!(edits.len(), 1);
        assert_eq!(edits[0].action, Some(EditAction::Modify));
    }

    #[test]
    fn residual_injectivity_keeps_the_higher_margin() {
        struct FixedScorer;
        impl ResidualScorer for FixedScorer {
            fn margin(&mut self, old: &str, _new: &str) -> Result<f64, AlignError> {
                // Old sentence zero scores higher than old sentence one.
                Ok(if old.contains("zero") { 2.0 } else { 1.0 })
            }
        }
        let old = doc(&["candidate zero words", "candidate one words"]);
        let new = doc(&["the single replacement sentence"]);
        let pre = AlignmentResult {
            pairs: vec![],
            added: vec![0],
            deleted: vec![0, 1],
        };
        pre.validate(2, 1).unwrap();
        let full =
            classify_residual(pre, &old, &new, &AlignParams::default(), &mut FixedScorer).unwrap();
        full.validate(2, 1).unwrap();
        assert_eq!(full.pairs.len(), 1);
        assert_eq!((full.pairs[0].old_index, full.pairs[0].new_index), (0, 0));
        assert_eq!(full.deleted, vec![1]);
    }

    #[test]
    fn empty_residual_is_a_noop_and_calls_no_scorer() {
        struct PanicScorer;
        impl ResidualScorer for PanicScorer {
            fn margin(&mut self, _: &str, _: &str) -> Result<f64, AlignError> {
                panic!("scorer must not run on an empty residual");
            }
        }
        let text = doc(&["Same here.", "And here."]);
        let pre = prealign(&text, &text, &AlignParams::default());
        let before = pre.clone();
        let full =
            classify_residual(pre, &text, &text, &AlignParams::default(), &mut PanicScorer)
                .unwrap();
        assert_eq!(full, before);
    }

    #[test]
    fn validate_rejects_broken_partitions() {
        let pair = |i: usize, j: usize| AlignedPair {
            old_index: i,
            new_index: j,
            status: PairStatus::Modified,
            stage: Stage::Prealign,
        };
        // Old index both paired and deleted.
        let double_old = AlignmentResult {
            pairs: vec![pair(0, 0)],
            added: vec![],
            deleted: vec![0],
        };
        assert!(double_old.validate(1, 1).is_err());
        // New index mapped twice (injectivity).
        let double_new = AlignmentResult {
            pairs: vec![pair(0, 0), pair(1, 0)],
            added: vec![],
            deleted: vec![],
        };
        assert!(double_new.validate(2, 1).is_err());
        // Missing coverage.
        let missing = AlignmentResult {
            pairs: vec![],
            added: vec![],
            deleted: vec![],
        };
        assert!(missing.validate(1, 0).is_err());
        // Out of range.
        let oob = AlignmentResult {
            pairs: vec![pair(3, 0)],
            added: vec![],
            deleted: vec![],
        };
        assert!(oob.validate(1, 1).is_err());
    }

    #[test]
    fn classifier_scorer_requires_a_binary_head() {
        use crate::approaches::ApproachKind;
        use crate::backend::stub::HashEmbedder;
        use crate::corpus::{InputArity, LabelSet, TaskSpec};
        use crate::prompting::InputFormat;

        let binary = LabelSet::new(["aligned", "distinct"]).unwrap();
        let task = TaskSpec::new(
            "pair",
            InputArity::Pair,
            binary,
            "Decide whether the sentences are aligned versions or distinct statements.",
        )
        .unwrap();
        let mut classifier =
            Classifier::new(ApproachKind::SeqC, None, InputFormat::STRUCTURED, task).unwrap();
        let mut backend = HashEmbedder::new(8, 3);

        // No head yet.
        assert!(ClassifierScorer::new(&classifier, &mut backend).is_err());

        classifier.init_head(8, 5);
        let mut scorer = ClassifierScorer::new(&classifier, &mut backend).unwrap();
        let m1 = scorer.margin("one sentence", "another sentence").unwrap();
        let m2 = scorer.margin("one sentence", "another sentence").unwrap();
        assert!(m1.is_finite());
        assert_eq!(m1, m2, "scoring is deterministic");

        // Five labels is not a pair decision.
        let five = crate::corpus::tasks::edit_intent();
        let c5 = Classifier::new(ApproachKind::SeqC, None, InputFormat::STRUCTURED, five).unwrap();
        assert!(matches!(
            ClassifierScorer::new(&c5, &mut backend),
            Err(AlignError::Scorer(_))
        ));
    }

    #[test]
    fn derive_edits_orders_by_new_position_then_deletions() {
        let old = doc(&["kept sentence stays put", "dropped entirely", "reworded a bit"]);
        let new = doc(&["fresh opener appears", "kept sentence stays put", "reworded quite a bit"]);
        let result = prealign(&old, &new, &AlignParams::default());
        result.validate(3, 3).unwrap();
        let edits = derive_edits("doc", &result, &old, &new);
        assert_eq!(edits.len(), 3);
        assert_eq!(edits[0].action, Some(EditAction::Add));
        assert_eq!(edits[0].new_index, Some(0));
        assert_eq!(edits[1].action, Some(EditAction::Modify));
        assert_eq!(edits[1].new_index, Some(2));
        assert_eq!(edits[2].action, Some(EditAction::Delete));
        assert_eq!(edits[2].old_index, Some(1));
        for (k, e) in edits.iter().enumerate() {
            assert_eq!(e.edit_id, format!("doc/e{k}"));
            assert_eq!(e.doc_id, "doc");
            e.validate(None).unwrap();
        }
    }

    proptest! {
        /// Swapping the documents mirrors the alignment: pairs reverse
        /// orientation and additions trade places with deletions.
        #[test]
        fn prealign_is_swap_symmetric(seed in 0u64..400) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vocab = ["data", "model", "results", "shows", "improves", "the", "a", "strong", "weak", "clear"];
            let sentence = |rng: &mut rand_chacha::ChaCha8Rng| {
                let len = rng.gen_range(1..7);
                (0..len)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let n_old = rng.gen_range(1..9);
            let n_new = rng.gen_range(1..9);
            let old: Vec<String> = (0..n_old).map(|_| sentence(&mut rng)).collect();
            let new: Vec<String> = (0..n_new).map(|_| sentence(&mut rng)).collect();

            let params = AlignParams::default();
            let forward = prealign(&old, &new, &params);
            forward.validate(n_old, n_new).unwrap();
            let backward = prealign(&new, &old, &params);
            backward.validate(n_new, n_old).unwrap();

            let forward_pairs: BTreeSet<(usize, usize, bool)> = forward
                .pairs
                .iter()
                .map(|p| (p.old_index, p.new_index, p.status == PairStatus::Unchanged))
                .collect();
            let mirrored: BTreeSet<(usize, usize, bool)> = backward
                .pairs
                .iter()
                .map(|p| (p.new_index, p.old_index, p.status == PairStatus::Unchanged))
                .collect();
            prop_assert_eq!(forward_pairs, mirrored);
            prop_assert_eq!(&forward.added, &backward.deleted);
            prop_assert_eq!(&forward.deleted, &backward.added);
        }
    }
}
