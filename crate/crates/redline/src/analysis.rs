//! Editing-behavior analytics over an annotated corpus: revision-success
//! labeling, logistic regression of success on edit-focus proportions,
//! positional edit distributions, KL divergence between them, and
//! group-difference t-tests.
//!
//! Conventions: positions are relative sentence indices in [0, 1] (new
//! document for Add/Modify, old document for Delete; single-sentence
//! documents contribute position 0); histograms use 10 bins by default;
//! KL divergence is in nats with 1e-9 add-epsilon smoothing; regression
//! is a plain maximum-likelihood fit (damped Newton, intercept included,
//! no regularization).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoannotate::AnnotatedRevision;
use crate::corpus::{DocumentRevision, EditAction, LabelSet, ReviewDecision};
use crate::evaluation::significance::{welch_t_two_sided, StatError};
use crate::evaluation::special::{chi_square_sf, normal_sf};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("review scores missing or empty for the {side} version")]
    MissingScores { side: &'static str },
    #[error("document {doc_id} has no edits; exclude it before this step")]
    ZeroEdits { doc_id: String },
    #[error("edit {edit_id} lacks the {what} needed here")]
    IncompleteEdit { edit_id: String, what: &'static str },
    #[error("bad regression design: {0}")]
    BadDesign(String),
    #[error("perfect separation detected (coefficients diverged); fit aborted")]
    Separation,
    #[error("no convergence after {iterations} Newton iterations")]
    NoConvergence { iterations: usize },
    #[error("information matrix is singular")]
    Singular,
    #[error("distribution support sizes differ: {p} vs {q}")]
    SupportMismatch { p: usize, q: usize },
    #[error("invalid distribution: {0}")]
    BadDistribution(String),
    #[error("group {which} has {len} documents; need at least 2")]
    GroupTooSmall { which: &'static str, len: usize },
    #[error("no documents supplied")]
    Empty,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Stat(#[from] StatError),
}

/// reject = 1, approve-with-reservations = 2, approve = 3.
fn mean_score(scores: &[ReviewDecision]) -> f64 {
    scores.iter().map(|d| d.score() as f64).sum::<f64>() / scores.len() as f64
}

/// A revision is successful exactly when the mean reviewer score rose.
/// Equal means count as unsuccessful.
pub fn label_success(
    old: &[ReviewDecision],
    new: &[ReviewDecision],
) -> Result<bool, AnalysisError> {
    if old.is_empty() {
        return Err(AnalysisError::MissingScores { side: "old" });
    }
    if new.is_empty() {
        return Err(AnalysisError::MissingScores { side: "new" });
    }
    Ok(mean_score(new) > mean_score(old))
}

/// [`label_success`] reading the scores off a document revision.
pub fn label_success_doc(doc: &DocumentRevision) -> Result<bool, AnalysisError> {
    let old = doc
        .review_scores_old
        .as_deref()
        .ok_or(AnalysisError::MissingScores { side: "old" })?;
    let new = doc
        .review_scores_new
        .as_deref()
        .ok_or(AnalysisError::MissingScores { side: "new" })?;
    label_success(old, new)
}

/// The eight action-and-intent regressors of the success model, in
/// reporting order.
pub const FOCUS_REGRESSORS: [(&str, EditAction, &str); 8] = [
    ("Add-Fact/Evidence", EditAction::Add, "Fact/Evidence"),
    ("Add-Claim", EditAction::Add, "Claim"),
    ("Delete-Fact/Evidence", EditAction::Delete, "Fact/Evidence"),
    ("Delete-Claim", EditAction::Delete, "Claim"),
    ("Modify-Grammar", EditAction::Modify, "Grammar"),
    ("Modify-Clarity", EditAction::Modify, "Clarity"),
    ("Modify-Fact/Evidence", EditAction::Modify, "Fact/Evidence"),
    ("Modify-Claim", EditAction::Modify, "Claim"),
];

/// Names of the eight regressors, for report layouts.
pub fn focus_regressor_names() -> Vec<String> {
    FOCUS_REGRESSORS
        .iter()
        .map(|(name, _, _)| name.to_string())
        .collect()
}

/// Per-document edit-focus proportions over the eight regressors. Each
/// component is (edits with that action and intent) / (total edits); the
/// components need not sum to 1 because other combinations exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusVector {
    pub proportions: [f64; 8],
}

pub fn focus_vector(doc: &AnnotatedRevision) -> Result<FocusVector, AnalysisError> {
    if doc.edits.is_empty() {
        return Err(AnalysisError::ZeroEdits {
            doc_id: doc.doc_id.clone(),
        });
    }
    let total = doc.edits.len() as f64;
    let mut proportions = [0.0; 8];
    for edit in &doc.edits {
        let action = edit.action.ok_or_else(|| AnalysisError::IncompleteEdit {
            edit_id: edit.edit_id.clone(),
            what: "action",
        })?;
        let intent = edit
            .intent
            .as_deref()
            .ok_or_else(|| AnalysisError::IncompleteEdit {
                edit_id: edit.edit_id.clone(),
                what: "intent",
            })?;
        for (k, (_, a, i)) in FOCUS_REGRESSORS.iter().enumerate() {
            if action == *a && intent == *i {
                proportions[k] += 1.0;
            }
        }
    }
    for p in &mut proportions {
        *p /= total;
    }
    Ok(FocusVector { proportions })
}

/// Mean action-by-intent proportion grid over a corpus: rows follow
/// [`EditAction::ALL`], columns the intent label set; zero-edit documents
/// are excluded from the average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusGrid {
    pub actions: Vec<String>,
    pub intents: Vec<String>,
    /// `means[action][intent]`, averaged over contributing documents.
    pub means: Vec<Vec<f64>>,
    pub n_documents: usize,
}

pub fn focus_grid(docs: &[AnnotatedRevision]) -> Result<FocusGrid, AnalysisError> {
    let intents = LabelSet::edit_intents();
    let mut sums = vec![vec![0.0; intents.k()]; EditAction::ALL.len()];
    let mut contributing = 0usize;
    for doc in docs {
        if doc.edits.is_empty() {
            continue;
        }
        contributing += 1;
        let total = doc.edits.len() as f64;
        for edit in &doc.edits {
            let (Some(action), Some(intent)) = (edit.action, edit.intent.as_deref()) else {
                return Err(AnalysisError::IncompleteEdit {
                    edit_id: edit.edit_id.clone(),
                    what: "action or intent",
                });
            };
            let row = EditAction::ALL.iter().position(|a| *a == action).unwrap();
            if let Some(col) = intents.names().iter().position(|n| n == intent) {
                sums[row][col] += 1.0 / total;
            }
        }
    }
    if contributing == 0 {
        return Err(AnalysisError::Empty);
    }
    for row in &mut sums {
        for v in row {
            *v /= contributing as f64;
        }
    }
    Ok(FocusGrid {
        actions: EditAction::ALL.iter().map(|a| a.name().to_string()).collect(),
        intents: intents.names().to_vec(),
        means: sums,
        n_documents: contributing,
    })
}

const MAX_NEWTON_ITERATIONS: usize = 100;
const GRADIENT_TOLERANCE: f64 = 1e-10;
const SEPARATION_BOUND: f64 = 1e3;
const HESSIAN_WEIGHT_FLOOR: f64 = 1e-10;

/// Maximum-likelihood logistic fit: coefficients, Wald tests, and the
/// likelihood-ratio test against the intercept-only null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub intercept_se: f64,
    pub std_errors: Vec<f64>,
    pub intercept_wald_p: f64,
    /// Two-sided Wald p-value per coefficient.
    pub wald_p: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    /// 2 (LL_full - LL_null), nonnegative.
    pub llr_statistic: f64,
    /// Chi-square tail with df = regressor count.
    pub llr_p: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_likelihood(design: &[Vec<f64>], ys: &[bool], beta: &[f64]) -> f64 {
    design
        .iter()
        .zip(ys)
        .map(|(row, &y)| {
            let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
            if y {
                eta - softplus(eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite matrix")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Inverts a square matrix by Gauss-Jordan elimination with partial
/// pivoting.
fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut work: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut w = row.clone();
            w.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            w
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            work[i][col]
                .abs()
                .partial_cmp(&work[j][col].abs())
                .expect("finite matrix")
        })?;
        if work[pivot][col].abs() < 1e-300 {
            return None;
        }
        work.swap(col, pivot);
        let scale = work[col][col];
        for v in &mut work[col] {
            *v /= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[row][col];
            if factor == 0.0 {
                continue;
            }
            let (pivot_row, other_row) = if row < col {
                let (a, b) = work.split_at_mut(col);
                (&b[0], &mut a[row])
            } else {
                let (a, b) = work.split_at_mut(row);
                (&a[col], &mut b[0])
            };
            for k in 0..2 * n {
                other_row[k] -= factor * pivot_row[k];
            }
        }
    }
    Some(work.into_iter().map(|row| row[n..].to_vec()).collect())
}

fn check_design(xs: &[Vec<f64>], ys: &[bool]) -> Result<usize, AnalysisError> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if xs.len() != ys.len() {
        return Err(AnalysisError::BadDesign(format!(
            "{} rows but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let k = xs[0].len();
    if xs.iter().any(|row| row.len() != k) {
        return Err(AnalysisError::BadDesign("ragged design matrix".into()));
    }
    if !ys.iter().any(|&y| y) || !ys.iter().any(|&y| !y) {
        return Err(AnalysisError::BadDesign(
            "labels are all one class; need both".into(),
        ));
    }
    for j in 0..k {
        if xs.iter().all(|row| row[j] == xs[0][j]) {
            return Err(AnalysisError::BadDesign(format!(
                "column {j} is constant (collides with the intercept)"
            )));
        }
        for j2 in j + 1..k {
            if xs.iter().all(|row| row[j] == row[j2]) {
                return Err(AnalysisError::BadDesign(format!(
                    "columns {j} and {j2} are identical"
                )));
            }
        }
    }
    Ok(k)
}

/// Fits success labels on a design matrix (no intercept column; one is
/// added internally) by damped Newton ascent of the log-likelihood.
///
/// Errors on degenerate designs (single class, constant or duplicate
/// columns), on perfect separation (coefficient sup-norm escaping 1e3),
/// and on non-convergence.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[bool]) -> Result<RegressionFit, AnalysisError> {
    let k = check_design(xs, ys)?;
    let m = k + 1;
    let design: Vec<Vec<f64>> = xs
        .iter()
        .map(|row| {
            let mut d = Vec::with_capacity(m);
            d.push(1.0);
            d.extend_from_slice(row);
            d
        })
        .collect();

    let mut beta = vec![0.0; m];
    let mut ll = log_likelihood(&design, ys, &beta);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_NEWTON_ITERATIONS {
        iterations = iter;
        // Gradient g = X^T (y - p) and Hessian H = X^T W X with
        // W = diag(p (1 - p)), floored away from zero near separation.
        let mut gradient = vec![0.0; m];
        let mut hessian = vec![vec![0.0; m]; m];
        for (row, &y) in design.iter().zip(ys) {
            let eta: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            let resid = (y as u8 as f64) - p;
            let w = (p * (1.0 - p)).max(HESSIAN_WEIGHT_FLOOR);
            for a in 0..m {
                gradient[a] += row[a] * resid;
                for b in a..m {
                    hessian[a][b] += row[a] * w * row[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                hessian[a][b] = hessian[b][a];
            }
        }

        if gradient.iter().all(|g| g.abs() < GRADIENT_TOLERANCE) {
            converged = true;
            break;
        }

        let delta = solve(hessian, gradient).ok_or(AnalysisError::Singular)?;
        // Backtracking: halve the step until the log-likelihood rises. The
        // comparison allows a rounding-scale slack: near the optimum the true
        // improvement drops below f64 resolution at |ll|, and without slack
        // the full Newton step would be rejected as noise, stalling the
        // gradient around 1e-8 instead of collapsing it quadratically.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut step = 1.0;
        let mut candidate;
        let mut candidate_ll;
        loop {
            candidate = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + step * d)
                .collect::<Vec<f64>>();
            candidate_ll = log_likelihood(&design, ys, &candidate);
            if candidate_ll >= ll - slack || step < 1e-9 {
                break;
            }
            step /= 2.0;
        }
        beta = candidate;
        ll = candidate_ll;

        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(AnalysisError::Separation);
        }
    }
    if !converged {
        return Err(AnalysisError::NoConvergence {
            iterations: MAX_NEWTON_ITERATIONS,
        });
    }

    // Observed information at the optimum gives the Wald standard errors.
    // While accumulating it, track the least saturated fitted probability:
    // when every p sits hard against 0 or 1 the classes are perfectly
    // separated, the information carries no usable curvature, and standard
    // errors would be meaningless. Wide-margin separations converge at
    // moderate coefficients, so the growth bound alone does not catch them.
    let mut information = vec![vec![0.0; m]; m];
    let mut max_weight = 0.0f64;
    for row in &design {
        let eta: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
        let p = 1.0 / (1.0 + (-eta).exp());
        let w = p * (1.0 - p);
        max_weight = max_weight.max(w);
        for a in 0..m {
            for b in a..m {
                information[a][b] += row[a] * w * row[b];
            }
        }
    }
    if max_weight < 1e-10 {
        return Err(AnalysisError::Separation);
    }
    for a in 0..m {
        for b in 0..a {
            information[a][b] = information[b][a];
        }
    }
    let covariance = invert(&information).ok_or(AnalysisError::Singular)?;
    let se: Vec<f64> = (0..m)
        .map(|j| {
            let v = covariance[j][j];
            if v > 0.0 {
                Ok(v.sqrt())
            } else {
                Err(AnalysisError::Singular)
            }
        })
        .collect::<Result<_, _>>()?;
    let wald = |b: f64, s: f64| clamp_p(2.0 * normal_sf((b / s).abs()));

    let y_mean = ys.iter().filter(|&&y| y).count() as f64 / ys.len() as f64;
    let null_ll =
        ys.len() as f64 * (y_mean * y_mean.ln() + (1.0 - y_mean) * (1.0 - y_mean).ln());
    let llr = (2.0 * (ll - null_ll)).max(0.0);

    Ok(RegressionFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        intercept_se: se[0],
        std_errors: se[1..].to_vec(),
        intercept_wald_p: wald(beta[0], se[0]),
        wald_p: beta[1..]
            .iter()
            .zip(&se[1..])
            .map(|(&b, &s)| wald(b, s))
            .collect(),
        log_likelihood: ll,
        null_log_likelihood: null_ll,
        llr_statistic: llr,
        llr_p: clamp_p(chi_square_sf(llr, k as f64)),
        converged,
        iterations,
    })
}

fn clamp_p(p: f64) -> f64 {
    p.max(1e-300).min(1.0)
}

/// Which edit attribute labels a positional histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Action,
    Intent,
}

pub const DEFAULT_POSITION_BINS: usize = 10;

/// Histogram of relative edit positions for one label: `bins` holds the
/// mass fractions and sums to 1 for any label that occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDistribution {
    pub label: String,
    pub bins: Vec<f64>,
    pub n_edits: usize,
}

/// Builds per-label positional histograms over `bins` equal-width bins of
/// [0, 1]. Add/Modify edits sit at `new_index / (new sentence count - 1)`,
/// Delete edits at the old-document equivalent; single-sentence documents
/// contribute position 0. Labels that never occur get no histogram.
pub fn position_histograms(
    docs: &[AnnotatedRevision],
    scheme: LabelScheme,
    bins: usize,
) -> Result<Vec<PositionDistribution>, AnalysisError> {
    if docs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    // Canonical label order first, unseen extras appended by appearance.
    let mut order: Vec<String> = match scheme {
        LabelScheme::Action => EditAction::ALL.iter().map(|a| a.name().to_string()).collect(),
        LabelScheme::Intent => LabelSet::edit_intents().names().to_vec(),
    };
    let mut counts: Vec<Vec<usize>> = vec![vec![0; bins]; order.len()];

    for doc in docs {
        for edit in &doc.edits {
            let action = edit.action.ok_or_else(|| AnalysisError::IncompleteEdit {
                edit_id: edit.edit_id.clone(),
                what: "action",
            })?;
            let label = match scheme {
                LabelScheme::Action => action.name().to_string(),
                LabelScheme::Intent => edit
                    .intent
                    .clone()
                    .ok_or_else(|| AnalysisError::IncompleteEdit {
                        edit_id: edit.edit_id.clone(),
                        what: "intent",
                    })?,
            };
            let (index, sentence_count) = match action {
                EditAction::Delete => (edit.old_index, doc.counts.old_sentences),
                EditAction::Add | EditAction::Modify => (edit.new_index, doc.counts.sentences),
            };
            let index = index.ok_or_else(|| AnalysisError::IncompleteEdit {
                edit_id: edit.edit_id.clone(),
                what: "sentence index",
            })?;
            let position = if sentence_count > 1 {
                index as f64 / (sentence_count - 1) as f64
            } else {
                0.0
            };
            let bin = ((position * bins as f64) as usize).min(bins - 1);
            let slot = match order.iter().position(|l| *l == label) {
                Some(s) => s,
                None => {
                    order.push(label);
                    counts.push(vec![0; bins]);
                    order.len() - 1
                }
            };
            counts[slot][bin] += 1;
        }
    }

    Ok(order
        .into_iter()
        .zip(counts)
        .filter_map(|(label, c)| {
            let n: usize = c.iter().sum();
            (n > 0).then(|| PositionDistribution {
                label,
                bins: c.iter().map(|&k| k as f64 / n as f64).collect(),
                n_edits: n,
            })
        })
        .collect())
}

/// Default add-epsilon smoothing for [`kl`].
pub const KL_EPSILON: f64 = 1e-9;

/// KL divergence in nats between two same-support distributions, after
/// adding `epsilon` to every bin and renormalizing both sides. Zero bins
/// contribute zero when `p` is zero there; an unsmoothed zero in `q`
/// opposite mass in `p` yields infinity.
pub fn kl(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::SupportMismatch {
            p: p.len(),
            q: q.len(),
        });
    }
    if p.is_empty() {
        return Err(AnalysisError::BadDistribution("empty support".into()));
    }
    let smooth = |xs: &[f64]| -> Result<Vec<f64>, AnalysisError> {
        if xs.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(AnalysisError::BadDistribution(
                "negative or non-finite mass".into(),
            ));
        }
        let smoothed: Vec<f64> = xs.iter().map(|&x| x + epsilon).collect();
        let total: f64 = smoothed.iter().sum();
        if total <= 0.0 {
            return Err(AnalysisError::BadDistribution("zero total mass".into()));
        }
        Ok(smoothed.into_iter().map(|x| x / total).collect())
    };
    let ps = smooth(p)?;
    let qs = smooth(q)?;
    Ok(ps
        .iter()
        .zip(&qs)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum())
}

/// Pairwise KL matrix between labeled histograms: `values[i][j]` is
/// KL(dists[i] || dists[j]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Always "nats"; recorded so downstream plots label the scale.
    pub unit: String,
}

pub fn kl_matrix(dists: &[PositionDistribution], epsilon: f64) -> Result<KlMatrix, AnalysisError> {
    let mut values = vec![vec![0.0; dists.len()]; dists.len()];
    for (i, a) in dists.iter().enumerate() {
        for (j, b) in dists.iter().enumerate() {
            values[i][j] = kl(&a.bins, &b.bins, epsilon)?;
        }
    }
    Ok(KlMatrix {
        labels: dists.iter().map(|d| d.label.clone()).collect(),
        values,
        unit: "nats".into(),
    })
}

/// Mean edits per document for one intent (or the total), in two groups,
/// with a Welch two-sided p-value for the difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTestRow {
    pub label: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

/// Per-intent and total mean-edit-count comparison between two document
/// groups (Welch two-sample t-tests, two-sided).
pub fn group_mean_tests(
    group_a: &[AnnotatedRevision],
    group_b: &[AnnotatedRevision],
) -> Result<Vec<GroupTestRow>, AnalysisError> {
    if group_a.len() < 2 {
        return Err(AnalysisError::GroupTooSmall {
            which: "a",
            len: group_a.len(),
        });
    }
    if group_b.len() < 2 {
        return Err(AnalysisError::GroupTooSmall {
            which: "b",
            len: group_b.len(),
        });
    }
    let intents = LabelSet::edit_intents();
    let count_for = |doc: &AnnotatedRevision, label: Option<&str>| -> f64 {
        doc.edits
            .iter()
            .filter(|e| match label {
                Some(l) => e.intent.as_deref() == Some(l),
                None => true,
            })
            .count() as f64
    };
    let mut rows = Vec::new();
    let mut labels: Vec<Option<String>> =
        intents.names().iter().map(|n| Some(n.clone())).collect();
    labels.push(None);
    for label in labels {
        let xs: Vec<f64> = group_a
            .iter()
            .map(|d| count_for(d, label.as_deref()))
            .collect();
        let ys: Vec<f64> = group_b
            .iter()
            .map(|d| count_for(d, label.as_deref()))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let test = welch_t_two_sided(&xs, &ys)?;
        rows.push(GroupTestRow {
            label: label.unwrap_or_else(|| "total".into()),
            mean_a: mean(&xs),
            mean_b: mean(&ys),
            p_value: test.p_value,
        });
    }
    Ok(rows)
}

/// How many joined documents fell in each success class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessCounts {
    pub successful: usize,
    pub unsuccessful: usize,
    /// Documents with no review scores, excluded from the regression.
    pub unlabeled: usize,
}

/// The full analytics bundle over an annotated corpus, deterministic in
/// its inputs and directly serializable as the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_documents: usize,
    pub n_edits: usize,
    pub success: SuccessCounts,
    pub focus_grid: FocusGrid,
    pub focus_regressors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionFit>,
    /// Why the regression is absent, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression_note: Option<String>,
    pub intent_positions: Vec<PositionDistribution>,
    pub action_positions: Vec<PositionDistribution>,
    pub kl_intent_positions: KlMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tests: Option<Vec<GroupTestRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tests_note: Option<String>,
}

/// Runs the whole analysis: success labels joined from the revision
/// documents by id, focus regression of success on the eight regressors,
/// positional histograms and their KL matrix, and successful-versus-
/// unsuccessful group tests. Steps whose preconditions fail (regression
/// design, group sizes) are skipped with a note instead of failing the
/// report.
pub fn analyze(
    annotated: &[AnnotatedRevision],
    revisions: &[DocumentRevision],
    bins: usize,
) -> Result<AnalysisReport, AnalysisError> {
    if annotated.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let scores: std::collections::HashMap<&str, bool> = revisions
        .iter()
        .filter_map(|doc| {
            label_success_doc(doc)
                .ok()
                .map(|s| (doc.doc_id.as_str(), s))
        })
        .collect();

    let mut success = SuccessCounts {
        successful: 0,
        unsuccessful: 0,
        unlabeled: 0,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut successful_docs = Vec::new();
    let mut unsuccessful_docs = Vec::new();
    for doc in annotated {
        match scores.get(doc.doc_id.as_str()) {
            Some(&label) => {
                if label {
                    success.successful += 1;
                    successful_docs.push(doc.clone());
                } else {
                    success.unsuccessful += 1;
                    unsuccessful_docs.push(doc.clone());
                }
                if !doc.edits.is_empty() {
                    xs.push(focus_vector(doc)?.proportions.to_vec());
                    ys.push(label);
                }
            }
            None => success.unlabeled += 1,
        }
    }

    let (regression, regression_note) = match fit_logistic(&xs, &ys) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (group_tests, group_tests_note) =
        match group_mean_tests(&successful_docs, &unsuccessful_docs) {
            Ok(rows) => (Some(rows), None),
            Err(e) => (None, Some(e.to_string())),
        };

    let intent_positions = position_histograms(annotated, LabelScheme::Intent, bins)?;
    let action_positions = position_histograms(annotated, LabelScheme::Action, bins)?;
    let kl_intent_positions = kl_matrix(&intent_positions, KL_EPSILON)?;

    Ok(AnalysisReport {
        n_documents: annotated.len(),
        n_edits: annotated.iter().map(|d| d.edits.len()).sum(),
        success,
        focus_grid: focus_grid(annotated)?,
        focus_regressors: focus_regressor_names(),
        regression,
        regression_note,
        intent_positions,
        action_positions,
        kl_intent_positions,
        group_tests,
        group_tests_note,
    })
}
