//! Seeded dataset sampling: positive/negative balancing for binary pair
//! tasks and label-stratified subsampling with largest-remainder quotas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, EditSample, LabelSet};

/// Keeps every positive sample and a uniform random subset of negatives of
/// equal count. The positive class is the first label of the binary set
/// (see [`LabelSet::positive`]); output preserves the input order.
pub fn balance_binary_pairs(
    samples: &[EditSample],
    labels: &LabelSet,
    seed: u64,
) -> Result<Vec<EditSample>, CorpusError> {
    let positive = labels.positive()?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (idx, sample) in samples.iter().enumerate() {
        let Some(intent) = &sample.intent else {
            return Err(CorpusError::UnlabeledSample {
                edit_id: sample.edit_id.clone(),
            });
        };
        if intent == positive {
            positives.push(idx);
        } else {
            negatives.push(idx);
        }
    }
    if positives.len() > negatives.len() {
        return Err(CorpusError::MorePositivesThanNegatives {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, negatives.len(), positives.len());
    let mut keep = vec![false; samples.len()];
    for idx in positives {
        keep[idx] = true;
    }
    for pick in chosen {
        keep[negatives[pick]] = true;
    }
    Ok(samples
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.clone())
        .collect())
}

/// Largest-remainder apportionment of `n` slots over class counts.
///
/// Quotas sum to `n`, never exceed the class count, and differ from the
/// exact proportional share by less than one. Leftover slots go to classes
/// by descending fractional remainder, breaking ties by larger class and
/// then lower class index.
fn largest_remainder_quotas(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    assert!(n <= total);
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = counts.iter().map(|c| n * c / total).collect();
    let assigned: usize = quotas.iter().sum();
    // Remainder of n*c/total as an integer in [0, total).
    let mut order: Vec<(usize, usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| (n * c % total, *c, i))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    for (_, _, i) in order.into_iter().take(n - assigned) {
        quotas[i] += 1;
    }
    quotas
}

fn stratify_indices(
    samples: &[EditSample],
    n: usize,
    seed: u64,
) -> Result<Vec<bool>, CorpusError> {
    if n > samples.len() {
        return Err(CorpusError::NotEnoughSamples {
            requested: n,
            available: samples.len(),
        });
    }
    // Classes keyed by order of first appearance, so quota tie-breaking is
    // deterministic for a given input sequence.
    let mut class_names: Vec<&str> = Vec::new();
    let mut class_members: Vec<Vec<usize>> = Vec::new();
    for (idx, sample) in samples.iter().enumerate() {
        let Some(intent) = &sample.intent else {
            return Err(CorpusError::UnlabeledSample {
                edit_id: sample.edit_id.clone(),
            });
        };
        match class_names.iter().position(|name| name == intent) {
            Some(pos) => class_members[pos].push(idx),
            None => {
                class_names.push(intent);
                class_members.push(vec![idx]);
            }
        }
    }
    let counts: Vec<usize> = class_members.iter().map(Vec::len).collect();
    let quotas = largest_remainder_quotas(&counts, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; samples.len()];
    for (members, quota) in class_members.iter().zip(&quotas) {
        for pick in rand::seq::index::sample(&mut rng, members.len(), *quota) {
            keep[members[pick]] = true;
        }
    }
    Ok(keep)
}

/// Draws `n` samples whose per-label proportions match the source within
/// one sample per label (largest-remainder quotas, uniform within label).
/// Sampling is without replacement and deterministic per seed; output
/// preserves input order.
pub fn stratified_subsample(
    samples: &[EditSample],
    n: usize,
    seed: u64,
) -> Result<Vec<EditSample>, CorpusError> {
    let keep = stratify_indices(samples, n, seed)?;
    Ok(samples
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.clone())
        .collect())
}

/// Like [`stratified_subsample`] but also returns the complement, so
/// successive carves (validation, then test from the remainder) are
/// disjoint by construction.
pub fn stratified_take(
    samples: &[EditSample],
    n: usize,
    seed: u64,
) -> Result<(Vec<EditSample>, Vec<EditSample>), CorpusError> {
    let keep = stratify_indices(samples, n, seed)?;
    let mut taken = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(samples.len() - n);
    for (sample, k) in samples.iter().zip(&keep) {
        if *k {
            taken.push(sample.clone());
        } else {
            rest.push(sample.clone());
        }
    }
    Ok((taken, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn labeled(n: usize, label: &str, prefix: &str) -> Vec<EditSample> {
        (0..n)
            .map(|i| {
                EditSample::pair("doc", format!("{prefix}{i}"), "old", "new").with_intent(label)
            })
            .collect()
    }

    fn label_counts(samples: &[EditSample]) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in samples {
            *counts.entry(s.intent.clone().unwrap()).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn balancing_keeps_all_positives_and_matches_counts() {
        let labels = LabelSet::new(["duplicate", "different"]).unwrap();
        let mut samples = labeled(10, "duplicate", "p");
        samples.extend(labeled(40, "different", "n"));
        let balanced = balance_binary_pairs(&samples, &labels, 7).unwrap();
        let counts = label_counts(&balanced);
        assert_eq!(counts["duplicate"], 10);
        assert_eq!(counts["different"], 10);
        // Every positive survives, in order.
        let pos_ids: Vec<&str> = balanced
            .iter()
            .filter(|s| s.intent.as_deref() == Some("duplicate"))
            .map(|s| s.edit_id.as_str())
            .collect();
        assert_eq!(
            pos_ids,
            (0..10).map(|i| format!("p{i}")).collect::<Vec<_>>(),
            "positive multiset and order preserved"
        );
        // Deterministic per seed.
        let again = balance_binary_pairs(&samples, &labels, 7).unwrap();
        assert_eq!(balanced, again);
        let other_seed = balance_binary_pairs(&samples, &labels, 8).unwrap();
        assert_eq!(label_counts(&other_seed)["different"], 10);
    }

    #[test]
    fn balancing_zero_positives_yields_empty() {
        let labels = LabelSet::new(["duplicate", "different"]).unwrap();
        let samples = labeled(5, "different", "n");
        let balanced = balance_binary_pairs(&samples, &labels, 1).unwrap();
        assert!(balanced.is_empty());
    }

    #[test]
    fn balancing_rejects_positive_majority_and_non_binary() {
        let labels = LabelSet::new(["duplicate", "different"]).unwrap();
        let mut samples = labeled(6, "duplicate", "p");
        samples.extend(labeled(2, "different", "n"));
        assert!(matches!(
            balance_binary_pairs(&samples, &labels, 0),
            Err(CorpusError::MorePositivesThanNegatives { .. })
        ));
        let five = LabelSet::edit_intents();
        assert!(matches!(
            balance_binary_pairs(&samples, &five, 0),
            Err(CorpusError::NotBinary(5))
        ));
    }

    // Independent apportionment oracle: assign slots one at a time to the
    // class whose current allocation is furthest below its exact share.
    fn apportion_oracle(counts: &[usize], n: usize) -> Vec<usize> {
        let total: usize = counts.iter().sum();
        let mut alloc = vec![0usize; counts.len()];
        for _ in 0..n {
            let mut best = None;
            let mut best_key = (f64::NEG_INFINITY, 0usize, 0usize);
            for (i, &c) in counts.iter().enumerate() {
                if alloc[i] >= c {
                    continue;
                }
                let deficit = n as f64 * c as f64 / total as f64 - alloc[i] as f64;
                let key = (deficit, c, counts.len() - i);
                if best.is_none() || key > best_key {
                    best = Some(i);
                    best_key = key;
                }
            }
            alloc[best.unwrap()] += 1;
        }
        alloc
    }

    #[test]
    fn three_class_quota_example() {
        // 60/30/10 split, n = 20: exact shares 12/6/2 with no remainders.
        assert_eq!(largest_remainder_quotas(&[60, 30, 10], 20), vec![12, 6, 2]);
        assert_eq!(apportion_oracle(&[60, 30, 10], 20), vec![12, 6, 2]);
    }

    #[test]
    fn quotas_match_oracle_and_stay_within_one_of_share() {
        let cases: &[(&[usize], usize)] = &[
            (&[7, 5, 3], 10),
            (&[1, 1, 1], 2),
            (&[100, 1], 3),
            (&[9, 9, 9, 9], 7),
            (&[13, 29, 58], 37),
        ];
        for (counts, n) in cases {
            let got = largest_remainder_quotas(counts, *n);
            assert_eq!(got.iter().sum::<usize>(), *n, "counts={counts:?}");
            let total: usize = counts.iter().sum();
            for (q, c) in got.iter().zip(*counts) {
                let share = *n as f64 * *c as f64 / total as f64;
                assert!(
                    (*q as f64 - share).abs() < 1.0,
                    "quota {q} vs share {share} for counts={counts:?} n={n}"
                );
                assert!(q <= c);
            }
            assert_eq!(got, apportion_oracle(counts, *n), "counts={counts:?} n={n}");
        }
    }

    #[test]
    fn stratified_subsample_respects_quotas_and_seed() {
        let mut samples = labeled(60, "Grammar", "g");
        samples.extend(labeled(30, "Clarity", "c"));
        samples.extend(labeled(10, "Claim", "m"));
        let got = stratified_subsample(&samples, 20, 3).unwrap();
        let counts = label_counts(&got);
        assert_eq!(counts["Grammar"], 12);
        assert_eq!(counts["Clarity"], 6);
        assert_eq!(counts["Claim"], 2);
        assert_eq!(got, stratified_subsample(&samples, 20, 3).unwrap());
        assert!(matches!(
            stratified_subsample(&samples, 200, 3),
            Err(CorpusError::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn stratified_take_partitions_disjointly() {
        let mut samples = labeled(50, "Grammar", "g");
        samples.extend(labeled(25, "Other", "o"));
        let (val, rest) = stratified_take(&samples, 15, 11).unwrap();
        let (test, train) = stratified_take(&rest, 30, 12).unwrap();
        assert_eq!(val.len(), 15);
        assert_eq!(test.len(), 30);
        assert_eq!(train.len(), 30);
        let mut all_ids: Vec<&str> = val
            .iter()
            .chain(&test)
            .chain(&train)
            .map(|s| s.edit_id.as_str())
            .collect();
        all_ids.sort_unstable();
        all_ids.dedup();
        assert_eq!(all_ids.len(), 75, "no edit id appears twice across carves");
    }
}
