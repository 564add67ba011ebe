//! Optimal label matching between an estimated and a reference state
//! sequence.
//!
//! State labels from the sampler are arbitrary, so accuracy is judged after
//! the best one-to-one relabeling: a maximum-agreement assignment between
//! estimated and reference labels, found exactly by dynamic programming
//! over subsets of the reference labels. Estimated labels left unmatched
//! (when the sampler found more states than the truth) count every
//! occurrence as an error.

use super::BnpError;

/// The best one-to-one relabeling and the disagreement it leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatching {
    /// For each estimated label (indexed 0..=max estimated label), the
    /// reference label it maps to, or None if unmatched.
    pub mapping: Vec<Option<usize>>,
    /// Time points where the mapped estimated label equals the reference.
    pub correct: usize,
    pub total: usize,
    /// 1 - correct/total.
    pub hamming: f64,
}

/// Exact maximum-agreement matching; reference sequences may use at most 16
/// distinct labels (the assignment search is exponential in that count).
pub fn match_states(estimated: &[usize], reference: &[usize]) -> Result<StateMatching, BnpError> {
    if estimated.len() != reference.len() {
        return Err(BnpError::LabelLengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    if estimated.is_empty() {
        return Err(BnpError::EmptyLabels);
    }

    let mut est_labels: Vec<usize> = estimated.to_vec();
    est_labels.sort_unstable();
    est_labels.dedup();
    let mut ref_labels: Vec<usize> = reference.to_vec();
    ref_labels.sort_unstable();
    ref_labels.dedup();
    let ne = est_labels.len();
    let nr = ref_labels.len();
    if nr > 16 {
        return Err(BnpError::TooManyLabels(nr));
    }

    let est_index = |label: usize| est_labels.binary_search(&label).expect("label present");
    let ref_index = |label: usize| ref_labels.binary_search(&label).expect("label present");

    let mut confusion = vec![vec![0usize; nr]; ne];
    for (&e, &r) in estimated.iter().zip(reference) {
        confusion[est_index(e)][ref_index(r)] += 1;
    }

    // layers[i][mask]: best agreement over the first i estimated labels
    // with `mask` the set of reference labels already taken. Keeping every
    // layer makes exact backtracking straightforward; sizes here are tiny.
    let full = 1usize << nr;
    let mut layers = Vec::with_capacity(ne + 1);
    layers.push(vec![0usize; full]);
    for row in &confusion {
        let prev = layers.last().expect("layer pushed above");
        let mut next = prev.clone(); // leave this estimated label unmatched
        for mask in 0..full {
            for (r, &agree) in row.iter().enumerate() {
                let bit = 1 << r;
                if mask & bit != 0 {
                    continue;
                }
                let candidate = prev[mask] + agree;
                if candidate > next[mask | bit] {
                    next[mask | bit] = candidate;
                }
            }
        }
        layers.push(next);
    }

    let (final_mask, &correct) = layers[ne]
        .iter()
        .enumerate()
        .max_by_key(|(_, &v)| v)
        .expect("dp table nonempty");

    let mut mapping = vec![None; est_labels.iter().max().unwrap() + 1];
    let mut mask = final_mask;
    let mut value = correct;
    for i in (0..ne).rev() {
        if layers[i][mask] == value {
            continue; // estimated label i unmatched on this optimal path
        }
        let r = (0..nr)
            .find(|&r| {
                let bit = 1 << r;
                mask & bit != 0 && layers[i][mask ^ bit] + confusion[i][r] == value
            })
            .expect("dp value must decompose");
        mapping[est_labels[i]] = Some(ref_labels[r]);
        value -= confusion[i][r];
        mask ^= 1 << r;
    }
    debug_assert_eq!(value, layers[0][mask]);

    let total = estimated.len();
    Ok(StateMatching {
        mapping,
        correct,
        total,
        hamming: 1.0 - correct as f64 / total as f64,
    })
}

/// Convenience wrapper returning only the Hamming error after optimal
/// matching.
pub fn hamming_error(estimated: &[usize], reference: &[usize]) -> Result<f64, BnpError> {
    Ok(match_states(estimated, reference)?.hamming)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_match_perfectly() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        let m = match_states(&labels, &labels).unwrap();
        assert_eq!(m.hamming, 0.0);
        assert_eq!(m.mapping, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn permuted_labels_still_match_perfectly() {
        let reference = vec![0, 0, 1, 1, 2, 2, 0];
        let estimated: Vec<usize> = reference.iter().map(|&r| (r + 1) % 3).collect();
        let m = match_states(&estimated, &reference).unwrap();
        assert_eq!(m.hamming, 0.0);
        assert_eq!(m.mapping, vec![Some(2), Some(0), Some(1)]);
    }

    #[test]
    fn hand_checked_partial_agreement() {
        // Confusion: estimated 0 hits reference 1 twice; estimated 1 hits
        // reference 0 once and reference 2 once. The best assignment fixes
        // 0 -> 1 and matches 1 to either remaining label, leaving 3 of 4
        // points correct.
        let estimated = vec![0, 0, 1, 1];
        let reference = vec![1, 1, 0, 2];
        let m = match_states(&estimated, &reference).unwrap();
        assert_eq!(m.correct, 3);
        assert!((m.hamming - 0.25).abs() < 1e-15);
        assert_eq!(m.mapping[0], Some(1));
    }

    #[test]
    fn surplus_estimated_states_count_as_errors() {
        // Estimated splits reference state 0 into labels 0 and 3.
        let reference = vec![0, 0, 0, 0, 1, 1];
        let estimated = vec![0, 0, 3, 3, 1, 1];
        let m = match_states(&estimated, &reference).unwrap();
        assert_eq!(m.correct, 4);
        assert!((m.hamming - 2.0 / 6.0).abs() < 1e-15);
        // Exactly one of labels {0, 3} maps to reference 0.
        let mapped: Vec<_> = [0usize, 3]
            .iter()
            .filter(|&&e| m.mapping[e] == Some(0))
            .collect();
        assert_eq!(mapped.len(), 1);
    }

    #[test]
    fn missing_states_leave_reference_labels_unclaimed() {
        let reference = vec![0, 1, 2, 0, 1, 2];
        let estimated = vec![0, 1, 0, 0, 1, 1];
        let m = match_states(&estimated, &reference).unwrap();
        assert_eq!(m.correct, 4);
        assert_eq!(m.mapping.len(), 2);
    }

    #[test]
    fn sparse_estimated_labels_are_handled() {
        // Labels 7 and 100 only; mapping is indexed up to the max label.
        let estimated = vec![7, 7, 100, 100];
        let reference = vec![0, 0, 1, 1];
        let m = match_states(&estimated, &reference).unwrap();
        assert_eq!(m.hamming, 0.0);
        assert_eq!(m.mapping[7], Some(0));
        assert_eq!(m.mapping[100], Some(1));
    }

    #[test]
    fn relabeling_is_an_invariance() {
        let reference = vec![0, 1, 1, 2, 0, 2, 1, 0];
        let estimated = vec![1, 2, 2, 0, 1, 0, 0, 1];
        let base = match_states(&estimated, &reference).unwrap().hamming;
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for p in perms {
            let relabeled: Vec<usize> = estimated.iter().map(|&e| p[e]).collect();
            let h = match_states(&relabeled, &reference).unwrap().hamming;
            assert!((h - base).abs() < 1e-15);
        }
    }

    #[test]
    fn matching_agrees_with_brute_force_on_random_cases() {
        // Exhaustive assignment search over all injective mappings for
        // small label sets, as an independent oracle.
        fn brute(estimated: &[usize], reference: &[usize]) -> usize {
            let mut ref_labels: Vec<usize> = reference.to_vec();
            ref_labels.sort_unstable();
            ref_labels.dedup();
            let mut est_labels: Vec<usize> = estimated.to_vec();
            est_labels.sort_unstable();
            est_labels.dedup();
            fn rec(
                est_labels: &[usize],
                ref_labels: &[usize],
                i: usize,
                used: &mut Vec<bool>,
                assign: &mut Vec<Option<usize>>,
                estimated: &[usize],
                reference: &[usize],
            ) -> usize {
                if i == est_labels.len() {
                    return estimated
                        .iter()
                        .zip(reference)
                        .filter(|(&e, &r)| {
                            let idx = est_labels.binary_search(&e).unwrap();
                            assign[idx] == Some(r)
                        })
                        .count();
                }
                let mut best = rec(
                    est_labels, ref_labels, i + 1, used, assign, estimated, reference,
                );
                for (j, &r) in ref_labels.iter().enumerate() {
                    if !used[j] {
                        used[j] = true;
                        assign[i] = Some(r);
                        best = best.max(rec(
                            est_labels, ref_labels, i + 1, used, assign, estimated, reference,
                        ));
                        assign[i] = None;
                        used[j] = false;
                    }
                }
                best
            }
            let mut used = vec![false; ref_labels.len()];
            let mut assign = vec![None; est_labels.len()];
            rec(
                &est_labels,
                &ref_labels,
                0,
                &mut used,
                &mut assign,
                estimated,
                reference,
            )
        }

        // Deterministic pseudo-random label streams.
        for case in 0..20usize {
            let len = 30 + case;
            let estimated: Vec<usize> = (0..len).map(|t| (t * 7 + case * 3 + t / 5) % 4).collect();
            let reference: Vec<usize> = (0..len).map(|t| (t * 5 + case) % 3).collect();
            let m = match_states(&estimated, &reference).unwrap();
            assert_eq!(m.correct, brute(&estimated, &reference), "case {case}");
        }
    }

    #[test]
    fn shape_errors_are_rejected() {
        assert!(matches!(
            match_states(&[0, 1], &[0]),
            Err(BnpError::LabelLengthMismatch { .. })
        ));
        assert!(matches!(match_states(&[], &[]), Err(BnpError::EmptyLabels)));
    }
}
