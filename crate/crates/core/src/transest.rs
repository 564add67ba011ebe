//! Transition estimation by sample means, with Chernoff-bound sample-size
//! guarantees.
//!
//! With w(s,a) observed transitions out of a state-action pair, each
//! estimated row entry is within alpha of the truth with probability at
//! least 1 - 2 exp(-alpha^2 w / 2). Inverting at confidence delta gives the
//! required sample count per pair,
//! w >= ceil(-(2/alpha^2) ln((1-delta)/2)).
//! The bound is per-entry; no union bound over entries or pairs is applied,
//! so callers wanting simultaneous guarantees must tighten delta themselves.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransestError {
    #[error("sequence {seq}: {got} actions for {labels} labels, expected one fewer")]
    LengthMismatch {
        seq: usize,
        labels: usize,
        got: usize,
    },
    #[error("sequence {seq}, t = {t}: state label {label} out of range (num_states = {num_states})")]
    BadState {
        seq: usize,
        t: usize,
        label: usize,
        num_states: usize,
    },
    #[error("sequence {seq}, t = {t}: action {action} out of range (num_actions = {num_actions})")]
    BadAction {
        seq: usize,
        t: usize,
        action: usize,
        num_actions: usize,
    },
    #[error("{got} action sequences for {want} label sequences")]
    SequenceCountMismatch { got: usize, want: usize },
    #[error("alpha = {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("delta = {0} outside (0, 1)")]
    BadDelta(f64),
}

/// Observed transition counts: `counts[a][s][s2]` is the number of s -> s2
/// transitions under action a, and `totals[a][s]` their sum over s2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionCounts {
    num_states: usize,
    num_actions: usize,
    counts: Vec<Vec<Vec<u64>>>,
    totals: Vec<Vec<u64>>,
}

impl TransitionCounts {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            counts: vec![vec![vec![0; num_states]; num_states]; num_actions],
            totals: vec![vec![0; num_states]; num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// w(s2 | s, a)
    pub fn count(&self, action: usize, from: usize, to: usize) -> u64 {
        self.counts[action][from][to]
    }

    /// w(s, a)
    pub fn total(&self, action: usize, from: usize) -> u64 {
        self.totals[action][from]
    }

    fn record(&mut self, action: usize, from: usize, to: usize) {
        self.counts[action][from][to] += 1;
        self.totals[action][from] += 1;
    }

    /// Elementwise sum with another count tensor of the same shape, for
    /// merging counts accumulated over shards of the data.
    pub fn merge(&mut self, other: &TransitionCounts) {
        assert_eq!(self.num_states, other.num_states);
        assert_eq!(self.num_actions, other.num_actions);
        for a in 0..self.num_actions {
            for s in 0..self.num_states {
                for s2 in 0..self.num_states {
                    self.counts[a][s][s2] += other.counts[a][s][s2];
                }
                self.totals[a][s] += other.totals[a][s];
            }
        }
    }

    /// Check the redundant totals agree with the counts.
    pub fn is_consistent(&self) -> bool {
        self.counts.iter().zip(&self.totals).all(|(mat, tot)| {
            mat.iter()
                .zip(tot)
                .all(|(row, &t)| row.iter().sum::<u64>() == t)
        })
    }
}

/// Count transitions from parallel label/action sequences: for each t, the
/// move labels[t] -> labels[t+1] under actions[t] is recorded.
pub fn count_transitions(
    labels: &[Vec<usize>],
    actions: &[Vec<usize>],
    num_states: usize,
    num_actions: usize,
) -> Result<TransitionCounts, TransestError> {
    if labels.len() != actions.len() {
        return Err(TransestError::SequenceCountMismatch {
            got: actions.len(),
            want: labels.len(),
        });
    }
    let mut counts = TransitionCounts::zeros(num_states, num_actions);
    for (seq, (ls, acts)) in labels.iter().zip(actions).enumerate() {
        if ls.len() != acts.len() + 1 {
            return Err(TransestError::LengthMismatch {
                seq,
                labels: ls.len(),
                got: acts.len(),
            });
        }
        for (t, &label) in ls.iter().enumerate() {
            if label >= num_states {
                return Err(TransestError::BadState {
                    seq,
                    t,
                    label,
                    num_states,
                });
            }
        }
        for (t, &action) in acts.iter().enumerate() {
            if action >= num_actions {
                return Err(TransestError::BadAction {
                    seq,
                    t,
                    action,
                    num_actions,
                });
            }
            counts.record(action, ls[t], ls[t + 1]);
        }
    }
    debug_assert!(counts.is_consistent());
    Ok(counts)
}

/// Which state-action pairs have enough data, and which have none at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    /// w(s, a) indexed [action][state].
    pub totals: Vec<Vec<u64>>,
    /// Pairs (state, action) with zero observations, whose estimated rows
    /// were defaulted to uniform.
    pub uniform_rows: Vec<(usize, usize)>,
    /// Smallest w(s, a) over all pairs.
    pub min_total: u64,
}

/// Sample-mean transition estimates: T(s2|s,a) = w(s2|s,a) / w(s,a).
/// Rows with no observations default to uniform and are flagged in the
/// coverage report rather than treated as fatal, since planners need a
/// complete model.
pub fn estimate_transitions(counts: &TransitionCounts) -> (Vec<Vec<Vec<f64>>>, CoverageReport) {
    let n = counts.num_states();
    let na = counts.num_actions();
    let mut tensor = vec![vec![vec![0.0; n]; n]; na];
    let mut uniform_rows = Vec::new();
    let mut min_total = u64::MAX;
    for a in 0..na {
        for s in 0..n {
            let total = counts.total(a, s);
            min_total = min_total.min(total);
            if total == 0 {
                tensor[a][s] = vec![1.0 / n as f64; n];
                uniform_rows.push((s, a));
            } else {
                for s2 in 0..n {
                    tensor[a][s][s2] = counts.count(a, s, s2) as f64 / total as f64;
                }
            }
        }
    }
    let report = CoverageReport {
        totals: counts.totals.clone(),
        uniform_rows,
        min_total: if min_total == u64::MAX { 0 } else { min_total },
    };
    (tensor, report)
}

/// Smallest sample count per state-action pair guaranteeing each transition
/// entry is within `alpha` of the truth with confidence at least `delta`:
/// ceil(-(2/alpha^2) ln((1-delta)/2)).
pub fn required_samples(alpha: f64, delta: f64) -> Result<u64, TransestError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TransestError::BadAlpha(alpha));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TransestError::BadDelta(delta));
    }
    let exact = -(2.0 / (alpha * alpha)) * ((1.0 - delta) / 2.0).ln();
    Ok(exact.ceil() as u64)
}

/// The exact (unrounded) value behind [`required_samples`], exposed so
/// callers can show why the ceiling lands where it does.
pub fn required_samples_exact(alpha: f64, delta: f64) -> Result<f64, TransestError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TransestError::BadAlpha(alpha));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TransestError::BadDelta(delta));
    }
    Ok(-(2.0 / (alpha * alpha)) * ((1.0 - delta) / 2.0).ln())
}

/// Confidence that one estimated entry is within `alpha` of the truth after
/// `w` samples: max(0, 1 - 2 exp(-alpha^2 w / 2)).
pub fn confidence_of(alpha: f64, w: u64) -> f64 {
    let raw = 1.0 - 2.0 * (-alpha * alpha * w as f64 / 2.0).exp();
    raw.max(0.0)
}
