//! Forward-filter backward-sampling of label sequences, plus the marginal
//! likelihood used when feature configurations are scored with labels
//! summed out. Filtering runs in the linear domain with a per-step
//! max-shift and renormalization, so it neither underflows nor overflows
//! and never produces NaN.

use super::{prepare_one, BnpError, StateParams};
use crate::model::{GaussianEmission, TimeSeries};
use crate::rng;
use crate::simgen::sample_categorical;
use nalgebra::DMatrix;
use rand::Rng;

/// Marginal log likelihood of the chain: per-point per-state emission log
/// densities in `log_obs` (a row of zeros means "no emission term at this
/// point"), row-stochastic `trans`, uniform initial distribution over the
/// columns. Returns negative infinity, never NaN, if the mass vanishes.
pub(crate) fn forward_ll(log_obs: &DMatrix<f64>, trans: &DMatrix<f64>) -> f64 {
    let (t_len, l) = log_obs.shape();
    let mut alpha = vec![1.0 / l as f64; l];
    let mut next = vec![0.0f64; l];
    let mut ll = 0.0;
    for t in 0..t_len {
        let shift = (0..l).map(|k| log_obs[(t, k)]).fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return f64::NEG_INFINITY;
        }
        for k in 0..l {
            let pred = if t == 0 {
                alpha[k]
            } else {
                (0..l).map(|j| alpha[j] * trans[(j, k)]).sum()
            };
            next[k] = pred * (log_obs[(t, k)] - shift).exp();
        }
        let c: f64 = next.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return f64::NEG_INFINITY;
        }
        ll += c.ln() + shift;
        for k in 0..l {
            alpha[k] = next[k] / c;
        }
    }
    ll
}

/// One exact joint draw of the label sequence given parameters: forward
/// filtering to the filtered marginals, then backward sampling. Labels are
/// column indices of `log_obs`.
pub(crate) fn ffbs_sample<R: Rng + ?Sized>(
    log_obs: &DMatrix<f64>,
    trans: &DMatrix<f64>,
    rng: &mut R,
) -> Vec<usize> {
    let (t_len, l) = log_obs.shape();
    let mut filtered = DMatrix::zeros(t_len, l);
    let mut alpha = vec![1.0 / l as f64; l];
    for t in 0..t_len {
        let shift = (0..l).map(|k| log_obs[(t, k)]).fold(f64::NEG_INFINITY, f64::max);
        let mut next = vec![0.0f64; l];
        for k in 0..l {
            let pred: f64 = if t == 0 {
                alpha[k]
            } else {
                (0..l).map(|j| alpha[j] * trans[(j, k)]).sum()
            };
            next[k] = pred * (log_obs[(t, k)] - shift).exp();
        }
        let c: f64 = next.iter().sum();
        debug_assert!(c > 0.0, "filter mass vanished at t = {t}");
        for k in 0..l {
            alpha[k] = next[k] / c;
            filtered[(t, k)] = alpha[k];
        }
    }

    let mut labels = vec![0usize; t_len];
    let last: Vec<f64> = (0..l).map(|k| filtered[(t_len - 1, k)]).collect();
    labels[t_len - 1] = sample_categorical(rng, &last);
    for t in (0..t_len - 1).rev() {
        let weights: Vec<f64> = (0..l)
            .map(|k| filtered[(t, k)] * trans[(k, labels[t + 1])])
            .collect();
        labels[t] = sample_categorical(rng, &weights);
    }
    labels
}

/// Draw one label sequence for a series under the given active-state
/// emissions and transition matrix (uniform initial distribution).
/// Labels index into `active_emissions`. Deterministic given the seed.
pub fn ffbs_labels(
    series: &TimeSeries,
    active_emissions: &[GaussianEmission],
    trans_row_matrix: &DMatrix<f64>,
    seed: u64,
) -> Result<Vec<usize>, BnpError> {
    if active_emissions.is_empty() {
        return Err(BnpError::MalformedSample("no active emissions".into()));
    }
    let l = active_emissions.len();
    if trans_row_matrix.nrows() != l || trans_row_matrix.ncols() != l {
        return Err(BnpError::MalformedSample(format!(
            "transition matrix is {}x{} for {l} states",
            trans_row_matrix.nrows(),
            trans_row_matrix.ncols()
        )));
    }
    for j in 0..l {
        let row = trans_row_matrix.row(j);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
            return Err(BnpError::MalformedSample(format!(
                "transition row {j} is not a distribution"
            )));
        }
    }
    let n = series.dim();
    let ar_order = active_emissions[0].ar_order();
    let states: Vec<StateParams> = active_emissions
        .iter()
        .map(|e| StateParams::from_emission(e, ar_order))
        .collect::<Result<_, _>>()?;
    for e in active_emissions {
        if e.dim() != n {
            return Err(BnpError::DimensionMismatch {
                id: series.id.clone(),
                got: n,
                expected: e.dim(),
            });
        }
    }
    let seq = prepare_one(series, n, ar_order)?;
    let log_obs = DMatrix::from_fn(seq.len(), l, |t, k| {
        if t < ar_order {
            0.0
        } else {
            states[k].log_density(&seq.y[t], &seq.x[t])
        }
    });
    let mut rng = rng::master(seed);
    Ok(ffbs_sample(&log_obs, trans_row_matrix, &mut rng))
}
