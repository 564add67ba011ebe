//! Joint log density of a sampler state: the exchangeable buffet-process
//! prior over the feature matrix, sticky-Dirichlet priors over the active
//! transition rows, the conjugate prior density of each state's emission
//! parameters, the label chain (uniform initial state over the active
//! set), and the data likelihood. Used to rank retained draws and as the
//! surface for label-permutation invariance checks.

use super::{emissions, prepare_sequences, BnpError, BpHmmHyperparams, PosteriorSample, Sampler, StateParams};
use crate::model::TimeSeries;
use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;

fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Log pmf of the binary feature matrix under the exchangeable
/// buffet-process form: identical columns are interchangeable, so their
/// multiplicities divide the count of orderings.
pub(crate) fn ibp_log_pmf(flags: &[Vec<bool>], mass: f64) -> f64 {
    let k = flags.len();
    let l = flags[0].len();
    let harmonic: f64 = (1..=k).map(|j| 1.0 / j as f64).sum();
    let mut multiplicity: HashMap<Vec<bool>, usize> = HashMap::new();
    for col in 0..l {
        let pattern: Vec<bool> = flags.iter().map(|row| row[col]).collect();
        *multiplicity.entry(pattern).or_insert(0) += 1;
    }
    let mut total = l as f64 * mass.ln() - mass * harmonic;
    for count in multiplicity.values() {
        total -= ln_factorial(*count);
    }
    for col in 0..l {
        let m = flags.iter().filter(|row| row[col]).count();
        debug_assert!(m >= 1, "orphan column in feature matrix");
        total += ln_factorial(k - m) + ln_gamma(m as f64) - ln_factorial(k);
    }
    total
}

/// Log density of the Dirichlet distribution with parameters `alpha` at
/// `x`. Terms with a unit parameter contribute nothing, which also keeps a
/// zero coordinate from producing NaN there.
pub(crate) fn log_dirichlet(alpha: &[f64], x: &[f64]) -> f64 {
    let alpha_sum: f64 = alpha.iter().sum();
    let mut total = ln_gamma(alpha_sum);
    for (&a, &v) in alpha.iter().zip(x) {
        total -= ln_gamma(a);
        if a != 1.0 {
            total += (a - 1.0) * v.ln();
        }
    }
    total
}

/// Everything except the data term: feature prior, transition-row priors,
/// emission-parameter priors, and the label chain.
fn structural_log_joint(
    flags: &[Vec<bool>],
    trans: &[DMatrix<f64>],
    labels: &[Vec<usize>],
    states: &[StateParams],
    hyper: &BpHmmHyperparams,
) -> f64 {
    let mut total = ibp_log_pmf(flags, hyper.mass);
    for p in states {
        total += emissions::log_emission_prior(p, &hyper.emission_prior, hyper.ar_order);
    }
    for (i, row_flags) in flags.iter().enumerate() {
        let active: Vec<usize> = (0..row_flags.len()).filter(|&k| row_flags[k]).collect();
        let pos: HashMap<usize, usize> =
            active.iter().enumerate().map(|(p, &k)| (k, p)).collect();
        let m = &trans[i];
        for (pj, &j) in active.iter().enumerate() {
            let alpha: Vec<f64> = active
                .iter()
                .map(|&k| hyper.gamma + if k == j { hyper.kappa } else { 0.0 })
                .collect();
            let row: Vec<f64> = (0..active.len()).map(|c| m[(pj, c)]).collect();
            total += log_dirichlet(&alpha, &row);
        }
        total -= (active.len() as f64).ln();
        for w in labels[i].windows(2) {
            total += m[(pos[&w[0]], pos[&w[1]])].ln();
        }
    }
    total
}

/// Joint log density of the sampler's current variables; the data term
/// reads the cached per-state log densities.
pub(crate) fn state_log_joint(s: &Sampler) -> f64 {
    let trans: Vec<DMatrix<f64>> = (0..s.num_sequences())
        .map(|i| {
            let active = s.active(i);
            s.trans_matrix(i, &active)
        })
        .collect();
    let mut total = structural_log_joint(&s.f, &trans, &s.labels, &s.states, s.hyper);
    for (i, seq) in s.data.iter().enumerate() {
        for t in seq.ar_order..seq.len() {
            total += s.log_obs[i][(t, s.labels[i][t])];
        }
    }
    total
}

/// Joint log density of a posterior sample against a dataset, recomputed
/// from scratch. Matches the `log_joint` the sampler recorded for its own
/// draws, and is invariant under global relabelings of the states.
pub fn sample_log_joint(
    dataset: &[TimeSeries],
    hyper: &BpHmmHyperparams,
    sample: &PosteriorSample,
) -> Result<f64, BnpError> {
    hyper.validate()?;
    sample.validate()?;
    let data = prepare_sequences(dataset, hyper)?;
    if data.len() != sample.features.num_sequences() {
        return Err(BnpError::MalformedSample(format!(
            "sample covers {} sequences, dataset has {}",
            sample.features.num_sequences(),
            data.len()
        )));
    }
    for (i, (seq, labels)) in data.iter().zip(&sample.labels).enumerate() {
        if seq.len() != labels.len() {
            return Err(BnpError::MalformedSample(format!(
                "sequence {i}: {} labels for {} samples",
                labels.len(),
                seq.len()
            )));
        }
    }
    let states: Vec<StateParams> = sample
        .emissions
        .iter()
        .map(|e| StateParams::from_emission(e, hyper.ar_order))
        .collect::<Result<_, _>>()?;
    let mut total = structural_log_joint(
        sample.features.flags(),
        &sample.trans_rows,
        &sample.labels,
        &states,
        hyper,
    );
    for (i, seq) in data.iter().enumerate() {
        for t in seq.ar_order..seq.len() {
            total += states[sample.labels[i][t]].log_density(&seq.y[t], &seq.x[t]);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::super::{default_hyperparams, fit_bphmm, FeatureMatrix, FitConfig};
    use super::*;
    use crate::model::{GaussianEmission, TimeSeries};

    #[test]
    fn buffet_pmf_matches_hand_computed_cases() {
        // Two sequences sharing one state: mass * exp(-1.5 mass) * 1/2.
        let mass = 1.3f64;
        let shared = vec![vec![true], vec![true]];
        let expect = mass.ln() - 1.5 * mass + (0.5f64).ln();
        assert!((ibp_log_pmf(&shared, mass) - expect).abs() < 1e-12);

        // Two sequences with one unique state each: distinct columns, each
        // with a single user.
        let unique = vec![vec![true, false], vec![false, true]];
        let expect = 2.0 * mass.ln() - 1.5 * mass + 2.0 * (0.5f64).ln();
        assert!((ibp_log_pmf(&unique, mass) - expect).abs() < 1e-12);

        // Two identical shared columns: a 2! multiplicity correction.
        let twins = vec![vec![true, true], vec![true, true]];
        let expect = 2.0 * mass.ln() - 1.5 * mass + 2.0 * (0.5f64).ln() - (2.0f64).ln();
        assert!((ibp_log_pmf(&twins, mass) - expect).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_log_density_matches_hand_cases() {
        // Dirichlet(1, 1) is uniform on the simplex with density 1.
        assert!(log_dirichlet(&[1.0, 1.0], &[0.4, 0.6]).abs() < 1e-12);
        // Dirichlet(2, 1) has density 2 x_1.
        let got = log_dirichlet(&[2.0, 1.0], &[0.3, 0.7]);
        assert!((got - (0.6f64).ln()).abs() < 1e-12);
        // A zero coordinate with a unit parameter stays finite.
        assert!(log_dirichlet(&[1.0, 1.0], &[1.0, 0.0]).is_finite());
    }

    fn emission_1d(mean: f64) -> GaussianEmission {
        GaussianEmission {
            mean: vec![mean],
            covariance: vec![vec![1.0]],
            ar_coeffs: None,
        }
    }

    fn hand_sample() -> (Vec<TimeSeries>, PosteriorSample) {
        let dataset = vec![
            TimeSeries::new(
                "a".into(),
                vec![vec![-2.1], vec![-1.8], vec![0.2], vec![0.1], vec![-2.2]],
                None,
                None,
            )
            .unwrap(),
            TimeSeries::new(
                "b".into(),
                vec![vec![0.3], vec![2.2], vec![1.9], vec![0.0], vec![2.1]],
                None,
                None,
            )
            .unwrap(),
        ];
        let features =
            FeatureMatrix::new(vec![vec![true, true, false], vec![false, true, true]]).unwrap();
        let sample = PosteriorSample {
            num_states: 3,
            emissions: vec![emission_1d(-2.0), emission_1d(0.0), emission_1d(2.0)],
            features,
            trans_rows: vec![
                DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
                DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            ],
            labels: vec![vec![0, 0, 1, 1, 0], vec![1, 2, 2, 1, 2]],
            log_joint: 0.0,
        };
        (dataset, sample)
    }

    fn permute_sample(sample: &PosteriorSample, perm: &[usize]) -> PosteriorSample {
        let l = sample.num_states;
        let mut emissions = vec![sample.emissions[0].clone(); l];
        for k in 0..l {
            emissions[perm[k]] = sample.emissions[k].clone();
        }
        let flags: Vec<Vec<bool>> = sample
            .features
            .flags()
            .iter()
            .map(|row| {
                let mut new_row = vec![false; l];
                for k in 0..l {
                    new_row[perm[k]] = row[k];
                }
                new_row
            })
            .collect();
        let features = FeatureMatrix::new(flags).unwrap();
        let inv: HashMap<usize, usize> = (0..l).map(|k| (perm[k], k)).collect();
        let trans_rows = (0..sample.labels.len())
            .map(|i| {
                let old_active = sample.features.active_states(i);
                let old_pos: HashMap<usize, usize> = old_active
                    .iter()
                    .enumerate()
                    .map(|(p, &k)| (k, p))
                    .collect();
                let new_active = features.active_states(i);
                DMatrix::from_fn(new_active.len(), new_active.len(), |a, b| {
                    let qa = old_pos[&inv[&new_active[a]]];
                    let qb = old_pos[&inv[&new_active[b]]];
                    sample.trans_rows[i][(qa, qb)]
                })
            })
            .collect();
        let labels = sample
            .labels
            .iter()
            .map(|seq| seq.iter().map(|&z| perm[z]).collect())
            .collect();
        PosteriorSample {
            num_states: l,
            emissions,
            features,
            trans_rows,
            labels,
            log_joint: sample.log_joint,
        }
    }

    #[test]
    fn log_joint_is_invariant_under_state_relabeling() {
        let (dataset, sample) = hand_sample();
        let hyper = default_hyperparams(&dataset, 0).unwrap();
        let base = sample_log_joint(&dataset, &hyper, &sample).unwrap();
        assert!(base.is_finite());
        for perm in [[2, 0, 1], [1, 2, 0], [2, 1, 0], [0, 2, 1]] {
            let permuted = permute_sample(&sample, &perm);
            permuted.validate().unwrap();
            let got = sample_log_joint(&dataset, &hyper, &permuted).unwrap();
            assert!(
                (got - base).abs() < 1e-9,
                "permutation {perm:?}: {got} vs {base}"
            );
        }
    }

    #[test]
    fn recorded_log_joint_matches_recomputation() {
        let (dataset, _) = hand_sample();
        let hyper = default_hyperparams(&dataset, 0).unwrap();
        let fit = fit_bphmm(&dataset, &hyper, &FitConfig::with_defaults(30, 4)).unwrap();
        for sample in &fit.samples {
            let recomputed = sample_log_joint(&dataset, &hyper, sample).unwrap();
            assert!(
                (recomputed - sample.log_joint).abs() < 1e-9,
                "{recomputed} vs {}",
                sample.log_joint
            );
        }
    }
}
