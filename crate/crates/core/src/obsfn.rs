//! Discrete observation function from continuous emissions via the
//! maximum-likelihood decision rule.
//!
//! An observer holding the learned per-state Gaussians classifies each
//! continuous sample to the state with the highest likelihood. The induced
//! observation matrix entry (i, j) is the probability that a sample drawn
//! from state i's emission is classified as state j; the integral has no
//! closed form beyond one dimension, so it is estimated by Monte Carlo with
//! a reported per-entry standard error.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{GaussianError, MvGaussian};
use crate::model::{GaussianEmission, TimeSeries};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum ObsFnError {
    #[error("no emissions given")]
    Empty,
    #[error("emission {0} is autoregressive; the decision rule applies to static Gaussians")]
    Autoregressive(usize),
    #[error("emission {index} has dimension {got}, expected {want}")]
    DimMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("sample has dimension {got}, emissions have dimension {want}")]
    BadSample { got: usize, want: usize },
    #[error("n_mc must be positive")]
    ZeroSamples,
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Classifier carrying one prepared Gaussian per state, so repeated
/// decisions reuse the Cholesky factors.
pub struct MlDecider {
    gaussians: Vec<MvGaussian>,
}

impl MlDecider {
    pub fn new(emissions: &[GaussianEmission]) -> Result<Self, ObsFnError> {
        if emissions.is_empty() {
            return Err(ObsFnError::Empty);
        }
        let want = emissions[0].dim();
        let mut gaussians = Vec::with_capacity(emissions.len());
        for (index, e) in emissions.iter().enumerate() {
            if e.ar_order() != 0 {
                return Err(ObsFnError::Autoregressive(index));
            }
            if e.dim() != want {
                return Err(ObsFnError::DimMismatch {
                    index,
                    got: e.dim(),
                    want,
                });
            }
            gaussians.push(e.to_gaussian()?);
        }
        Ok(Self { gaussians })
    }

    pub fn num_states(&self) -> usize {
        self.gaussians.len()
    }

    pub fn dim(&self) -> usize {
        self.gaussians[0].dim()
    }

    /// Index of the state with the highest log density at `y`; ties (a
    /// measure-zero event) go to the lowest index.
    pub fn decide(&self, y: &DVector<f64>) -> Result<usize, ObsFnError> {
        if y.len() != self.dim() {
            return Err(ObsFnError::BadSample {
                got: y.len(),
                want: self.dim(),
            });
        }
        let mut best = 0;
        let mut best_ll = f64::NEG_INFINITY;
        for (i, g) in self.gaussians.iter().enumerate() {
            let ll = g.log_density(y).expect("dimension already checked");
            if ll > best_ll {
                best = i;
                best_ll = ll;
            }
        }
        Ok(best)
    }

    fn gaussian(&self, i: usize) -> &MvGaussian {
        &self.gaussians[i]
    }
}

/// One-shot classification of `y` against an emission list.
pub fn ml_decide(y: &[f64], emissions: &[GaussianEmission]) -> Result<usize, ObsFnError> {
    MlDecider::new(emissions)?.decide(&DVector::from_vec(y.to_vec()))
}

/// A Monte Carlo estimate of the decision-rule observation matrix.
/// `probs[i][j]` estimates the probability that a draw from emission i is
/// classified as state j; `std_err[i][j] = sqrt(p(1-p)/n_mc)` is the
/// binomial standard error of that entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    pub probs: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    pub n_mc: u64,
    pub seed: u64,
}

/// Estimate the observation matrix with `n_mc` draws per row. Row i uses
/// RNG substream (seed, i), so rows can be computed in parallel (they are,
/// via rayon) without affecting the result.
pub fn estimate_observation_matrix(
    emissions: &[GaussianEmission],
    n_mc: u64,
    seed: u64,
) -> Result<ObservationMatrix, ObsFnError> {
    if n_mc == 0 {
        return Err(ObsFnError::ZeroSamples);
    }
    let decider = MlDecider::new(emissions)?;
    let l = decider.num_states();

    let rows: Vec<Vec<u64>> = (0..l)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut counts = vec![0u64; l];
            let g = decider.gaussian(i);
            for _ in 0..n_mc {
                let y = g.sample(&mut rng);
                let j = decider.decide(&y).expect("dimensions match");
                counts[j] += 1;
            }
            counts
        })
        .collect();

    let probs: Vec<Vec<f64>> = rows
        .iter()
        .map(|counts| counts.iter().map(|&c| c as f64 / n_mc as f64).collect())
        .collect();
    let std_err = probs
        .iter()
        .map(|row| {
            row.iter()
                .map(|&p| (p * (1.0 - p) / n_mc as f64).sqrt())
                .collect()
        })
        .collect();
    Ok(ObservationMatrix {
        probs,
        std_err,
        n_mc,
        seed,
    })
}

/// Classify every sample of a series, yielding its decoded state sequence.
pub fn discretize_series(
    series: &TimeSeries,
    emissions: &[GaussianEmission],
) -> Result<Vec<usize>, ObsFnError> {
    let decider = MlDecider::new(emissions)?;
    series
        .values
        .iter()
        .map(|row| decider.decide(&DVector::from_vec(row.clone())))
        .collect()
}

/// Lift a human-factor observation matrix onto a product state space whose
/// remaining factors are observed directly: with the human factor slowest
/// in the flat index, the full matrix is the Kronecker product of
/// `human_probs` with a `passthrough`-sized identity. Entry
/// ((h, p), (h2, p2)) equals human_probs[h][h2] when p = p2 and 0 otherwise.
pub fn lift_observation_probs(human_probs: &[Vec<f64>], passthrough: usize) -> Vec<Vec<f64>> {
    let h_count = human_probs.len();
    let full = h_count * passthrough;
    let mut out = vec![vec![0.0; full]; full];
    for h in 0..h_count {
        for p in 0..passthrough {
            let row = h * passthrough + p;
            for (h2, &prob) in human_probs[h].iter().enumerate() {
                out[row][h2 * passthrough + p] = prob;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::function::erf::erf;

    fn emission_1d(mean: f64, var: f64) -> GaussianEmission {
        GaussianEmission {
            mean: vec![mean],
            covariance: vec![vec![var]],
            ar_coeffs: None,
        }
    }

    fn std_normal_cdf(x: f64) -> f64 {
        0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn decision_boundary_between_equal_variance_gaussians_is_the_midpoint() {
        let emissions = [emission_1d(0.0, 1.0), emission_1d(2.0, 1.0)];
        assert_eq!(ml_decide(&[0.9], &emissions).unwrap(), 0);
        assert_eq!(ml_decide(&[1.1], &emissions).unwrap(), 1);
        assert_eq!(ml_decide(&[-5.0], &emissions).unwrap(), 0);
        assert_eq!(ml_decide(&[7.0], &emissions).unwrap(), 1);
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        let emissions = [emission_1d(0.0, 1.0), emission_1d(0.0, 1.0)];
        assert_eq!(ml_decide(&[3.3], &emissions).unwrap(), 0);
        // Exactly on the midpoint of two symmetric Gaussians.
        let emissions = [emission_1d(0.0, 1.0), emission_1d(2.0, 1.0)];
        assert_eq!(ml_decide(&[1.0], &emissions).unwrap(), 0);
    }

    #[test]
    fn covariance_shapes_the_decision_not_just_distance() {
        // y = 0.3 is euclidean-closer to the narrow component at 0, but the
        // wide component's density is higher there.
        let emissions = [emission_1d(0.0, 0.01), emission_1d(1.0, 10.0)];
        assert_eq!(ml_decide(&[0.3], &emissions).unwrap(), 1);
        assert_eq!(ml_decide(&[0.05], &emissions).unwrap(), 0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(ml_decide(&[0.0], &[]), Err(ObsFnError::Empty)));

        let ar = GaussianEmission {
            ar_coeffs: Some(vec![vec![vec![0.5]]]),
            ..emission_1d(0.0, 1.0)
        };
        assert!(matches!(
            ml_decide(&[0.0], &[ar]),
            Err(ObsFnError::Autoregressive(0))
        ));

        let mixed = [
            emission_1d(0.0, 1.0),
            GaussianEmission {
                mean: vec![0.0, 0.0],
                covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                ar_coeffs: None,
            },
        ];
        assert!(matches!(
            ml_decide(&[0.0], &mixed),
            Err(ObsFnError::DimMismatch { index: 1, .. })
        ));

        let emissions = [emission_1d(0.0, 1.0)];
        assert!(matches!(
            ml_decide(&[0.0, 1.0], &emissions),
            Err(ObsFnError::BadSample { got: 2, want: 1 })
        ));
        assert!(matches!(
            estimate_observation_matrix(&emissions, 0, 1),
            Err(ObsFnError::ZeroSamples)
        ));
    }

    #[test]
    fn unit_gaussians_two_apart_match_the_normal_cdf() {
        // For N(0,1) vs N(2,1) the correct-classification probability is
        // Phi(1); each estimated entry must land within 3 binomial standard
        // errors of the closed form. The full-scale run (n_mc = 10^6) lives
        // in the acceptance suite; this checks the same oracle faster.
        // The library erf behind std_normal_cdf is itself only good to
        // about 1e-11, which is far below the Monte Carlo noise here.
        let phi1 = std_normal_cdf(1.0);
        assert_relative_eq!(phi1, 0.8413447460685429, epsilon = 1e-9);

        let emissions = [emission_1d(0.0, 1.0), emission_1d(2.0, 1.0)];
        let m = estimate_observation_matrix(&emissions, 100_000, 7).unwrap();
        let expect = [[phi1, 1.0 - phi1], [1.0 - phi1, phi1]];
        for i in 0..2 {
            for j in 0..2 {
                let err = (m.probs[i][j] - expect[i][j]).abs();
                assert!(
                    err <= 3.0 * m.std_err[i][j],
                    "entry ({i},{j}): {} vs {}, 3se = {}",
                    m.probs[i][j],
                    expect[i][j],
                    3.0 * m.std_err[i][j]
                );
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_errors_match_the_binomial_formula() {
        let emissions = [
            emission_1d(0.0, 1.0),
            emission_1d(1.0, 2.0),
            emission_1d(3.0, 0.5),
        ];
        let m = estimate_observation_matrix(&emissions, 20_000, 3).unwrap();
        for i in 0..3 {
            let sum: f64 = m.probs[i].iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            for j in 0..3 {
                let p = m.probs[i][j];
                assert_relative_eq!(
                    m.std_err[i][j],
                    (p * (1.0 - p) / 20_000.0).sqrt(),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn widely_separated_states_give_near_identity_rows() {
        // Mahalanobis separation 20: off-diagonal mass should vanish.
        let emissions = [emission_1d(0.0, 1.0), emission_1d(20.0, 1.0)];
        let m = estimate_observation_matrix(&emissions, 100_000, 5).unwrap();
        assert!(m.probs[0][1] < 1e-6);
        assert!(m.probs[1][0] < 1e-6);
    }

    #[test]
    fn estimation_is_deterministic_per_seed() {
        let emissions = [emission_1d(0.0, 1.0), emission_1d(1.0, 1.0)];
        let a = estimate_observation_matrix(&emissions, 10_000, 11).unwrap();
        let b = estimate_observation_matrix(&emissions, 10_000, 11).unwrap();
        assert_eq!(a, b);
        let c = estimate_observation_matrix(&emissions, 10_000, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn discretize_recovers_labels_for_separated_emissions() {
        let emissions = [emission_1d(0.0, 0.5), emission_1d(10.0, 0.5)];
        let series = TimeSeries::new(
            "s".into(),
            vec![vec![0.3], vec![9.7], vec![-1.0], vec![10.5]],
            None,
            None,
        )
        .unwrap();
        assert_eq!(
            discretize_series(&series, &emissions).unwrap(),
            vec![0, 1, 0, 1]
        );
    }

    #[test]
    fn lifting_composes_with_identity_on_the_passthrough_factor() {
        let human = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let full = lift_observation_probs(&human, 2);
        let expect = vec![
            vec![0.9, 0.0, 0.1, 0.0],
            vec![0.0, 0.9, 0.0, 0.1],
            vec![0.2, 0.0, 0.8, 0.0],
            vec![0.0, 0.2, 0.0, 0.8],
        ];
        assert_eq!(full, expect);
        for row in &full {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }
}
