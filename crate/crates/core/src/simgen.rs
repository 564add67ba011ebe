//! Ground-truth synthetic data: random POMDPs, continuous Gaussian-emission
//! trajectories, and Monte Carlo policy rollouts.
//!
//! Everything here exists so the learning stages have oracles: generated
//! trajectories carry their latent states and actions, and rollout means
//! can be checked against exact policy evaluation.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::MvGaussian;
use crate::model::{
    validate_model, GaussianEmission, ModelError, PolicyTree, PomdpModel, TimeSeries,
};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum SimgenError {
    #[error("size parameters must all be at least 1")]
    EmptySpace,
    #[error("r_max must be positive, got {0}")]
    BadRMax(f64),
    #[error("scenario: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("policy horizon {policy} does not match requested horizon {horizon}")]
    HorizonMismatch { policy: usize, horizon: usize },
}

/// Draw an index from an unnormalized nonnegative weight vector by inverse
/// CDF. Weights need not sum exactly to one; ties and float drift resolve
/// to the last positive-weight index.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last_positive
}

fn dirichlet1_row<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // Normalized unit-rate exponentials are a symmetric Dirichlet(1) draw,
    // the uniform distribution on the simplex.
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / sum).collect()
}

/// Random model from the uniform-simplex family: transition and observation
/// rows from Dirichlet(1), rewards uniform on [0, r_max], uniform initial
/// belief. Deterministic given the generator state.
pub fn random_pomdp_from<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    num_observations: usize,
    r_max: f64,
) -> Result<PomdpModel, SimgenError> {
    if num_states == 0 || num_actions == 0 || num_observations == 0 {
        return Err(SimgenError::EmptySpace);
    }
    if !(r_max > 0.0) {
        return Err(SimgenError::BadRMax(r_max));
    }
    let transition = (0..num_actions)
        .map(|_| (0..num_states).map(|_| dirichlet1_row(rng, num_states)).collect())
        .collect();
    let observation_fn = (0..num_states)
        .map(|_| dirichlet1_row(rng, num_observations))
        .collect();
    let reward = (0..num_states)
        .map(|_| (0..num_actions).map(|_| rng.random::<f64>() * r_max).collect())
        .collect();
    let initial_belief = dirichlet1_row(rng, num_states);
    let model = PomdpModel {
        states: (0..num_states).map(|i| format!("s{i}")).collect(),
        state_factors: None,
        actions: (0..num_actions).map(|i| format!("a{i}")).collect(),
        observations: (0..num_observations).map(|i| format!("o{i}")).collect(),
        transition,
        observation_fn,
        reward,
        r_max,
        initial_belief,
    };
    debug_assert!(validate_model(&model).is_empty());
    Ok(model)
}

/// Seeded wrapper around [`random_pomdp_from`].
pub fn random_pomdp(
    num_states: usize,
    num_actions: usize,
    num_observations: usize,
    r_max: f64,
    seed: u64,
) -> Result<PomdpModel, SimgenError> {
    random_pomdp_from(
        &mut crate::rng::master(seed),
        num_states,
        num_actions,
        num_observations,
        r_max,
    )
}

/// How actions are chosen while collecting data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoggingPolicy {
    /// Every action equally likely at every step, which guarantees every
    /// state-action pair accumulates samples.
    UniformRandom,
}

/// A complete generative ground truth: the discrete POMDP, the continuous
/// emission distribution of each hidden human state, and the logging policy
/// used during data collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScenario {
    pub pomdp: PomdpModel,
    pub emissions: Vec<GaussianEmission>,
    pub logging_policy: LoggingPolicy,
}

impl GroundTruthScenario {
    /// Size of the hidden human factor: the first state factor when the
    /// space is a product, the whole space otherwise.
    pub fn human_state_count(&self) -> usize {
        match &self.pomdp.state_factors {
            Some(factors) => factors.first().map_or(0, |f| f.labels.len()),
            None => self.pomdp.num_states(),
        }
    }

    /// Map a flat state index to its human component (the first factor is
    /// slowest in the flat index).
    pub fn human_component(&self, state: usize) -> usize {
        let rest: usize = match &self.pomdp.state_factors {
            Some(factors) => factors.iter().skip(1).map(|f| f.labels.len()).product(),
            None => 1,
        };
        state / rest
    }

    pub fn validate(&self) -> Result<(), SimgenError> {
        let violations = validate_model(&self.pomdp);
        if !violations.is_empty() {
            return Err(SimgenError::Model(ModelError::Invalid(violations)));
        }
        let human = self.human_state_count();
        if self.emissions.len() != human {
            return Err(SimgenError::BadScenario(format!(
                "{} emissions for {human} human states",
                self.emissions.len()
            )));
        }
        let dim = self.emissions.first().map_or(0, |e| e.dim());
        for (i, e) in self.emissions.iter().enumerate() {
            e.validate(0).map_err(|err| {
                SimgenError::BadScenario(format!("emission {i}: {err}"))
            })?;
            if e.dim() != dim {
                return Err(SimgenError::BadScenario(format!(
                    "emission {i} has dimension {}, others have {dim}",
                    e.dim()
                )));
            }
        }
        Ok(())
    }
}

/// The bundled synthetic benchmark: three hidden states in two dimensions
/// with component means 8 pooled standard deviations apart, sticky
/// transitions (self-probability at least 0.9 under both actions), and a
/// uniform-random logging policy. The "hold" action keeps the current
/// state sticky; "shift" pushes cyclically toward the next state.
///
/// The discrete observation function is the identity because at these
/// separations the maximum-likelihood decision rule on the emissions is
/// wrong with probability below 1e-4; data generation itself uses only the
/// continuous emissions.
pub fn driver_like_scenario() -> GroundTruthScenario {
    let third = 1.0 / 3.0;
    let pomdp = PomdpModel {
        states: vec!["h0".into(), "h1".into(), "h2".into()],
        state_factors: None,
        actions: vec!["hold".into(), "shift".into()],
        observations: vec!["o0".into(), "o1".into(), "o2".into()],
        transition: vec![
            vec![
                vec![0.95, 0.03, 0.02],
                vec![0.03, 0.95, 0.02],
                vec![0.02, 0.03, 0.95],
            ],
            vec![
                vec![0.90, 0.08, 0.02],
                vec![0.02, 0.90, 0.08],
                vec![0.08, 0.02, 0.90],
            ],
        ],
        observation_fn: vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ],
        reward: vec![
            vec![1.0, -0.25],
            vec![0.0, 0.5],
            vec![-0.5, 0.75],
        ],
        r_max: 1.0,
        initial_belief: vec![third, third, third],
    };
    let emissions = vec![
        GaussianEmission {
            mean: vec![0.0, 0.0],
            covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ar_coeffs: None,
        },
        GaussianEmission {
            mean: vec![8.0, 0.0],
            covariance: vec![vec![1.2, 0.0], vec![0.0, 1.2]],
            ar_coeffs: None,
        },
        GaussianEmission {
            mean: vec![0.0, 8.0],
            covariance: vec![vec![0.8, 0.0], vec![0.0, 0.8]],
            ar_coeffs: None,
        },
    ];
    let scenario = GroundTruthScenario {
        pomdp,
        emissions,
        logging_policy: LoggingPolicy::UniformRandom,
    };
    debug_assert!(scenario.validate().is_ok());
    scenario
}

/// Simulate `num_sequences` trajectories of `length` samples each. Sequence
/// i uses RNG substream (seed, i), so any subset reproduces identically.
/// Per step the draw order is: emission sample, then (except at the last
/// step) logging action, then successor state. Latent states and actions
/// are recorded for oracle use.
pub fn simulate_continuous(
    scenario: &GroundTruthScenario,
    num_sequences: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<TimeSeries>, SimgenError> {
    scenario.validate()?;
    if num_sequences == 0 || length == 0 {
        return Err(SimgenError::EmptySpace);
    }
    let gaussians: Vec<MvGaussian> = scenario
        .emissions
        .iter()
        .map(|e| e.to_gaussian())
        .collect::<Result<_, _>>()
        .map_err(ModelError::from)?;
    let model = &scenario.pomdp;
    let num_actions = model.num_actions();

    let mut out = Vec::with_capacity(num_sequences);
    for i in 0..num_sequences {
        let mut rng = substream(seed, i as u64);
        let mut state = sample_categorical(&mut rng, &model.initial_belief);
        let mut values = Vec::with_capacity(length);
        let mut latent = Vec::with_capacity(length);
        let mut actions = Vec::with_capacity(length - 1);
        for t in 0..length {
            let y = gaussians[scenario.human_component(state)].sample(&mut rng);
            values.push(y.iter().copied().collect());
            latent.push(state);
            if t + 1 < length {
                let action = match scenario.logging_policy {
                    LoggingPolicy::UniformRandom => rng.random_range(0..num_actions),
                };
                actions.push(action);
                state = sample_categorical(&mut rng, &model.transition[action][state]);
            }
        }
        out.push(TimeSeries::new(
            format!("seq{i}"),
            values,
            Some(actions),
            Some(latent),
        )?);
    }
    Ok(out)
}

/// Monte Carlo policy evaluation: mean cumulative reward over independent
/// rollouts and its standard error. Uses Welford's running-variance update,
/// so a deterministic system reports a standard error of exactly zero.
pub fn simulate_discrete(
    model: &PomdpModel,
    policy: &PolicyTree,
    horizon: usize,
    episodes: u64,
    seed: u64,
) -> Result<(f64, f64), SimgenError> {
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(SimgenError::Model(ModelError::Invalid(violations)));
    }
    policy
        .validate(model.num_observations(), model.num_actions())
        .map_err(SimgenError::Model)?;
    if policy.horizon != horizon {
        return Err(SimgenError::HorizonMismatch {
            policy: policy.horizon,
            horizon,
        });
    }
    if episodes == 0 {
        return Err(SimgenError::EmptySpace);
    }

    let mut rng = substream(seed, 0);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for episode in 0..episodes {
        let mut state = sample_categorical(&mut rng, &model.initial_belief);
        let mut node = &policy.root;
        let mut reward = 0.0;
        for _ in 0..horizon {
            let obs = sample_categorical(&mut rng, &model.observation_fn[state]);
            let branch = &node.branches[obs];
            reward += model.reward[state][branch.action];
            state = sample_categorical(&mut rng, &model.transition[branch.action][state]);
            node = &branch.child;
        }
        let count = (episode + 1) as f64;
        let delta = reward - mean;
        mean += delta / count;
        m2 += delta * (reward - mean);
    }
    let stderr = if episodes > 1 {
        (m2 / (episodes - 1) as f64 / episodes as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}
