//! Empirical verification of the optimality-loss bounds: how much value a
//! policy computed on an approximate model can lose on the true one.
//!
//! Two claims are checked over randomized trials, both tying the allowed
//! transition error alpha to a value gap epsilon:
//!
//! * With alpha = epsilon / (H^2 N r_max), any fixed policy's value differs
//!   between a model and its alpha-approximation by at most epsilon.
//! * With alpha = epsilon / (2 H^2 N r_max), the policy optimized on the
//!   approximation loses at most epsilon of the true optimal value.
//!
//! Every trial is exact: values come from sequence enumeration, so a single
//! violation would be a correctness bug, not a statistical fluke.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{alpha_distance, validate_model, PomdpModel, Violation};
use crate::planner::{
    evaluate_policy_exact, random_policy_tree, solve_optimal_dp, PlanError, PlannerLimits,
};
use crate::rng::{master, substream};
use crate::simgen::{random_pomdp_from, SimgenError};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("alpha = {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("epsilon = {0} outside (0, 1)")]
    BadEpsilon(f64),
    #[error("derived alpha = {alpha} falls outside (0, 1); shrink epsilon or grow the family")]
    AlphaOutOfRange { alpha: f64 },
    #[error("{0}")]
    BadConfig(String),
    #[error("model is invalid: {0:?}")]
    InvalidModel(Vec<Violation>),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Simgen(#[from] SimgenError),
}

/// Which bound is being verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Fixed-policy value stability: |V^f_M - V^f_Mbar| <= epsilon.
    One,
    /// Optimality loss: |V^g_M - V^f_M| <= epsilon for f optimal on Mbar,
    /// g optimal on M.
    Two,
}

/// Trial setup for the bound harnesses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsConfig {
    pub theorem: Theorem,
    pub epsilon: f64,
    pub horizon: usize,
    pub trials: u64,
    pub seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub r_max: f64,
    /// Extra uniformly random policies checked per trial (theorem one
    /// quantifies over all policies; these are its spot checks).
    pub random_policies_per_trial: usize,
}

/// One trial's outcome. For theorem one the recorded values belong to the
/// policy with the largest gap in that trial; for theorem two they are
/// V^g_M (true optimum) and V^f_M (the transferred policy's true value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub alpha_used: f64,
    pub value_true_policy: f64,
    pub value_learned_policy: f64,
    pub gap: f64,
    /// How far V^f_M exceeds V^g_M (theorem two only; should be zero up to
    /// arithmetic noise, since g is optimal on M).
    pub sandwich_violation: f64,
}

/// Full harness outcome across trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub config: BoundsConfig,
    pub alpha: f64,
    pub epsilon: f64,
    pub trials: Vec<TrialRecord>,
    pub max_gap: f64,
    /// epsilon / max_gap, absent when every gap was exactly zero; values
    /// well above 1 mean the bound held with room to spare.
    pub slack: Option<f64>,
    /// True when no trial saw V^f_M exceed V^g_M beyond 1e-9 (vacuously
    /// true for theorem one).
    pub sandwich_ok: bool,
    pub pass: bool,
}

/// The transition-error budget each theorem prescribes for a target value
/// gap epsilon.
pub fn alpha_for_epsilon(
    epsilon: f64,
    horizon: usize,
    num_states: usize,
    r_max: f64,
    theorem: Theorem,
) -> Result<f64, BoundsError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(BoundsError::BadEpsilon(epsilon));
    }
    if horizon == 0 || num_states == 0 {
        return Err(BoundsError::BadConfig(
            "horizon and state count must be positive".into(),
        ));
    }
    if !(r_max > 0.0) {
        return Err(BoundsError::BadConfig(format!(
            "r_max must be positive, got {r_max}"
        )));
    }
    let h = horizon as f64;
    let denominator = match theorem {
        Theorem::One => h * h * num_states as f64 * r_max,
        Theorem::Two => 2.0 * h * h * num_states as f64 * r_max,
    };
    let alpha = epsilon / denominator;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BoundsError::AlphaOutOfRange { alpha });
    }
    Ok(alpha)
}

fn perturb_row<R: Rng + ?Sized>(row: &mut [f64], alpha: f64, rng: &mut R) {
    let n = row.len();
    if n < 2 {
        return;
    }
    // Zero-sum direction: centered standard normals.
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let mut direction: Vec<f64> = draws.iter().map(|g| g - mean).collect();
    let max_mag = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max_mag == 0.0 {
        return;
    }
    // Scale so the largest entry moves by a uniform draw from (0, alpha].
    let target = alpha * (1.0 - rng.random::<f64>());
    for d in &mut direction {
        *d *= target / max_mag;
    }
    // Shrink toward zero as far as [0, 1] feasibility requires.
    let mut scale = 1.0f64;
    for (p, d) in row.iter().zip(&direction) {
        if *d > 0.0 {
            scale = scale.min((1.0 - p) / d);
        } else if *d < 0.0 {
            scale = scale.min(p / -d);
        }
    }
    if scale <= 0.0 {
        return;
    }
    for (p, d) in row.iter_mut().zip(&direction) {
        *p = (*p + scale * d).clamp(0.0, 1.0);
    }
}

fn perturb_transitions<R: Rng + ?Sized>(model: &mut PomdpModel, alpha: f64, rng: &mut R) {
    if alpha == 0.0 {
        return;
    }
    for mat in &mut model.transition {
        for row in mat.iter_mut() {
            perturb_row(row, alpha, rng);
        }
    }
}

/// A random alpha-approximation of `model`: identical spaces, observation
/// function, rewards, and initial belief, with every transition row moved
/// by a zero-sum direction of magnitude at most alpha (clipped against
/// [0, 1] feasibility, so rows stay stochastic).
pub fn perturb_model(
    model: &PomdpModel,
    alpha: f64,
    seed: u64,
) -> Result<PomdpModel, BoundsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BoundsError::BadAlpha(alpha));
    }
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(BoundsError::InvalidModel(violations));
    }
    let mut out = model.clone();
    perturb_transitions(&mut out, alpha, &mut master(seed));
    debug_assert!(validate_model(&out).is_empty());
    debug_assert!(alpha_distance(model, &out).value().is_some_and(|d| d <= alpha));
    Ok(out)
}

fn check_config(config: &BoundsConfig, expected: Theorem) -> Result<f64, BoundsError> {
    if config.theorem != expected {
        return Err(BoundsError::BadConfig(format!(
            "config selects {:?}, but this harness verifies {:?}",
            config.theorem, expected
        )));
    }
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        return Err(BoundsError::BadEpsilon(config.epsilon));
    }
    if config.trials == 0 {
        return Err(BoundsError::BadConfig("trials must be positive".into()));
    }
    if config.num_states == 0 || config.num_actions == 0 || config.num_observations == 0 {
        return Err(BoundsError::BadConfig("space sizes must be positive".into()));
    }
    alpha_for_epsilon(
        config.epsilon,
        config.horizon,
        config.num_states,
        config.r_max,
        expected,
    )
}

fn assemble_report(
    config: BoundsConfig,
    alpha: f64,
    trials: Vec<TrialRecord>,
) -> BoundReport {
    let max_gap = trials.iter().fold(0.0f64, |m, t| m.max(t.gap));
    let sandwich_ok = trials.iter().all(|t| t.sandwich_violation <= 1e-9);
    let slack = if max_gap > 0.0 {
        Some(config.epsilon / max_gap)
    } else {
        None
    };
    let pass = max_gap <= config.epsilon && sandwich_ok;
    let epsilon = config.epsilon;
    BoundReport {
        config,
        alpha,
        epsilon,
        trials,
        max_gap,
        slack,
        sandwich_ok,
        pass,
    }
}

/// Fixed-policy value stability. Per trial: draw a random model M, build
/// the alpha-approximation Mbar, and compare each candidate policy's exact
/// value on both. Candidates are the optimal policies of Mbar and of M
/// plus `random_policies_per_trial` random trees; the theorem claims the
/// gap stays at most epsilon for every policy.
pub fn verify_theorem1(config: &BoundsConfig) -> Result<BoundReport, BoundsError> {
    let alpha = check_config(config, Theorem::One)?;
    let limits = PlannerLimits::default();
    let trials: Vec<TrialRecord> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialRecord, BoundsError> {
            let mut rng = substream(config.seed, trial);
            let model = random_pomdp_from(
                &mut rng,
                config.num_states,
                config.num_actions,
                config.num_observations,
                config.r_max,
            )?;
            let mut approx = model.clone();
            perturb_transitions(&mut approx, alpha, &mut rng);

            let mut policies = vec![
                solve_optimal_dp(&approx, config.horizon, &limits)?.0,
                solve_optimal_dp(&model, config.horizon, &limits)?.0,
            ];
            for _ in 0..config.random_policies_per_trial {
                policies.push(random_policy_tree(
                    &mut rng,
                    config.horizon,
                    config.num_observations,
                    config.num_actions,
                ));
            }

            let mut worst: Option<(f64, f64, f64)> = None;
            for policy in &policies {
                let on_true =
                    evaluate_policy_exact(&model, policy, config.horizon, &limits)?.value;
                let on_approx =
                    evaluate_policy_exact(&approx, policy, config.horizon, &limits)?.value;
                let gap = (on_true - on_approx).abs();
                if worst.map(|(g, _, _)| gap > g).unwrap_or(true) {
                    worst = Some((gap, on_true, on_approx));
                }
            }
            let (gap, on_true, on_approx) = worst.expect("policy set is nonempty");
            Ok(TrialRecord {
                trial,
                alpha_used: alpha,
                value_true_policy: on_true,
                value_learned_policy: on_approx,
                gap,
                sandwich_violation: 0.0,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(assemble_report(config.clone(), alpha, trials))
}

/// Optimality loss. Per trial: f is optimal on the approximation Mbar, g
/// optimal on the true M; both are evaluated exactly on M. The theorem
/// claims V^g_M - V^f_M stays within epsilon, and g being optimal forces
/// V^f_M <= V^g_M up to arithmetic noise.
pub fn verify_theorem2(config: &BoundsConfig) -> Result<BoundReport, BoundsError> {
    let alpha = check_config(config, Theorem::Two)?;
    let limits = PlannerLimits::default();
    let trials: Vec<TrialRecord> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialRecord, BoundsError> {
            let mut rng = substream(config.seed, trial);
            let model = random_pomdp_from(
                &mut rng,
                config.num_states,
                config.num_actions,
                config.num_observations,
                config.r_max,
            )?;
            let mut approx = model.clone();
            perturb_transitions(&mut approx, alpha, &mut rng);

            let transferred = solve_optimal_dp(&approx, config.horizon, &limits)?.0;
            let optimal = solve_optimal_dp(&model, config.horizon, &limits)?.0;
            let v_transferred =
                evaluate_policy_exact(&model, &transferred, config.horizon, &limits)?.value;
            let v_optimal =
                evaluate_policy_exact(&model, &optimal, config.horizon, &limits)?.value;
            Ok(TrialRecord {
                trial,
                alpha_used: alpha,
                value_true_policy: v_optimal,
                value_learned_policy: v_transferred,
                gap: (v_optimal - v_transferred).abs(),
                sandwich_violation: (v_transferred - v_optimal).max(0.0),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(assemble_report(config.clone(), alpha, trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AlphaDistance;
    use crate::simgen::random_pomdp;
    use approx::assert_relative_eq;

    fn family(theorem: Theorem, trials: u64, seed: u64) -> BoundsConfig {
        BoundsConfig {
            theorem,
            epsilon: 0.5,
            horizon: 3,
            trials,
            seed,
            num_states: 3,
            num_actions: 2,
            num_observations: 2,
            r_max: 1.0,
            random_policies_per_trial: 10,
        }
    }

    #[test]
    fn alpha_formulas_match_hand_arithmetic() {
        let a1 = alpha_for_epsilon(0.5, 3, 3, 1.0, Theorem::One).unwrap();
        assert_relative_eq!(a1, 0.5 / 27.0, epsilon = 1e-15);
        let a2 = alpha_for_epsilon(0.5, 3, 3, 1.0, Theorem::Two).unwrap();
        assert_relative_eq!(a2, 0.5 / 54.0, epsilon = 1e-15);
        // Boundary: alpha must be strictly inside (0, 1).
        assert!(matches!(
            alpha_for_epsilon(1.0, 1, 1, 1.0, Theorem::One),
            Err(BoundsError::AlphaOutOfRange { .. })
        ));
    }

    #[test]
    fn tiny_alpha_perturbations_stay_tiny() {
        let model = random_pomdp(3, 2, 2, 1.0, 1).unwrap();
        let approx = perturb_model(&model, 1e-12, 2).unwrap();
        match alpha_distance(&model, &approx) {
            AlphaDistance::Comparable(d) => assert!(d <= 1e-12),
            other => panic!("expected comparable, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_rows_stay_feasible() {
        let mut model = random_pomdp(3, 1, 2, 1.0, 3).unwrap();
        model.transition[0][0] = vec![1.0, 0.0, 0.0];
        let approx = perturb_model(&model, 0.3, 4).unwrap();
        assert!(validate_model(&approx).is_empty());
        let row = &approx.transition[0][0];
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn perturbation_sweep_respects_the_distance_bound() {
        let model = random_pomdp(3, 2, 2, 1.0, 5).unwrap();
        let mut moved = 0;
        for seed in 0..1000u64 {
            let approx = perturb_model(&model, 0.05, seed).unwrap();
            assert!(validate_model(&approx).is_empty(), "seed {seed}");
            match alpha_distance(&model, &approx) {
                AlphaDistance::Comparable(d) => {
                    assert!(d <= 0.05 + 1e-15, "seed {seed}: distance {d}");
                    if d > 0.0 {
                        moved += 1;
                    }
                }
                other => panic!("seed {seed}: {other:?}"),
            }
        }
        // The move has magnitude in (0, alpha]; every seed should move.
        assert_eq!(moved, 1000);
    }

    #[test]
    fn perturbation_preserves_everything_but_transitions() {
        let model = random_pomdp(4, 2, 3, 1.0, 6).unwrap();
        let approx = perturb_model(&model, 0.2, 7).unwrap();
        assert_eq!(model.states, approx.states);
        assert_eq!(model.observation_fn, approx.observation_fn);
        assert_eq!(model.reward, approx.reward);
        assert_eq!(model.initial_belief, approx.initial_belief);
        assert_ne!(model.transition, approx.transition);
    }

    #[test]
    fn theorem1_holds_on_a_small_run() {
        let report = verify_theorem1(&family(Theorem::One, 10, 11)).unwrap();
        assert!(report.pass);
        assert!(report.max_gap <= report.epsilon);
        assert_eq!(report.trials.len(), 10);
        for record in &report.trials {
            assert_relative_eq!(record.alpha_used, 0.5 / 27.0, epsilon = 1e-15);
            assert_relative_eq!(
                record.gap,
                (record.value_true_policy - record.value_learned_policy).abs(),
                epsilon = 1e-15
            );
        }
        let expect_slack = report.slack.unwrap();
        assert_relative_eq!(expect_slack, report.epsilon / report.max_gap, epsilon = 1e-12);
        assert!(expect_slack >= 1.0);
    }

    #[test]
    fn theorem2_holds_and_the_sandwich_is_respected() {
        let report = verify_theorem2(&family(Theorem::Two, 10, 13)).unwrap();
        assert!(report.pass);
        assert!(report.sandwich_ok);
        for record in &report.trials {
            assert!(record.sandwich_violation <= 1e-9);
            assert!(record.gap <= report.epsilon);
        }
    }

    #[test]
    fn single_action_families_have_zero_optimality_loss() {
        let mut config = family(Theorem::Two, 5, 17);
        config.num_actions = 1;
        let report = verify_theorem2(&config).unwrap();
        for record in &report.trials {
            assert_eq!(record.gap, 0.0);
        }
        assert!(report.slack.is_none());
        assert!(report.pass);
    }

    #[test]
    fn reports_are_deterministic() {
        let a = verify_theorem1(&family(Theorem::One, 6, 19)).unwrap();
        let b = verify_theorem1(&family(Theorem::One, 6, 19)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = verify_theorem1(&family(Theorem::One, 6, 20)).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn mismatched_theorem_selector_is_rejected() {
        assert!(matches!(
            verify_theorem1(&family(Theorem::Two, 5, 1)),
            Err(BoundsError::BadConfig(_))
        ));
        assert!(matches!(
            verify_theorem2(&family(Theorem::One, 5, 1)),
            Err(BoundsError::BadConfig(_))
        ));
    }

    #[test]
    fn perturb_rejects_bad_alpha() {
        let model = random_pomdp(2, 1, 1, 1.0, 8).unwrap();
        assert!(matches!(
            perturb_model(&model, 0.0, 1),
            Err(BoundsError::BadAlpha(_))
        ));
        assert!(matches!(
            perturb_model(&model, 1.0, 1),
            Err(BoundsError::BadAlpha(_))
        ));
    }
}
