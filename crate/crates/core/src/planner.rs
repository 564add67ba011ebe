//! Finite-horizon POMDP planning: exact policy evaluation by sequence
//! enumeration, brute-force optimal policy-tree search (the oracle), a
//! belief-tree backward-induction solver, and the Bayes belief update.
//!
//! Step semantics, shared by every routine here and by the Monte Carlo
//! rollouts in [`crate::simgen`]: at step t the system occupies s_t, emits
//! o_t from the observation function, the policy picks a_t from the
//! observations seen so far, reward R(s_t, a_t) accrues, and the state
//! moves via the transition function. Exactly H rewards accrue over
//! horizon H.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{
    validate_model, Belief, ModelError, PolicyBranch, PolicyNode, PolicyTree, PomdpModel,
    Violation,
};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{what} needs {required:.3e} {unit}, cap is {cap}; raise the cap or shrink the instance")]
    CapExceeded {
        what: &'static str,
        unit: &'static str,
        required: f64,
        cap: u64,
    },
    #[error("policy has horizon {policy}, expected {horizon}")]
    HorizonMismatch { policy: usize, horizon: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("model is invalid: {0:?}")]
    InvalidModel(Vec<Violation>),
    #[error(transparent)]
    BadPolicy(#[from] ModelError),
    #[error("belief length {belief} does not match state count {states}")]
    BeliefMismatch { belief: usize, states: usize },
    #[error("action index {0} out of range")]
    BadAction(usize),
    #[error("observation index {0} out of range")]
    BadObservation(usize),
    #[error("observation {observation} has probability 0 under the predicted belief")]
    ImpossibleObservation { observation: usize },
    #[error("sequence probabilities sum to {total:.12}, not 1 within 1e-9")]
    ProbabilityLeak { total: f64 },
}

/// Work caps for the exact routines, all configurable. `dp_histories`
/// counts explored (observation, action) histories, (|O|·|A|)^H, a
/// stricter metric than observation histories alone so that large action
/// spaces cannot sneak past the guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlannerLimits {
    /// Cap on (N·|O|)^H state-observation sequences in exact evaluation.
    pub eval_sequences: u64,
    /// Cap on |A|^(action slots) candidate trees in exhaustive search.
    pub enum_trees: u64,
    /// Cap on (|O|·|A|)^H explored histories in the backward-induction
    /// solver.
    pub dp_histories: u64,
}

impl Default for PlannerLimits {
    fn default() -> Self {
        Self {
            eval_sequences: 10_000_000,
            enum_trees: 1_000_000,
            dp_histories: 10_000_000,
        }
    }
}

/// Exact value of a policy together with how much work it took.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationResult {
    pub value: f64,
    /// Number of state-observation sequences enumerated, (N·|O|)^H.
    pub num_sequences: u64,
    pub horizon: usize,
}

fn check_model(model: &PomdpModel) -> Result<(), PlanError> {
    let violations = validate_model(model);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(PlanError::InvalidModel(violations))
    }
}

fn check_cap(
    what: &'static str,
    unit: &'static str,
    base: f64,
    exponent: u32,
    cap: u64,
) -> Result<(), PlanError> {
    let required = base.powi(exponent as i32);
    if !(required <= cap as f64) {
        return Err(PlanError::CapExceeded {
            what,
            unit,
            required,
            cap,
        });
    }
    Ok(())
}

/// Exact policy value: the sum over all state-observation sequences
/// rho = (s_1, o_1, ..., s_H, o_H) of p(rho) times the cumulative reward
/// along rho. Total sequence probability is asserted to be 1 within 1e-9.
pub fn evaluate_policy_exact(
    model: &PomdpModel,
    policy: &PolicyTree,
    horizon: usize,
    limits: &PlannerLimits,
) -> Result<EvaluationResult, PlanError> {
    if horizon == 0 {
        return Err(PlanError::ZeroHorizon);
    }
    check_model(model)?;
    policy.validate(model.num_observations(), model.num_actions())?;
    if policy.horizon != horizon {
        return Err(PlanError::HorizonMismatch {
            policy: policy.horizon,
            horizon,
        });
    }
    let branching = (model.num_states() * model.num_observations()) as f64;
    check_cap(
        "exact evaluation",
        "sequences",
        branching,
        horizon as u32,
        limits.eval_sequences,
    )?;

    struct Walk<'m> {
        model: &'m PomdpModel,
        horizon: usize,
        value: f64,
        total_prob: f64,
        sequences: u64,
    }

    impl Walk<'_> {
        fn step(&mut self, node: &PolicyNode, depth: usize, state: usize, prob: f64, reward: f64) {
            for (obs, branch) in node.branches.iter().enumerate() {
                let p = prob * self.model.observation_fn[state][obs];
                let r = reward + self.model.reward[state][branch.action];
                if depth + 1 == self.horizon {
                    self.value += p * r;
                    self.total_prob += p;
                    self.sequences += 1;
                } else {
                    let row = &self.model.transition[branch.action][state];
                    for (next, &t) in row.iter().enumerate() {
                        self.step(&branch.child, depth + 1, next, p * t, r);
                    }
                }
            }
        }
    }

    let mut walk = Walk {
        model,
        horizon,
        value: 0.0,
        total_prob: 0.0,
        sequences: 0,
    };
    for (state, &b) in model.initial_belief.iter().enumerate() {
        walk.step(&policy.root, 0, state, b, 0.0);
    }
    if (walk.total_prob - 1.0).abs() > 1e-9 {
        return Err(PlanError::ProbabilityLeak {
            total: walk.total_prob,
        });
    }
    Ok(EvaluationResult {
        value: walk.value,
        num_sequences: walk.sequences,
        horizon,
    })
}

/// Number of action slots in a complete depth-H policy tree: one per
/// nonempty observation history, sum over t of |O|^t.
fn action_slots(num_obs: usize, horizon: usize) -> u64 {
    if num_obs == 1 {
        return horizon as u64;
    }
    let mut total = 0u64;
    let mut level = 1u64;
    for _ in 0..horizon {
        level *= num_obs as u64;
        total += level;
    }
    total
}

/// Globally optimal policy by exhaustive enumeration of all |A|^slots
/// complete trees, evaluated exactly. Ties keep the lexicographically
/// first assignment (slots ordered preorder: branch action before its
/// subtree, observations in index order).
pub fn solve_optimal_enum(
    model: &PomdpModel,
    horizon: usize,
    limits: &PlannerLimits,
) -> Result<(PolicyTree, f64), PlanError> {
    if horizon == 0 {
        return Err(PlanError::ZeroHorizon);
    }
    check_model(model)?;
    let slots = action_slots(model.num_observations(), horizon);
    check_cap(
        "exhaustive policy search",
        "trees",
        model.num_actions() as f64,
        slots as u32,
        limits.enum_trees,
    )?;

    fn build(
        assignment: &[usize],
        cursor: &mut usize,
        depth: usize,
        horizon: usize,
        num_obs: usize,
    ) -> PolicyNode {
        if depth == horizon {
            return PolicyNode { branches: vec![] };
        }
        let branches = (0..num_obs)
            .map(|_| {
                let action = assignment[*cursor];
                *cursor += 1;
                let child = build(assignment, cursor, depth + 1, horizon, num_obs);
                PolicyBranch { action, child }
            })
            .collect();
        PolicyNode { branches }
    }

    let num_obs = model.num_observations();
    let num_actions = model.num_actions();
    let mut assignment = vec![0usize; slots as usize];
    let mut best: Option<(PolicyTree, f64)> = None;
    loop {
        let mut cursor = 0;
        let root = build(&assignment, &mut cursor, 0, horizon, num_obs);
        debug_assert_eq!(cursor, assignment.len());
        let tree = PolicyTree { horizon, root };
        let value = evaluate_policy_exact(model, &tree, horizon, limits)?.value;
        // Strict comparison keeps the earlier (lexicographically smaller)
        // assignment on ties.
        if best.as_ref().map(|(_, v)| value > *v).unwrap_or(true) {
            best = Some((tree, value));
        }

        // Advance the odometer; the first slot is most significant.
        let mut idx = assignment.len();
        loop {
            if idx == 0 {
                return Ok(best.expect("at least one tree evaluated"));
            }
            idx -= 1;
            assignment[idx] += 1;
            if assignment[idx] < num_actions {
                break;
            }
            assignment[idx] = 0;
        }
    }
}

fn constant_node(action: usize, depth: usize, horizon: usize, num_obs: usize) -> PolicyNode {
    if depth == horizon {
        return PolicyNode { branches: vec![] };
    }
    let branches = (0..num_obs)
        .map(|_| PolicyBranch {
            action,
            child: constant_node(action, depth + 1, horizon, num_obs),
        })
        .collect();
    PolicyNode { branches }
}

/// Optimal policy by backward induction over observation histories,
/// carrying the belief through observation-conditioning and prediction.
/// Value ties and zero-probability observation branches both resolve to
/// the lexicographically first action.
pub fn solve_optimal_dp(
    model: &PomdpModel,
    horizon: usize,
    limits: &PlannerLimits,
) -> Result<(PolicyTree, f64), PlanError> {
    if horizon == 0 {
        return Err(PlanError::ZeroHorizon);
    }
    check_model(model)?;
    check_cap(
        "backward induction",
        "histories",
        (model.num_observations() * model.num_actions()) as f64,
        horizon as u32,
        limits.dp_histories,
    )?;

    fn solve(model: &PomdpModel, depth: usize, horizon: usize, predictive: &[f64]) -> (f64, PolicyNode) {
        if depth == horizon {
            return (0.0, PolicyNode { branches: vec![] });
        }
        let n = model.num_states();
        let num_obs = model.num_observations();
        let mut value = 0.0;
        let mut branches = Vec::with_capacity(num_obs);
        for obs in 0..num_obs {
            let weights: Vec<f64> = (0..n)
                .map(|s| model.observation_fn[s][obs] * predictive[s])
                .collect();
            let p_obs: f64 = weights.iter().sum();
            if p_obs <= 0.0 {
                // Unreachable branch: contributes no value; fill with the
                // first action for determinism.
                branches.push(PolicyBranch {
                    action: 0,
                    child: constant_node(0, depth + 1, horizon, num_obs),
                });
                continue;
            }
            let posterior: Vec<f64> = weights.iter().map(|w| w / p_obs).collect();
            let mut best: Option<(usize, f64, PolicyNode)> = None;
            for action in 0..model.num_actions() {
                let immediate: f64 = (0..n)
                    .map(|s| posterior[s] * model.reward[s][action])
                    .sum();
                let next: Vec<f64> = (0..n)
                    .map(|s2| {
                        (0..n)
                            .map(|s| model.transition[action][s][s2] * posterior[s])
                            .sum()
                    })
                    .collect();
                let (future, child) = solve(model, depth + 1, horizon, &next);
                let q = immediate + future;
                if best.as_ref().map(|(_, v, _)| q > *v).unwrap_or(true) {
                    best = Some((action, q, child));
                }
            }
            let (action, q, child) = best.expect("at least one action");
            value += p_obs * q;
            branches.push(PolicyBranch { action, child });
        }
        (value, PolicyNode { branches })
    }

    let (value, root) = solve(model, 0, horizon, &model.initial_belief);
    Ok((PolicyTree { horizon, root }, value))
}

/// Bayes filter step: condition the belief on taking `action` and then
/// seeing `observation`, i.e. b'(s') proportional to
/// E(o|s') * sum_s T(s'|s,a) b(s).
pub fn belief_update(
    belief: &Belief,
    action: usize,
    observation: usize,
    model: &PomdpModel,
) -> Result<Belief, PlanError> {
    check_model(model)?;
    let n = model.num_states();
    if belief.len() != n {
        return Err(PlanError::BeliefMismatch {
            belief: belief.len(),
            states: n,
        });
    }
    if action >= model.num_actions() {
        return Err(PlanError::BadAction(action));
    }
    if observation >= model.num_observations() {
        return Err(PlanError::BadObservation(observation));
    }
    let b = belief.probs();
    let weights: Vec<f64> = (0..n)
        .map(|s2| {
            let predicted: f64 = (0..n).map(|s| model.transition[action][s][s2] * b[s]).sum();
            model.observation_fn[s2][observation] * predicted
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(PlanError::ImpossibleObservation { observation });
    }
    let probs: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
    Ok(Belief::new(probs).expect("normalized weights form a distribution"))
}

/// A uniformly random complete policy tree, used for randomized spot checks
/// of the optimality-loss bounds.
pub fn random_policy_tree<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: usize,
    num_obs: usize,
    num_actions: usize,
) -> PolicyTree {
    fn build<R: Rng + ?Sized>(
        rng: &mut R,
        depth: usize,
        horizon: usize,
        num_obs: usize,
        num_actions: usize,
    ) -> PolicyNode {
        if depth == horizon {
            return PolicyNode { branches: vec![] };
        }
        let branches = (0..num_obs)
            .map(|_| PolicyBranch {
                action: rng.random_range(0..num_actions),
                child: build(rng, depth + 1, horizon, num_obs, num_actions),
            })
            .collect();
        PolicyNode { branches }
    }
    PolicyTree {
        horizon,
        root: build(rng, 0, horizon, num_obs, num_actions),
    }
}
