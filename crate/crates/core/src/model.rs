//! POMDP, time-series, belief, and policy types shared across the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{GaussianError, MvGaussian};

/// Tolerance for probability rows summing to one and entries lying in [0, 1].
pub const PROB_TOL: f64 = 1e-9;

/// Rows whose sum is farther than this from 1 (but still within [`PROB_TOL`])
/// get renormalized on deserialization; rows already this close are left
/// untouched so that writing and re-reading a well-formed model is the
/// identity bit for bit.
pub const RENORM_SKIP_TOL: f64 = 1e-12;

/// Tolerance under which two models' observation functions, rewards, and
/// initial beliefs count as equal for comparison purposes.
pub const EQ_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model JSON parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("model is invalid:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("time series {id}: {detail}")]
    BadSeries { id: String, detail: String },
    #[error("belief: {0}")]
    BadBelief(String),
    #[error("policy tree: {0}")]
    BadPolicy(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One failed model constraint, naming the matrix and row it occurred in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Which part of the model: "states", "transition", "observation_fn",
    /// "reward", "initial_belief", "r_max", or "state_factors".
    pub matrix: String,
    /// Action index for transition rows, when applicable.
    pub action: Option<usize>,
    /// Row index within the named matrix, when applicable.
    pub row: Option<usize>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.matrix)?;
        if let Some(a) = self.action {
            write!(f, "[action {a}]")?;
        }
        if let Some(r) = self.row {
            write!(f, "[row {r}]")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// One factor of a product-structured state space, e.g. a directly observed
/// robot or environment component alongside the hidden human component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFactor {
    pub name: String,
    pub labels: Vec<String>,
}

/// A finite POMDP: states, actions, observations, action-indexed transition
/// matrices, an observation function, state-action rewards bounded by
/// `r_max`, and an initial belief.
///
/// Index conventions: `transition[a][s][s2]` is the probability of moving
/// from state `s` to `s2` under action `a`; `observation_fn[s][o]` is the
/// probability of observing `o` in state `s`; `reward[s][a]` is the
/// immediate reward for taking `a` in `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PomdpModel {
    pub states: Vec<String>,
    /// Present when the state space is a product of factors; the factor
    /// order matches the flat index with the first factor slowest, and the
    /// label sizes must multiply to `states.len()`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_factors: Option<Vec<StateFactor>>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub observation_fn: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
    pub r_max: f64,
    pub initial_belief: Vec<f64>,
}

impl PomdpModel {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }
}

fn check_prob_row(
    matrix: &str,
    action: Option<usize>,
    row_idx: usize,
    row: &[f64],
    out: &mut Vec<Violation>,
) {
    let mut sum = 0.0;
    for (j, &p) in row.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            out.push(Violation {
                matrix: matrix.to_string(),
                action,
                row: Some(row_idx),
                detail: format!("entry {j} is {p}, outside [0, 1]"),
            });
            return;
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        out.push(Violation {
            matrix: matrix.to_string(),
            action,
            row: Some(row_idx),
            detail: format!("row sums to {sum:.12}, not 1 within {PROB_TOL:.0e}"),
        });
    }
}

/// Check every structural and stochasticity constraint, returning all
/// violations found (empty means the model is valid).
pub fn validate_model(model: &PomdpModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = model.num_states();
    let na = model.num_actions();
    let no = model.num_observations();

    if n == 0 {
        out.push(Violation {
            matrix: "states".into(),
            action: None,
            row: None,
            detail: "state set is empty".into(),
        });
    }
    if na == 0 {
        out.push(Violation {
            matrix: "actions".into(),
            action: None,
            row: None,
            detail: "action set is empty".into(),
        });
    }
    if no == 0 {
        out.push(Violation {
            matrix: "observations".into(),
            action: None,
            row: None,
            detail: "observation set is empty".into(),
        });
    }

    if let Some(factors) = &model.state_factors {
        let product: usize = factors.iter().map(|f| f.labels.len()).product();
        if product != n {
            out.push(Violation {
                matrix: "state_factors".into(),
                action: None,
                row: None,
                detail: format!("factor sizes multiply to {product}, but there are {n} states"),
            });
        }
    }

    if model.transition.len() != na {
        out.push(Violation {
            matrix: "transition".into(),
            action: None,
            row: None,
            detail: format!("{} action matrices, expected {na}", model.transition.len()),
        });
    }
    for (a, mat) in model.transition.iter().enumerate() {
        if mat.len() != n {
            out.push(Violation {
                matrix: "transition".into(),
                action: Some(a),
                row: None,
                detail: format!("{} rows, expected {n}", mat.len()),
            });
            continue;
        }
        for (s, row) in mat.iter().enumerate() {
            if row.len() != n {
                out.push(Violation {
                    matrix: "transition".into(),
                    action: Some(a),
                    row: Some(s),
                    detail: format!("{} columns, expected {n}", row.len()),
                });
            } else {
                check_prob_row("transition", Some(a), s, row, &mut out);
            }
        }
    }

    if model.observation_fn.len() != n {
        out.push(Violation {
            matrix: "observation_fn".into(),
            action: None,
            row: None,
            detail: format!("{} rows, expected {n}", model.observation_fn.len()),
        });
    }
    for (s, row) in model.observation_fn.iter().enumerate() {
        if row.len() != no {
            out.push(Violation {
                matrix: "observation_fn".into(),
                action: None,
                row: Some(s),
                detail: format!("{} columns, expected {no}", row.len()),
            });
        } else {
            check_prob_row("observation_fn", None, s, row, &mut out);
        }
    }

    if !(model.r_max > 0.0) || !model.r_max.is_finite() {
        out.push(Violation {
            matrix: "r_max".into(),
            action: None,
            row: None,
            detail: format!("must be a positive finite real, got {}", model.r_max),
        });
    }
    if model.reward.len() != n {
        out.push(Violation {
            matrix: "reward".into(),
            action: None,
            row: None,
            detail: format!("{} rows, expected {n}", model.reward.len()),
        });
    }
    for (s, row) in model.reward.iter().enumerate() {
        if row.len() != na {
            out.push(Violation {
                matrix: "reward".into(),
                action: None,
                row: Some(s),
                detail: format!("{} columns, expected {na}", row.len()),
            });
            continue;
        }
        for (a, &r) in row.iter().enumerate() {
            if !(r.abs() <= model.r_max) {
                out.push(Violation {
                    matrix: "reward".into(),
                    action: Some(a),
                    row: Some(s),
                    detail: format!("|{r}| exceeds r_max = {}", model.r_max),
                });
            }
        }
    }

    if model.initial_belief.len() != n {
        out.push(Violation {
            matrix: "initial_belief".into(),
            action: None,
            row: None,
            detail: format!("{} entries, expected {n}", model.initial_belief.len()),
        });
    } else {
        check_prob_row("initial_belief", None, 0, &model.initial_belief, &mut out);
    }

    out
}

/// How far apart two models' transition tensors are, provided everything
/// else about them matches.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaDistance {
    /// max over (a, s, s2) of |T1 - T2|
    Comparable(f64),
    /// The models differ somewhere other than the transitions.
    Incomparable(String),
}

impl AlphaDistance {
    pub fn value(&self) -> Option<f64> {
        match self {
            AlphaDistance::Comparable(v) => Some(*v),
            AlphaDistance::Incomparable(_) => None,
        }
    }
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Maximum entrywise transition difference between two models that share
/// state/action/observation spaces, observation function, rewards, and
/// initial belief (each within [`EQ_TOL`]); otherwise the models are
/// declared incomparable with a reason.
pub fn alpha_distance(m1: &PomdpModel, m2: &PomdpModel) -> AlphaDistance {
    if m1.states != m2.states {
        return AlphaDistance::Incomparable("state spaces differ".into());
    }
    if m1.actions != m2.actions {
        return AlphaDistance::Incomparable("action spaces differ".into());
    }
    if m1.observations != m2.observations {
        return AlphaDistance::Incomparable("observation spaces differ".into());
    }
    if max_abs_diff(&m1.observation_fn, &m2.observation_fn) > EQ_TOL {
        return AlphaDistance::Incomparable("observation functions differ".into());
    }
    if max_abs_diff(&m1.reward, &m2.reward) > EQ_TOL || (m1.r_max - m2.r_max).abs() > EQ_TOL {
        return AlphaDistance::Incomparable("rewards differ".into());
    }
    let b0_diff = m1
        .initial_belief
        .iter()
        .zip(&m2.initial_belief)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if b0_diff > EQ_TOL {
        return AlphaDistance::Incomparable("initial beliefs differ".into());
    }
    let alpha = m1
        .transition
        .iter()
        .zip(&m2.transition)
        .map(|(ta, tb)| max_abs_diff(ta, tb))
        .fold(0.0, f64::max);
    AlphaDistance::Comparable(alpha)
}

/// Serialize a model to pretty JSON. Fails only if the model is invalid.
pub fn serialize_model(model: &PomdpModel) -> Result<String, ModelError> {
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations));
    }
    Ok(serde_json::to_string_pretty(model).expect("model serializes"))
}

/// Parse and validate a model from JSON. Probability rows whose sums drift
/// from 1 by more than [`RENORM_SKIP_TOL`] but at most [`PROB_TOL`] are
/// renormalized; anything worse is rejected with the full violation list.
pub fn deserialize_model(text: &str) -> Result<PomdpModel, ModelError> {
    let mut model: PomdpModel =
        serde_json::from_str(text).map_err(|e| ModelError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    let violations = validate_model(&model);
    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations));
    }
    for mat in &mut model.transition {
        for row in mat.iter_mut() {
            renormalize_row(row);
        }
    }
    for row in &mut model.observation_fn {
        renormalize_row(row);
    }
    renormalize_row(&mut model.initial_belief);
    Ok(model)
}

fn renormalize_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > RENORM_SKIP_TOL {
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
}

/// Gaussian (optionally autoregressive) emission parameters for one hidden
/// state: y_t ~ N(mean + sum_l ar_coeffs[l] * y_{t-1-l}, covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmission {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// One n-by-n lag matrix per autoregressive order; absent or empty for
    /// static emissions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_coeffs: Option<Vec<Vec<Vec<f64>>>>,
}

impl GaussianEmission {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn ar_order(&self) -> usize {
        self.ar_coeffs.as_ref().map_or(0, |c| c.len())
    }

    /// Validate symmetry, positive-definiteness, and AR shape against the
    /// expected autoregressive order.
    pub fn validate(&self, ar_order: usize) -> Result<(), ModelError> {
        let n = self.dim();
        if self.covariance.len() != n || self.covariance.iter().any(|r| r.len() != n) {
            return Err(ModelError::Gaussian(GaussianError::DimensionMismatch {
                mean: n,
                cov: self.covariance.len(),
            }));
        }
        // Builds the Cholesky factor, which checks symmetry and PD-ness.
        self.to_gaussian()?;
        let got = self.ar_order();
        if got != ar_order {
            return Err(ModelError::BadSeries {
                id: "emission".into(),
                detail: format!("has {got} autoregressive lag matrices, expected {ar_order}"),
            });
        }
        if let Some(coeffs) = &self.ar_coeffs {
            for (l, mat) in coeffs.iter().enumerate() {
                if mat.len() != n || mat.iter().any(|r| r.len() != n) {
                    return Err(ModelError::BadSeries {
                        id: "emission".into(),
                        detail: format!("lag matrix {l} is not {n}x{n}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j])
    }

    /// The static Gaussian with this mean and covariance (AR terms, if any,
    /// are not applied here; callers needing conditional densities add the
    /// lag contribution to the mean first).
    pub fn to_gaussian(&self) -> Result<MvGaussian, GaussianError> {
        MvGaussian::new(
            DVector::from_vec(self.mean.clone()),
            &self.covariance_matrix(),
        )
    }
}

/// One recorded multivariate sequence: `values[t]` is the n-dimensional
/// sample at step t. Actions sit between consecutive samples, so there is
/// one fewer than there are rows; latent states, when known (synthetic
/// data), align with rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_states: Option<Vec<usize>>,
}

impl TimeSeries {
    pub fn new(
        id: String,
        values: Vec<Vec<f64>>,
        actions: Option<Vec<usize>>,
        latent_states: Option<Vec<usize>>,
    ) -> Result<Self, ModelError> {
        let series = Self {
            id,
            values,
            actions,
            latent_states,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |detail: String| ModelError::BadSeries {
            id: self.id.clone(),
            detail,
        };
        if self.values.is_empty() {
            return Err(bad("has no samples".into()));
        }
        let n = self.dim();
        if n == 0 {
            return Err(bad("samples have dimension 0".into()));
        }
        for (t, row) in self.values.iter().enumerate() {
            if row.len() != n {
                return Err(bad(format!(
                    "sample at t = {t} has dimension {}, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("sample at t = {t} has a non-finite value")));
            }
        }
        if let Some(actions) = &self.actions {
            if actions.len() != self.len() - 1 {
                return Err(bad(format!(
                    "{} actions for {} samples; expected one per consecutive pair",
                    actions.len(),
                    self.len()
                )));
            }
        }
        if let Some(latent) = &self.latent_states {
            if latent.len() != self.len() {
                return Err(bad(format!(
                    "{} latent states for {} samples",
                    latent.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// Row t as an nalgebra vector.
    pub fn point(&self, t: usize) -> DVector<f64> {
        DVector::from_vec(self.values[t].clone())
    }
}

/// A probability distribution over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::BadBelief("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
            return Err(ModelError::BadBelief("entry outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(ModelError::BadBelief(format!(
                "sums to {sum:.12}, not 1 within {PROB_TOL:.0e}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A deterministic observation-history policy for a fixed horizon, stored
/// as a complete tree: the branch for the step-t observation carries the
/// action taken at step t and the subtree for what comes after.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTree {
    pub horizon: usize,
    pub root: PolicyNode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNode {
    /// Indexed by the observation just received; empty exactly at leaves
    /// (depth = horizon).
    pub branches: Vec<PolicyBranch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBranch {
    pub action: usize,
    pub child: PolicyNode,
}

impl PolicyTree {
    /// Check the tree is complete for `num_observations` branches per node,
    /// has leaves exactly at depth `horizon`, and references valid actions.
    pub fn validate(&self, num_observations: usize, num_actions: usize) -> Result<(), ModelError> {
        if self.horizon == 0 {
            return Err(ModelError::BadPolicy("horizon must be at least 1".into()));
        }
        validate_node(&self.root, 0, self.horizon, num_observations, num_actions)
    }

    /// The constant-action tree: take `action` regardless of history.
    pub fn constant(action: usize, horizon: usize, num_observations: usize) -> Self {
        fn build(depth: usize, horizon: usize, num_obs: usize, action: usize) -> PolicyNode {
            if depth == horizon {
                return PolicyNode { branches: vec![] };
            }
            let branches = (0..num_obs)
                .map(|_| PolicyBranch {
                    action,
                    child: build(depth + 1, horizon, num_obs, action),
                })
                .collect();
            PolicyNode { branches }
        }
        PolicyTree {
            horizon,
            root: build(0, horizon, num_observations, action),
        }
    }
}

fn validate_node(
    node: &PolicyNode,
    depth: usize,
    horizon: usize,
    num_obs: usize,
    num_actions: usize,
) -> Result<(), ModelError> {
    if depth == horizon {
        if !node.branches.is_empty() {
            return Err(ModelError::BadPolicy(format!(
                "node at depth {depth} should be a leaf but has branches"
            )));
        }
        return Ok(());
    }
    if node.branches.len() != num_obs {
        return Err(ModelError::BadPolicy(format!(
            "node at depth {depth} has {} branches, expected {num_obs}",
            node.branches.len()
        )));
    }
    for branch in &node.branches {
        if branch.action >= num_actions {
            return Err(ModelError::BadPolicy(format!(
                "action index {} out of range at depth {depth}",
                branch.action
            )));
        }
        validate_node(&branch.child, depth + 1, horizon, num_obs, num_actions)?;
    }
    Ok(())
}
