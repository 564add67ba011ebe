//! Nonparametric shared-state discovery across multiple time series with a
//! beta-process HMM sampler.
//!
//! Each sequence selects a subset of a shared pool of hidden states (a
//! binary feature matrix under an Indian-buffet-process prior), carries its
//! own sticky-Dirichlet transition rows over the states it uses, and emits
//! through state-specific Gaussian (optionally autoregressive)
//! observations. Inference is MCMC: shared features move by Gibbs flips
//! with labels marginalized through the forward algorithm, sequence-unique
//! states by birth/death Metropolis-Hastings proposals, labels by
//! forward-filter backward-sampling, emission parameters by conjugate
//! Normal-Inverse-Wishart draws, and transition weights through a
//! gamma-augmented representation whose row normalization over the active
//! states gives the transition probabilities.

mod emissions;
mod features;
mod ffbs;
mod logjoint;
pub mod matching;

pub use emissions::{update_emissions, NiwParams};
pub use ffbs::ffbs_labels;
pub use logjoint::sample_log_joint;
pub use matching::{hamming_error, match_states, StateMatching};

use crate::gaussian::{clamp_spd, GaussianError, MvGaussian};
use crate::model::{GaussianEmission, TimeSeries};
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BnpError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence {id} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("sequence {id} has {len} samples, too short for autoregressive order {ar_order}")]
    SeriesTooShort {
        id: String,
        len: usize,
        ar_order: usize,
    },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("sweeps ({sweeps}) must exceed burn-in ({burn_in})")]
    BadSweepCount { sweeps: usize, burn_in: usize },
    #[error("malformed feature matrix: {0}")]
    MalformedFeatures(String),
    #[error("malformed posterior sample: {0}")]
    MalformedSample(String),
    #[error(
        "estimated and reference label sequences have different lengths \
         ({estimated} vs {reference})"
    )]
    LabelLengthMismatch { estimated: usize, reference: usize },
    #[error("label sequences are empty")]
    EmptyLabels,
    #[error("reference labeling uses {0} distinct states; exact matching supports at most 16")]
    TooManyLabels(usize),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Which of the shared hidden states each sequence uses: entry (i, k) is
/// true iff sequence i uses global state k. Every sequence uses at least
/// one state and every state has at least one user.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    flags: Vec<Vec<bool>>,
}

impl FeatureMatrix {
    pub fn new(flags: Vec<Vec<bool>>) -> Result<Self, BnpError> {
        if flags.is_empty() {
            return Err(BnpError::MalformedFeatures("no sequences".into()));
        }
        let num_states = flags[0].len();
        for (i, row) in flags.iter().enumerate() {
            if row.len() != num_states {
                return Err(BnpError::MalformedFeatures(format!(
                    "row {i} has {} columns, row 0 has {num_states}",
                    row.len()
                )));
            }
            if !row.iter().any(|&b| b) {
                return Err(BnpError::MalformedFeatures(format!(
                    "sequence {i} uses no states"
                )));
            }
        }
        for k in 0..num_states {
            if !flags.iter().any(|row| row[k]) {
                return Err(BnpError::MalformedFeatures(format!(
                    "state {k} has no users"
                )));
            }
        }
        Ok(Self { flags })
    }

    pub fn num_sequences(&self) -> usize {
        self.flags.len()
    }

    pub fn num_states(&self) -> usize {
        self.flags[0].len()
    }

    pub fn uses(&self, sequence: usize, state: usize) -> bool {
        self.flags[sequence][state]
    }

    /// Global state indices used by a sequence, ascending.
    pub fn active_states(&self, sequence: usize) -> Vec<usize> {
        (0..self.num_states())
            .filter(|&k| self.flags[sequence][k])
            .collect()
    }

    /// Number of sequences using a state.
    pub fn users(&self, state: usize) -> usize {
        self.flags.iter().filter(|row| row[state]).count()
    }

    pub fn flags(&self) -> &[Vec<bool>] {
        &self.flags
    }
}

/// Priors for the beta-process HMM: `mass` governs how many states the
/// buffet process spawns, `gamma` the Dirichlet concentration of transition
/// rows, `kappa` the extra mass on self-transitions, `ar_order` the number
/// of autoregressive lags in the emission model, and `emission_prior` the
/// conjugate Normal-Inverse-Wishart prior on emission parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BpHmmHyperparams {
    pub mass: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub ar_order: usize,
    pub emission_prior: NiwParams,
}

impl BpHmmHyperparams {
    pub fn validate(&self) -> Result<(), BnpError> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(BnpError::InvalidHyper(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.mass, "mass")?;
        positive(self.gamma, "gamma")?;
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(BnpError::InvalidHyper(format!(
                "kappa must be nonnegative, got {}",
                self.kappa
            )));
        }
        self.emission_prior.validate()
    }
}

/// Scale-adaptive default priors: unit mass and concentration, strong
/// self-transition stickiness, and an emission prior centered on the pooled
/// data mean with scale matrix proportional to the pooled covariance
/// (eigenvalue-floored so constant data still yields a valid prior).
pub fn default_hyperparams(
    dataset: &[TimeSeries],
    ar_order: usize,
) -> Result<BpHmmHyperparams, BnpError> {
    if dataset.is_empty() {
        return Err(BnpError::EmptyDataset);
    }
    let n = dataset[0].dim();
    let total: usize = dataset.iter().map(|s| s.len()).sum();
    let mut mean = DVector::zeros(n);
    for series in dataset {
        if series.dim() != n {
            return Err(BnpError::DimensionMismatch {
                id: series.id.clone(),
                got: series.dim(),
                expected: n,
            });
        }
        for t in 0..series.len() {
            mean += series.point(t);
        }
    }
    mean /= total as f64;
    let mut cov = DMatrix::zeros(n, n);
    for series in dataset {
        for t in 0..series.len() {
            let d = series.point(t) - &mean;
            cov += &d * d.transpose();
        }
    }
    cov /= total as f64;
    let floor = 1e-6 * (1.0 + cov.diagonal().amax());
    let scale_matrix = clamp_spd(&(0.75 * cov), floor);
    Ok(BpHmmHyperparams {
        mass: 1.0,
        gamma: 1.0,
        kappa: 25.0,
        ar_order,
        emission_prior: NiwParams {
            mean,
            scale: 0.01,
            dof: n as f64 + 2.0,
            scale_matrix,
        },
    })
}

/// MCMC schedule: total sweeps, how many initial sweeps to discard, the
/// seed, and how many birth/death proposals each sequence gets per sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub birth_death_proposals_per_sweep: usize,
}

impl FitConfig {
    /// Burn in for half the sweeps, three birth/death proposals per
    /// sequence per sweep.
    pub fn with_defaults(sweeps: usize, seed: u64) -> Self {
        Self {
            sweeps,
            burn_in: sweeps / 2,
            seed,
            birth_death_proposals_per_sweep: 3,
        }
    }

    pub fn validate(&self) -> Result<(), BnpError> {
        if self.sweeps <= self.burn_in {
            return Err(BnpError::BadSweepCount {
                sweeps: self.sweeps,
                burn_in: self.burn_in,
            });
        }
        Ok(())
    }
}

/// One retained MCMC draw: the discovered states with their emission
/// parameters, which sequences use which states, each sequence's transition
/// matrix over its active states (rows and columns ordered by ascending
/// global state index), the per-point state labels (global indices), and
/// the joint log density used to rank draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub num_states: usize,
    pub emissions: Vec<GaussianEmission>,
    pub features: FeatureMatrix,
    pub trans_rows: Vec<DMatrix<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub log_joint: f64,
}

impl PosteriorSample {
    pub fn validate(&self) -> Result<(), BnpError> {
        let bad = |msg: String| Err(BnpError::MalformedSample(msg));
        if self.emissions.len() != self.num_states {
            return bad(format!(
                "{} emissions for {} states",
                self.emissions.len(),
                self.num_states
            ));
        }
        if self.features.num_states() != self.num_states {
            return bad(format!(
                "feature matrix has {} states, sample has {}",
                self.features.num_states(),
                self.num_states
            ));
        }
        let k = self.features.num_sequences();
        if self.trans_rows.len() != k || self.labels.len() != k {
            return bad(format!(
                "{} transition matrices and {} label sequences for {k} sequences",
                self.trans_rows.len(),
                self.labels.len()
            ));
        }
        for i in 0..k {
            let active = self.features.active_states(i);
            let m = &self.trans_rows[i];
            if m.nrows() != active.len() || m.ncols() != active.len() {
                return bad(format!(
                    "sequence {i}: transition matrix is {}x{}, active set has {}",
                    m.nrows(),
                    m.ncols(),
                    active.len()
                ));
            }
            for j in 0..m.nrows() {
                let sum: f64 = m.row(j).iter().sum();
                if (sum - 1.0).abs() > 1e-9 || m.row(j).iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return bad(format!("sequence {i}: transition row {j} is not a distribution"));
                }
            }
            for (t, &z) in self.labels[i].iter().enumerate() {
                if z >= self.num_states || !self.features.uses(i, z) {
                    return bad(format!(
                        "sequence {i}: label at t = {t} is state {z}, not active for it"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// All retained draws plus traces for mixing diagnostics. `map_index`
/// points at the retained draw with the highest joint log density.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub samples: Vec<PosteriorSample>,
    pub map_index: usize,
    pub num_states_trace: Vec<usize>,
    pub log_joint_trace: Vec<f64>,
}

impl FitResult {
    pub fn map(&self) -> &PosteriorSample {
        &self.samples[self.map_index]
    }
}

/// A sequence preprocessed for the sampler: observation vectors plus, for
/// each modeled point (t >= ar order), the regressor [y_{t-1}; ...;
/// y_{t-r}; 1]. The first r points have no emission term and only
/// participate in the label chain.
pub(crate) struct PreparedSeq {
    pub y: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    pub ar_order: usize,
}

impl PreparedSeq {
    pub fn len(&self) -> usize {
        self.y.len()
    }
}

pub(crate) fn prepare_sequences(
    dataset: &[TimeSeries],
    hyper: &BpHmmHyperparams,
) -> Result<Vec<PreparedSeq>, BnpError> {
    if dataset.is_empty() {
        return Err(BnpError::EmptyDataset);
    }
    let n = dataset[0].dim();
    if hyper.emission_prior.dim() != n {
        return Err(BnpError::InvalidPrior(format!(
            "prior dimension {} does not match data dimension {n}",
            hyper.emission_prior.dim()
        )));
    }
    let r = hyper.ar_order;
    let mut out = Vec::with_capacity(dataset.len());
    for series in dataset {
        out.push(prepare_one(series, n, r)?);
    }
    Ok(out)
}

pub(crate) fn prepare_one(
    series: &TimeSeries,
    n: usize,
    r: usize,
) -> Result<PreparedSeq, BnpError> {
    if series.dim() != n {
        return Err(BnpError::DimensionMismatch {
            id: series.id.clone(),
            got: series.dim(),
            expected: n,
        });
    }
    if series.len() <= r {
        return Err(BnpError::SeriesTooShort {
            id: series.id.clone(),
            len: series.len(),
            ar_order: r,
        });
    }
    let d = n * r + 1;
    let y: Vec<DVector<f64>> = (0..series.len()).map(|t| series.point(t)).collect();
    let x: Vec<DVector<f64>> = (0..series.len())
        .map(|t| {
            let mut v = DVector::zeros(d);
            if t >= r {
                for lag in 0..r {
                    let src = &y[t - 1 - lag];
                    for j in 0..n {
                        v[lag * n + j] = src[j];
                    }
                }
                v[d - 1] = 1.0;
            }
            v
        })
        .collect();
    Ok(PreparedSeq { y, x, ar_order: r })
}

/// Emission parameters of one state in regression form: y ~ N(coeff * x,
/// sigma) where x is the lagged regressor (just the constant 1 when the
/// autoregressive order is zero, so coeff's last column is the mean).
#[derive(Debug, Clone)]
pub(crate) struct StateParams {
    pub coeff: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    resid: MvGaussian,
}

impl StateParams {
    pub fn new(coeff: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self, BnpError> {
        let n = coeff.nrows();
        let resid = MvGaussian::new(DVector::zeros(n), &sigma)?;
        Ok(Self { coeff, sigma, resid })
    }

    pub fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let resid = y - &self.coeff * x;
        self.resid
            .log_density(&resid)
            .expect("residual dimension matches by construction")
    }

    pub fn to_emission(&self, ar_order: usize) -> GaussianEmission {
        let n = self.coeff.nrows();
        let mean = (0..n).map(|i| self.coeff[(i, self.coeff.ncols() - 1)]).collect();
        let covariance = (0..n)
            .map(|i| (0..n).map(|j| self.sigma[(i, j)]).collect())
            .collect();
        let ar_coeffs = (ar_order > 0).then(|| {
            (0..ar_order)
                .map(|lag| {
                    (0..n)
                        .map(|i| (0..n).map(|j| self.coeff[(i, lag * n + j)]).collect())
                        .collect()
                })
                .collect()
        });
        GaussianEmission {
            mean,
            covariance,
            ar_coeffs,
        }
    }

    pub fn from_emission(e: &GaussianEmission, ar_order: usize) -> Result<Self, BnpError> {
        e.validate(ar_order)
            .map_err(|err| BnpError::MalformedSample(format!("emission: {err}")))?;
        let n = e.dim();
        let d = n * ar_order + 1;
        let mut coeff = DMatrix::zeros(n, d);
        if let Some(lags) = &e.ar_coeffs {
            for (lag, mat) in lags.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        coeff[(i, lag * n + j)] = mat[i][j];
                    }
                }
            }
        }
        for i in 0..n {
            coeff[(i, d - 1)] = e.mean[i];
        }
        Self::new(coeff, e.covariance_matrix())
    }
}

/// Draw from Gamma(shape, 1), floored away from zero so downstream
/// normalizations and logs stay finite.
pub(crate) fn gamma_draw<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    let dist = Gamma::new(shape, 1.0).expect("positive shape");
    rng.sample(dist).max(1e-300)
}

/// Mutable sampler state. Transition weights are kept unnormalized per
/// sequence over all current global states (`eta`); normalizing a row over
/// a sequence's active set gives its transition probabilities, which is
/// what lets feature flips re-derive transitions for any candidate active
/// set without new randomness.
pub(crate) struct Sampler<'a> {
    pub data: &'a [PreparedSeq],
    pub hyper: &'a BpHmmHyperparams,
    pub f: Vec<Vec<bool>>,
    pub eta: Vec<DMatrix<f64>>,
    pub states: Vec<StateParams>,
    pub labels: Vec<Vec<usize>>,
    /// Per sequence, a T x L matrix of emission log densities under each
    /// current state (zero rows for the first `ar_order` points, which have
    /// no emission term). Rebuilt whenever emission parameters change.
    pub log_obs: Vec<DMatrix<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn init(
        data: &'a [PreparedSeq],
        hyper: &'a BpHmmHyperparams,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, BnpError> {
        let k = data.len();
        let state0 = emissions::draw_prior(hyper, rng)?;
        let mut s = Self {
            data,
            hyper,
            f: vec![vec![true]; k],
            eta: vec![DMatrix::zeros(1, 1); k],
            states: vec![state0],
            labels: data.iter().map(|seq| vec![0; seq.len()]).collect(),
            log_obs: Vec::new(),
        };
        s.resample_eta(rng);
        s.refresh_log_obs();
        Ok(s)
    }

    pub fn num_sequences(&self) -> usize {
        self.data.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn active(&self, i: usize) -> Vec<usize> {
        (0..self.num_states()).filter(|&k| self.f[i][k]).collect()
    }

    pub fn users(&self, k: usize) -> usize {
        self.f.iter().filter(|row| row[k]).count()
    }

    /// Transition probabilities of sequence i over the given state subset:
    /// the eta block renormalized row-wise.
    pub fn trans_matrix(&self, i: usize, active: &[usize]) -> DMatrix<f64> {
        let a = active.len();
        let mut m = DMatrix::from_fn(a, a, |r, c| self.eta[i][(active[r], active[c])]);
        for j in 0..a {
            let sum: f64 = m.row(j).iter().sum();
            for c in 0..a {
                m[(j, c)] /= sum;
            }
        }
        m
    }

    /// Columns of the log-density cache for the given states.
    pub fn log_obs_subset(&self, i: usize, active: &[usize]) -> DMatrix<f64> {
        let t = self.data[i].len();
        DMatrix::from_fn(t, active.len(), |row, c| self.log_obs[i][(row, active[c])])
    }

    /// Marginal log likelihood of sequence i with labels summed out, under
    /// its current transition weights restricted to `active`.
    pub fn seq_marginal_ll(&self, i: usize, active: &[usize]) -> f64 {
        let obs = self.log_obs_subset(i, active);
        let trans = self.trans_matrix(i, active);
        ffbs::forward_ll(&obs, &trans)
    }

    pub fn refresh_log_obs(&mut self) {
        self.log_obs = self
            .data
            .iter()
            .map(|seq| self.log_obs_for(seq))
            .collect();
    }

    fn log_obs_for(&self, seq: &PreparedSeq) -> DMatrix<f64> {
        let t = seq.len();
        let r = seq.ar_order;
        DMatrix::from_fn(t, self.num_states(), |row, k| {
            if row < r {
                0.0
            } else {
                self.states[k].log_density(&seq.y[row], &seq.x[row])
            }
        })
    }

    /// Log-density column a candidate new state would add to the cache of
    /// sequence i.
    pub fn log_obs_column(&self, i: usize, params: &StateParams) -> DVector<f64> {
        let seq = &self.data[i];
        DVector::from_fn(seq.len(), |row, _| {
            if row < seq.ar_order {
                0.0
            } else {
                params.log_density(&seq.y[row], &seq.x[row])
            }
        })
    }

    /// Append a newborn state: active only for sequence `owner`, emission
    /// parameters from `params`, transition weights from `eta_draws`
    /// (per sequence: the new row of length L+1 followed by the new column
    /// of length L), and the owner's cached density column.
    pub fn append_state(
        &mut self,
        owner: usize,
        params: StateParams,
        eta_draws: &[(Vec<f64>, Vec<f64>)],
        owner_column: &DVector<f64>,
    ) {
        let l = self.num_states();
        for (i, row) in self.f.iter_mut().enumerate() {
            row.push(i == owner);
        }
        for (i, (new_row, new_col)) in eta_draws.iter().enumerate() {
            let mut grown = self.eta[i].clone().insert_column(l, 0.0).insert_row(l, 0.0);
            for (c, &v) in new_row.iter().enumerate() {
                grown[(l, c)] = v;
            }
            for (r, &v) in new_col.iter().enumerate() {
                grown[(r, l)] = v;
            }
            self.eta[i] = grown;
        }
        self.states.push(params);
        let columns: Vec<DVector<f64>> = (0..self.num_sequences())
            .map(|i| {
                if i == owner {
                    owner_column.clone()
                } else {
                    self.log_obs_column(i, &self.states[l])
                }
            })
            .collect();
        for (cache, col) in self.log_obs.iter_mut().zip(&columns) {
            let mut grown = cache.clone().insert_column(l, 0.0);
            for (row, &v) in col.iter().enumerate() {
                grown[(row, l)] = v;
            }
            *cache = grown;
        }
    }

    /// Delete state k everywhere. Stale labels pointing at it are parked on
    /// the owning sequence's first remaining active state; the next label
    /// resampling overwrites them.
    pub fn remove_state(&mut self, k: usize) {
        for row in &mut self.f {
            row.remove(k);
        }
        for eta in &mut self.eta {
            *eta = eta.clone().remove_column(k).remove_row(k);
        }
        self.states.remove(k);
        for cache in &mut self.log_obs {
            *cache = cache.clone().remove_column(k);
        }
        for (i, labels) in self.labels.iter_mut().enumerate() {
            let fallback = self.f[i].iter().position(|&b| b).expect("row never emptied");
            for z in labels.iter_mut() {
                *z = match (*z).cmp(&k) {
                    std::cmp::Ordering::Less => *z,
                    std::cmp::Ordering::Equal => fallback,
                    std::cmp::Ordering::Greater => *z - 1,
                };
            }
        }
    }

    /// Draw fresh labels for every sequence given current transitions and
    /// emissions (uniform initial distribution over the active set).
    pub fn resample_labels(&mut self, rng: &mut ChaCha20Rng) {
        for i in 0..self.num_sequences() {
            let active = self.active(i);
            if active.len() == 1 {
                self.labels[i].fill(active[0]);
                continue;
            }
            let obs = self.log_obs_subset(i, &active);
            let trans = self.trans_matrix(i, &active);
            let drawn = ffbs::ffbs_sample(&obs, &trans, rng);
            self.labels[i] = drawn.into_iter().map(|p| active[p]).collect();
        }
    }

    pub fn resample_emissions(&mut self, rng: &mut ChaCha20Rng) -> Result<(), BnpError> {
        self.states = emissions::update_states(
            self.data,
            &self.labels,
            self.num_states(),
            self.hyper,
            rng,
        )?;
        self.refresh_log_obs();
        Ok(())
    }

    /// Redraw transition weights. Active-by-active blocks come from the
    /// conditional given the label transition counts: normalized
    /// Gamma(prior + count) draws scaled by a total drawn from the prior's
    /// row mass, so the block's scale stays exchangeable with the fresh
    /// prior draws that fill every entry outside the block.
    pub fn resample_eta(&mut self, rng: &mut ChaCha20Rng) {
        let l = self.num_states();
        let gamma = self.hyper.gamma;
        let kappa = self.hyper.kappa;
        for i in 0..self.num_sequences() {
            let active = self.active(i);
            let mut counts = vec![vec![0usize; l]; l];
            for w in self.labels[i].windows(2) {
                counts[w[0]][w[1]] += 1;
            }
            let mut eta = DMatrix::from_fn(l, l, |r, c| {
                gamma_draw(rng, gamma + if r == c { kappa } else { 0.0 })
            });
            let row_mass = active.len() as f64 * gamma + kappa;
            for &j in &active {
                let draws: Vec<f64> = active
                    .iter()
                    .map(|&k| {
                        let alpha = gamma + if j == k { kappa } else { 0.0 };
                        gamma_draw(rng, alpha + counts[j][k] as f64)
                    })
                    .collect();
                let total: f64 = draws.iter().sum();
                let scale = gamma_draw(rng, row_mass);
                for (pos, &k) in active.iter().enumerate() {
                    eta[(j, k)] = (draws[pos] / total * scale).max(1e-300);
                }
            }
            self.eta[i] = eta;
        }
    }

    /// Package the current state as a retained draw.
    pub fn snapshot(&self) -> PosteriorSample {
        let trans_rows = (0..self.num_sequences())
            .map(|i| {
                let active = self.active(i);
                self.trans_matrix(i, &active)
            })
            .collect();
        let sample = PosteriorSample {
            num_states: self.num_states(),
            emissions: self
                .states
                .iter()
                .map(|p| p.to_emission(self.hyper.ar_order))
                .collect(),
            features: FeatureMatrix::new(self.f.clone()).expect("sampler keeps rows and columns nonempty"),
            trans_rows,
            labels: self.labels.clone(),
            log_joint: logjoint::state_log_joint(self),
        };
        debug_assert!(sample.validate().is_ok());
        sample
    }

    /// Rebuild sampler state from a posterior sample: transition weights
    /// are reconstructed by scaling each stored transition row with a fresh
    /// prior total (a draw from their conditional given the rows), and
    /// weights outside the active blocks are fresh prior draws.
    pub fn from_sample(
        data: &'a [PreparedSeq],
        hyper: &'a BpHmmHyperparams,
        sample: &PosteriorSample,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, BnpError> {
        sample.validate()?;
        if sample.features.num_sequences() != data.len() {
            return Err(BnpError::MalformedSample(format!(
                "sample covers {} sequences, dataset has {}",
                sample.features.num_sequences(),
                data.len()
            )));
        }
        let states: Vec<StateParams> = sample
            .emissions
            .iter()
            .map(|e| StateParams::from_emission(e, hyper.ar_order))
            .collect::<Result<_, _>>()?;
        let l = sample.num_states;
        let mut eta = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let active = sample.features.active_states(i);
            let mut m = DMatrix::from_fn(l, l, |r, c| {
                gamma_draw(rng, hyper.gamma + if r == c { hyper.kappa } else { 0.0 })
            });
            let row_mass = active.len() as f64 * hyper.gamma + hyper.kappa;
            for (pos_j, &j) in active.iter().enumerate() {
                let scale = gamma_draw(rng, row_mass);
                for (pos_k, &k) in active.iter().enumerate() {
                    m[(j, k)] = (sample.trans_rows[i][(pos_j, pos_k)] * scale).max(1e-300);
                }
            }
            eta.push(m);
        }
        let mut s = Self {
            data,
            hyper,
            f: sample.features.flags().to_vec(),
            eta,
            states,
            labels: sample.labels.clone(),
            log_obs: Vec::new(),
        };
        s.refresh_log_obs();
        Ok(s)
    }
}

/// Run the full MCMC sampler and retain every post-burn-in draw. Output is
/// bit-deterministic in (dataset, hyperparameters, config).
pub fn fit_bphmm(
    dataset: &[TimeSeries],
    hyper: &BpHmmHyperparams,
    config: &FitConfig,
) -> Result<FitResult, BnpError> {
    hyper.validate()?;
    config.validate()?;
    let data = prepare_sequences(dataset, hyper)?;
    let mut rng = rng::master(config.seed);
    let mut s = Sampler::init(&data, hyper, &mut rng)?;
    let mut samples = Vec::with_capacity(config.sweeps - config.burn_in);
    let mut num_states_trace = Vec::with_capacity(config.sweeps);
    let mut log_joint_trace = Vec::with_capacity(config.sweeps);
    for sweep in 0..config.sweeps {
        features::gibbs_flips(&mut s, &mut rng);
        for i in 0..s.num_sequences() {
            for _ in 0..config.birth_death_proposals_per_sweep {
                features::birth_death(&mut s, i, &mut rng)?;
            }
        }
        features::remove_orphan_states(&mut s);
        s.resample_labels(&mut rng);
        s.resample_emissions(&mut rng)?;
        s.resample_eta(&mut rng);
        let sample = s.snapshot();
        num_states_trace.push(sample.num_states);
        log_joint_trace.push(sample.log_joint);
        if sweep >= config.burn_in {
            samples.push(sample);
        }
    }
    let map_index = samples
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1.log_joint
                .partial_cmp(&b.1.log_joint)
                .expect("log joint is never NaN")
        })
        .map(|(i, _)| i)
        .expect("at least one retained sample");
    // max_by keeps the last of equal keys; prefer the earliest.
    let map_index = samples
        .iter()
        .position(|smp| smp.log_joint == samples[map_index].log_joint)
        .unwrap_or(map_index);
    Ok(FitResult {
        samples,
        map_index,
        num_states_trace,
        log_joint_trace,
    })
}

/// One feature-update phase (Gibbs flips over shared states, then
/// birth/death proposals for sequence-unique states) applied to a
/// posterior sample. Returns the updated feature matrix and the possibly
/// grown or shrunk state set's emission parameters.
pub fn sample_features(
    dataset: &[TimeSeries],
    hyper: &BpHmmHyperparams,
    sample: &PosteriorSample,
    birth_death_proposals: usize,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<GaussianEmission>), BnpError> {
    hyper.validate()?;
    let data = prepare_sequences(dataset, hyper)?;
    let mut rng = rng::master(seed);
    let mut s = Sampler::from_sample(&data, hyper, sample, &mut rng)?;
    features::gibbs_flips(&mut s, &mut rng);
    for i in 0..s.num_sequences() {
        for _ in 0..birth_death_proposals {
            features::birth_death(&mut s, i, &mut rng)?;
        }
    }
    features::remove_orphan_states(&mut s);
    let features = FeatureMatrix::new(s.f.clone()).expect("sampler keeps rows and columns nonempty");
    let emissions = s
        .states
        .iter()
        .map(|p| p.to_emission(hyper.ar_order))
        .collect();
    Ok((features, emissions))
}

/// Posterior draw of each sequence's transition matrix over its active
/// states given fixed labels: row j is Dirichlet(gamma + counts(j -> .) +
/// kappa on the self entry).
pub fn sample_trans_rows(
    labels: &[Vec<usize>],
    features: &FeatureMatrix,
    gamma: f64,
    kappa: f64,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>, BnpError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(BnpError::InvalidHyper(format!("gamma must be positive, got {gamma}")));
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(BnpError::InvalidHyper(format!("kappa must be nonnegative, got {kappa}")));
    }
    if labels.len() != features.num_sequences() {
        return Err(BnpError::MalformedSample(format!(
            "{} label sequences for {} feature rows",
            labels.len(),
            features.num_sequences()
        )));
    }
    let mut rng = rng::master(seed);
    let mut out = Vec::with_capacity(labels.len());
    for (i, seq_labels) in labels.iter().enumerate() {
        let active = features.active_states(i);
        let position: std::collections::HashMap<usize, usize> =
            active.iter().enumerate().map(|(p, &k)| (k, p)).collect();
        let a = active.len();
        let mut counts = vec![vec![0usize; a]; a];
        for w in seq_labels.windows(2) {
            let from = *position.get(&w[0]).ok_or_else(|| {
                BnpError::MalformedSample(format!("sequence {i} label {} is not active", w[0]))
            })?;
            let to = *position.get(&w[1]).ok_or_else(|| {
                BnpError::MalformedSample(format!("sequence {i} label {} is not active", w[1]))
            })?;
            counts[from][to] += 1;
        }
        if let Some(&z) = seq_labels.first() {
            if !position.contains_key(&z) {
                return Err(BnpError::MalformedSample(format!(
                    "sequence {i} label {z} is not active"
                )));
            }
        }
        let mut m = DMatrix::zeros(a, a);
        for j in 0..a {
            let draws: Vec<f64> = (0..a)
                .map(|k| {
                    let alpha = gamma + if j == k { kappa } else { 0.0 };
                    gamma_draw(&mut rng, alpha + counts[j][k] as f64)
                })
                .collect();
            let total: f64 = draws.iter().sum();
            for k in 0..a {
                m[(j, k)] = draws[k] / total;
            }
        }
        out.push(m);
    }
    Ok(out)
}
