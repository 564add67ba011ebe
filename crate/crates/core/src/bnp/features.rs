//! Feature-matrix moves. Shared states (used by at least one other
//! sequence) move by Gibbs flips whose conditional marginalizes the label
//! sequence through the forward algorithm; sequence-unique states are born
//! and killed by Metropolis-Hastings proposals whose prior is the Poisson
//! number of unique states the buffet process implies. Both moves reuse
//! the unnormalized transition weights, so candidate configurations need
//! no fresh transition randomness beyond a newborn state's entries.

use super::{ffbs, gamma_draw, BnpError, Sampler};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// One systematic-scan pass of Gibbs flips over every (sequence, shared
/// state) pair. A flip that would leave a sequence with no active states
/// has zero conditional probability and is skipped outright; states with no
/// other user belong to the birth/death move instead.
pub(crate) fn gibbs_flips(s: &mut Sampler, rng: &mut ChaCha20Rng) {
    let num_seq = s.num_sequences();
    for i in 0..num_seq {
        for k in 0..s.num_states() {
            let others = s.users(k) - usize::from(s.f[i][k]);
            if others == 0 {
                continue;
            }
            let current = s.active(i);
            let (active_on, active_off) = if s.f[i][k] {
                if current.len() == 1 {
                    continue;
                }
                let off: Vec<usize> = current.iter().copied().filter(|&c| c != k).collect();
                (current, off)
            } else {
                let mut on = current.clone();
                let pos = on.partition_point(|&c| c < k);
                on.insert(pos, k);
                (on, current)
            };
            let ll_on = s.seq_marginal_ll(i, &active_on);
            let ll_off = s.seq_marginal_ll(i, &active_off);
            let prior_log_odds = (others as f64).ln() - ((num_seq - others) as f64).ln();
            let a = prior_log_odds + ll_on - ll_off;
            let p_on = 1.0 / (1.0 + (-a).exp());
            s.f[i][k] = rng.random::<f64>() < p_on;
        }
    }
}

/// One birth/death proposal for sequence i's unique states. With a fair
/// coin, either propose a newborn state (emission parameters and
/// transition weights drawn from their priors) or the deletion of a
/// uniformly chosen unique state. Acceptance follows from the Poisson(mass
/// / #sequences) prior on the number of unique states, the marginal
/// likelihood ratio of sequence i, and the proposal asymmetry.
pub(crate) fn birth_death(
    s: &mut Sampler,
    i: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(), BnpError> {
    let lambda = s.hyper.mass / s.num_sequences() as f64;
    let uniques: Vec<usize> = (0..s.num_states())
        .filter(|&k| s.f[i][k] && s.users(k) == 1)
        .collect();
    let u = uniques.len();

    if rng.random::<f64>() < 0.5 {
        // Birth.
        let l = s.num_states();
        let gamma = s.hyper.gamma;
        let kappa = s.hyper.kappa;
        let params = super::emissions::draw_prior(s.hyper, rng)?;
        let eta_draws: Vec<(Vec<f64>, Vec<f64>)> = (0..s.num_sequences())
            .map(|_| {
                let row: Vec<f64> = (0..=l)
                    .map(|c| gamma_draw(rng, gamma + if c == l { kappa } else { 0.0 }))
                    .collect();
                let col: Vec<f64> = (0..l).map(|_| gamma_draw(rng, gamma)).collect();
                (row, col)
            })
            .collect();
        let owner_column = s.log_obs_column(i, &params);

        let active_old = s.active(i);
        let ll_old = s.seq_marginal_ll(i, &active_old);
        let a = active_old.len();
        let t_len = s.data[i].len();
        let mut obs = DMatrix::zeros(t_len, a + 1);
        for (c, &k) in active_old.iter().enumerate() {
            for t in 0..t_len {
                obs[(t, c)] = s.log_obs[i][(t, k)];
            }
        }
        for t in 0..t_len {
            obs[(t, a)] = owner_column[t];
        }
        let mut trans = DMatrix::zeros(a + 1, a + 1);
        for (r_pos, &j) in active_old.iter().enumerate() {
            for (c_pos, &k) in active_old.iter().enumerate() {
                trans[(r_pos, c_pos)] = s.eta[i][(j, k)];
            }
            trans[(r_pos, a)] = eta_draws[i].1[j];
        }
        for (c_pos, &k) in active_old.iter().enumerate() {
            trans[(a, c_pos)] = eta_draws[i].0[k];
        }
        trans[(a, a)] = eta_draws[i].0[l];
        for j in 0..=a {
            let sum: f64 = trans.row(j).iter().sum();
            for c in 0..=a {
                trans[(j, c)] /= sum;
            }
        }
        let ll_new = ffbs::forward_ll(&obs, &trans);

        let log_ratio = lambda.ln() + ll_new - ll_old - 2.0 * ((u + 1) as f64).ln();
        if rng.random::<f64>().ln() < log_ratio {
            s.append_state(i, params, &eta_draws, &owner_column);
        }
    } else {
        // Death.
        if u == 0 {
            return Ok(());
        }
        let victim = uniques[rng.random_range(0..u)];
        let active_old = s.active(i);
        if active_old.len() == 1 {
            return Ok(());
        }
        let ll_old = s.seq_marginal_ll(i, &active_old);
        let active_new: Vec<usize> = active_old.into_iter().filter(|&k| k != victim).collect();
        let ll_new = s.seq_marginal_ll(i, &active_new);
        let log_ratio = 2.0 * (u as f64).ln() + ll_new - ll_old - lambda.ln();
        if rng.random::<f64>().ln() < log_ratio {
            s.remove_state(victim);
        }
    }
    Ok(())
}

/// Delete any state no sequence uses. Flips never orphan a state (a flip
/// to off requires another user) and accepted deaths delete their column
/// immediately, so this is a belt-and-braces pass that keeps the invariant
/// explicit.
pub(crate) fn remove_orphan_states(s: &mut Sampler) {
    let mut k = 0;
    while k < s.num_states() {
        if s.users(k) == 0 {
            s.remove_state(k);
        } else {
            k += 1;
        }
    }
}
