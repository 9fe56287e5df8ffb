//! Game primitives of the karma economy.
//!
//! A population of agents repeatedly competes pairwise for a resource by
//! bidding karma. An agent's private state is `(u, k)`: an exogenous urgency
//! level `u` following a Markov chain, and an integer karma balance
//! `k ∈ [0, K]`. Feasible bids are `a ∈ {0, ..., k}`. The higher bid wins
//! (ties are fair coin flips), the winner pays its bid into a common pool,
//! and the pool is redistributed uniformly: under average surplus `p̄`, a
//! fraction `f_low = ⌈p̄⌉ − p̄` of agents receives `⌊p̄⌋` and the rest
//! receives `⌈p̄⌉`, preserving the expected surplus exactly.
//!
//! Rewards and transitions are coupled to the whole population through the
//! mean field `(μ, π)`: the population state distribution and bidding
//! policy. All quantities here are exact expectations over that pair;
//! sampled finite-population play lives in [`crate::env`].

use arrayvec::ArrayVec;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on stored distributions.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Surplus values closer than this to an integer are treated as exactly
/// integer, so rounding noise cannot put spurious mass on `m + 1`.
const SURPLUS_SNAP_TOL: f64 = 1e-9;

fn is_simplex(row: &[f64], tol: f64) -> bool {
    row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Serialization schema for [`GameConfig`]; kept separate so the stored JSON
/// uses plain nested arrays and loading always passes through validation.
#[derive(Serialize, Deserialize, Clone)]
struct RawGameConfig {
    urgency_values: Vec<f64>,
    urgency_chain: Vec<Vec<f64>>,
    karma_cap: usize,
    avg_karma: usize,
    discount: f64,
}

/// One karma game instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawGameConfig", into = "RawGameConfig")]
pub struct GameConfig {
    urgency_values: Vec<f64>,
    urgency_chain: Array2<f64>,
    karma_cap: usize,
    avg_karma: usize,
    discount: f64,
    /// Stationary law of the urgency chain, computed at construction.
    urgency_stationary: Array1<f64>,
}

impl GameConfig {
    pub fn new(
        urgency_values: Vec<f64>,
        urgency_chain: Vec<Vec<f64>>,
        karma_cap: usize,
        avg_karma: usize,
        discount: f64,
    ) -> Result<Self> {
        let n = urgency_values.len();
        if n == 0 {
            return Err(Error::InvalidConfig("urgency_values must be non-empty".into()));
        }
        if urgency_values.iter().any(|u| !u.is_finite() || *u < 0.0) {
            return Err(Error::InvalidConfig(
                "urgency values must be finite and non-negative".into(),
            ));
        }
        if urgency_chain.len() != n || urgency_chain.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "urgency_chain must be {n}x{n} to match urgency_values"
            )));
        }
        for (i, row) in urgency_chain.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(format!(
                    "urgency_chain row {i} has entries outside [0, 1]"
                )));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidConfig(format!(
                    "urgency_chain row {i} does not sum to 1"
                )));
            }
        }
        if karma_cap < 1 {
            return Err(Error::InvalidConfig("karma_cap must be at least 1".into()));
        }
        if avg_karma == 0 || avg_karma > karma_cap {
            return Err(Error::InvalidConfig(
                "avg_karma must satisfy 0 < avg_karma <= karma_cap".into(),
            ));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidConfig("discount must lie in [0, 1)".into()));
        }

        let chain = Array2::from_shape_fn((n, n), |(i, j)| urgency_chain[i][j]);
        if !strongly_connected(&chain) {
            return Err(Error::InvalidConfig("urgency_chain is not irreducible".into()));
        }
        let urgency_stationary = chain_stationary(&chain);
        if urgency_stationary.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidConfig(
                "urgency_chain stationary distribution is not strictly positive".into(),
            ));
        }

        Ok(Self {
            urgency_values,
            urgency_chain: chain,
            karma_cap,
            avg_karma,
            discount,
            urgency_stationary,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn urgency_values(&self) -> &[f64] {
        &self.urgency_values
    }

    pub fn urgency_chain(&self) -> &Array2<f64> {
        &self.urgency_chain
    }

    /// Stationary distribution of the urgency chain.
    pub fn urgency_stationary(&self) -> &Array1<f64> {
        &self.urgency_stationary
    }

    pub fn karma_cap(&self) -> usize {
        self.karma_cap
    }

    pub fn avg_karma(&self) -> usize {
        self.avg_karma
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn num_urgency(&self) -> usize {
        self.urgency_values.len()
    }

    /// Number of distinct karma balances, `K + 1`.
    pub fn num_karma(&self) -> usize {
        self.karma_cap + 1
    }

    /// Number of bids, `K + 1` (bid `a` is feasible at karma `k` iff `a <= k`).
    pub fn num_bids(&self) -> usize {
        self.karma_cap + 1
    }

    pub fn num_states(&self) -> usize {
        self.num_urgency() * self.num_karma()
    }

    /// Flat state index for `(u, k)`, row-major in urgency.
    pub fn state_index(&self, urgency_index: usize, karma: usize) -> usize {
        debug_assert!(urgency_index < self.num_urgency() && karma <= self.karma_cap);
        urgency_index * self.num_karma() + karma
    }

    pub fn state_from_index(&self, index: usize) -> AgentState {
        AgentState {
            urgency_index: index / self.num_karma(),
            karma: index % self.num_karma(),
        }
    }

    /// Largest immediate reward achievable in the game.
    pub fn max_reward(&self) -> f64 {
        self.urgency_values.iter().cloned().fold(0.0, f64::max)
    }
}

impl TryFrom<RawGameConfig> for GameConfig {
    type Error = Error;
    fn try_from(raw: RawGameConfig) -> Result<Self> {
        GameConfig::new(
            raw.urgency_values,
            raw.urgency_chain,
            raw.karma_cap,
            raw.avg_karma,
            raw.discount,
        )
    }
}

impl From<GameConfig> for RawGameConfig {
    fn from(cfg: GameConfig) -> Self {
        RawGameConfig {
            urgency_values: cfg.urgency_values,
            urgency_chain: cfg
                .urgency_chain
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            karma_cap: cfg.karma_cap,
            avg_karma: cfg.avg_karma,
            discount: cfg.discount,
        }
    }
}

/// All states of `chain` reach all states through positive-probability edges.
fn strongly_connected(chain: &Array2<f64>) -> bool {
    let n = chain.nrows();
    for start in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if chain[[i, j]] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return false;
        }
    }
    true
}

/// Stationary distribution of an irreducible row-stochastic matrix via
/// damped power iteration (the half-lazy chain has the same fixed point and
/// cannot oscillate on periodic chains).
fn chain_stationary(chain: &Array2<f64>) -> Array1<f64> {
    let n = chain.nrows();
    let mut mu = Array1::from_elem(n, 1.0 / n as f64);
    let mut next = Array1::zeros(n);
    for _ in 0..100_000 {
        next.fill(0.0);
        for i in 0..n {
            let m = mu[i];
            if m == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += m * chain[[i, j]];
            }
        }
        let residual: f64 = mu.iter().zip(next.iter()).map(|(a, b)| (a - b).abs()).sum();
        for j in 0..n {
            mu[j] = 0.5 * mu[j] + 0.5 * next[j];
        }
        if residual <= 1e-14 {
            break;
        }
    }
    let total: f64 = mu.sum();
    mu.mapv_into(|v| v / total)
}

/// Private state of one agent: urgency level index and karma balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    /// Index into `GameConfig::urgency_values`.
    pub urgency_index: usize,
    /// Karma balance in `[0, K]`.
    pub karma: usize,
}

impl AgentState {
    pub fn new(urgency_index: usize, karma: usize) -> Self {
        Self { urgency_index, karma }
    }
}

/// The mean field `(μ, π)`: population state distribution and population
/// bidding policy. `mu` has shape `(|U|, K+1)`; `pi` has shape
/// `(|U|, K+1, K+1)` where `pi[u, k, ..]` is a distribution over bids with
/// zero mass above `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub mu: Array2<f64>,
    pub pi: Array3<f64>,
}

impl MeanField {
    /// Uniform state distribution and uniform feasible-bid policy.
    pub fn uniform(cfg: &GameConfig) -> Self {
        let nu = cfg.num_urgency();
        let nk = cfg.num_karma();
        let mu = Array2::from_elem((nu, nk), 1.0 / (nu * nk) as f64);
        let pi = uniform_feasible_policy(cfg);
        Self { mu, pi }
    }

    /// Karma point mass at `k̄` coupled with the stationary urgency law,
    /// uniform feasible-bid policy.
    pub fn at_mean_karma(cfg: &GameConfig) -> Self {
        let nu = cfg.num_urgency();
        let nk = cfg.num_karma();
        let mut mu = Array2::zeros((nu, nk));
        for u in 0..nu {
            mu[[u, cfg.avg_karma()]] = cfg.urgency_stationary()[u];
        }
        Self {
            mu,
            pi: uniform_feasible_policy(cfg),
        }
    }

    pub fn validate(&self, cfg: &GameConfig) -> Result<()> {
        let nu = cfg.num_urgency();
        let nk = cfg.num_karma();
        if self.mu.dim() != (nu, nk) {
            return Err(Error::ShapeMismatch(format!(
                "mu has shape {:?}, expected ({nu}, {nk})",
                self.mu.dim()
            )));
        }
        if self.pi.dim() != (nu, nk, nk) {
            return Err(Error::ShapeMismatch(format!(
                "pi has shape {:?}, expected ({nu}, {nk}, {nk})",
                self.pi.dim()
            )));
        }
        if self.mu.iter().any(|&p| p < 0.0) || (self.mu.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidConfig("mu is not a probability distribution".into()));
        }
        for u in 0..nu {
            for k in 0..nk {
                let row = self.pi.slice(ndarray::s![u, k, ..]);
                let row = row.as_slice().expect("pi rows are contiguous");
                if !is_simplex(row, SIMPLEX_TOL) {
                    return Err(Error::InvalidConfig(format!(
                        "pi[{u}, {k}] is not a probability distribution"
                    )));
                }
                if row[k + 1..].iter().any(|&p| p != 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "pi[{u}, {k}] places mass on infeasible bids"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Population mean karma `Σ μ[u,k]·k`.
    pub fn mean_karma(&self) -> f64 {
        self.mu
            .rows()
            .into_iter()
            .flat_map(|r| r.into_iter().cloned().collect::<Vec<_>>())
            .zip((0..self.mu.ncols()).cycle())
            .map(|(m, k)| m * k as f64)
            .sum()
    }
}

/// Uniform distribution over feasible bids at every state.
pub fn uniform_feasible_policy(cfg: &GameConfig) -> Array3<f64> {
    let nu = cfg.num_urgency();
    let nk = cfg.num_karma();
    let mut pi = Array3::zeros((nu, nk, nk));
    for u in 0..nu {
        for k in 0..nk {
            let w = 1.0 / (k + 1) as f64;
            for a in 0..=k {
                pi[[u, k, a]] = w;
            }
        }
    }
    pi
}

/// Law of the bid faced by an ego agent: a distribution over `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BidDistribution {
    pub probs: Vec<f64>,
}

impl BidDistribution {
    pub fn point_mass(bid: usize, num_bids: usize) -> Self {
        let mut probs = vec![0.0; num_bids];
        probs[bid] = 1.0;
        Self { probs }
    }
}

/// Aggregate opponent bid law `ν[a'] = Σ_{u',k'} μ[u',k'] π[a'|u',k']`.
pub fn opponent_bid_distribution(mf: &MeanField) -> BidDistribution {
    let (nu, nk, nb) = mf.pi.dim();
    let mut probs = vec![0.0; nb];
    for u in 0..nu {
        for k in 0..nk {
            let m = mf.mu[[u, k]];
            if m == 0.0 {
                continue;
            }
            for a in 0..nb {
                probs[a] += m * mf.pi[[u, k, a]];
            }
        }
    }
    debug_assert!(is_simplex(&probs, 1e-9));
    BidDistribution { probs }
}

/// Probability of winning with bid `a` against an opponent bidding from
/// `nu`: strictly higher bids win, equal bids win with probability one half.
pub fn win_probability(a: usize, nu: &BidDistribution) -> f64 {
    assert!(a < nu.probs.len(), "bid {a} out of range");
    let below: f64 = nu.probs[..a].iter().sum();
    below + 0.5 * nu.probs[a]
}

/// Expected immediate reward `u · P[win | a]` for bidding `a` in `state`
/// against the population at `mf`. Independent of the agent's own karma.
pub fn reward(state: AgentState, a: usize, mf: &MeanField, cfg: &GameConfig) -> f64 {
    assert!(a <= state.karma, "infeasible bid {a} at karma {}", state.karma);
    let nu = opponent_bid_distribution(mf);
    cfg.urgency_values()[state.urgency_index] * win_probability(a, &nu)
}

/// Average surplus per agent and round,
/// `p̄ = Σ_{u,k} μ[u,k] Σ_a π[a|u,k] · P[win|a] · a`.
pub fn surplus(mf: &MeanField) -> f64 {
    let nu_law = opponent_bid_distribution(mf);
    let (nu, nk, nb) = mf.pi.dim();
    let win: Vec<f64> = (0..nb).map(|a| win_probability(a, &nu_law)).collect();
    let mut p_bar = 0.0;
    for u in 0..nu {
        for k in 0..nk {
            let m = mf.mu[[u, k]];
            if m == 0.0 {
                continue;
            }
            for a in 0..=k {
                p_bar += m * mf.pi[[u, k, a]] * win[a] * a as f64;
            }
        }
    }
    p_bar
}

/// Floor/ceiling redistribution split for surplus `p̄`: a fraction `f_low`
/// of agents receives `⌊p̄⌋`, the rest receives `⌈p̄⌉`, so the expected
/// grant is exactly `p̄`.
pub fn redistribution_fractions(p_bar: f64) -> (f64, f64) {
    let (_, _, f_low, f_high) = surplus_grants(p_bar);
    (f_low, f_high)
}

/// Grant levels and fractions for surplus `p̄`, with near-integer values
/// snapped to the integer so the high grant never exceeds it spuriously.
pub(crate) fn surplus_grants(p_bar: f64) -> (usize, usize, f64, f64) {
    assert!(p_bar >= 0.0 && p_bar.is_finite(), "surplus must be non-negative");
    let nearest = p_bar.round();
    if (p_bar - nearest).abs() <= SURPLUS_SNAP_TOL {
        let m = nearest as usize;
        return (m, m, 0.0, 1.0);
    }
    let low = p_bar.floor();
    let f_low = p_bar.ceil() - p_bar;
    (low as usize, low as usize + 1, f_low, 1.0 - f_low)
}

/// Karma transition distribution for bidding `a` at balance `k` against the
/// population at `mf`, as a dense vector over `0..=K`.
///
/// Winners pay their bid, everyone receives the floor or ceiling grant, and
/// balances that would exceed `K` saturate at `K` (mass merges at the cap).
pub fn karma_kernel(k: usize, a: usize, mf: &MeanField, cfg: &GameConfig) -> Vec<f64> {
    assert!(a <= k, "infeasible bid {a} at karma {k}");
    let frozen = FrozenMeanField::new(cfg, mf);
    let mut dense = vec![0.0; cfg.num_karma()];
    for &(kp, p) in frozen.karma_support(k, a).iter() {
        dense[kp] += p;
    }
    dense
}

/// Full state transition `p[u⁺,k⁺ | u,k,a] = φ[u⁺|u] · κ[k⁺|k,a]`,
/// shape `(|U|, K+1)`.
pub fn state_transition(
    state: AgentState,
    a: usize,
    mf: &MeanField,
    cfg: &GameConfig,
) -> Array2<f64> {
    assert!(a <= state.karma, "infeasible bid {a} at karma {}", state.karma);
    let kappa = karma_kernel(state.karma, a, mf, cfg);
    let nu = cfg.num_urgency();
    let nk = cfg.num_karma();
    let mut out = Array2::zeros((nu, nk));
    for up in 0..nu {
        let phi = cfg.urgency_chain()[[state.urgency_index, up]];
        if phi == 0.0 {
            continue;
        }
        for kp in 0..nk {
            out[[up, kp]] = phi * kappa[kp];
        }
    }
    out
}

/// At most four `(k⁺, probability)` support points of the karma kernel.
pub type KarmaSupport = ArrayVec<(usize, f64), 4>;

/// A mean field frozen into the per-bid competition statistics every solver
/// and simulator needs: the opponent bid law, win probabilities, surplus,
/// grant split, and the (at most four-point) karma kernel per `(k, a)`.
#[derive(Debug, Clone)]
pub struct FrozenMeanField {
    num_karma: usize,
    /// Opponent bid law ν.
    pub nu: Vec<f64>,
    /// `win[a] = P[win | a]` against ν.
    pub win: Vec<f64>,
    /// Average surplus p̄.
    pub p_bar: f64,
    /// Low/high grant levels and their population fractions.
    pub grant_low: usize,
    pub grant_high: usize,
    pub f_low: f64,
    pub f_high: f64,
    /// `kappa[k * (K+1) + a]`, valid for `a <= k`.
    kappa: Vec<KarmaSupport>,
    /// Expected rewards `reward[u][a] = u_val · win[a]`.
    reward: Array2<f64>,
}

impl FrozenMeanField {
    pub fn new(cfg: &GameConfig, mf: &MeanField) -> Self {
        let nk = cfg.num_karma();
        let nu_law = opponent_bid_distribution(mf);

        // Prefix sums give every win probability in one pass.
        let mut win = vec![0.0; nk];
        let mut below = 0.0;
        for a in 0..nk {
            win[a] = below + 0.5 * nu_law.probs[a];
            below += nu_law.probs[a];
        }

        let mut p_bar = 0.0;
        let (nu_dim, _, _) = mf.pi.dim();
        for u in 0..nu_dim {
            for k in 0..nk {
                let m = mf.mu[[u, k]];
                if m == 0.0 {
                    continue;
                }
                for a in 0..=k {
                    p_bar += m * mf.pi[[u, k, a]] * win[a] * a as f64;
                }
            }
        }

        let (grant_low, grant_high, f_low, f_high) = surplus_grants(p_bar);

        let cap = nk - 1;
        let mut kappa = vec![KarmaSupport::new(); nk * nk];
        for k in 0..nk {
            for a in 0..=k {
                let gamma_win = win[a];
                let support = &mut kappa[k * nk + a];
                let mut push = |target: usize, p: f64| {
                    if p == 0.0 {
                        return;
                    }
                    let t = target.min(cap);
                    for entry in support.iter_mut() {
                        if entry.0 == t {
                            entry.1 += p;
                            return;
                        }
                    }
                    support.push((t, p));
                };
                push(k - a + grant_low, gamma_win * f_low);
                push(k - a + grant_high, gamma_win * f_high);
                push(k + grant_low, (1.0 - gamma_win) * f_low);
                push(k + grant_high, (1.0 - gamma_win) * f_high);
            }
        }

        let reward = Array2::from_shape_fn((cfg.num_urgency(), nk), |(u, a)| {
            cfg.urgency_values()[u] * win[a]
        });

        Self {
            num_karma: nk,
            nu: nu_law.probs,
            win,
            p_bar,
            grant_low,
            grant_high,
            f_low,
            f_high,
            kappa,
            reward,
        }
    }

    pub fn win_probability(&self, a: usize) -> f64 {
        self.win[a]
    }

    pub fn reward(&self, urgency_index: usize, a: usize) -> f64 {
        self.reward[[urgency_index, a]]
    }

    /// Support of the karma kernel at `(k, a)`.
    pub fn karma_support(&self, k: usize, a: usize) -> &KarmaSupport {
        debug_assert!(a <= k, "infeasible bid {a} at karma {k}");
        &self.kappa[k * self.num_karma + a]
    }

    /// Samples `k⁺` from the karma kernel.
    pub fn sample_next_karma(&self, k: usize, a: usize, rng: &mut impl Rng) -> usize {
        let support = self.karma_support(k, a);
        let mut r: f64 = rng.random();
        for &(kp, p) in support.iter() {
            if r < p {
                return kp;
            }
            r -= p;
        }
        support.last().expect("non-empty kernel support").0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::s;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::testutil::{random_mean_field, small_config};

    /// Mean field with all mass at `(u, k)` and everyone bidding `bid`.
    fn point_mass_mf(cfg: &GameConfig, u: usize, k: usize, bid: usize) -> MeanField {
        let nu = cfg.num_urgency();
        let nk = cfg.num_karma();
        let mut mu = Array2::zeros((nu, nk));
        mu[[u, k]] = 1.0;
        let mut pi = Array3::zeros((nu, nk, nk));
        for uu in 0..nu {
            for kk in 0..nk {
                pi[[uu, kk, bid.min(kk)]] = 1.0;
            }
        }
        MeanField { mu, pi }
    }

    #[test]
    fn config_rejects_bad_rows() {
        let err = GameConfig::new(
            vec![1.0],
            vec![vec![0.9]],
            4,
            2,
            0.9,
        );
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_rejects_reducible_chain() {
        let err = GameConfig::new(
            vec![1.0, 2.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            4,
            2,
            0.9,
        );
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_rejects_bad_scalars() {
        assert!(GameConfig::new(vec![1.0], vec![vec![1.0]], 4, 5, 0.9).is_err());
        assert!(GameConfig::new(vec![1.0], vec![vec![1.0]], 4, 0, 0.9).is_err());
        assert!(GameConfig::new(vec![1.0], vec![vec![1.0]], 4, 2, 1.0).is_err());
        assert!(GameConfig::new(vec![1.0], vec![vec![1.0]], 0, 1, 0.9).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small_config();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = GameConfig::from_json(&json).unwrap();
        assert_eq!(back.urgency_values(), cfg.urgency_values());
        assert_eq!(back.karma_cap(), cfg.karma_cap());
    }

    #[test]
    fn bundled_instances_load() {
        let two = GameConfig::from_json(include_str!("../instances/instance-2u.json")).unwrap();
        assert_eq!(two.urgency_values(), &[1.0, 5.0]);
        assert_eq!(two.karma_cap(), 40);
        assert_eq!(two.avg_karma(), 10);
        assert_abs_diff_eq!(two.discount(), 0.98);
        let three = GameConfig::from_json(include_str!("../instances/instance-3u.json")).unwrap();
        assert_eq!(three.urgency_values(), &[1.0, 1.0, 10.0]);
        assert_eq!(three.num_urgency(), 3);
        // Stationary law of the three-level chain is strictly positive.
        assert!(three.urgency_stationary().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn opponent_law_point_mass() {
        let cfg = small_config();
        let mf = point_mass_mf(&cfg, 0, 3, 0);
        let nu = opponent_bid_distribution(&mf);
        assert_eq!(nu.probs[0], 1.0);
        assert!(nu.probs[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn opponent_law_two_equal_masses() {
        let cfg = small_config();
        let nk = cfg.num_karma();
        let mut mu = Array2::zeros((2, nk));
        mu[[0, 1]] = 0.5;
        mu[[1, 3]] = 0.5;
        let mut pi = uniform_feasible_policy(&cfg);
        pi.slice_mut(s![0, 1, ..]).fill(0.0);
        pi[[0, 1, 1]] = 1.0;
        pi.slice_mut(s![1, 3, ..]).fill(0.0);
        pi[[1, 3, 3]] = 1.0;
        let mf = MeanField { mu, pi };
        let nu = opponent_bid_distribution(&mf);
        assert_abs_diff_eq!(nu.probs[1], 0.5);
        assert_abs_diff_eq!(nu.probs[3], 0.5);
        assert_abs_diff_eq!(nu.probs[0], 0.0);
    }

    #[test]
    fn opponent_law_matches_brute_force() {
        let cfg = GameConfig::new(
            vec![1.0, 2.0, 3.0],
            vec![
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.3, 0.4],
                vec![0.5, 0.25, 0.25],
            ],
            3,
            1,
            0.9,
        )
        .unwrap();
        let mut rng = crate::rng::derive_rng(11, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        let nu = opponent_bid_distribution(&mf);
        for a in 0..cfg.num_bids() {
            let mut expected = 0.0;
            for u in 0..cfg.num_urgency() {
                for k in 0..cfg.num_karma() {
                    expected += mf.mu[[u, k]] * mf.pi[[u, k, a]];
                }
            }
            assert_abs_diff_eq!(nu.probs[a], expected, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(nu.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn win_probability_cases() {
        let delta3 = BidDistribution::point_mass(3, 6);
        assert_eq!(win_probability(5, &delta3), 1.0);
        let delta2 = BidDistribution::point_mass(2, 6);
        assert_eq!(win_probability(2, &delta2), 0.5);
        let uniform3 = BidDistribution {
            probs: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0],
        };
        assert_abs_diff_eq!(win_probability(1, &uniform3), 0.5, epsilon = 1e-15);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn win_probability_rejects_out_of_range() {
        let nu = BidDistribution::point_mass(0, 3);
        win_probability(3, &nu);
    }

    #[test]
    fn reward_cases() {
        let cfg = small_config();
        // Population bids 4 everywhere it can; ego bidding 0 loses surely.
        let mf = point_mass_mf(&cfg, 0, 4, 4);
        assert_eq!(reward(AgentState::new(0, 2), 0, &mf, &cfg), 0.0);
        // Tie at bid 4 gives win probability one half; urgency 5 pays 2.5.
        assert_abs_diff_eq!(reward(AgentState::new(1, 4), 4, &mf, &cfg), 2.5);
    }

    #[test]
    fn reward_matches_brute_force() {
        let cfg = small_config();
        let mut rng = crate::rng::derive_rng(13, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        for u in 0..cfg.num_urgency() {
            for a in 0..cfg.num_bids() {
                // P[win] expanded as the double sum over opponent states and bids.
                let mut p_win = 0.0;
                for uo in 0..cfg.num_urgency() {
                    for ko in 0..cfg.num_karma() {
                        for ao in 0..cfg.num_bids() {
                            let w = if a > ao {
                                1.0
                            } else if a == ao {
                                0.5
                            } else {
                                0.0
                            };
                            p_win += mf.mu[[uo, ko]] * mf.pi[[uo, ko, ao]] * w;
                        }
                    }
                }
                let expected = cfg.urgency_values()[u] * p_win;
                let got = reward(AgentState::new(u, cfg.karma_cap()), a, &mf, &cfg);
                assert_abs_diff_eq!(got, expected, epsilon = 1e-13);
            }
        }
    }

    #[test]
    #[should_panic(expected = "infeasible bid")]
    fn reward_rejects_infeasible_bid() {
        let cfg = small_config();
        let mf = MeanField::uniform(&cfg);
        reward(AgentState::new(0, 1), 2, &mf, &cfg);
    }

    #[test]
    fn surplus_cases() {
        let cfg = small_config();
        let everyone_bids_zero = point_mass_mf(&cfg, 0, 3, 0);
        assert_eq!(surplus(&everyone_bids_zero), 0.0);
        // Single state, deterministic bid 2: always a tie, win prob 0.5.
        let tie_at_two = point_mass_mf(&cfg, 1, 3, 2);
        assert_abs_diff_eq!(surplus(&tie_at_two), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn surplus_matches_brute_force() {
        let cfg = small_config();
        let mut rng = crate::rng::derive_rng(17, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        let nu = opponent_bid_distribution(&mf);
        let mut expected = 0.0;
        for u in 0..cfg.num_urgency() {
            for k in 0..cfg.num_karma() {
                for a in 0..=k {
                    expected +=
                        mf.mu[[u, k]] * mf.pi[[u, k, a]] * win_probability(a, &nu) * a as f64;
                }
            }
        }
        let got = surplus(&mf);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-13);
        assert!(got >= 0.0 && got <= cfg.karma_cap() as f64);
    }

    #[test]
    fn redistribution_fraction_cases() {
        assert_eq!(redistribution_fractions(1.0), (0.0, 1.0));
        let (fl, fh) = redistribution_fractions(0.3);
        assert_abs_diff_eq!(fl, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fh, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(fl * 0.0 + fh * 1.0, 0.3, epsilon = 1e-12);
        let (fl, fh) = redistribution_fractions(2.75);
        assert_abs_diff_eq!(fl, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fh, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(fl * 2.0 + fh * 3.0, 2.75, epsilon = 1e-12);
    }

    #[test]
    fn redistribution_snaps_near_integers() {
        let (low, high, f_low, f_high) = surplus_grants(2.0 + 1e-12);
        assert_eq!((low, high), (2, 2));
        assert_eq!((f_low, f_high), (0.0, 1.0));
    }

    #[test]
    fn karma_kernel_hand_case() {
        // Population all at karma 4 bidding 2: ego bidding 2 ties (win prob
        // one half) and p̄ = 0.5 · 2 = 1, an integer grant. Win: 5-2+1 = 4;
        // lose: 5+1 = 6.
        let cfg = GameConfig::new(
            vec![1.0, 5.0],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            8,
            4,
            0.9,
        )
        .unwrap();
        let mf = point_mass_mf(&cfg, 0, 4, 2);
        let kappa = karma_kernel(5, 2, &mf, &cfg);
        assert_abs_diff_eq!(kappa[4], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(kappa[6], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(kappa.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn karma_kernel_certain_loss_integer_surplus() {
        // Everyone else bids 4 (tie among themselves: p̄ = 0.5·4 = 2); ego
        // bids 0 and loses surely, landing exactly at k + 2.
        let cfg = small_config();
        let mf = point_mass_mf(&cfg, 0, 4, 4);
        let kappa = karma_kernel(1, 0, &mf, &cfg);
        assert_eq!(kappa[3], 1.0);
        assert_eq!(kappa.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn karma_kernel_matches_case_table() {
        let cfg = small_config();
        let mut rng = crate::rng::derive_rng(23, &[]);
        for _ in 0..50 {
            let mf = random_mean_field(&cfg, &mut rng);
            let nu = opponent_bid_distribution(&mf);
            let p_bar = surplus(&mf);
            let (f_low, f_high) = redistribution_fractions(p_bar);
            let (low, high, _, _) = surplus_grants(p_bar);
            let k = rng.random_range(0..cfg.num_karma());
            let a = rng.random_range(0..=k);
            let gamma_win = win_probability(a, &nu);
            let cap = cfg.karma_cap();
            let mut expected = vec![0.0; cfg.num_karma()];
            expected[(k - a + low).min(cap)] += gamma_win * f_low;
            expected[(k - a + high).min(cap)] += gamma_win * f_high;
            expected[(k + low).min(cap)] += (1.0 - gamma_win) * f_low;
            expected[(k + high).min(cap)] += (1.0 - gamma_win) * f_high;
            let got = karma_kernel(k, a, &mf, &cfg);
            for kp in 0..cfg.num_karma() {
                assert_abs_diff_eq!(got[kp], expected[kp], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn kernel_mean_karma_drift_is_minus_payment_plus_surplus() {
        let cfg = GameConfig::new(
            vec![1.0, 5.0],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            // Large cap so no branch clamps for interior k.
            20,
            10,
            0.9,
        )
        .unwrap();
        let mut rng = crate::rng::derive_rng(29, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        let frozen = FrozenMeanField::new(&cfg, &mf);
        let k = 10;
        for a in 0..=3 {
            let kappa = karma_kernel(k, a, &mf, &cfg);
            let mean: f64 = kappa.iter().enumerate().map(|(kp, p)| kp as f64 * p).sum();
            let expected_drift = -frozen.win_probability(a) * a as f64 + frozen.p_bar;
            assert_abs_diff_eq!(mean - k as f64, expected_drift, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_karma_preserved_without_clamping() {
        // Support kept strictly inside (0, K) so no clamping branch fires.
        let cfg = GameConfig::new(
            vec![1.0, 5.0],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            30,
            10,
            0.9,
        )
        .unwrap();
        let mut rng = crate::rng::derive_rng(31, &[]);
        let nu = cfg.num_urgency();
        let nk = cfg.num_karma();
        // Mass only on karma 10..=15, bids at most 3: all targets interior.
        let mut mu = Array2::zeros((nu, nk));
        for u in 0..nu {
            for k in 10..=15 {
                mu[[u, k]] = rng.random::<f64>() + 0.1;
            }
        }
        let total = mu.sum();
        mu.mapv_inplace(|v| v / total);
        let mut pi = Array3::zeros((nu, nk, nk));
        for u in 0..nu {
            for k in 0..nk {
                let max_bid = 3.min(k);
                let mut row: Vec<f64> = (0..=max_bid).map(|_| rng.random::<f64>() + 0.1).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                for (a, p) in row.into_iter().enumerate() {
                    pi[[u, k, a]] = p;
                }
            }
        }
        let mf = MeanField { mu, pi };
        mf.validate(&cfg).unwrap();

        let mut drift = 0.0;
        for u in 0..nu {
            for k in 0..nk {
                let m = mf.mu[[u, k]];
                if m == 0.0 {
                    continue;
                }
                for a in 0..=k {
                    let w = mf.pi[[u, k, a]];
                    if w == 0.0 {
                        continue;
                    }
                    let kappa = karma_kernel(k, a, &mf, &cfg);
                    let mean: f64 =
                        kappa.iter().enumerate().map(|(kp, p)| kp as f64 * p).sum();
                    drift += m * w * (mean - k as f64);
                }
            }
        }
        assert_abs_diff_eq!(drift, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn state_transition_point_mass_and_product() {
        let cfg = small_config();
        // Deterministic kernel: everyone bids 4, ego bids 0 → certain loss,
        // integer surplus 2.
        let mf = point_mass_mf(&cfg, 0, 4, 4);
        let trans = state_transition(AgentState::new(0, 1), 0, &mf, &cfg);
        // Urgency row is (0.5, 0.5); karma lands at 3 surely.
        assert_abs_diff_eq!(trans[[0, 3]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trans[[1, 3]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trans.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn state_transition_matches_outer_product() {
        let cfg = small_config();
        let mut rng = crate::rng::derive_rng(37, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        for _ in 0..20 {
            let u = rng.random_range(0..cfg.num_urgency());
            let k = rng.random_range(0..cfg.num_karma());
            let a = rng.random_range(0..=k);
            let kappa = karma_kernel(k, a, &mf, &cfg);
            let trans = state_transition(AgentState::new(u, k), a, &mf, &cfg);
            for up in 0..cfg.num_urgency() {
                for kp in 0..cfg.num_karma() {
                    assert_abs_diff_eq!(
                        trans[[up, kp]],
                        cfg.urgency_chain()[[u, up]] * kappa[kp],
                        epsilon = 1e-14
                    );
                }
            }
            assert_abs_diff_eq!(trans.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frozen_sampling_matches_kernel() {
        let cfg = small_config();
        let mut rng = crate::rng::derive_rng(41, &[]);
        let mf = random_mean_field(&cfg, &mut rng);
        let frozen = FrozenMeanField::new(&cfg, &mf);
        let (k, a) = (3, 1);
        let kappa = karma_kernel(k, a, &mf, &cfg);
        let n = 200_000;
        let mut counts = vec![0usize; cfg.num_karma()];
        for _ in 0..n {
            counts[frozen.sample_next_karma(k, a, &mut rng)] += 1;
        }
        for kp in 0..cfg.num_karma() {
            let freq = counts[kp] as f64 / n as f64;
            let sigma = (kappa[kp] * (1.0 - kappa[kp]) / n as f64).sqrt();
            assert!(
                (freq - kappa[kp]).abs() <= 4.0 * sigma + 1e-9,
                "kp={kp}: freq {freq} vs prob {}",
                kappa[kp]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kernel_sums_to_one(seed in 0u64..1000) {
            let cfg = small_config();
            let mut rng = crate::rng::derive_rng(seed, &[]);
            let mf = random_mean_field(&cfg, &mut rng);
            let k = rng.random_range(0..cfg.num_karma());
            let a = rng.random_range(0..=k);
            let kappa = karma_kernel(k, a, &mf, &cfg);
            prop_assert!((kappa.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(kappa.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn win_probability_monotone_in_bid(seed in 0u64..1000) {
            let cfg = small_config();
            let mut rng = crate::rng::derive_rng(seed, &[1]);
            let mf = random_mean_field(&cfg, &mut rng);
            let nu = opponent_bid_distribution(&mf);
            let mut prev = 0.0;
            for a in 0..cfg.num_bids() {
                let w = win_probability(a, &nu);
                prop_assert!(w >= prev - 1e-15);
                prop_assert!((0.0..=1.0).contains(&w));
                prev = w;
            }
        }

        #[test]
        fn reward_scales_linearly_in_urgency(scale in 0.1f64..10.0, seed in 0u64..100) {
            let cfg = small_config();
            let scaled = GameConfig::new(
                cfg.urgency_values().iter().map(|u| u * scale).collect(),
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                cfg.karma_cap(),
                cfg.avg_karma(),
                cfg.discount(),
            ).unwrap();
            let mut rng = crate::rng::derive_rng(seed, &[2]);
            let mf = random_mean_field(&cfg, &mut rng);
            for a in 0..=2 {
                let base = reward(AgentState::new(1, 2), a, &mf, &cfg);
                let big = reward(AgentState::new(1, 2), a, &mf, &scaled);
                prop_assert!((big - scale * base).abs() <= 1e-9 * (1.0 + big.abs()));
            }
        }
    }
}
