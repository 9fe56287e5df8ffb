//! Tabular MDP solver core: value iteration on the Bellman optimality
//! operator and stationary distributions of policy-induced chains.
//!
//! The karma game plugs in through [`DiscreteMdp`]; keeping the core generic
//! lets the solvers be exercised on arbitrary small MDPs where ground truth
//! is available by brute force.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// A finite MDP with state-dependent action counts. Actions at state `x`
/// are `0..num_actions(x)`.
pub trait DiscreteMdp {
    fn num_states(&self) -> usize;
    fn num_actions(&self, state: usize) -> usize;
    fn reward(&self, state: usize, action: usize) -> f64;
    /// Calls `f(next_state, probability)` for every successor with positive
    /// probability.
    fn for_each_successor(&self, state: usize, action: usize, f: impl FnMut(usize, f64));
}

/// Greatest number of actions at any state.
pub fn max_actions(mdp: &impl DiscreteMdp) -> usize {
    (0..mdp.num_states()).map(|x| mdp.num_actions(x)).max().unwrap_or(0)
}

/// Applies the Bellman optimality operator once:
/// `(TQ)[x,a] = r[x,a] + α Σ_{x'} p[x'|x,a] max_{a'} Q[x',a']`.
///
/// Infeasible `(x, a)` slots keep `-inf` so row maxima ignore them.
pub fn bellman_backup(mdp: &impl DiscreteMdp, alpha: f64, q: &Array2<f64>, out: &mut Array2<f64>) {
    let n = mdp.num_states();
    let v: Vec<f64> = (0..n)
        .map(|x| {
            (0..mdp.num_actions(x))
                .map(|a| q[[x, a]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    out.fill(f64::NEG_INFINITY);
    for x in 0..n {
        for a in 0..mdp.num_actions(x) {
            let mut future = 0.0;
            mdp.for_each_successor(x, a, |xp, p| future += p * v[xp]);
            out[[x, a]] = mdp.reward(x, a) + alpha * future;
        }
    }
}

pub struct ValueIterationOutcome {
    /// `q[x, a]` for feasible pairs; `-inf` elsewhere.
    pub q: Array2<f64>,
    /// `v[x] = max_a q[x, a]`.
    pub v: Array1<f64>,
    pub iterations: usize,
    /// Last sup-norm change between sweeps.
    pub residual: f64,
}

/// Iterates the Bellman operator from `warm_start` (or zero) until the
/// sup-norm change drops to `tol * (1 - alpha)`, which bounds the distance
/// to the fixed point by `tol`.
pub fn value_iteration_core(
    mdp: &impl DiscreteMdp,
    alpha: f64,
    tol: f64,
    warm_start: Option<&Array2<f64>>,
    max_sweeps: usize,
) -> Result<ValueIterationOutcome> {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = mdp.num_states();
    let na = max_actions(mdp);
    let mut q = Array2::from_elem((n, na), f64::NEG_INFINITY);
    for x in 0..n {
        for a in 0..mdp.num_actions(x) {
            q[[x, a]] = warm_start.map_or(0.0, |w| w[[x, a]]);
        }
    }
    let mut next = q.clone();
    let stop = tol * (1.0 - alpha);
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        bellman_backup(mdp, alpha, &q, &mut next);
        residual = 0.0;
        for x in 0..n {
            for a in 0..mdp.num_actions(x) {
                let d = (next[[x, a]] - q[[x, a]]).abs();
                if d > residual {
                    residual = d;
                }
            }
        }
        std::mem::swap(&mut q, &mut next);
        if residual <= stop {
            let v = Array1::from_iter((0..n).map(|x| {
                (0..mdp.num_actions(x))
                    .map(|a| q[[x, a]])
                    .fold(f64::NEG_INFINITY, f64::max)
            }));
            return Ok(ValueIterationOutcome {
                q,
                v,
                iterations: sweep,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "value iteration",
        residual,
        iterations: max_sweeps,
    })
}

/// One step of the chain induced by playing `policy` in `mdp`:
/// `out[y] = Σ_x mu[x] Σ_a policy[x][a] p[y|x,a]`.
pub fn chain_step(
    mdp: &impl DiscreteMdp,
    policy: &[Vec<f64>],
    mu: &[f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for x in 0..mdp.num_states() {
        let m = mu[x];
        if m == 0.0 {
            continue;
        }
        for (a, &w) in policy[x].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mass = m * w;
            mdp.for_each_successor(x, a, |y, p| out[y] += mass * p);
        }
    }
}

pub struct StationaryOutcome {
    pub mu: Array1<f64>,
    pub iterations: usize,
    /// L1 distance between `mu` and its one-step image.
    pub residual: f64,
}

/// Stationary distribution of the policy-induced chain by damped power
/// iteration. The half-lazy update `μ ← (μ + μP)/2` shares the fixed point
/// and converges even on periodic chains; the reported residual is measured
/// on the undamped chain.
pub fn stationary_distribution_core(
    mdp: &impl DiscreteMdp,
    policy: &[Vec<f64>],
    init: Option<&Array1<f64>>,
    tol: f64,
    max_iters: usize,
) -> Result<StationaryOutcome> {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = mdp.num_states();
    let mut mu: Vec<f64> = match init {
        Some(m) => m.to_vec(),
        None => vec![1.0 / n as f64; n],
    };
    let mut image = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iters {
        chain_step(mdp, policy, &mu, &mut image);
        residual = mu.iter().zip(image.iter()).map(|(a, b)| (a - b).abs()).sum();
        if residual <= tol {
            return Ok(StationaryOutcome {
                mu: Array1::from_vec(mu),
                iterations: iter,
                residual,
            });
        }
        for x in 0..n {
            mu[x] = 0.5 * (mu[x] + image[x]);
        }
        // Renormalize occasionally so rounding drift cannot accumulate.
        if iter % 256 == 0 {
            let total: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|v| *v /= total);
        }
    }
    Err(Error::NoConvergence {
        what: "stationary distribution power iteration",
        residual,
        iterations: max_iters,
    })
}
