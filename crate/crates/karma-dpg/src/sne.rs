//! Stationary equilibrium computation for the karma game.
//!
//! A mean field `(μ*, π*)` is a stationary equilibrium when μ* is the
//! stationary distribution of the dynamics it induces and π* best-responds
//! to it. The solver runs a damped smoothed-best-response fixed-point
//! iteration: at each outer step it computes the optimal Q-tables under the
//! current mean field by value iteration, relaxes the policy toward a
//! softmax of those tables with an annealed temperature, and relaxes the
//! state distribution toward the stationary distribution of the updated
//! dynamics. Convergence is certified by two residuals that any solver for
//! this fixed point must drive to zero:
//!
//! * `residual_sne1` — L1 distance between μ and its one-step image under
//!   the induced chain;
//! * `exploitability` — the largest one-state gain available by deviating
//!   from π under its own mean field.

use ndarray::{Array1, Array2, Array3, s};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{FrozenMeanField, GameConfig, MeanField};
use crate::mdp::{
    stationary_distribution_core, value_iteration_core, DiscreteMdp,
};

/// Cap on Bellman sweeps inside one value-iteration call.
const MAX_VI_SWEEPS: usize = 2_000_000;
/// Cap on power-iteration steps inside one stationary-distribution call.
const MAX_POWER_ITERS: usize = 2_000_000;

/// The karma game at a frozen mean field, viewed as a single-agent MDP.
pub struct KarmaMdp<'a> {
    cfg: &'a GameConfig,
    pub frozen: FrozenMeanField,
}

impl<'a> KarmaMdp<'a> {
    pub fn new(cfg: &'a GameConfig, mf: &MeanField) -> Self {
        Self {
            cfg,
            frozen: FrozenMeanField::new(cfg, mf),
        }
    }
}

impl DiscreteMdp for KarmaMdp<'_> {
    fn num_states(&self) -> usize {
        self.cfg.num_states()
    }
    fn num_actions(&self, state: usize) -> usize {
        // Bids 0..=k.
        state % self.cfg.num_karma() + 1
    }
    fn reward(&self, state: usize, action: usize) -> f64 {
        self.frozen.reward(state / self.cfg.num_karma(), action)
    }
    fn for_each_successor(&self, state: usize, action: usize, mut f: impl FnMut(usize, f64)) {
        let nk = self.cfg.num_karma();
        let u = state / nk;
        let k = state % nk;
        let chain = self.cfg.urgency_chain();
        for up in 0..self.cfg.num_urgency() {
            let phi = chain[[u, up]];
            if phi == 0.0 {
                continue;
            }
            for &(kp, p) in self.frozen.karma_support(k, action).iter() {
                f(up * nk + kp, phi * p);
            }
        }
    }
}

/// Flattens a policy tensor into per-state action rows indexed like
/// [`KarmaMdp`] states.
fn policy_rows(pi: &Array3<f64>) -> Vec<Vec<f64>> {
    let (nu, nk, _) = pi.dim();
    let mut rows = Vec::with_capacity(nu * nk);
    for u in 0..nu {
        for k in 0..nk {
            rows.push(pi.slice(s![u, k, ..=k]).to_vec());
        }
    }
    rows
}

/// Optimal state-action and state values under a frozen mean field.
/// Infeasible bids hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub q: Array2<f64>,
    pub v: Array1<f64>,
}

impl ValueTables {
    /// Greedy bid at `(u, k)`; ties break toward the lowest bid.
    pub fn greedy_bid(&self, cfg: &GameConfig, urgency_index: usize, karma: usize) -> usize {
        let x = cfg.state_index(urgency_index, karma);
        let mut best = 0;
        let mut best_q = self.q[[x, 0]];
        for a in 1..=karma {
            let q = self.q[[x, a]];
            if q > best_q {
                best_q = q;
                best = a;
            }
        }
        best
    }
}

/// Solver knobs. Defaults follow the damped smoothed-best-response scheme:
/// relaxation 0.2 on both blocks, softmax temperature annealed from 1.0 by
/// 0.95 per outer iteration down to 1e-4.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SneSolverConfig {
    pub damping_policy: f64,
    pub damping_mu: f64,
    pub tau_init: f64,
    pub tau_decay: f64,
    pub tau_min: f64,
    pub max_outer_iters: usize,
    pub tol_sne1: f64,
    pub tol_exploit: f64,
    pub vi_tol: f64,
    pub power_iter_tol: f64,
}

impl Default for SneSolverConfig {
    fn default() -> Self {
        Self {
            damping_policy: 0.2,
            damping_mu: 0.2,
            tau_init: 1.0,
            tau_decay: 0.95,
            tau_min: 1e-4,
            max_outer_iters: 1_000,
            tol_sne1: 1e-8,
            tol_exploit: 1e-4,
            vi_tol: 1e-9,
            power_iter_tol: 1e-12,
        }
    }
}

impl SneSolverConfig {
    fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.damping_policy)
            && self.damping_policy > 0.0
            && (0.0..=1.0).contains(&self.damping_mu)
            && self.damping_mu > 0.0
            && self.tau_init > 0.0
            && (0.0..1.0).contains(&self.tau_decay)
            && self.tau_min > 0.0
            && self.tol_sne1 > 0.0
            && self.tol_exploit > 0.0
            && self.vi_tol > 0.0
            && self.power_iter_tol > 0.0
            && self.max_outer_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("solver tolerances and damping must be positive".into()))
        }
    }
}

/// A solved (or best-effort) equilibrium with its diagnostics.
#[derive(Debug, Clone)]
pub struct SneResult {
    pub mean_field: MeanField,
    pub q: ValueTables,
    pub residual_sne1: f64,
    pub exploitability: f64,
    pub action_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Optimal Q-tables under the mean field `mf` by value iteration to within
/// `tol` in sup norm.
pub fn value_iteration(mf: &MeanField, cfg: &GameConfig, tol: f64) -> Result<ValueTables> {
    let mdp = KarmaMdp::new(cfg, mf);
    let out = value_iteration_core(&mdp, cfg.discount(), tol, None, MAX_VI_SWEEPS)?;
    Ok(ValueTables { q: out.q, v: out.v })
}

/// Stationary distribution of the chain induced by `mf.pi` with the
/// transition kernel frozen at `mf`, as a `(|U|, K+1)` array.
pub fn stationary_distribution(mf: &MeanField, cfg: &GameConfig, tol: f64) -> Result<Array2<f64>> {
    let mdp = KarmaMdp::new(cfg, mf);
    let rows = policy_rows(&mf.pi);
    let init = Array1::from_iter(mf.mu.iter().cloned());
    let out = stationary_distribution_core(&mdp, &rows, Some(&init), tol, MAX_POWER_ITERS)?;
    Ok(out
        .mu
        .into_shape_with_order((cfg.num_urgency(), cfg.num_karma()))
        .expect("state count matches (u, k) grid"))
}

/// Softmax policy over feasible bids: `π[a|x] ∝ exp(q[x,a] / τ)`,
/// stabilized by subtracting the row maximum.
pub fn softmax_response(q: &ValueTables, tau: f64, cfg: &GameConfig) -> Array3<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let nu = cfg.num_urgency();
    let nk = cfg.num_karma();
    let mut pi = Array3::zeros((nu, nk, nk));
    for u in 0..nu {
        for k in 0..nk {
            let x = cfg.state_index(u, k);
            let row_max = (0..=k)
                .map(|a| q.q[[x, a]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..=k {
                let w = ((q.q[[x, a]] - row_max) / tau).exp();
                pi[[u, k, a]] = w;
                total += w;
            }
            for a in 0..=k {
                pi[[u, k, a]] /= total;
            }
        }
    }
    pi
}

/// The two equilibrium residuals of a mean field: L1 distance between μ and
/// its one-step image, and the exploitability
/// `max_x (max_a Q[x,a] - Σ_a π[a|x] Q[x,a])` with Q optimal under `mf`.
pub fn sne_residuals(mf: &MeanField, cfg: &GameConfig) -> Result<(f64, f64)> {
    sne_residuals_at(mf, cfg, SneSolverConfig::default().vi_tol)
}

pub fn sne_residuals_at(mf: &MeanField, cfg: &GameConfig, vi_tol: f64) -> Result<(f64, f64)> {
    let mdp = KarmaMdp::new(cfg, mf);
    let out = value_iteration_core(&mdp, cfg.discount(), vi_tol, None, MAX_VI_SWEEPS)?;
    let q = ValueTables { q: out.q, v: out.v };
    Ok((
        sne1_residual(&mdp, &mf.mu, &mf.pi),
        exploitability(&q, &mf.pi, cfg),
    ))
}

fn sne1_residual(mdp: &KarmaMdp, mu: &Array2<f64>, pi: &Array3<f64>) -> f64 {
    let rows = policy_rows(pi);
    let flat: Vec<f64> = mu.iter().cloned().collect();
    let mut image = vec![0.0; flat.len()];
    crate::mdp::chain_step(mdp, &rows, &flat, &mut image);
    flat.iter().zip(image.iter()).map(|(a, b)| (a - b).abs()).sum()
}

fn exploitability(q: &ValueTables, pi: &Array3<f64>, cfg: &GameConfig) -> f64 {
    let nk = cfg.num_karma();
    let mut worst = 0.0f64;
    for u in 0..cfg.num_urgency() {
        for k in 0..nk {
            let x = cfg.state_index(u, k);
            let mut best = f64::NEG_INFINITY;
            let mut value = 0.0;
            for a in 0..=k {
                let qa = q.q[[x, a]];
                best = best.max(qa);
                value += pi[[u, k, a]] * qa;
            }
            worst = worst.max(best - value);
        }
    }
    worst
}

/// Smallest margin by which the greedy bid beats the runner-up across
/// states; states with a single feasible bid are skipped. Returns infinity
/// when every state is skipped.
pub fn action_gap(sne: &SneResult, cfg: &GameConfig) -> f64 {
    let mut gap = f64::INFINITY;
    for u in 0..cfg.num_urgency() {
        for k in 1..cfg.num_karma() {
            let x = cfg.state_index(u, k);
            let greedy = sne.q.greedy_bid(cfg, u, k);
            let runner_up = (0..=k)
                .filter(|&a| a != greedy)
                .map(|a| sne.q.q[[x, a]])
                .fold(f64::NEG_INFINITY, f64::max);
            gap = gap.min(sne.q.q[[x, greedy]] - runner_up);
        }
    }
    gap
}

/// Deterministic greedy policy of `q` as a point-mass tensor (ties break
/// toward the lowest bid).
fn greedy_policy(q: &ValueTables, cfg: &GameConfig) -> Array3<f64> {
    let nu = cfg.num_urgency();
    let nk = cfg.num_karma();
    let mut pi = Array3::zeros((nu, nk, nk));
    for u in 0..nu {
        for k in 0..nk {
            pi[[u, k, q.greedy_bid(cfg, u, k)]] = 1.0;
        }
    }
    pi
}

/// Stationary distribution of the chain frozen at `(mu, pi)` by a dense
/// linear solve of `(Pᵀ - I) μ̂ = 0`, `Σ μ̂ = 1`. Exact up to elimination
/// rounding, which matters because the karma chain's slowest mode (total
/// karma drift) sits so close to one that power iteration crawls. Returns
/// `None` when the system is near-singular (multiple recurrent classes);
/// callers then fall back to damped power iteration.
fn stationary_direct(
    cfg: &GameConfig,
    mu: &Array1<f64>,
    pi: &Array3<f64>,
    rows: &[Vec<f64>],
) -> Option<Array1<f64>> {
    let n = cfg.num_states();
    let mf = MeanField {
        mu: mu
            .clone()
            .into_shape_with_order((cfg.num_urgency(), cfg.num_karma()))
            .expect("state grid shape"),
        pi: pi.clone(),
    };
    let mdp = KarmaMdp::new(cfg, &mf);

    // Augmented system: rows 0..n-1 hold (Pᵀ - I), the last row is the
    // normalization Σ μ̂ = 1.
    let mut a = vec![0.0; n * (n + 1)];
    for x in 0..n {
        for (act, &w) in rows[x].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            mdp.for_each_successor(x, act, |y, p| {
                if y < n - 1 {
                    a[y * (n + 1) + x] += w * p;
                }
            });
        }
    }
    for x in 0..n - 1 {
        a[x * (n + 1) + x] -= 1.0;
    }
    for x in 0..n {
        a[(n - 1) * (n + 1) + x] = 1.0;
    }
    a[(n - 1) * (n + 1) + n] = 1.0;

    // Partial-pivot Gaussian elimination.
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * (n + 1) + col]
                    .abs()
                    .total_cmp(&a[r2 * (n + 1) + col].abs())
            })
            .unwrap();
        let pivot = a[pivot_row * (n + 1) + col];
        if pivot.abs() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for j in col..=n {
                a.swap(col * (n + 1) + j, pivot_row * (n + 1) + j);
            }
        }
        let inv = 1.0 / a[col * (n + 1) + col];
        for j in col..=n {
            a[col * (n + 1) + j] *= inv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * (n + 1) + col];
            if f == 0.0 {
                continue;
            }
            for j in col..=n {
                a[r * (n + 1) + j] -= f * a[col * (n + 1) + j];
            }
        }
    }

    let mut out = Array1::from_iter((0..n).map(|x| a[x * (n + 1) + n].max(0.0)));
    let total = out.sum();
    if !(total.is_finite() && total > 0.0) {
        return None;
    }
    out.mapv_inplace(|v| v / total);
    Some(out)
}

/// One substitution step of the self-consistency map
/// `μ ↦ stationary distribution of the chain at (μ, π)`.
fn substitution_step(
    cfg: &GameConfig,
    mu: &Array1<f64>,
    pi: &Array3<f64>,
    rows: &[Vec<f64>],
    tol: f64,
) -> Result<Array1<f64>> {
    if let Some(direct) = stationary_direct(cfg, mu, pi, rows) {
        return Ok(direct);
    }
    let mf = MeanField {
        mu: mu
            .clone()
            .into_shape_with_order((cfg.num_urgency(), cfg.num_karma()))
            .expect("state grid shape"),
        pi: pi.clone(),
    };
    let mdp = KarmaMdp::new(cfg, &mf);
    Ok(stationary_distribution_core(&mdp, rows, Some(mu), tol, MAX_POWER_ITERS)?.mu)
}

/// Solves `μ = F(μ) := stationary(μ, π)` at fixed `π` by Anderson-accelerated
/// substitution. Plain substitution contracts, but its slowest mode (total
/// karma drift) sits within 1e-5 of one and crawls; the least-squares
/// combination of recent residuals eliminates such modes in a handful of
/// steps.
fn polish_mu(
    cfg: &GameConfig,
    mu0: &Array2<f64>,
    pi: &Array3<f64>,
    tol: f64,
    power_tol: f64,
    max_rounds: usize,
) -> Result<Array2<f64>> {
    const MEMORY: usize = 5;
    let rows = policy_rows(pi);
    let mut mu = Array1::from_iter(mu0.iter().cloned());
    let mut hist_mu: Vec<Array1<f64>> = Vec::new();
    let mut hist_f: Vec<Array1<f64>> = Vec::new();

    for _ in 0..max_rounds {
        let image = substitution_step_image(cfg, &mu, pi, &rows)?;
        let sne1: f64 = mu.iter().zip(image.iter()).map(|(a, b)| (a - b).abs()).sum();
        if sne1 <= tol {
            break;
        }

        let fixed = substitution_step(cfg, &mu, pi, &rows, power_tol)?;
        let f = &fixed - &mu;
        hist_mu.push(mu.clone());
        hist_f.push(f.clone());
        if hist_mu.len() > MEMORY + 1 {
            hist_mu.remove(0);
            hist_f.remove(0);
        }

        let j = hist_mu.len() - 1;
        let mut next = fixed;
        if j >= 1 {
            // Least squares: min over γ of ‖f_k − Σ_i γ_i (f_{i+1} − f_i)‖₂,
            // solved through ridge-stabilized normal equations.
            let n = mu.len();
            let mut df = vec![vec![0.0; n]; j];
            let mut dmu = vec![vec![0.0; n]; j];
            for i in 0..j {
                for x in 0..n {
                    df[i][x] = hist_f[i + 1][x] - hist_f[i][x];
                    dmu[i][x] = hist_mu[i + 1][x] - hist_mu[i][x];
                }
            }
            let mut g = vec![vec![0.0; j + 1]; j];
            for r in 0..j {
                for c in 0..j {
                    g[r][c] = df[r].iter().zip(df[c].iter()).map(|(a, b)| a * b).sum();
                }
                g[r][j] = df[r].iter().zip(f.iter()).map(|(a, b)| a * b).sum();
            }
            let ridge = 1e-13 * (0..j).map(|i| g[i][i]).sum::<f64>().max(1e-300);
            for r in 0..j {
                g[r][r] += ridge;
            }
            if let Some(gamma) = solve_small(&mut g) {
                for x in 0..n {
                    let mut v = mu[x] + f[x];
                    for i in 0..j {
                        v -= gamma[i] * (dmu[i][x] + df[i][x]);
                    }
                    next[x] = v;
                }
            }
        }

        next.mapv_inplace(|v| v.max(0.0));
        let total = next.sum();
        next.mapv_inplace(|v| v / total);
        mu = next;
    }
    Ok(mu
        .into_shape_with_order((cfg.num_urgency(), cfg.num_karma()))
        .expect("state grid shape"))
}

/// Solves the small augmented system `[A | b]` in place by Gaussian
/// elimination; returns `None` when singular.
fn solve_small(aug: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let n = aug.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&r1, &r2| aug[r1][col].abs().total_cmp(&aug[r2][col].abs()))?;
        if aug[pivot][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot);
        let inv = 1.0 / aug[col][col];
        for j in col..=n {
            aug[col][j] *= inv;
        }
        for r in 0..n {
            if r != col && aug[r][col] != 0.0 {
                let fac = aug[r][col];
                for j in col..=n {
                    aug[r][j] -= fac * aug[col][j];
                }
            }
        }
    }
    Some((0..n).map(|r| aug[r][n]).collect())
}

/// One-step image of `mu` under the chain frozen at `(mu, pi)`.
fn substitution_step_image(
    cfg: &GameConfig,
    mu: &Array1<f64>,
    pi: &Array3<f64>,
    rows: &[Vec<f64>],
) -> Result<Array1<f64>> {
    let mf = MeanField {
        mu: mu
            .clone()
            .into_shape_with_order((cfg.num_urgency(), cfg.num_karma()))
            .expect("state grid shape"),
        pi: pi.clone(),
    };
    let mdp = KarmaMdp::new(cfg, &mf);
    let flat: Vec<f64> = mu.to_vec();
    let mut image = vec![0.0; flat.len()];
    crate::mdp::chain_step(&mdp, rows, &flat, &mut image);
    Ok(Array1::from_vec(image))
}

/// Runs the solver from the fixed initialization (karma point mass at `k̄`
/// under the stationary urgency law, uniform feasible bids) until both
/// residuals fall below their tolerances or the iteration cap is hit.
///
/// The iteration has two stages. A damped smoothed-best-response sweep with
/// temperature annealed once from `tau_init` to `tau_min` steers into the
/// equilibrium basin. Then a policy-iteration alternation takes over: the
/// policy is frozen at the deterministic greedy of the current Q-tables and
/// μ is polished to the exact fixed point of its self-consistency map; if
/// the greedy policy flips after the polish, the alternation repeats (with
/// damped policy mixing once a flip cycle is detected). Exact-tie states
/// are resolved toward the lowest bid.
///
/// Deterministic; `seed` is reserved for stochastic solver variants.
pub fn solve_sne(cfg: &GameConfig, scfg: &SneSolverConfig, _seed: u64) -> Result<SneResult> {
    scfg.validate()?;
    let mut mf = MeanField::at_mean_karma(cfg);
    let mut tau = scfg.tau_init;
    let mut q_warm: Option<Array2<f64>> = None;

    // Outer iterations spent annealing before the alternation starts.
    let anneal_len = ((scfg.tau_min / scfg.tau_init).ln() / scfg.tau_decay.ln()).ceil() as usize;
    let smooth_iters = (anneal_len + 20).min(scfg.max_outer_iters);

    let mut residual = f64::INFINITY;
    let mut expl = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut tables: Option<ValueTables> = None;

    // Smoothed annealing stage.
    while iterations < smooth_iters {
        iterations += 1;
        let mdp = KarmaMdp::new(cfg, &mf);
        let vi = value_iteration_core(
            &mdp,
            cfg.discount(),
            scfg.vi_tol,
            q_warm.as_ref(),
            MAX_VI_SWEEPS,
        )?;
        let t = ValueTables { q: vi.q, v: vi.v };

        residual = sne1_residual(&mdp, &mf.mu, &mf.pi);
        expl = exploitability(&t, &mf.pi, cfg);
        if residual <= scfg.tol_sne1 && expl <= scfg.tol_exploit {
            converged = true;
        }

        q_warm = Some(t.q.clone());
        tables = Some(t);
        if converged {
            break;
        }

        let t = tables.as_ref().expect("just set");
        let br = softmax_response(t, tau, cfg);
        mf.pi.zip_mut_with(&br, |p, &b| {
            *p = (1.0 - scfg.damping_policy) * *p + scfg.damping_policy * b;
        });

        let rows = policy_rows(&mf.pi);
        let frozen_at = Array1::from_iter(mf.mu.iter().cloned());
        let hat = substitution_step(cfg, &frozen_at, &mf.pi, &rows, scfg.power_iter_tol)?;
        for (m, &s) in mf.mu.iter_mut().zip(hat.iter()) {
            *m = (1.0 - scfg.damping_mu) * *m + scfg.damping_mu * s;
        }

        tau = (tau * scfg.tau_decay).max(scfg.tau_min);
    }

    // Policy-iteration alternation with exact μ polish. Greedy flip cycles
    // (near-tie states whose equilibrium mixing the alternation cannot
    // express) trigger a smoothed burst at the temperature floor before the
    // alternation resumes.
    let mut seen: Vec<(Array3<f64>, usize)> = Vec::new();
    while !converged && iterations < scfg.max_outer_iters {
        iterations += 1;
        let mdp = KarmaMdp::new(cfg, &mf);
        let vi = value_iteration_core(
            &mdp,
            cfg.discount(),
            scfg.vi_tol,
            q_warm.as_ref(),
            MAX_VI_SWEEPS,
        )?;
        let t = ValueTables { q: vi.q, v: vi.v };
        q_warm = Some(t.q.clone());

        let greedy = greedy_policy(&t, cfg);
        let revisits = seen
            .iter_mut()
            .find_map(|(p, n)| (*p == greedy).then(|| { *n += 1; *n }))
            .unwrap_or_else(|| {
                seen.push((greedy.clone(), 1));
                1
            });
        mf.pi = greedy;

        mf.mu = polish_mu(
            cfg,
            &mf.mu,
            &mf.pi,
            scfg.tol_sne1 * 0.5,
            scfg.power_iter_tol,
            400,
        )?;

        let mdp = KarmaMdp::new(cfg, &mf);
        let vi = value_iteration_core(
            &mdp,
            cfg.discount(),
            scfg.vi_tol,
            q_warm.as_ref(),
            MAX_VI_SWEEPS,
        )?;
        let t = ValueTables { q: vi.q, v: vi.v };
        residual = sne1_residual(&mdp, &mf.mu, &mf.pi);
        expl = exploitability(&t, &mf.pi, cfg);
        q_warm = Some(t.q.clone());
        tables = Some(t);
        if residual <= scfg.tol_sne1 && expl <= scfg.tol_exploit {
            converged = true;
            break;
        }

        if revisits >= 3 {
            seen.clear();
            let burst = 40.min(scfg.max_outer_iters.saturating_sub(iterations));
            for _ in 0..burst {
                iterations += 1;
                let mdp = KarmaMdp::new(cfg, &mf);
                let vi = value_iteration_core(
                    &mdp,
                    cfg.discount(),
                    scfg.vi_tol,
                    q_warm.as_ref(),
                    MAX_VI_SWEEPS,
                )?;
                let t = ValueTables { q: vi.q, v: vi.v };
                residual = sne1_residual(&mdp, &mf.mu, &mf.pi);
                expl = exploitability(&t, &mf.pi, cfg);
                q_warm = Some(t.q.clone());
                if residual <= scfg.tol_sne1 && expl <= scfg.tol_exploit {
                    tables = Some(t);
                    converged = true;
                    break;
                }
                let br = softmax_response(&t, scfg.tau_min, cfg);
                mf.pi.zip_mut_with(&br, |p, &b| {
                    *p = (1.0 - scfg.damping_policy) * *p + scfg.damping_policy * b;
                });
                let rows = policy_rows(&mf.pi);
                let frozen_at = Array1::from_iter(mf.mu.iter().cloned());
                let hat = substitution_step(cfg, &frozen_at, &mf.pi, &rows, scfg.power_iter_tol)?;
                for (m, &s) in mf.mu.iter_mut().zip(hat.iter()) {
                    *m = (1.0 - scfg.damping_mu) * *m + scfg.damping_mu * s;
                }
                tables = Some(t);
            }
        }
    }

    let q = match tables {
        Some(t) => t,
        None => {
            let mdp = KarmaMdp::new(cfg, &mf);
            let vi = value_iteration_core(
                &mdp,
                cfg.discount(),
                scfg.vi_tol,
                q_warm.as_ref(),
                MAX_VI_SWEEPS,
            )?;
            ValueTables { q: vi.q, v: vi.v }
        }
    };

    let mut result = SneResult {
        mean_field: mf,
        q,
        residual_sne1: residual,
        exploitability: expl,
        action_gap: 0.0,
        iterations,
        converged,
    };
    result.action_gap = action_gap(&result, cfg);
    Ok(result)
}
