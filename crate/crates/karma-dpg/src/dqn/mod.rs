//! Double-Q learner for the karma game: a small MLP over the one-hot
//! urgency plus normalized-karma encoding, trained by RMSprop on minibatches
//! from a replay ring, with a periodically synced target network and masked
//! ε-greedy bidding. The bid mask enforces `a ≤ k` everywhere: in action
//! selection, in greedy policy extraction, and in the bootstrap argmax.

mod mlp;
mod replay;

pub use mlp::{backward_batch, DenseLayer, Gradients, Mlp, Rmsprop, SingleScratch};
pub use replay::{ReplayBuffer, Transition};

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::game::{AgentState, GameConfig};

pub const HIDDEN_WIDTH: usize = 64;

/// Geometric exploration decay from `eps0` to `eps_min` over `horizon`
/// steps, constant afterwards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub eps0: f64,
    pub eps_min: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            eps0: 1.0,
            eps_min: 0.01,
            horizon: 1_000_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        let ratio = (self.eps_min / self.eps0).ln() / self.horizon as f64;
        (self.eps0 * (step as f64 * ratio).exp()).max(self.eps_min)
    }
}

/// Learner hyperparameters. `discount: None` inherits the game's discount.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub buffer_size: usize,
    pub batch_size: usize,
    pub target_sync_period: u64,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub discount: Option<f64>,
    pub warmup_steps: usize,
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub epsilon: EpsilonSchedule,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            buffer_size: 1_000_000,
            batch_size: 128,
            target_sync_period: 1000,
            total_steps: 1_000_000,
            learning_rate: 3e-4,
            discount: None,
            warmup_steps: 128,
            eval_period: 10_000,
            eval_episodes: 10,
            epsilon: EpsilonSchedule::default(),
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size == 0
            || self.buffer_size == 0
            || self.target_sync_period == 0
            || self.batch_size > self.buffer_size
        {
            return Err(crate::Error::InvalidConfig(
                "batch_size must be positive and no larger than buffer_size".into(),
            ));
        }
        Ok(())
    }
}

/// Feature vector: one-hot urgency block followed by `k / K`.
pub fn encode_state(state: AgentState, cfg: &GameConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.num_urgency() + 1];
    encode_state_into(state, cfg, &mut out);
    out
}

pub fn encode_state_into(state: AgentState, cfg: &GameConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.num_urgency() + 1);
    out.fill(0.0);
    out[state.urgency_index] = 1.0;
    out[cfg.num_urgency()] = state.karma as f64 / cfg.karma_cap() as f64;
}

/// Greedy bid over the feasible prefix `0..=k`; ties break to the lowest bid.
pub fn masked_greedy(q: &[f64], karma: usize) -> usize {
    debug_assert!(karma < q.len());
    let mut best = 0;
    let mut best_q = q[0];
    for (a, &v) in q.iter().enumerate().take(karma + 1).skip(1) {
        if v > best_q {
            best_q = v;
            best = a;
        }
    }
    best
}

/// ε-greedy over feasible bids: uniform with probability `eps`, otherwise
/// the masked greedy bid.
pub fn epsilon_greedy(q: &[f64], karma: usize, eps: f64, rng: &mut impl Rng) -> usize {
    debug_assert!((0.0..=1.0).contains(&eps));
    if eps > 0.0 && rng.random::<f64>() < eps {
        rng.random_range(0..=karma)
    } else {
        masked_greedy(q, karma)
    }
}

/// Double-Q regression targets: `y = r + α · Q_target(x', a*)` where
/// `a* = argmax over feasible bids of Q_online(x')`. The game is a
/// continuing MDP, so bootstrapping never cuts.
pub fn double_dqn_target(
    batch: &[Transition],
    online: &Mlp,
    target: &Mlp,
    alpha: f64,
    cfg: &GameConfig,
) -> Vec<f64> {
    let mut scratch_a = SingleScratch::default();
    let mut scratch_b = SingleScratch::default();
    let mut enc = vec![0.0; cfg.num_urgency() + 1];
    batch
        .iter()
        .map(|t| {
            encode_state_into(t.next_state, cfg, &mut enc);
            let q_online = online.forward_into(&enc, &mut scratch_a);
            let a_star = masked_greedy(q_online, t.next_state.karma);
            let q_target = target.forward_into(&enc, &mut scratch_b);
            t.reward + alpha * q_target[a_star]
        })
        .collect()
}

/// Deterministic greedy policy of `net` over all states, as a point-mass
/// policy tensor satisfying the feasibility mask.
pub fn extract_greedy_policy(net: &Mlp, cfg: &GameConfig) -> Array3<f64> {
    let nu = cfg.num_urgency();
    let nk = cfg.num_karma();
    let mut pi = Array3::zeros((nu, nk, nk));
    let mut scratch = SingleScratch::default();
    let mut enc = vec![0.0; nu + 1];
    for u in 0..nu {
        for k in 0..nk {
            encode_state_into(AgentState::new(u, k), cfg, &mut enc);
            let q = net.forward_into(&enc, &mut scratch);
            pi[[u, k, masked_greedy(q, k)]] = 1.0;
        }
    }
    pi
}

/// Mean squared error of `net` on `(x, a) → y` pairs, evaluated with the
/// plain per-sample forward pass (reference path for gradient checks).
pub fn batch_loss(net: &Mlp, batch: &[Transition], targets: &[f64], cfg: &GameConfig) -> f64 {
    let mut scratch = SingleScratch::default();
    let mut enc = vec![0.0; cfg.num_urgency() + 1];
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        encode_state_into(t.state, cfg, &mut enc);
        let q = net.forward_into(&enc, &mut scratch);
        let e = q[t.action] - y;
        loss += e * e;
    }
    loss / batch.len() as f64
}

/// GEMM-path gradients of [`batch_loss`] w.r.t. every parameter of `net`.
/// Returns the loss; gradients land in `grads`.
pub fn batch_gradients(
    net: &Mlp,
    batch: &[Transition],
    targets: &[f64],
    cfg: &GameConfig,
    grads: &mut Gradients,
) -> f64 {
    let b = batch.len();
    let input_dim = cfg.num_urgency() + 1;
    let mut x = Array2::zeros((b, input_dim));
    for (i, t) in batch.iter().enumerate() {
        encode_state_into(t.state, cfg, x.row_mut(i).as_slice_mut().expect("row"));
    }
    let mut acts = Vec::new();
    let mut out = Array2::zeros((0, 0));
    net.forward_batch(x.view(), &mut acts, &mut out);

    let mut dout = Array2::zeros((b, net.output_dim()));
    let mut loss = 0.0;
    for (i, (t, &y)) in batch.iter().zip(targets).enumerate() {
        let e = out[[i, t.action]] - y;
        loss += e * e;
        dout[[i, t.action]] = 2.0 * e / b as f64;
    }
    let act_views: Vec<ArrayView2<f64>> = acts.iter().map(|a| a.view()).collect();
    let mut deltas = Vec::new();
    backward_batch(net, x.view(), &act_views, &dout, grads, &mut deltas);
    loss / b as f64
}

/// Preallocated buffers for the fused training step.
struct TrainScratch {
    /// Current states in rows `0..B`, next states in rows `B..2B`.
    xcat: Array2<f64>,
    acts_online: Vec<Array2<f64>>,
    q_online: Array2<f64>,
    acts_target: Vec<Array2<f64>>,
    q_target: Array2<f64>,
    dout: Array2<f64>,
    grads: Gradients,
    deltas: Vec<Array2<f64>>,
    indices: Vec<usize>,
    batch: Vec<Transition>,
}

impl TrainScratch {
    fn new(net: &Mlp, batch: usize) -> Self {
        Self {
            xcat: Array2::zeros((2 * batch, net.input_dim())),
            acts_online: Vec::new(),
            q_online: Array2::zeros((0, 0)),
            acts_target: Vec::new(),
            q_target: Array2::zeros((0, 0)),
            dout: Array2::zeros((batch, net.output_dim())),
            grads: Gradients::zeros_like(net),
            deltas: Vec::new(),
            indices: Vec::new(),
            batch: Vec::with_capacity(batch),
        }
    }
}

/// The learning agent: online and target networks, optimizer state, replay
/// ring, and exploration schedule. Deterministic given its RNG stream.
pub struct DqnAgent {
    pub online: Mlp,
    pub target: Mlp,
    opt: Rmsprop,
    pub buffer: ReplayBuffer,
    pub cfg: DqnConfig,
    game: GameConfig,
    discount: f64,
    env_steps: u64,
    grad_steps: u64,
    rng: ChaCha8Rng,
    scratch: TrainScratch,
    act_scratch: SingleScratch,
    enc: Vec<f64>,
}

impl DqnAgent {
    pub fn new(game: &GameConfig, cfg: DqnConfig, mut rng: ChaCha8Rng) -> Self {
        cfg.validate().expect("valid learner configuration");
        let dims = [
            game.num_urgency() + 1,
            HIDDEN_WIDTH,
            HIDDEN_WIDTH,
            game.num_bids(),
        ];
        let online = Mlp::new(&dims, &mut rng);
        let target = online.clone();
        let opt = Rmsprop::new(&online, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_epsilon);
        let buffer = ReplayBuffer::new(cfg.buffer_size);
        let scratch = TrainScratch::new(&online, cfg.batch_size);
        let discount = cfg.discount.unwrap_or_else(|| game.discount());
        Self {
            online,
            target,
            opt,
            buffer,
            cfg,
            game: game.clone(),
            discount,
            env_steps: 0,
            grad_steps: 0,
            rng,
            scratch,
            act_scratch: SingleScratch::default(),
            enc: vec![0.0; game.num_urgency() + 1],
        }
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon.value(self.env_steps)
    }

    /// ε-greedy bid for `state` at the current exploration level.
    pub fn select_bid(&mut self, state: AgentState) -> usize {
        encode_state_into(state, &self.game, &mut self.enc);
        let q = self.online.forward_into(&self.enc, &mut self.act_scratch);
        let eps = self.cfg.epsilon.value(self.env_steps);
        epsilon_greedy(q, state.karma, eps, &mut self.rng)
    }

    /// Records a transition and, once warm, performs one gradient step on a
    /// uniformly sampled minibatch. Returns that step's loss.
    pub fn observe(&mut self, t: Transition) -> Option<f64> {
        self.buffer.push(t);
        self.env_steps += 1;
        if self.buffer.len() < self.cfg.warmup_steps.max(self.cfg.batch_size) {
            return None;
        }
        let mut batch = std::mem::take(&mut self.scratch.batch);
        let mut indices = std::mem::take(&mut self.scratch.indices);
        self.buffer
            .sample_indices(self.cfg.batch_size, &mut self.rng, &mut indices);
        batch.clear();
        batch.extend(indices.iter().map(|&i| *self.buffer.get(i)));
        let loss = self.train_step(&batch);
        self.scratch.batch = batch;
        self.scratch.indices = indices;
        Some(loss)
    }

    /// One optimizer step on the double-Q regression loss for `batch`.
    /// Returns the pre-step loss; syncs the target network every
    /// `target_sync_period` gradient steps.
    pub fn train_step(&mut self, batch: &[Transition]) -> f64 {
        let b = batch.len();
        assert!(b > 0, "empty batch");
        let input_dim = self.online.input_dim();
        let scratch = &mut self.scratch;
        if scratch.xcat.nrows() != 2 * b {
            scratch.xcat = Array2::zeros((2 * b, input_dim));
            scratch.dout = Array2::zeros((b, self.online.output_dim()));
        }
        for (i, t) in batch.iter().enumerate() {
            encode_state_into(
                t.state,
                &self.game,
                scratch.xcat.row_mut(i).as_slice_mut().expect("row"),
            );
            encode_state_into(
                t.next_state,
                &self.game,
                scratch.xcat.row_mut(b + i).as_slice_mut().expect("row"),
            );
        }

        // One fused online pass over current and next states, one target
        // pass over next states.
        self.online
            .forward_batch(scratch.xcat.view(), &mut scratch.acts_online, &mut scratch.q_online);
        self.target.forward_batch(
            scratch.xcat.slice(s![b.., ..]),
            &mut scratch.acts_target,
            &mut scratch.q_target,
        );

        scratch.dout.fill(0.0);
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let next_row = scratch.q_online.row(b + i);
            let a_star = masked_greedy(next_row.as_slice().expect("row"), t.next_state.karma);
            let y = t.reward + self.discount * scratch.q_target[[i, a_star]];
            let e = scratch.q_online[[i, t.action]] - y;
            loss += e * e;
            scratch.dout[[i, t.action]] = 2.0 * e / b as f64;
        }
        loss /= b as f64;
        debug_assert!(loss.is_finite(), "training loss diverged");

        let act_views: Vec<ArrayView2<f64>> = scratch
            .acts_online
            .iter()
            .map(|a| a.slice(s![..b, ..]))
            .collect();
        backward_batch(
            &self.online,
            scratch.xcat.slice(s![..b, ..]),
            &act_views,
            &scratch.dout,
            &mut scratch.grads,
            &mut scratch.deltas,
        );
        self.opt.step(&mut self.online, &scratch.grads);

        self.grad_steps += 1;
        if self.grad_steps % self.cfg.target_sync_period == 0 {
            self.sync_target();
        }
        loss
    }

    pub fn sync_target(&mut self) {
        for (t, o) in self.target.layers.iter_mut().zip(self.online.layers.iter()) {
            t.w.assign(&o.w);
            t.b.assign(&o.b);
        }
    }

    /// Clears replay and counters and reinitializes both networks and the
    /// optimizer from the agent's own RNG stream (fresh learner, same
    /// stream).
    pub fn reinitialize(&mut self) {
        let dims = self.online.dims();
        self.online = Mlp::new(&dims, &mut self.rng);
        self.target = self.online.clone();
        self.opt = Rmsprop::new(
            &self.online,
            self.cfg.learning_rate,
            self.cfg.rmsprop_decay,
            self.cfg.rmsprop_epsilon,
        );
        self.buffer.clear();
        self.env_steps = 0;
        self.grad_steps = 0;
    }

    pub fn greedy_policy(&self) -> Array3<f64> {
        extract_greedy_policy(&self.online, &self.game)
    }
}
