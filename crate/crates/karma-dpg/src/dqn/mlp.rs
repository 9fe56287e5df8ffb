//! Dense multilayer perceptron with ReLU hidden layers, written directly on
//! `ndarray` so batch passes reduce to GEMMs into preallocated buffers.
//! Everything is `f64`; the training loop calls these passes hundreds of
//! thousands of times, so no allocation happens per step.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Weights, shape `(fan_in, fan_out)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Feed-forward network `in → hidden… → out` with ReLU on hidden layers and
/// a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Fan-balanced uniform init `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "network needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    w: Array2::from_shape_fn((fan_in, fan_out), |_| {
                        (rng.random::<f64>() * 2.0 - 1.0) * bound
                    }),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.w.nrows()).collect();
        d.push(self.layers.last().expect("non-empty").w.ncols());
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Single-sample forward pass; allocation-free via `scratch`.
    pub fn forward_into<'s>(&self, x: &[f64], scratch: &'s mut SingleScratch) -> &'s [f64] {
        assert_eq!(x.len(), self.input_dim());
        scratch.ensure(self);
        let n = self.layers.len();
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = &mut scratch.acts[i];
            for (j, o) in out.iter_mut().enumerate() {
                let mut z = layer.b[j];
                for (k, &xi) in cur.iter().enumerate() {
                    z += xi * layer.w[[k, j]];
                }
                *o = if i + 1 < n { z.max(0.0) } else { z };
            }
            cur = unsafe { &*(out.as_slice() as *const [f64]) };
        }
        scratch.acts.last().expect("non-empty").as_slice()
    }

    /// Single-sample forward pass returning a fresh vector.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = SingleScratch::default();
        self.forward_into(x, &mut scratch).to_vec()
    }

    /// Batch forward `x (B, in) → out (B, out)`, storing hidden activations
    /// in `acts` (post-ReLU) for a later backward pass.
    pub fn forward_batch(&self, x: ArrayView2<f64>, acts: &mut Vec<Array2<f64>>, out: &mut Array2<f64>) {
        let n = self.layers.len();
        let batch = x.nrows();
        acts.resize_with(n - 1, || Array2::zeros((0, 0)));
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let is_last = i + 1 == n;
            let target: &mut Array2<f64> = if is_last { out } else { &mut acts[i] };
            if target.dim() != (batch, layer.w.ncols()) {
                *target = Array2::zeros((batch, layer.w.ncols()));
            }
            general_mat_mul(1.0, &cur, &layer.w, 0.0, target);
            for mut row in target.rows_mut() {
                row += &layer.b;
            }
            if !is_last {
                target.mapv_inplace(|z| z.max(0.0));
                cur = unsafe { &*(target as *const Array2<f64>) }.view();
            }
        }
    }
}

/// Reusable buffers for single-sample forward passes.
#[derive(Default)]
pub struct SingleScratch {
    acts: Vec<Vec<f64>>,
}

impl SingleScratch {
    fn ensure(&mut self, net: &Mlp) {
        if self.acts.len() != net.layers.len() {
            self.acts = net.layers.iter().map(|l| vec![0.0; l.w.ncols()]).collect();
        }
    }
}

/// Per-layer gradients, same shapes as the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            dw: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            db: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }
}

/// Backward pass for a batch loss whose gradient w.r.t. the network output
/// is `dout (B, out)`. `x` and `acts` must come from the matching
/// `forward_batch` call (views may select a row subset, as long as `x`,
/// `acts`, and `dout` agree). Writes parameter gradients into `grads` and
/// uses `scratch_delta` as the back-propagated delta buffer chain.
pub fn backward_batch(
    net: &Mlp,
    x: ArrayView2<f64>,
    acts: &[ArrayView2<f64>],
    dout: &Array2<f64>,
    grads: &mut Gradients,
    scratch_delta: &mut Vec<Array2<f64>>,
) {
    let n = net.layers.len();
    let batch = x.nrows();
    scratch_delta.resize_with(n, || Array2::zeros((0, 0)));

    // delta for the output layer is dout itself.
    if scratch_delta[n - 1].dim() != dout.dim() {
        scratch_delta[n - 1] = Array2::zeros(dout.dim());
    }
    scratch_delta[n - 1].assign(dout);

    for i in (0..n).rev() {
        let input: ArrayView2<f64> = if i == 0 { x } else { acts[i - 1] };
        // Split borrow: delta at index i is read, delta at i-1 written.
        let (head, tail) = scratch_delta.split_at_mut(i);
        let delta = &tail[0];
        general_mat_mul(1.0, &input.t(), delta, 0.0, &mut grads.dw[i]);
        for (j, g) in grads.db[i].iter_mut().enumerate() {
            *g = delta.column(j).sum();
        }
        if i > 0 {
            let prev = &mut head[i - 1];
            if prev.dim() != (batch, net.layers[i].w.nrows()) {
                *prev = Array2::zeros((batch, net.layers[i].w.nrows()));
            }
            general_mat_mul(1.0, delta, &net.layers[i].w.t(), 0.0, prev);
            // ReLU mask from the cached post-activation values.
            ndarray::Zip::from(prev.view_mut())
                .and(acts[i - 1])
                .for_each(|d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
    }
}

/// RMSprop: per-parameter squared-gradient accumulator,
/// `s ← ρ s + (1-ρ) g²`, `w ← w − η g / (√s + ε)`. No momentum.
#[derive(Debug, Clone)]
pub struct Rmsprop {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    sq_w: Vec<Array2<f64>>,
    sq_b: Vec<Array1<f64>>,
}

impl Rmsprop {
    pub fn new(net: &Mlp, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            sq_w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            sq_b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        let (lr, rho, eps) = (self.learning_rate, self.decay, self.epsilon);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.w)
                .and(&mut self.sq_w[i])
                .and(&grads.dw[i])
                .for_each(|w, s, &g| {
                    *s = rho * *s + (1.0 - rho) * g * g;
                    *w -= lr * g / (s.sqrt() + eps);
                });
            ndarray::Zip::from(&mut layer.b)
                .and(&mut self.sq_b[i])
                .and(&grads.db[i])
                .for_each(|b, s, &g| {
                    *s = rho * *s + (1.0 - rho) * g * g;
                    *b -= lr * g / (s.sqrt() + eps);
                });
        }
    }

    /// Accumulators are non-negative by construction; exposed for tests.
    pub fn accumulators_nonnegative(&self) -> bool {
        self.sq_w.iter().all(|a| a.iter().all(|&v| v >= 0.0))
            && self.sq_b.iter().all(|a| a.iter().all(|&v| v >= 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_weights_zero_outputs() {
        let mut rng = crate::rng::derive_rng(1, &[]);
        let mut net = Mlp::new(&[3, 8, 8, 5], &mut rng);
        for l in &mut net.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let out = net.forward(&[1.0, -2.0, 0.5]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_unit_net() {
        // 2 → 2 → 2 with identity-like weights; trace one path by hand:
        // z1 = (1·1 + 0, 1·(-1)) = (1, -1) → relu (1, 0)
        // out = (1·2, 1·0.5 + 0.25) = (2, 0.75)
        let mut rng = crate::rng::derive_rng(2, &[]);
        let mut net = Mlp::new(&[2, 2, 2], &mut rng);
        net.layers[0].w = ndarray::array![[1.0, -1.0], [0.0, 0.0]];
        net.layers[0].b = ndarray::array![0.0, 0.0];
        net.layers[1].w = ndarray::array![[2.0, 0.5], [1.0, 1.0]];
        net.layers[1].b = ndarray::array![0.0, 0.25];
        let out = net.forward(&[1.0, 3.0]);
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn batch_forward_matches_naive_single() {
        let mut rng = crate::rng::derive_rng(3, &[]);
        let net = Mlp::new(&[4, 16, 16, 7], &mut rng);
        let x = Array2::from_shape_fn((9, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut acts = Vec::new();
        let mut out = Array2::zeros((0, 0));
        net.forward_batch(x.view(), &mut acts, &mut out);
        for r in 0..9 {
            // Independent naive dense evaluation, layer by layer.
            let mut cur: Vec<f64> = x.row(r).to_vec();
            for (i, layer) in net.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.w.ncols()];
                for j in 0..layer.w.ncols() {
                    let mut z = layer.b[j];
                    for k in 0..layer.w.nrows() {
                        z += cur[k] * layer.w[[k, j]];
                    }
                    next[j] = if i + 1 < net.layers.len() { z.max(0.0) } else { z };
                }
                cur = next;
            }
            for (c, &expected) in cur.iter().enumerate() {
                assert_abs_diff_eq!(out[[r, c]], expected, epsilon = 1e-12);
            }
            // The fast single-sample path agrees too.
            let single = net.forward(&x.row(r).to_vec());
            for (c, &expected) in cur.iter().enumerate() {
                assert_abs_diff_eq!(single[c], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rmsprop_zero_gradient_is_a_fixed_point() {
        let mut rng = crate::rng::derive_rng(4, &[]);
        let mut net = Mlp::new(&[3, 4, 2], &mut rng);
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        let mut opt = Rmsprop::new(&net, 1e-3, 0.99, 1e-8);
        for _ in 0..5 {
            opt.step(&mut net, &grads);
        }
        assert_eq!(net, before);
        assert!(opt.accumulators_nonnegative());
    }
}
