//! Experience replay: a fixed-capacity ring of transitions with uniform
//! minibatch sampling.

use rand::Rng;

use crate::game::AgentState;

/// One environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: AgentState,
    pub action: usize,
    pub reward: f64,
    pub next_state: AgentState,
}

/// Ring buffer; once full, each push evicts the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.cursor = 0;
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    /// Uniform sample (with replacement) of `batch` indices over the fill.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
        debug_assert!(!self.is_empty());
        out.clear();
        out.extend((0..batch).map(|_| rng.random_range(0..self.data.len())));
    }

    /// Iterates the stored transitions in ring order (oldest first).
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.data.len() < self.capacity { 0 } else { self.cursor };
        self.data[split..].iter().chain(self.data[..split].iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::AgentState;

    fn t(tag: usize) -> Transition {
        Transition {
            state: AgentState::new(0, tag),
            action: 0,
            reward: tag as f64,
            next_state: AgentState::new(0, tag),
        }
    }

    #[test]
    fn fifo_keeps_exactly_last_capacity() {
        let cap = 8;
        let extra = 5;
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..cap + extra {
            buf.push(t(i));
        }
        assert_eq!(buf.len(), cap);
        let kept: Vec<usize> = buf.iter_ordered().map(|tr| tr.state.karma).collect();
        let expected: Vec<usize> = (extra..cap + extra).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn uniform_sampling_chi_squared() {
        let cap = 64;
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..cap {
            buf.push(t(i));
        }
        let mut rng = crate::rng::derive_rng(5, &[]);
        let draws = 256_000;
        let mut counts = vec![0usize; cap];
        let mut idx = Vec::new();
        for _ in 0..draws / 64 {
            buf.sample_indices(64, &mut rng, &mut idx);
            for &i in &idx {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / cap as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // χ² with cap-1 dof: mean cap-1, variance 2(cap-1).
        let dof = (cap - 1) as f64;
        let sigma = (2.0 * dof).sqrt();
        assert!(
            (chi2 - dof).abs() <= 3.0 * sigma,
            "chi2 {chi2} outside 3 sigma of {dof}"
        );
    }
}
