//! Uniform FIFO replay storage.

use rand::Rng;

/// One agent's experience for a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: [f64; 3],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True only when the episode ended by converging.
    pub done: bool,
}

/// Ring buffer of transitions stored in single precision. Memory grows with
/// the number of stored transitions up to `capacity`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    obs: Vec<f32>,
    next_obs: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<bool>,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Self {
        assert!(capacity > 0 && obs_dim > 0);
        Self {
            capacity,
            obs_dim,
            obs: vec![],
            next_obs: vec![],
            actions: vec![],
            rewards: vec![],
            dones: vec![],
            head: 0,
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Transitions pushed since construction, including evicted ones.
    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.obs.len(), self.obs_dim, "observation length");
        assert_eq!(t.next_obs.len(), self.obs_dim, "next observation length");
        let d = self.obs_dim;
        let cast = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<_>>();
        if self.len() < self.capacity {
            self.obs.extend(cast(&t.obs));
            self.next_obs.extend(cast(&t.next_obs));
            self.actions.extend(t.action.iter().map(|x| *x as f32));
            self.rewards.push(t.reward as f32);
            self.dones.push(t.done);
        } else {
            let i = self.head;
            self.obs[i * d..(i + 1) * d].copy_from_slice(&cast(&t.obs));
            self.next_obs[i * d..(i + 1) * d].copy_from_slice(&cast(&t.next_obs));
            for (a, x) in self.actions[i * 3..i * 3 + 3].iter_mut().zip(t.action) {
                *a = x as f32;
            }
            self.rewards[i] = t.reward as f32;
            self.dones[i] = t.done;
        }
        self.head = (self.head + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Stored transition at slot `i` (slots are not in insertion order once
    /// the buffer has wrapped).
    pub fn get(&self, i: usize) -> Transition {
        assert!(i < self.len());
        let d = self.obs_dim;
        let widen = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<_>>();
        Transition {
            obs: widen(&self.obs[i * d..(i + 1) * d]),
            action: [self.actions[i * 3] as f64, self.actions[i * 3 + 1] as f64, self.actions[i * 3 + 2] as f64],
            reward: self.rewards[i] as f64,
            next_obs: widen(&self.next_obs[i * d..(i + 1) * d]),
            done: self.dones[i],
        }
    }

    /// Slot holding the `age`-th oldest surviving transition.
    pub fn slot_of_oldest(&self, age: usize) -> usize {
        assert!(age < self.len());
        if self.len() < self.capacity {
            age
        } else {
            (self.head + age) % self.capacity
        }
    }

    pub fn sample_indices<G: Rng + ?Sized>(&self, rng: &mut G, n: usize) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }

    pub(crate) fn raw(&self, i: usize) -> (&[f32], &[f32], &[f32], f32, bool) {
        let d = self.obs_dim;
        (
            &self.obs[i * d..(i + 1) * d],
            &self.actions[i * 3..i * 3 + 3],
            &self.next_obs[i * d..(i + 1) * d],
            self.rewards[i],
            self.dones[i],
        )
    }
}
