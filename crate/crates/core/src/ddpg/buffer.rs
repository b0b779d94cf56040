use rand::Rng;

use crate::data::InstanceRecord;

/// One stored transition. The horizon is a single step, so there is no
/// successor state.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub x: InstanceRecord,
    pub z: Vec<f64>,
    pub y_m: usize,
    pub y_t: usize,
    pub c: Vec<f64>,
    /// Noised action actually taken, in `[-1, 1]^latent_dim`.
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Fixed-capacity FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    // Slot the next push overwrites once the buffer is full.
    cursor: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            items: Vec::new(),
            capacity,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Item by storage slot (any order).
    pub fn get(&self, slot: usize) -> &T {
        &self.items[slot]
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let (newer, older) = self.items.split_at(self.cursor);
        older.iter().chain(newer)
    }

    /// `n` slots drawn uniformly with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.items.is_empty(), "sampling from an empty replay buffer");
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}
