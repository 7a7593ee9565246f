//! Class-balanced ("selective learning") mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless stream of batches holding `batch_size / K` samples of every
/// observed class, in class order. Each class cycles through its own queue,
/// reshuffled whenever it runs dry, so minority classes repeat.
#[derive(Clone, Debug)]
pub struct SelectiveBatches {
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_class: usize,
    rng: ChaCha8Rng,
}

impl SelectiveBatches {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(num_classes) {
            return Err(Error::config(
                "batch_size",
                format!("{batch_size} is not a positive multiple of {num_classes} classes"),
            ));
        }
        let mut queues = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::ClassOutOfRange { index: l, classes: num_classes });
            }
            queues[l].push(i);
        }
        if let Some(c) = queues.iter().position(Vec::is_empty) {
            return Err(Error::config("batch_size", format!("class {c} has no samples to draw")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        Ok(Self { cursors: vec![0; num_classes], queues, per_class: batch_size / num_classes, rng })
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.per_class * self.queues.len());
        for (q, cur) in self.queues.iter_mut().zip(&mut self.cursors) {
            for _ in 0..self.per_class {
                if *cur == q.len() {
                    q.shuffle(&mut self.rng);
                    *cur = 0;
                }
                batch.push(q[*cur]);
                *cur += 1;
            }
        }
        batch
    }
}

impl Iterator for SelectiveBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
