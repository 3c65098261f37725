use rand::seq::SliceRandom;
use rand::Rng as _;

use super::Dataset;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Draws fixed-size minibatches from a dataset.
///
/// With replacement (the default) every index is an independent uniform draw.
/// Without replacement the sampler walks a reshuffled permutation per epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch: usize,
    rng: Rng,
    replacement: bool,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    /// Panics if the dataset is empty or `batch` is zero.
    pub fn new(dataset: &'a Dataset, batch: usize, seed: u64) -> Self {
        assert!(!dataset.is_empty() && batch > 0, "sampler needs data and a positive batch size");
        Self {
            dataset,
            batch,
            rng: rng::rng(seed),
            replacement: true,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn epochs(mut self) -> Self {
        self.replacement = false;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.dataset.len();
        if self.replacement {
            return (0..self.batch).map(|_| self.rng.random_range(0..n)).collect();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self) -> (Tensor, Vec<usize>) {
        let idx = self.next_indices();
        self.dataset.gather(&idx)
    }
}
