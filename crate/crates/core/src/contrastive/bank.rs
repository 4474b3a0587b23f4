use std::collections::VecDeque;

use crate::labels::TargetMatrix;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// A detached activated vector remembered from an earlier iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry<T> {
    pub vector: Vec<T>,
    pub image: usize,
    pub iteration: u64,
    /// Global push order across all classes.
    pub sequence: u64,
}

/// Per-class FIFO queues of activated projected vectors, capacity `K` each.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<BankEntry<T>>>,
    next_sequence: u64,
}

/// Immutable, gradient-free view of recent bank entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    /// `[m, dim]`
    pub vectors: Tensor<T>,
    pub classes: Vec<usize>,
    pub images: Vec<usize>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[0, dim]),
            classes: Vec::new(),
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(classes: usize, dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            queues: vec![VecDeque::with_capacity(capacity); classes],
            next_sequence: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn total(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Oldest first.
    pub fn entries(&self, class: usize) -> impl Iterator<Item = &BankEntry<T>> {
        self.queues[class].iter()
    }

    pub fn next_sequence(&self) -> u64 {
        self.next_sequence
    }

    /// Rebuilds a bank from stored queues (checkpoint restore).
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        queues: Vec<Vec<BankEntry<T>>>,
        next_sequence: u64,
    ) -> Result<Self> {
        for q in &queues {
            if q.len() > capacity || q.iter().any(|e| e.vector.len() != dim) {
                return Err(TensorError::Contract("bank queue exceeds capacity or dimension".into()));
            }
        }
        Ok(Self {
            capacity,
            dim,
            queues: queues.into_iter().map(VecDeque::from).collect(),
            next_sequence,
        })
    }

    /// Pushes a copy of every activated vector of `[n, classes, dim]`
    /// `vectors`, evicting the oldest entry of a full queue.
    pub fn push(
        &mut self,
        vectors: &Tensor<T>,
        targets: &TargetMatrix,
        images: &[usize],
        iteration: u64,
    ) -> Result<()> {
        let l = self.classes();
        let want = [targets.rows(), l, self.dim];
        if vectors.shape() != want || images.len() != targets.rows() || targets.classes() != l {
            return Err(TensorError::Shape {
                op: "bank_push",
                left: vectors.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (i, &image) in images.iter().enumerate() {
            for j in 0..l {
                if !targets.get(i, j) {
                    continue;
                }
                let q = &mut self.queues[j];
                if q.len() == self.capacity {
                    q.pop_front();
                }
                q.push_back(BankEntry {
                    vector: vectors.row(i * l + j).to_vec(),
                    image,
                    iteration,
                    sequence: self.next_sequence,
                });
                self.next_sequence += 1;
            }
        }
        Ok(())
    }

    /// The `cap` most recently pushed entries across all classes, grouped by
    /// ascending class and most-recent-first within a class.
    pub fn snapshot(&self, cap: usize) -> Snapshot<T> {
        let mut picked: Vec<(usize, &BankEntry<T>)> = self
            .queues
            .iter()
            .enumerate()
            .flat_map(|(c, q)| q.iter().map(move |e| (c, e)))
            .collect();
        picked.sort_by(|a, b| b.1.sequence.cmp(&a.1.sequence));
        picked.truncate(cap);
        picked.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.sequence.cmp(&a.1.sequence)));
        let mut data = Vec::with_capacity(picked.len() * self.dim);
        for (_, e) in &picked {
            data.extend_from_slice(&e.vector);
        }
        Snapshot {
            vectors: Tensor::new(&[picked.len(), self.dim], data).expect("rows of dim"),
            classes: picked.iter().map(|(c, _)| *c).collect(),
            images: picked.iter().map(|(_, e)| e.image).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_batch(class: usize, classes: usize, value: f64) -> (Tensor<f64>, TargetMatrix) {
        let mut t = TargetMatrix::zeros(1, classes);
        t.set(0, class, true);
        (Tensor::full(&[1, classes, 2], value), t)
    }

    #[test]
    fn inactive_batch_leaves_bank_unchanged() {
        let mut bank = MemoryBank::<f64>::new(3, 2, 4);
        let before = bank.clone();
        bank.push(&Tensor::ones(&[2, 3, 2]), &TargetMatrix::zeros(2, 3), &[0, 1], 0).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn fifo_eviction_keeps_latest_two() {
        let mut bank = MemoryBank::<f64>::new(2, 2, 2);
        for (it, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            let (x, y) = one_hot_batch(1, 2, v);
            bank.push(&x, &y, &[it], it as u64).unwrap();
        }
        let kept: Vec<f64> = bank.entries(1).map(|e| e.vector[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
        assert_eq!(bank.len(0), 0);
    }

    #[test]
    fn snapshot_takes_most_recent_overall() {
        let mut bank = MemoryBank::<f64>::new(2, 2, 8);
        for (it, c) in [0usize, 1, 0, 1, 0].into_iter().enumerate() {
            let (x, y) = one_hot_batch(c, 2, it as f64);
            bank.push(&x, &y, &[it], it as u64).unwrap();
        }
        let snap = bank.snapshot(3);
        // pushes 2,3,4 are newest: class 0 gets 4 then 2, class 1 gets 3
        assert_eq!(snap.classes, vec![0, 0, 1]);
        assert_eq!(snap.images, vec![4, 2, 3]);
        assert_eq!(bank.snapshot(100).len(), 5);
        assert!(MemoryBank::<f64>::new(2, 2, 8).snapshot(4).is_empty());
    }
}
