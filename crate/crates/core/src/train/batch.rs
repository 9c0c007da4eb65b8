//! Token-count batching over length-sorted buckets. Batch `n` of the stream
//! is a pure function of (lengths, budget, seed, n), so training can resume
//! at any step without replaying the data pipeline.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct BatchSchedule {
    lens: Vec<usize>,
    batch_tokens: usize,
    seed: u64,
    per_epoch: usize,
    cached: Option<(u64, Vec<Vec<usize>>)>,
}

impl BatchSchedule {
    pub fn new(lens: Vec<usize>, batch_tokens: usize, seed: u64) -> Result<Self> {
        if lens.is_empty() {
            return Err(Error::Empty("no sentences to batch".into()));
        }
        if let Some(&l) = lens.iter().find(|&&l| l > batch_tokens) {
            return Err(Error::InvalidArgument(format!("sentence of {l} tokens exceeds batch_tokens {batch_tokens}")));
        }
        let mut s = Self { lens, batch_tokens, seed, per_epoch: 0, cached: None };
        s.per_epoch = s.epoch(0).len();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    /// All batches of one epoch: indices sorted by (length, random key),
    /// packed greedily up to the token budget, then shuffled.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut r = rng::rng_from(rng::derive(self.seed, epoch));
        let keys: Vec<u64> = (0..self.lens.len()).map(|_| r.gen()).collect();
        let mut order: Vec<usize> = (0..self.lens.len()).collect();
        order.sort_by_key(|&i| (self.lens[i], keys[i]));
        let mut batches = Vec::new();
        let mut cur = Vec::new();
        let mut tokens = 0;
        for i in order {
            if tokens + self.lens[i] > self.batch_tokens && !cur.is_empty() {
                batches.push(std::mem::take(&mut cur));
                tokens = 0;
            }
            tokens += self.lens[i];
            cur.push(i);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches.shuffle(&mut r);
        batches
    }

    /// The `n`-th batch of the endless stream and its epoch.
    pub fn get(&mut self, n: u64) -> (u64, Vec<usize>) {
        let epoch = n / self.per_epoch as u64;
        let i = (n % self.per_epoch as u64) as usize;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.epoch(epoch)));
        }
        (epoch, self.cached.as_ref().unwrap().1[i].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_cover_everything_within_budget() {
        let lens: Vec<usize> = (0..200).map(|i| 3 + i % 11).collect();
        let s = BatchSchedule::new(lens.clone(), 40, 3).unwrap();
        for e in 0..3 {
            let b = s.epoch(e);
            assert_eq!(b.len(), s.batches_per_epoch());
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.iter().map(|&i| lens[i]).sum::<usize>() <= 40));
        }
        assert_ne!(s.epoch(0), s.epoch(1));
    }

    #[test]
    fn stream_is_stateless() {
        let lens: Vec<usize> = (0..50).map(|i| 2 + i % 5).collect();
        let mut a = BatchSchedule::new(lens.clone(), 12, 9).unwrap();
        let mut b = BatchSchedule::new(lens, 12, 9).unwrap();
        let seq: Vec<_> = (0..40).map(|n| a.get(n)).collect();
        assert_eq!(b.get(33), seq[33]);
        assert_eq!(b.get(2), seq[2]);
    }

    #[test]
    fn oversized_sentence_rejected() {
        assert!(BatchSchedule::new(vec![3, 50], 40, 0).is_err());
        assert!(BatchSchedule::new(vec![], 40, 0).is_err());
    }
}
