use log::warn;

use super::Interaction;
use crate::substrate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// A training triple with its confidence weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedTriple {
    pub triple: Triple,
    pub w: f32,
}

/// Training positives indexed by user, for negative sampling and masking.
#[derive(Clone, Debug)]
pub struct TrainIndex {
    n_items: usize,
    pairs: Vec<Interaction>,
    positives: Vec<Vec<usize>>,
    /// indices into `pairs` whose user still has at least one free item
    eligible: Vec<usize>,
}

impl TrainIndex {
    pub fn new(train: &[Interaction], n_users: usize, n_items: usize) -> Self {
        let mut positives = vec![Vec::new(); n_users];
        for &(u, i) in train {
            positives[u].push(i);
        }
        for p in &mut positives {
            p.sort_unstable();
            p.dedup();
        }
        let full: Vec<bool> = positives.iter().map(|p| p.len() >= n_items).collect();
        let n_full = full.iter().filter(|&&f| f).count();
        if n_full > 0 {
            warn!("{n_full} user(s) interacted with every item; their pairs are skipped for negative sampling");
        }
        let eligible = train
            .iter()
            .enumerate()
            .filter(|(_, &(u, _))| !full[u])
            .map(|(k, _)| k)
            .collect();
        TrainIndex {
            n_items,
            pairs: train.to_vec(),
            positives,
            eligible,
        }
    }

    pub fn n_users(&self) -> usize {
        self.positives.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pairs(&self) -> &[Interaction] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self, user: usize) -> &[usize] {
        &self.positives[user]
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    /// Uniform item the user has not interacted with in training.
    pub fn sample_negative(&self, user: usize, rng: &mut Rng) -> Option<usize> {
        if self.positives[user].len() >= self.n_items {
            return None;
        }
        loop {
            let j = rng.below(self.n_items);
            if !self.is_positive(user, j) {
                return Some(j);
            }
        }
    }

    /// `batch` triples with `(u, i⁺)` drawn uniformly from training pairs.
    pub fn sample_triples(&self, batch: usize, rng: &mut Rng) -> Vec<Triple> {
        if self.eligible.is_empty() {
            if !self.pairs.is_empty() {
                warn!("no training pair admits a negative sample");
            }
            return Vec::new();
        }
        (0..batch)
            .map(|_| {
                let (user, pos) = self.pairs[self.eligible[rng.below(self.eligible.len())]];
                let neg = self
                    .sample_negative(user, rng)
                    .expect("eligible users have a free item");
                Triple { user, pos, neg }
            })
            .collect()
    }

    /// One triple per eligible training pair, in shuffled order.
    pub fn epoch_triples(&self, rng: &mut Rng) -> Vec<Triple> {
        let mut order = self.eligible.clone();
        rng.shuffle(&mut order);
        order
            .into_iter()
            .map(|k| {
                let (user, pos) = self.pairs[k];
                let neg = self
                    .sample_negative(user, rng)
                    .expect("eligible users have a free item");
                Triple { user, pos, neg }
            })
            .collect()
    }
}
