use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::substrate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("split ratios out of [0,1]: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }
}

/// Users with fewer interactions than this keep all of them in train.
pub const MIN_SPLIT_INTERACTIONS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl Split {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Plain-text description of how the split was produced.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol\tper-user random");
        let _ = writeln!(s, "seed\t{}", self.seed);
        let _ = writeln!(
            s,
            "ratios\t{}:{}:{}",
            self.ratios.train, self.ratios.validation, self.ratios.test
        );
        let _ = writeln!(s, "min_user_interactions\t{MIN_SPLIT_INTERACTIONS}");
        let _ = writeln!(s, "train\t{}", self.train.len());
        let _ = writeln!(s, "validation\t{}", self.validation.len());
        let _ = writeln!(s, "test\t{}", self.test.len());
        s
    }
}

fn held_out(n: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        0
    } else {
        ((n as f64 * ratio).round() as usize).max(1)
    }
}

/// Per-user random partition. Every list comes back sorted by (user, item).
pub fn split_dataset(dataset: &Dataset, ratios: SplitRatios, rng: &mut Rng) -> Result<Split> {
    ratios.validate()?;
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_users];
    for &(u, i) in &dataset.interactions {
        per_user[u].push(i);
    }
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed: rng.seed(),
        ratios,
    };
    for (u, items) in per_user.iter_mut().enumerate() {
        let n = items.len();
        if n < MIN_SPLIT_INTERACTIONS {
            split.train.extend(items.iter().map(|&i| (u, i)));
            continue;
        }
        rng.shuffle(items);
        let mut n_test = held_out(n, ratios.test);
        let mut n_val = held_out(n, ratios.validation);
        while n_test + n_val >= n {
            if n_val >= n_test && n_val > 0 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let (test, rest) = items.split_at(n_test);
        let (val, train) = rest.split_at(n_val);
        split.test.extend(test.iter().map(|&i| (u, i)));
        split.validation.extend(val.iter().map(|&i| (u, i)));
        split.train.extend(train.iter().map(|&i| (u, i)));
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
