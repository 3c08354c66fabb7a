#![allow(dead_code)]

use jbm_core::config::TrainConfig;
use jbm_core::data::{split_dataset, toy_dataset, PreparedDataset, SplitRatios, ToySpec, Triple};
use jbm_core::substrate::{Dense, Rng};

pub fn toy(seed: u64) -> PreparedDataset {
    let dataset = toy_dataset(&ToySpec::default(), seed).unwrap();
    let split = split_dataset(&dataset, SplitRatios::default(), &mut Rng::new(seed)).unwrap();
    PreparedDataset { dataset, split }
}

pub fn small_cfg() -> TrainConfig {
    TrainConfig {
        embed_dim: 8,
        batch_size: 32,
        knn_k: 3,
        item_batch: 30,
        max_epochs: 4,
        eval_k: 10,
        lr: 5e-3,
        ..TrainConfig::default()
    }
}

/// Mean of −log σ(ŷ_ui − ŷ_uj) computed straight from the embeddings.
pub fn plain_bpr(e: &Dense<f32>, n_users: usize, batch: &[Triple]) -> f64 {
    let score = |u: usize, i: usize| -> f64 {
        e.row(u).iter().zip(e.row(n_users + i)).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    batch
        .iter()
        .map(|t| {
            let x = score(t.user, t.pos) - score(t.user, t.neg);
            (1.0 + (-x).exp()).ln()
        })
        .sum::<f64>()
        / batch.len() as f64
}
