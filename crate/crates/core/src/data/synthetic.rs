use std::collections::{BTreeMap, BTreeSet};

use super::{Dataset, Modality, ModalityFeatureMatrix};
use crate::error::Result;
use crate::substrate::{Dense, Rng};

/// Shape of a clustered toy dataset.
#[derive(Clone, Copy, Debug)]
pub struct ToySpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub per_user: usize,
    /// Probability that an interaction falls outside the user's cluster.
    pub off_cluster: f64,
    pub visual_dim: usize,
    pub textual_dim: usize,
    /// Standard deviation of the feature noise around each cluster centre.
    pub feature_noise: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            users: 20,
            items: 30,
            clusters: 3,
            per_user: 6,
            off_cluster: 0.1,
            visual_dim: 8,
            textual_dim: 6,
            feature_noise: 0.3,
        }
    }
}

/// Users prefer the items of one cluster; both modalities scatter items
/// around per-cluster centres. Item `i` belongs to cluster `i % clusters`.
pub fn toy_dataset(spec: &ToySpec, seed: u64) -> Result<Dataset> {
    let mut rng = Rng::new(seed);
    let c = spec.clusters.max(1);
    let members: Vec<Vec<usize>> = (0..c).map(|k| (k..spec.items).step_by(c).collect()).collect();
    let mut pairs = BTreeSet::new();
    for u in 0..spec.users {
        let home = &members[u % c];
        let want = spec.per_user.min(spec.items);
        let mut mine = BTreeSet::new();
        while mine.len() < want {
            let i = if rng.uniform() < spec.off_cluster || home.is_empty() {
                rng.below(spec.items)
            } else {
                home[rng.below(home.len())]
            };
            mine.insert(i);
        }
        pairs.extend(mine.into_iter().map(|i| (u, i)));
    }
    let mut features = BTreeMap::new();
    for (m, dim) in [(Modality::Visual, spec.visual_dim), (Modality::Textual, spec.textual_dim)] {
        if dim == 0 {
            continue;
        }
        let centres = Dense::<f32>::from_fn(c, dim, |_, _| rng.gaussian() as f32);
        let x = Dense::from_fn(spec.items, dim, |i, j| {
            centres.get(i % c, j) + (spec.feature_noise * rng.gaussian()) as f32
        });
        features.insert(m, ModalityFeatureMatrix::new(m, x)?);
    }
    Ok(Dataset {
        n_users: spec.users,
        n_items: spec.items,
        interactions: pairs.into_iter().collect(),
        user_ids: (0..spec.users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..spec.items).map(|i| i.to_string()).collect(),
        features,
    })
}
