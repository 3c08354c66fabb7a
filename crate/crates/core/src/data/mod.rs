//! Interaction logs, modality feature tables, splits and training triples.

mod io;
mod prepared;
mod sampling;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Csr, Dense, SparseMatrix};

pub use io::{
    load_features, load_interactions, parse_interactions, read_features, write_features,
    LoadOptions, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use prepared::{PreparedDataset, DatasetSummary};
pub use sampling::{TrainIndex, Triple, WeightedTriple};
pub use split::{split_dataset, Split, SplitRatios};
pub use synthetic::{toy_dataset, ToySpec};

/// A (user-index, item-index) pair.
pub type Interaction = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" | "v" | "image" => Ok(Modality::Visual),
            "textual" | "t" | "text" => Ok(Modality::Textual),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Per-item feature table of one modality; row `i` belongs to item-index `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatureMatrix {
    pub modality: Modality,
    pub matrix: Dense<f32>,
}

impl ModalityFeatureMatrix {
    pub fn new(modality: Modality, matrix: Dense<f32>) -> Result<Self> {
        if matrix.cols() == 0 {
            return Err(Error::Format("feature dimension must be at least 1".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite(format!("{modality} features")));
        }
        Ok(ModalityFeatureMatrix { modality, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<Interaction>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub features: BTreeMap<Modality, ModalityFeatureMatrix>,
}

impl Dataset {
    pub fn density(&self) -> f64 {
        self.interactions.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    pub fn attach_features(&mut self, features: ModalityFeatureMatrix) -> Result<()> {
        if features.matrix.rows() != self.n_items {
            return Err(Error::Shape {
                expected: format!("{} feature rows", self.n_items),
                actual: format!("{} rows", features.matrix.rows()),
            });
        }
        self.features.insert(features.modality, features);
        Ok(())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.features.keys().copied().collect()
    }
}

/// Binary user×item matrix of training feedback with degree metadata.
#[derive(Clone, Debug)]
pub struct InteractionMatrix {
    pub matrix: SparseMatrix,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

impl InteractionMatrix {
    pub fn n_users(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_items(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn build_interaction_matrix(
    train: &[Interaction],
    n_users: usize,
    n_items: usize,
) -> Result<InteractionMatrix> {
    let trip: Vec<(usize, usize, f32)> = train.iter().map(|&(u, i)| (u, i, 1.0)).collect();
    let mut matrix = Csr::from_triplets(n_users, n_items, trip)?;
    if matrix.values().iter().any(|&v| v != 1.0) {
        // duplicates were summed; O is binary
        let ones = vec![1.0; matrix.nnz()];
        matrix = Csr::new(
            n_users,
            n_items,
            matrix.indptr().to_vec(),
            matrix.indices().to_vec(),
            ones,
        )?;
    }
    let user_degree = (0..n_users).map(|u| matrix.row_nnz(u)).collect();
    let mut item_degree = vec![0usize; n_items];
    for &i in matrix.indices() {
        item_degree[i] += 1;
    }
    Ok(InteractionMatrix {
        matrix,
        user_degree,
        item_degree,
    })
}
