use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use clap::ValueEnum;
use npyz::{DType, NpyFile, Order, TypeChar};

use jbm_core::data::{read_features, Modality, ModalityFeatureMatrix};
use jbm_core::substrate::Dense;
use jbm_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureOrder {
    /// Row `k` belongs to the `k`-th item in first-appearance order.
    Index,
    /// Row `r` belongs to the item whose id is the integer `r`.
    Id,
}

fn read_npy(path: &Path) -> Result<Dense<f32>> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = NpyFile::new(BufReader::new(f)).map_err(|e| bad(e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(bad(format!("expected a 2-d array, found shape {shape:?}")));
    }
    let (rows, cols) = (shape[0] as usize, shape[1] as usize);
    let order = npy.order();
    let data: Vec<f32> = match npy.dtype() {
        DType::Plain(t) if t.type_char() == TypeChar::Float && t.size_field() == 4 => {
            npy.into_vec::<f32>().map_err(|e| bad(e.to_string()))?
        }
        DType::Plain(t) if t.type_char() == TypeChar::Float && t.size_field() == 8 => npy
            .into_vec::<f64>()
            .map_err(|e| bad(e.to_string()))?
            .into_iter()
            .map(|v| v as f32)
            .collect(),
        other => return Err(bad(format!("unsupported dtype {}", other.descr()))),
    };
    match order {
        Order::C => Dense::from_vec(rows, cols, data),
        Order::Fortran => Ok(Dense::from_vec(cols, rows, data)?.transpose()),
    }
}

/// Load one modality's features from `.npy` or the native binary format and
/// align the rows with the dataset's item indices.
pub fn load_feature_input(
    path: &Path,
    modality: Modality,
    item_ids: &[String],
    order: FeatureOrder,
) -> Result<ModalityFeatureMatrix> {
    let raw = if path.extension().is_some_and(|e| e == "npy") {
        read_npy(path)?
    } else {
        let f = read_features(path)?;
        if f.modality != modality {
            return Err(Error::Format(format!(
                "{}: holds {} features, expected {modality}",
                path.display(),
                f.modality
            )));
        }
        f.matrix
    };
    let matrix = match order {
        FeatureOrder::Index => raw,
        FeatureOrder::Id => {
            let rows: Vec<usize> = item_ids
                .iter()
                .map(|id| {
                    id.parse::<usize>().ok().filter(|&r| r < raw.rows()).ok_or_else(|| {
                        Error::Format(format!(
                            "{}: item id `{id}` is not a row index below {}",
                            path.display(),
                            raw.rows()
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            raw.gather_rows(&rows)?
        }
    };
    ModalityFeatureMatrix::new(modality, matrix)
}
