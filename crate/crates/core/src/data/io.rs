use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Modality, ModalityFeatureMatrix};
use crate::error::{Error, Result};
use crate::substrate::Dense;

pub const FEATURE_MAGIC: &[u8; 4] = b"JBMF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 3;

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Ignore the first line (column headers).
    pub skip_header: bool,
}

pub fn load_interactions(path: &Path, opts: LoadOptions) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(f), path, opts)
}

/// Parse `user_id<TAB>item_id[<TAB>...]` lines. Indices are assigned in
/// first-appearance order; repeated pairs collapse.
pub fn parse_interactions(reader: impl BufRead, origin: &Path, opts: LoadOptions) -> Result<Dataset> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut interactions = Vec::new();

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if n == 0 && opts.skip_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(user), Some(item)) = (fields.next(), fields.next()) else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                msg: "expected `user_id<TAB>item_id`".into(),
            });
        };
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                msg: "empty user or item id".into(),
            });
        }
        let u = *users.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            user_ids.len() - 1
        });
        let i = *items.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            item_ids.len() - 1
        });
        if seen.insert((u, i)) {
            interactions.push((u, i));
        }
    }
    if interactions.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no interactions",
            origin.display()
        )));
    }
    Ok(Dataset {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        interactions,
        user_ids,
        item_ids,
        features: BTreeMap::new(),
    })
}

pub fn write_features(path: &Path, features: &ModalityFeatureMatrix) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let m = &features.matrix;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(FEATURE_MAGIC);
    header.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    header.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    header.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    header.push(features.modality.tag());
    header.extend_from_slice(&[0u8; 3]);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a feature file without checking its row count.
pub fn read_features(path: &Path) -> Result<ModalityFeatureMatrix> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

fn decode_features(bytes: &[u8], path: &Path) -> Result<ModalityFeatureMatrix> {
    let ctx = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN {
        return Err(ctx(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(ctx("bad magic, expected JBMF".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(ctx(format!("unsupported version {version}")));
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    let modality = Modality::from_tag(bytes[16]).ok_or_else(|| ctx(format!("bad modality tag {}", bytes[16])))?;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(ctx(format!(
            "payload length mismatch: header says {rows}x{cols} ({expected} bytes), file has {} bytes",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ModalityFeatureMatrix::new(modality, Dense::from_vec(rows, cols, data)?)
}

/// Read a feature file and validate its modality tag and row count.
pub fn load_features(path: &Path, modality: Modality, n_items: usize) -> Result<ModalityFeatureMatrix> {
    let f = read_features(path)?;
    if f.modality != modality {
        return Err(Error::Format(format!(
            "{}: modality tag is {}, expected {modality}",
            path.display(),
            f.modality
        )));
    }
    if f.matrix.rows() != n_items {
        return Err(Error::Shape {
            expected: format!("{n_items} rows (one per item) in {}", path.display()),
            actual: format!("{} rows", f.matrix.rows()),
        });
    }
    Ok(f)
}
