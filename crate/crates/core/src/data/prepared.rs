use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{load_features, write_features};
use super::split::{Split, SplitRatios};
use super::{Dataset, Interaction, Modality};
use crate::error::{Error, Result};

/// Dataset counts as reported in dataset statistics tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

impl DatasetSummary {
    pub fn of(d: &Dataset) -> Self {
        DatasetSummary {
            users: d.n_users,
            items: d.n_items,
            interactions: d.interactions.len(),
            density: d.density(),
        }
    }

    /// Density as a percentage with three decimals, e.g. `0.117%`.
    pub fn density_percent(&self) -> String {
        format!("{:.3}%", self.density * 100.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "users\t{}", self.users);
        let _ = writeln!(s, "items\t{}", self.items);
        let _ = writeln!(s, "interactions\t{}", self.interactions);
        let _ = writeln!(s, "density\t{}", self.density_percent());
        s
    }
}

/// An indexed dataset with its split, stored as a directory.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub dataset: Dataset,
    pub split: Split,
}

pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const SPLIT_MANIFEST_FILE: &str = "split_manifest.txt";
pub const SUMMARY_FILE: &str = "summary.txt";

pub fn feature_file_name(m: Modality) -> String {
    format!("{}.jbmf", m.name())
}

fn write(path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

fn read(path: PathBuf) -> Result<String> {
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn pairs_text(pairs: &[Interaction]) -> String {
    let mut s = String::with_capacity(pairs.len() * 12);
    for (u, i) in pairs {
        let _ = writeln!(s, "{u}\t{i}");
    }
    s
}

fn parse_pairs(path: PathBuf, n_users: usize, n_items: usize) -> Result<Vec<Interaction>> {
    let body = read(path.clone())?;
    let mut out = Vec::new();
    for (n, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.clone(),
            line: n + 1,
            msg: msg.into(),
        };
        let mut f = line.split('\t');
        let u: usize = f
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad user index"))?;
        let i: usize = f
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad item index"))?;
        if u >= n_users || i >= n_items {
            return Err(bad("index out of range"));
        }
        out.push((u, i));
    }
    Ok(out)
}

fn id_text(ids: &[String]) -> String {
    let mut s = String::new();
    for (k, id) in ids.iter().enumerate() {
        let _ = writeln!(s, "{k}\t{id}");
    }
    s
}

fn parse_ids(path: PathBuf) -> Result<Vec<String>> {
    let body = read(path.clone())?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let (k, id) = l.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg: "expected `index<TAB>id`".into(),
            })?;
            if k.parse::<usize>().ok() != Some(n) {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: n + 1,
                    msg: "indices must be contiguous from 0".into(),
                });
            }
            Ok(id.to_string())
        })
        .collect()
}

fn parse_ratios(manifest: &str) -> SplitRatios {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix("ratios\t"))
        .and_then(|r| {
            let v: Vec<f64> = r.split(':').filter_map(|x| x.parse().ok()).collect();
            (v.len() == 3).then(|| SplitRatios {
                train: v[0],
                validation: v[1],
                test: v[2],
            })
        })
        .unwrap_or_default()
}

fn parse_seed(manifest: &str) -> u64 {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix("seed\t"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

impl PreparedDataset {
    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary::of(&self.dataset)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir.join(USERS_FILE), &id_text(&self.dataset.user_ids))?;
        write(dir.join(ITEMS_FILE), &id_text(&self.dataset.item_ids))?;
        write(dir.join(TRAIN_FILE), &pairs_text(&self.split.train))?;
        write(dir.join(VALIDATION_FILE), &pairs_text(&self.split.validation))?;
        write(dir.join(TEST_FILE), &pairs_text(&self.split.test))?;
        write(dir.join(SPLIT_MANIFEST_FILE), &self.split.manifest())?;
        write(dir.join(SUMMARY_FILE), &self.summary().to_text())?;
        for f in self.dataset.features.values() {
            write_features(&dir.join(feature_file_name(f.modality)), f)?;
        }
        Ok(())
    }

    /// Files that make up a prepared directory, in a fixed order.
    pub fn content_files(dir: &Path) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = [USERS_FILE, ITEMS_FILE, TRAIN_FILE, VALIDATION_FILE, TEST_FILE]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        for m in Modality::ALL {
            let p = dir.join(feature_file_name(m));
            if p.exists() {
                v.push(p);
            }
        }
        v
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let user_ids = parse_ids(dir.join(USERS_FILE))?;
        let item_ids = parse_ids(dir.join(ITEMS_FILE))?;
        let (nu, ni) = (user_ids.len(), item_ids.len());
        if nu == 0 || ni == 0 {
            return Err(Error::EmptyDataset(format!("{} has no users or items", dir.display())));
        }
        let train = parse_pairs(dir.join(TRAIN_FILE), nu, ni)?;
        let validation = parse_pairs(dir.join(VALIDATION_FILE), nu, ni)?;
        let test = parse_pairs(dir.join(TEST_FILE), nu, ni)?;
        let manifest = read(dir.join(SPLIT_MANIFEST_FILE))?;
        let mut interactions: Vec<Interaction> =
            train.iter().chain(&validation).chain(&test).copied().collect();
        interactions.sort_unstable();
        let before = interactions.len();
        interactions.dedup();
        if interactions.len() != before {
            return Err(Error::Consistency("split files overlap".into()));
        }
        let mut dataset = Dataset {
            n_users: nu,
            n_items: ni,
            interactions,
            user_ids,
            item_ids,
            features: BTreeMap::new(),
        };
        for m in Modality::ALL {
            let p = dir.join(feature_file_name(m));
            if p.exists() {
                dataset.attach_features(load_features(&p, m, ni)?)?;
            }
        }
        Ok(PreparedDataset {
            dataset,
            split: Split {
                train,
                validation,
                test,
                seed: parse_seed(&manifest),
                ratios: parse_ratios(&manifest),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, ModalityFeatureMatrix};
    use crate::substrate::{Dense, Rng};

    #[test]
    fn write_then_load_is_identity() {
        let mut interactions = Vec::new();
        for u in 0..6 {
            for i in 0..(u + 2) {
                interactions.push((u, (i * 3 + u) % 9));
            }
        }
        interactions.sort_unstable();
        interactions.dedup();
        let mut dataset = Dataset {
            n_users: 6,
            n_items: 9,
            interactions,
            user_ids: (0..6).map(|u| format!("u{u}")).collect(),
            item_ids: (0..9).map(|i| format!("i{i}")).collect(),
            features: BTreeMap::new(),
        };
        let mut rng = Rng::new(2);
        let m = Dense::from_fn(9, 3, |_, _| rng.gaussian() as f32);
        dataset
            .attach_features(ModalityFeatureMatrix::new(Modality::Visual, m).unwrap())
            .unwrap();
        let split = split_dataset(&dataset, SplitRatios::default(), &mut Rng::new(8)).unwrap();
        let p = PreparedDataset { dataset, split };
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        let back = PreparedDataset::load(dir.path()).unwrap();
        assert_eq!(back.dataset, p.dataset);
        assert_eq!(back.split, p.split);
    }

    #[test]
    fn density_formatting() {
        let s = DatasetSummary {
            users: 19445,
            items: 7050,
            interactions: 160792,
            density: 160792.0 / (19445.0 * 7050.0),
        };
        assert_eq!(s.density_percent(), "0.117%");
    }
}
