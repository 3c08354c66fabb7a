//! Checkpoints: named tensors in a `JBMC` container plus a JSON sidecar.
//!
//! Container layout (little endian): magic `JBMC`, u32 version, u32 tensor
//! count, then per tensor a u32 name length, the UTF-8 name, u32 rows,
//! u32 cols and `rows·cols` f32 values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::models::Recommender;
use crate::substrate::Dense;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JBMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub epoch: usize,
    pub best_val: f64,
    pub config: TrainConfig,
    /// Content hashes of the dataset files the run trained on.
    #[serde(default)]
    pub fingerprints: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Dense<f32>)>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit the container")))
}

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, Dense<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32_of(t.rows(), "rows")?.to_le_bytes());
        buf.extend_from_slice(&u32_of(t.cols(), "cols")?.to_le_bytes());
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Dense<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Dense::from_vec(rows, cols, data)?));
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - c.at)));
    }
    Ok(out)
}

impl Checkpoint {
    /// Parameters and caches of `model` as they are now.
    pub fn capture(model: &dyn Recommender, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<(String, Dense<f32>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        tensors.extend(model.caches());
        Checkpoint { meta, tensors }
    }

    /// Overwrite `model`'s parameters and caches. Every parameter must be present.
    pub fn restore(&self, model: &mut dyn Recommender) -> Result<()> {
        if model.name() != self.meta.model {
            return Err(Error::Consistency(format!(
                "checkpoint is for `{}`, model is `{}`",
                self.meta.model,
                model.name()
            )));
        }
        let by_name: BTreeMap<&str, &Dense<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks parameter `{name}`")))?;
            model.params_mut().set_value(&name, (*t).clone())?;
        }
        model.restore_caches(&self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(&mut f, &self.tensors)?;
        let mp = meta_path(path);
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_tensors(&mut f)?;
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta = serde_json::from_str(&text)?;
        Ok(Checkpoint { meta, tensors })
    }
}
