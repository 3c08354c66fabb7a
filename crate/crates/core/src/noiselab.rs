//! Controlled corruption of item features and training feedback, and
//! comparative robustness runs over it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{Interaction, Modality, ModalityFeatureMatrix};
use crate::error::{Error, Result};
use crate::models::ModelRegistry;
use crate::substrate::Rng;
use crate::trainer::{evaluate_model, fit, TrainData};

/// Largest corruption ratio the protocol allows.
pub const MAX_RATIO: f64 = 0.20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    ModalityReplace,
    FeedbackAdd,
    FeedbackRemove,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::ModalityReplace,
        CorruptionKind::FeedbackAdd,
        CorruptionKind::FeedbackRemove,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::ModalityReplace => "modality-replace",
            CorruptionKind::FeedbackAdd => "feedback-add",
            CorruptionKind::FeedbackRemove => "feedback-remove",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown corruption kind `{s}` (expected modality-replace, feedback-add or feedback-remove)"
                ))
            })
    }
}

fn check_fraction(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("corruption ratio must lie in [0,1], got {ratio}")));
    }
    Ok(())
}

/// Ratios an experiment may request.
pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=MAX_RATIO).contains(&ratio) {
        return Err(Error::Config(format!(
            "corruption ratio {ratio} rejected: the protocol is limited to 20%"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Required for `modality-replace`, ignored otherwise.
    pub modality: Option<Modality>,
    pub ratio: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.kind == CorruptionKind::ModalityReplace && self.modality.is_none() {
            return Err(Error::Config("modality-replace needs a modality".into()));
        }
        Ok(())
    }

    fn rng(&self) -> Rng {
        Rng::new(self.seed).derive(77)
    }
}

/// `⌊ratio·n⌋`, robust to the representation error of decimal ratios.
pub fn corruption_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 * (1.0 + 1e-12)).floor() as usize
}

/// One changed row or pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub kind: CorruptionKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modality: Option<Modality>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub user: Option<usize>,
    pub item: usize,
    /// Item whose features were copied in.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<usize>,
}

pub fn events_jsonl(events: &[CorruptionEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).expect("event serializes"));
        s.push('\n');
    }
    s
}

/// Replace the rows of `⌊ratio·|I|⌋` distinct items with the original row of
/// another item drawn uniformly (with replacement across corrupted items).
pub fn corrupt_modality(
    features: &ModalityFeatureMatrix,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(ModalityFeatureMatrix, Vec<CorruptionEvent>)> {
    check_fraction(ratio)?;
    let n = features.matrix.rows();
    let count = corruption_count(ratio, n);
    if count > 0 && n < 2 {
        return Err(Error::Domain("feature replacement needs at least two items".into()));
    }
    let mut out = features.matrix.clone();
    let mut events = Vec::with_capacity(count);
    for i in rng.sample_distinct(n, count) {
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        out.row_mut(i).copy_from_slice(features.matrix.row(j));
        events.push(CorruptionEvent {
            kind: CorruptionKind::ModalityReplace,
            modality: Some(features.modality),
            user: None,
            item: i,
            source: Some(j),
        });
    }
    Ok((ModalityFeatureMatrix::new(features.modality, out)?, events))
}

/// Append `⌊ratio·|train|⌋` pairs drawn uniformly from the slots absent from
/// `observed`, which should hold every split.
pub fn corrupt_feedback_add(
    train: &[Interaction],
    observed: &[Interaction],
    n_users: usize,
    n_items: usize,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Vec<Interaction>, Vec<CorruptionEvent>)> {
    check_fraction(ratio)?;
    let taken: HashSet<Interaction> = observed.iter().chain(train).copied().collect();
    let slots = n_users * n_items;
    let free = slots - taken.len().min(slots);
    let mut count = corruption_count(ratio, train.len());
    if count > free {
        warn!("only {free} free user-item slots; adding {free} instead of {count}");
        count = free;
    }
    let added: Vec<Interaction> = if free <= 2 * count {
        let open: Vec<Interaction> = (0..n_users)
            .flat_map(|u| (0..n_items).map(move |i| (u, i)))
            .filter(|p| !taken.contains(p))
            .collect();
        rng.sample_distinct(open.len(), count).into_iter().map(|k| open[k]).collect()
    } else {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let p = (rng.below(n_users), rng.below(n_items));
            if !taken.contains(&p) && chosen.insert(p) {
                out.push(p);
            }
        }
        out
    };
    let events = added
        .iter()
        .map(|&(u, i)| CorruptionEvent {
            kind: CorruptionKind::FeedbackAdd,
            modality: None,
            user: Some(u),
            item: i,
            source: None,
        })
        .collect();
    let mut out = train.to_vec();
    out.extend(added);
    Ok((out, events))
}

/// Drop `⌊ratio·|train|⌋` uniformly chosen training pairs, keeping the order
/// of the rest.
pub fn corrupt_feedback_remove(
    train: &[Interaction],
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Vec<Interaction>, Vec<CorruptionEvent>)> {
    check_fraction(ratio)?;
    let count = corruption_count(ratio, train.len());
    let drop: HashSet<usize> = rng.sample_distinct(train.len(), count).into_iter().collect();
    let mut kept = Vec::with_capacity(train.len() - count);
    let mut events = Vec::with_capacity(count);
    for (k, &(u, i)) in train.iter().enumerate() {
        if drop.contains(&k) {
            events.push(CorruptionEvent {
                kind: CorruptionKind::FeedbackRemove,
                modality: None,
                user: Some(u),
                item: i,
                source: None,
            });
        } else {
            kept.push((u, i));
        }
    }
    Ok((kept, events))
}

/// Training data after applying one corruption.
pub struct Corrupted {
    pub train: Vec<Interaction>,
    pub features: Option<BTreeMap<Modality, ModalityFeatureMatrix>>,
    pub events: Vec<CorruptionEvent>,
}

impl Corrupted {
    pub fn view<'a>(&'a self, clean: &TrainData<'a>) -> TrainData<'a> {
        TrainData {
            train: &self.train,
            features: self.features.as_ref().unwrap_or(clean.features),
            ..*clean
        }
    }
}

pub fn apply(data: &TrainData<'_>, spec: &CorruptionSpec) -> Result<Corrupted> {
    spec.validate()?;
    let mut rng = spec.rng();
    match spec.kind {
        CorruptionKind::ModalityReplace => {
            let m = spec.modality.expect("validated");
            let f = data
                .features
                .get(&m)
                .ok_or_else(|| Error::Config(format!("dataset has no {m} features to corrupt")))?;
            let (replaced, events) = corrupt_modality(f, spec.ratio, &mut rng)?;
            let mut features = data.features.clone();
            features.insert(m, replaced);
            Ok(Corrupted {
                train: data.train.to_vec(),
                features: Some(features),
                events,
            })
        }
        CorruptionKind::FeedbackAdd => {
            let observed: Vec<Interaction> = data.validation.iter().chain(data.test).copied().collect();
            let (train, events) =
                corrupt_feedback_add(data.train, &observed, data.n_users, data.n_items, spec.ratio, &mut rng)?;
            Ok(Corrupted {
                train,
                features: None,
                events,
            })
        }
        CorruptionKind::FeedbackRemove => {
            let (train, events) = corrupt_feedback_remove(data.train, spec.ratio, &mut rng)?;
            Ok(Corrupted {
                train,
                features: None,
                events,
            })
        }
    }
}

pub const NOISE_MODELS: [&str; 3] = ["jbm-diff", "lightgcn", "bpr-mf"];

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub model: String,
    pub kind: CorruptionKind,
    pub modality: Option<Modality>,
    pub ratio: f64,
    pub seed: u64,
    pub recall: f64,
    pub ndcg: f64,
}

pub const NOISE_HEADER: &str = "model,corruption_kind,modality,ratio,seed,recall@20,ndcg@20";

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut s = String::from(NOISE_HEADER);
    s.push('\n');
    for r in rows {
        let m = r.modality.map_or("none", Modality::name);
        let _ = writeln!(s, "{},{},{m},{},{},{},{}", r.model, r.kind, r.ratio, r.seed, r.recall, r.ndcg);
    }
    s
}

pub struct NoiseRun {
    pub rows: Vec<NoiseRow>,
    pub events: Vec<CorruptionEvent>,
}

/// For every spec, corrupt the training data once, then fit each model on it
/// and score Recall@20 / NDCG@20 on the clean test split. Training positives
/// of the clean split are masked so every cell ranks the same candidates.
pub fn run_noise_grid(
    data: &TrainData<'_>,
    models: &[&str],
    specs: &[CorruptionSpec],
    base: &TrainConfig,
    registry: &ModelRegistry,
) -> Result<NoiseRun> {
    for m in models {
        if !NOISE_MODELS.contains(m) {
            return Err(Error::Config(format!(
                "noise runs compare {}; got `{m}`",
                NOISE_MODELS.join(", ")
            )));
        }
    }
    for s in specs {
        s.validate()?;
    }
    let clean_index = data.index();
    let mut rows = Vec::new();
    let mut events = Vec::new();
    for spec in specs {
        let corrupted = apply(data, spec)?;
        let view = corrupted.view(data);
        for &model in models {
            info!("noise: {model} {} ratio {} seed {}", spec.kind, spec.ratio, spec.seed);
            let cfg = TrainConfig {
                model: model.to_string(),
                seed: spec.seed,
                ..base.clone()
            };
            let out = fit(&view, &cfg, registry, None)?;
            let res = evaluate_model(out.model.as_ref(), &clean_index, data.test, &[20], cfg.eval_batch)?;
            rows.push(NoiseRow {
                model: model.to_string(),
                kind: spec.kind,
                modality: spec.modality.filter(|_| spec.kind == CorruptionKind::ModalityReplace),
                ratio: spec.ratio,
                seed: spec.seed,
                recall: res.recall(20)?,
                ndcg: res.ndcg(20)?,
            });
        }
        events.extend(corrupted.events);
    }
    Ok(NoiseRun { rows, events })
}
