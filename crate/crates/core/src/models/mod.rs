//! Recommenders behind a common trait, selected by name at runtime.

mod baselines;
mod jbm;

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::data::{Interaction, Modality, ModalityFeatureMatrix, Triple};
use crate::error::{Error, Result};
use crate::substrate::{Dense, ParamStore, Rng, Scalar, Tape, Var};

pub use baselines::{BprMf, LightGcn};
pub use jbm::{Forward, Frozen, JbmDiff, JbmIds, LossTerms};

/// Everything a model sees of the data at construction time.
#[derive(Clone, Copy, Debug)]
pub struct ModelInputs<'a> {
    pub n_users: usize,
    pub n_items: usize,
    pub train: &'a [Interaction],
    pub features: &'a BTreeMap<Modality, ModalityFeatureMatrix>,
}

/// Loss components of one optimization step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub bpr: f64,
    pub dm: f64,
    pub mm: f64,
    pub cl: f64,
    pub total: f64,
    pub weights: Vec<f32>,
    /// Final embeddings the step scored with, when requested.
    pub embeddings: Option<Dense<f32>>,
}

pub trait Recommender: Send {
    fn name(&self) -> &'static str;

    fn params(&self) -> &ParamStore<f32>;

    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    /// Per-epoch refresh of derived state, before any step of the epoch.
    fn begin_epoch(&mut self, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }

    /// One gradient step on `batch`.
    fn train_step(&mut self, batch: &[Triple], rng: &mut Rng, capture: bool) -> Result<StepReport>;

    /// Final user-then-item embeddings used for scoring.
    fn embeddings(&self) -> Result<Dense<f32>>;

    /// Derived tensors that must travel with the parameters in a checkpoint.
    fn caches(&self) -> Vec<(String, Dense<f32>)> {
        Vec::new()
    }

    fn restore_caches(&mut self, _tensors: &[(String, Dense<f32>)]) -> Result<()> {
        Ok(())
    }
}

/// Weights of the auxiliary terms in the overall objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dm: f64,
    pub mm: f64,
    pub cl: f64,
}

impl LossWeights {
    pub fn of(cfg: &TrainConfig) -> Self {
        LossWeights {
            dm: cfg.lambda_dm,
            mm: cfg.lambda_mm,
            cl: cfg.lambda_cl,
        }
    }
}

/// `L = L_bpr + λ_dm·L_dm + λ_mm·L_mm + λ_cl·L_cl`; absent terms count as 0.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, w: LossWeights) -> Result<Var> {
    let check = |tape: &Tape<T>, name: &str, v: Var| -> Result<()> {
        if !tape.scalar(v).is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
        Ok(())
    };
    check(tape, "L_bpr", terms.bpr)?;
    let mut total = terms.bpr;
    for (name, term, weight) in [("L_dm", terms.dm, w.dm), ("L_mm", terms.mm, w.mm), ("L_cl", terms.cl, w.cl)] {
        if let Some(v) = term {
            check(tape, name, v)?;
            if weight != 0.0 {
                let s = tape.scale(v, T::of(weight));
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}

pub type Constructor = fn(&ModelInputs<'_>, &TrainConfig, &mut Rng) -> Result<Box<dyn Recommender>>;

/// Name → constructor table.
#[derive(Clone, Default)]
pub struct ModelRegistry {
    entries: BTreeMap<&'static str, Constructor>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `jbm-diff`, `lightgcn` and `bpr-mf`.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register("jbm-diff", |i, c, rng| Ok(Box::new(JbmDiff::<f32>::new(i, c, rng)?)));
        r.register("lightgcn", |i, c, rng| Ok(Box::new(LightGcn::new(i, c, rng)?)));
        r.register("bpr-mf", |i, c, rng| Ok(Box::new(BprMf::new(i, c, rng)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: Constructor) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build(
        &self,
        name: &str,
        inputs: &ModelInputs<'_>,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<Box<dyn Recommender>> {
        let ctor = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!("unknown model `{name}`; known: {}", self.names().join(", ")))
        })?;
        ctor(inputs, cfg, rng)
    }
}
