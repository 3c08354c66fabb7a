use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::debias::DebiasConfig;
use crate::diffusion::{check_blend_weight, ReverseMean, SampleMode, MAX_STEPS};
use crate::error::{Error, Result};
use crate::fusion::ContrastConfig;
use crate::substrate::AdamConfig;

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// No feature denoising: raw features, no diffusion or alignment losses.
    #[serde(rename = "no-mmd")]
    NoMmd,
    /// Average pooling instead of gated fusion.
    #[serde(rename = "no-ff")]
    NoFf,
    /// Unit weight for every training triple.
    #[serde(rename = "no-bd")]
    NoBd,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoMmd, Ablation::NoFf, Ablation::NoBd];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMmd => "no-mmd",
            Ablation::NoFf => "no-ff",
            Ablation::NoBd => "no-bd",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected no-mmd, no-ff or no-bd)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: String,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Cut-off of the validation recall that drives early stopping.
    pub eval_k: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub knn_k: usize,
    pub omega: f64,
    pub tau: f64,
    pub tau_cl: f64,
    pub lambda_dm: f64,
    pub lambda_mm: f64,
    pub lambda_cl: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Item rows per diffusion / alignment batch.
    pub item_batch: usize,
    pub reverse_mean: ReverseMean,
    pub sample_mode: SampleMode,
    pub raw_contrast: bool,
    pub seed: u64,
    pub ablations: BTreeSet<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "jbm-diff".into(),
            batch_size: 512,
            eval_batch: 1024,
            embed_dim: 64,
            layers: 2,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 10,
            eval_k: 20,
            diffusion_steps: 5,
            beta_start: 1e-4,
            beta_end: 0.02,
            knn_k: 5,
            omega: 0.3,
            tau: 0.2,
            tau_cl: 0.2,
            lambda_dm: 0.005,
            lambda_mm: 0.001,
            lambda_cl: 0.01,
            lambda: 1.0,
            gamma: 1.0,
            item_batch: 4096,
            reverse_mean: ReverseMean::X0Posterior,
            sample_mode: SampleMode::Deterministic,
            raw_contrast: false,
            seed: 2024,
            ablations: BTreeSet::new(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
    }
    Ok(())
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("`{name}` must be nonnegative, got {v}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("embed_dim", self.embed_dim),
            ("max_epochs", self.max_epochs),
            ("eval_k", self.eval_k),
            ("knn_k", self.knn_k),
            ("item_batch", self.item_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(1..=MAX_STEPS).contains(&self.diffusion_steps) {
            return Err(Error::Config(format!(
                "`diffusion_steps` must be in 1..={MAX_STEPS}, got {}",
                self.diffusion_steps
            )));
        }
        positive("lr", self.lr)?;
        positive("tau", self.tau)?;
        positive("tau_cl", self.tau_cl)?;
        positive("lambda", self.lambda)?;
        positive("gamma", self.gamma)?;
        nonnegative("lambda_dm", self.lambda_dm)?;
        nonnegative("lambda_mm", self.lambda_mm)?;
        nonnegative("lambda_cl", self.lambda_cl)?;
        check_blend_weight(self.omega)?;
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn debias(&self) -> DebiasConfig {
        DebiasConfig {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau_cl,
            literal: self.raw_contrast,
        }
    }
}
