//! Modality-coherence confidence for BPR training pairs.
//!
//! For each triple the per-modality preference gaps
//! `R^m = σ(⟨u^m, i⁺^m⟩) − σ(⟨u^m, i⁻^m⟩)` are summarized by their mean `μ_R`
//! and population variance `ε_R`; the pair's weight is
//! `w = σ(λ·μ_R)·exp(−γ·ε_R)`. Weights are data: no gradient flows through them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Triple, WeightedTriple};
use crate::error::{Error, Result};
use crate::substrate::{dot, sigmoid, Dense, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            lambda: 1.0,
            gamma: 1.0,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "λ and γ must be positive, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBias {
    pub r: Vec<f64>,
    pub mu: f64,
    pub eps: f64,
}

impl ModalityBias {
    pub fn from_gaps(r: Vec<f64>) -> Self {
        let n = r.len().max(1) as f64;
        let mu = r.iter().sum::<f64>() / n;
        let eps = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        ModalityBias { r, mu, eps }
    }
}

/// User and item rows of one modality view.
#[derive(Clone, Copy, Debug)]
pub struct ModalView<'a, T> {
    pub users: &'a Dense<T>,
    pub items: &'a Dense<T>,
}

pub fn modality_bias<T: Scalar>(t: Triple, views: &[ModalView<'_, T>]) -> ModalityBias {
    let r = views
        .iter()
        .map(|v| {
            let u = v.users.row(t.user);
            let p = dot(u, v.items.row(t.pos)).f64();
            let n = dot(u, v.items.row(t.neg)).f64();
            sigmoid(p) - sigmoid(n)
        })
        .collect();
    ModalityBias::from_gaps(r)
}

pub fn confidence(bias: &ModalityBias, cfg: &DebiasConfig) -> f64 {
    sigmoid(cfg.lambda * bias.mu) * (-cfg.gamma * bias.eps).exp()
}

/// Confidence-weighted triples; `None` config gives every triple weight 1.
pub fn weigh_triples<T: Scalar>(
    triples: &[Triple],
    views: &[ModalView<'_, T>],
    cfg: Option<&DebiasConfig>,
) -> Vec<WeightedTriple> {
    match cfg {
        None => triples
            .iter()
            .map(|&triple| WeightedTriple { triple, w: 1.0 })
            .collect(),
        Some(cfg) => triples
            .par_iter()
            .map(|&triple| WeightedTriple {
                triple,
                w: confidence(&modality_bias(triple, views), cfg) as f32,
            })
            .collect(),
    }
}

/// `mean_b w_b·(−log σ(ŷ_{u,i⁺} − ŷ_{u,i⁻}))` with scores from the final
/// embedding `E` (users first, then items).
pub fn weighted_bpr<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    n_users: usize,
    batch: &[WeightedTriple],
) -> Result<Var> {
    if batch.is_empty() {
        return Ok(tape.scalar_constant(T::zero()));
    }
    let users: Vec<usize> = batch.iter().map(|b| b.triple.user).collect();
    let pos: Vec<usize> = batch.iter().map(|b| n_users + b.triple.pos).collect();
    let neg: Vec<usize> = batch.iter().map(|b| n_users + b.triple.neg).collect();
    let u = tape.gather_rows(e, &users)?;
    let p = tape.gather_rows(e, &pos)?;
    let n = tape.gather_rows(e, &neg)?;
    let sp = tape.row_dot(u, p)?;
    let sn = tape.row_dot(u, n)?;
    let gap = tape.sub(sn, sp)?;
    let per = tape.softplus(gap);
    let w = batch.iter().map(|b| T::of(b.w as f64)).collect();
    tape.weighted_mean(per, w)
}

pub const HISTOGRAM_BUCKETS: usize = 10;

/// Counts of weights per tenth of `[0, 1]`; the last bucket is closed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceHistogram {
    pub counts: [u64; HISTOGRAM_BUCKETS],
}

impl ConfidenceHistogram {
    pub fn add(&mut self, batch: &[WeightedTriple]) {
        self.add_weights(batch.iter().map(|b| b.w));
    }

    pub fn add_weights(&mut self, weights: impl IntoIterator<Item = f32>) {
        for w in weights {
            let k = ((w as f64 * HISTOGRAM_BUCKETS as f64) as usize).min(HISTOGRAM_BUCKETS - 1);
            self.counts[k] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV rows `epoch,bucket,count` where bucket is the lower edge.
    pub fn csv_rows(&self, epoch: usize) -> String {
        let mut s = String::new();
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{epoch},{:.1},{c}", k as f64 / HISTOGRAM_BUCKETS as f64);
        }
        s
    }
}

pub const HISTOGRAM_HEADER: &str = "epoch,bucket,count";
