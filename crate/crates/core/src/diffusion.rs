//! Behavior-conditioned denoising of item modality features.
//!
//! Each modality owns a denoiser `f_θ(x_t, t, e_c) = out(MLP([in(x_t), e_t]) ⊙ e_c)`
//! trained to recover `x_0` from `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε`, conditioned on
//! the item's collaborative embedding `e_c`. The reverse chain turns noised
//! features back into `x̂_0`, which is blended with the original features.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_features, Modality, ModalityFeatureMatrix};
use crate::error::{Error, Result};
use crate::substrate::{xavier_init, Dense, ParamId, ParamStore, Rng, Scalar, Tape, Var};

/// Linear β schedule and its derived α, ᾱ tables. Steps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const MAX_STEPS: usize = 1000;

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if !(1..=MAX_STEPS).contains(&steps) {
            return Err(Error::Config(format!("diffusion steps must be in 1..={MAX_STEPS}, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Fixed reverse-step variance `(1-ᾱ_{t-1})/(1-ᾱ_t)·β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(steps, beta_start, beta_end)
}

/// Forward noising with a per-row step. Returns `(x_t, ε)`.
///
/// Noise is drawn row by row, column by column, from `rng`.
pub fn q_sample<T: Scalar>(
    x0: &Dense<T>,
    steps: &[usize],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(Dense<T>, Dense<T>)> {
    if steps.len() != x0.rows() {
        return Err(Error::dim(
            "q_sample",
            format!("{} steps for {} rows", steps.len(), x0.rows()),
        ));
    }
    for &t in steps {
        schedule.check_step(t)?;
    }
    let eps = Dense::from_fn(x0.rows(), x0.cols(), |_, _| T::of(rng.gaussian()));
    let mut xt = Dense::zeros(x0.rows(), x0.cols());
    for (r, &t) in steps.iter().enumerate() {
        let a = T::of(schedule.alpha_bar(t).sqrt());
        let s = T::of((1.0 - schedule.alpha_bar(t)).sqrt());
        for ((o, &x), &e) in xt.row_mut(r).iter_mut().zip(x0.row(r)).zip(eps.row(r)) {
            *o = a * x + s * e;
        }
    }
    Ok((xt, eps))
}

/// [`q_sample`] with the same step for every row.
pub fn q_sample_at<T: Scalar>(
    x0: &Dense<T>,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(Dense<T>, Dense<T>)> {
    q_sample(x0, &vec![t; x0.rows()], schedule, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Layer sizes of the per-modality denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserShape {
    /// Raw feature dimension `d_m`.
    pub feature_dim: usize,
    /// Projection width; equals the collaborative embedding width.
    pub hidden: usize,
    /// Width of the first MLP layer over `[in(x_t), e_t]`.
    pub mlp_hidden: usize,
    pub steps: usize,
}

impl DenoiserShape {
    pub fn new(feature_dim: usize, embed_dim: usize, steps: usize) -> Self {
        DenoiserShape {
            feature_dim,
            hidden: embed_dim,
            mlp_hidden: 2 * embed_dim,
            steps,
        }
    }
}

/// Parameter handles of one modality's denoiser inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub modality: Modality,
    pub shape: DenoiserShape,
    pub activation: Activation,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub time_embedding: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Denoiser {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        modality: Modality,
        shape: DenoiserShape,
        rng: &mut Rng,
    ) -> Self {
        let p = format!("denoiser.{}", modality.name());
        let DenoiserShape {
            feature_dim: dm,
            hidden: h,
            mlp_hidden: mh,
            steps,
        } = shape;
        Denoiser {
            modality,
            shape,
            activation: Activation::Tanh,
            w_in: store.add(format!("{p}.w_in"), xavier_init(dm, h, rng)),
            b_in: store.add(format!("{p}.b_in"), Dense::zeros(1, h)),
            time_embedding: store.add(format!("{p}.time_embedding"), xavier_init(steps, h, rng)),
            w1: store.add(format!("{p}.w1"), xavier_init(2 * h, mh, rng)),
            b1: store.add(format!("{p}.b1"), Dense::zeros(1, mh)),
            w2: store.add(format!("{p}.w2"), xavier_init(mh, h, rng)),
            b2: store.add(format!("{p}.b2"), Dense::zeros(1, h)),
            w_out: store.add(format!("{p}.w_out"), xavier_init(h, dm, rng)),
            b_out: store.add(format!("{p}.b_out"), Dense::zeros(1, dm)),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_in,
            self.b_in,
            self.time_embedding,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w_out,
            self.b_out,
        ]
    }

    fn act<T: Scalar>(&self, tape: &mut Tape<T>, v: Var) -> Var {
        match self.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }

    /// `f_θ(x_t, t, e_c)` for a batch of rows, on the tape.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x_t: Var,
        steps: &[usize],
        e_c: Var,
    ) -> Result<Var> {
        let n = tape.value(x_t).rows();
        if tape.value(e_c).rows() != n || steps.len() != n {
            return Err(Error::dim(
                "denoiser_forward",
                format!(
                    "x_t has {n} rows, e_c {} rows, {} steps",
                    tape.value(e_c).rows(),
                    steps.len()
                ),
            ));
        }
        if tape.value(e_c).cols() != self.shape.hidden {
            return Err(Error::dim(
                "denoiser_forward",
                format!(
                    "condition width {} != hidden width {}",
                    tape.value(e_c).cols(),
                    self.shape.hidden
                ),
            ));
        }
        if steps.iter().any(|&t| t == 0 || t > self.shape.steps) {
            return Err(Error::Index(format!("diffusion step outside 1..={}", self.shape.steps)));
        }
        let w_in = tape.param(store, self.w_in);
        let b_in = tape.param(store, self.b_in);
        let temb = tape.param(store, self.time_embedding);
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let w_out = tape.param(store, self.w_out);
        let b_out = tape.param(store, self.b_out);

        let h = tape.matmul(x_t, w_in)?;
        let h = tape.add_row_bias(h, b_in)?;
        let rows: Vec<usize> = steps.iter().map(|t| t - 1).collect();
        let e_t = tape.gather_rows(temb, &rows)?;
        let z = tape.concat_cols(h, e_t)?;
        let a1 = tape.matmul(z, w1)?;
        let a1 = tape.add_row_bias(a1, b1)?;
        let a1 = self.act(tape, a1);
        let a2 = tape.matmul(a1, w2)?;
        let a2 = tape.add_row_bias(a2, b2)?;
        let a2 = self.act(tape, a2);
        let gated = tape.mul(a2, e_c)?;
        let out = tape.matmul(gated, w_out)?;
        tape.add_row_bias(out, b_out)
    }

    /// Forward pass without recording gradients.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x_t: &Dense<T>,
        steps: &[usize],
        e_c: &Dense<T>,
    ) -> Result<Dense<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let c = tape.constant(e_c.clone());
        let out = self.forward(&mut tape, store, x, steps, c)?;
        Ok(tape.value(out).clone())
    }

    pub fn is_finite<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        self.param_ids().iter().all(|&id| store.value(id).is_finite())
    }
}

/// Output of one diffusion training step.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionTerm {
    pub loss: Var,
    pub prediction: Var,
}

/// Sample per-row steps uniformly from `1..=T`.
pub fn sample_steps(n: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| 1 + rng.below(schedule.steps())).collect()
}

/// Mean squared error between `x_0` and the predictor's output on `x_t`,
/// averaged over rows and dimensions. Steps are drawn first, then noise.
pub fn diffusion_loss_with<T: Scalar>(
    tape: &mut Tape<T>,
    x0: &Dense<T>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    predictor: impl FnOnce(&mut Tape<T>, Var, &[usize]) -> Result<Var>,
) -> Result<DiffusionTerm> {
    if x0.rows() == 0 {
        return Err(Error::EmptyDataset("diffusion loss needs a nonempty batch".into()));
    }
    let steps = sample_steps(x0.rows(), schedule, rng);
    let (xt, _) = q_sample(x0, &steps, schedule, rng)?;
    let xt = tape.constant(xt);
    let prediction = predictor(tape, xt, &steps)?;
    let target = tape.constant(x0.clone());
    let loss = tape.mse(prediction, target)?;
    Ok(DiffusionTerm { loss, prediction })
}

/// `L_dm` for one modality's denoiser. `e_c` enters as a constant.
pub fn diffusion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    denoiser: &Denoiser,
    x0: &Dense<T>,
    e_c: &Dense<T>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<DiffusionTerm> {
    let cond = tape.constant(e_c.clone());
    diffusion_loss_with(tape, x0, schedule, rng, |tape, xt, steps| {
        denoiser.forward(tape, store, xt, steps, cond)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

/// How the reverse-step mean is formed from the denoiser output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReverseMean {
    /// Output read as an `x̂_0` estimate: posterior mean of `q(x_{t-1} | x_t, x̂_0)`.
    X0Posterior,
    /// Output substituted into the noise slot:
    /// `(x_t - β_t/√(1-ᾱ_t)·f) / √α_t`.
    Epsilon,
}

/// Reverse-step mean for one step `t`.
pub fn reverse_mean<T: Scalar>(
    x_t: &Dense<T>,
    f: &Dense<T>,
    t: usize,
    schedule: &DiffusionSchedule,
    mean: ReverseMean,
) -> Result<Dense<T>> {
    schedule.check_step(t)?;
    let (beta, alpha, ab, ab_prev) = (
        schedule.beta(t),
        schedule.alpha(t),
        schedule.alpha_bar(t),
        schedule.alpha_bar(t - 1),
    );
    let (cx, cf) = match mean {
        ReverseMean::Epsilon => (1.0 / alpha.sqrt(), -beta / ((1.0 - ab).sqrt() * alpha.sqrt())),
        ReverseMean::X0Posterior => (
            alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            ab_prev.sqrt() * beta / (1.0 - ab),
        ),
    };
    let (cx, cf) = (T::of(cx), T::of(cf));
    x_t.zip_map(f, "reverse_mean", |x, f| cx * x + cf * f)
}

/// Rows per independent reverse chain batch.
pub const REVERSE_CHUNK: usize = 2048;

/// Noise `x_0` to `x_T`, then run the conditional reverse chain down to `x̂_0`.
///
/// Rows are processed in chunks, each with its own stream derived from
/// `rng`, so the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn reverse_denoise<T: Scalar>(
    x0: &Dense<T>,
    schedule: &DiffusionSchedule,
    e_c: &Dense<T>,
    denoiser: &Denoiser,
    store: &ParamStore<T>,
    mode: SampleMode,
    mean: ReverseMean,
    rng: &mut Rng,
) -> Result<Dense<T>> {
    if !denoiser.is_finite(store) {
        return Err(Error::NonFinite(format!("{} denoiser parameters", denoiser.modality)));
    }
    if e_c.rows() != x0.rows() {
        return Err(Error::dim(
            "reverse_denoise",
            format!("{} feature rows vs {} condition rows", x0.rows(), e_c.rows()),
        ));
    }
    let base = rng.fork();
    let n = x0.rows();
    let starts: Vec<usize> = (0..n).step_by(REVERSE_CHUNK).collect();
    let chunks: Vec<Result<Dense<T>>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let e = (s + REVERSE_CHUNK).min(n);
            let mut crng = base.derive(k as u64 + 1);
            let x0c = x0.slice_rows(s, e);
            let ec = e_c.slice_rows(s, e);
            let big_t = schedule.steps();
            let (mut x, _) = q_sample_at(&x0c, big_t, schedule, &mut crng)?;
            for t in (1..=big_t).rev() {
                let f = denoiser.predict(store, &x, &vec![t; e - s], &ec)?;
                let mut mu = reverse_mean(&x, &f, t, schedule, mean)?;
                if mode == SampleMode::Stochastic && t > 1 {
                    let sd = T::of(schedule.posterior_variance(t).sqrt());
                    for v in mu.as_mut_slice() {
                        *v += sd * T::of(crng.gaussian());
                    }
                }
                x = mu;
            }
            Ok(x)
        })
        .collect();
    let parts = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Dense<T>> = parts.iter().collect();
    let out = if refs.is_empty() {
        Dense::zeros(0, x0.cols())
    } else {
        Dense::vstack(&refs)?
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("{} reverse chain output", denoiser.modality)));
    }
    Ok(out)
}

pub fn check_blend_weight(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("blend weight ω must lie in [0,1], got {omega}")));
    }
    Ok(())
}

/// `(1-ω)·x_0 + ω·x̂_0`.
pub fn blend<T: Scalar>(x0: &Dense<T>, denoised: &Dense<T>, omega: f64) -> Result<Dense<T>> {
    check_blend_weight(omega)?;
    if omega == 0.0 {
        x0.same_shape(denoised, "blend")?;
        return Ok(x0.clone());
    }
    let (a, b) = (T::of(1.0 - omega), T::of(omega));
    x0.zip_map(denoised, "blend", |x, y| a * x + b * y)
}

/// Differentiable [`blend`].
pub fn blend_var<T: Scalar>(tape: &mut Tape<T>, x0: Var, denoised: Var, omega: f64) -> Result<Var> {
    check_blend_weight(omega)?;
    let a = tape.scale(x0, T::of(1.0 - omega));
    let b = tape.scale(denoised, T::of(omega));
    tape.add(a, b)
}

/// Text-anchored in-batch InfoNCE between two modalities' item rows, after
/// projecting both to a shared width.
///
/// Returns a zero constant (with a warning) for a single-row batch.
pub fn modality_align_loss<T: Scalar>(
    tape: &mut Tape<T>,
    textual: Var,
    visual: Var,
    proj_textual: Var,
    proj_visual: Var,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("τ must be positive, got {tau}")));
    }
    let n = tape.value(textual).rows();
    if n != tape.value(visual).rows() {
        return Err(Error::dim(
            "modality_align_loss",
            format!("{n} textual rows vs {} visual rows", tape.value(visual).rows()),
        ));
    }
    if n < 2 {
        warn!("modality alignment batch of size {n}: contrast undefined, loss set to 0");
        return Ok(tape.scalar_constant(T::zero()));
    }
    let zt = tape.matmul(textual, proj_textual)?;
    let zv = tape.matmul(visual, proj_visual)?;
    let logits = tape.matmul_t(zt, zv)?;
    let logits = tape.scale(logits, T::of(1.0 / tau));
    tape.softmax_xent_diag(logits)
}

/// Per-modality denoised features as cached between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedFeatures {
    pub features: Vec<ModalityFeatureMatrix>,
    pub omega: f64,
}

/// Provenance written next to a persisted denoised cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub epoch: usize,
    pub omega: f64,
    pub steps: usize,
    pub seed: u64,
}

impl DenoisedFeatures {
    pub fn get(&self, m: Modality) -> Option<&ModalityFeatureMatrix> {
        self.features.iter().find(|f| f.modality == m)
    }

    pub fn save(&self, dir: &Path, manifest: &CacheManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in &self.features {
            write_features(&dir.join(format!("denoised_{}.jbmf", f.modality.name())), f)?;
        }
        let mut s = String::new();
        let _ = writeln!(s, "epoch\t{}", manifest.epoch);
        let _ = writeln!(s, "omega\t{}", manifest.omega);
        let _ = writeln!(s, "steps\t{}", manifest.steps);
        let _ = writeln!(s, "seed\t{}", manifest.seed);
        let p = dir.join("denoised_manifest.txt");
        std::fs::write(&p, s).map_err(|e| Error::io(p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15 && (s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15 && (s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn one_step_schedule() {
        let s = build_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
    }

    #[test]
    fn schedule_product_oracle() {
        let s = build_schedule(10, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for k in 0..10 {
            let beta = 1e-4 + (0.02 - 1e-4) * k as f64 / 9.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(k + 1) - prod).abs() < 1e-7);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_bounds() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(1001, 0.1, 0.2).is_err());
        assert!(build_schedule(5, 0.0, 0.2).is_err());
        assert!(build_schedule(5, 0.3, 0.2).is_err());
        assert!(build_schedule(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = build_schedule(4, 1e-12, 1e-12).unwrap();
        let x0 = Dense::from_fn(3, 5, |r, c| (r * 5 + c) as f64 - 7.0);
        let (xt, _) = q_sample_at(&x0, 4, &s, &mut Rng::new(1)).unwrap();
        for (a, b) in xt.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-4);
        }

        let s = build_schedule(4, 0.1, 0.3).unwrap();
        let zero = Dense::<f64>::zeros(3, 5);
        let (xt, eps) = q_sample_at(&zero, 3, &s, &mut Rng::new(2)).unwrap();
        let k = (1.0 - s.alpha_bar(3)).sqrt();
        for (a, e) in xt.as_slice().iter().zip(eps.as_slice()) {
            assert!((a - k * e).abs() < 1e-15);
        }
        assert!(q_sample_at(&zero, 0, &s, &mut Rng::new(2)).is_err());
        assert!(q_sample_at(&zero, 5, &s, &mut Rng::new(2)).is_err());
    }

    fn store_with(dm: usize, h: usize, steps: usize, seed: u64) -> (ParamStore<f64>, Denoiser) {
        let mut store = ParamStore::new();
        let d = Denoiser::register(
            &mut store,
            Modality::Visual,
            DenoiserShape::new(dm, h, steps),
            &mut Rng::new(seed),
        );
        (store, d)
    }

    #[test]
    fn ones_condition_with_identity_mlp_round_trips_projection() {
        let (h, dm) = (4, 3);
        let (mut store, mut d) = store_with(dm, h, 2, 1);
        d.activation = Activation::Identity;
        store.get_mut(d.w1).value = Dense::identity(2 * h);
        store.get_mut(d.w2).value = Dense::from_fn(2 * h, h, |r, c| if r == c { 1.0 } else { 0.0 });
        store.get_mut(d.b_in).value = Dense::from_fn(1, h, |_, c| 0.1 * c as f64);
        store.get_mut(d.b_out).value = Dense::from_fn(1, dm, |_, c| -0.2 * c as f64);
        let x = Dense::from_fn(5, dm, |r, c| (r as f64 - c as f64) * 0.3);
        let ones = Dense::filled(5, h, 1.0);
        let got = d.predict(&store, &x, &[1, 2, 1, 2, 1], &ones).unwrap();
        let proj = x.matmul(store.value(d.w_in)).unwrap();
        let mut want = Dense::from_fn(5, h, |r, c| proj.get(r, c) + store.value(d.b_in).get(0, c))
            .matmul(store.value(d.w_out))
            .unwrap();
        for r in 0..5 {
            for c in 0..dm {
                want.set(r, c, want.get(r, c) + store.value(d.b_out).get(0, c));
            }
        }
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_condition_gates_everything() {
        let (mut store, d) = store_with(3, 4, 3, 2);
        store.get_mut(d.b_out).value = Dense::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let x = Dense::from_fn(4, 3, |r, c| (r + c) as f64);
        let got = d.predict(&store, &x, &[1, 2, 3, 1], &Dense::zeros(4, 4)).unwrap();
        for r in 0..4 {
            assert_eq!(got.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn denoiser_rejects_mismatched_rows() {
        let (store, d) = store_with(3, 4, 3, 2);
        let x = Dense::zeros(4, 3);
        assert!(d.predict(&store, &x, &[1, 1, 1, 1], &Dense::zeros(3, 4)).is_err());
        assert!(d.predict(&store, &x, &[1, 1, 1, 4], &Dense::zeros(4, 4)).is_err());
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let (store, d) = store_with(5, 4, 3, 3);
        let mut rng = Rng::new(4);
        let x = Dense::from_fn(6, 5, |_, _| rng.gaussian());
        let c = Dense::from_fn(6, 4, |_, _| rng.gaussian());
        let target = Dense::from_fn(6, 5, |_, _| rng.gaussian());
        let report = crate::substrate::grad_check(
            &store,
            |tape, s| {
                let xv = tape.constant(x.clone());
                let cv = tape.constant(c.clone());
                let out = d.forward(tape, s, xv, &[1, 2, 3, 3, 2, 1], cv)?;
                let tv = tape.constant(target.clone());
                tape.mse(out, tv)
            },
            8,
            1e-4,
            &mut Rng::new(5),
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
        assert_eq!(report.probed_params().len(), 9);
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let s = build_schedule(5, 1e-4, 0.02).unwrap();
        let x0 = Dense::from_fn(4, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0));
        let mut tape = Tape::new();
        let perfect = diffusion_loss_with(&mut tape, &x0, &s, &mut Rng::new(1), |t, _, _| {
            Ok(t.constant(x0.clone()))
        })
        .unwrap();
        assert_eq!(tape.scalar(perfect.loss), 0.0);

        let zero = diffusion_loss_with(&mut tape, &x0, &s, &mut Rng::new(1), |t, _, _| {
            Ok(t.constant(Dense::zeros(4, 3)))
        })
        .unwrap();
        let want = x0.as_slice().iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert!((tape.scalar(zero.loss) - want).abs() < 1e-12);
    }

    #[test]
    fn loss_follows_scripted_trace() {
        // steps first, then row-major noise, then MSE against x0
        let s = build_schedule(3, 0.1, 0.3).unwrap();
        let x0 = Dense::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let mut seen = Vec::new();
        let term = diffusion_loss_with(&mut tape, &x0, &s, &mut Rng::new(42), |t, xt, steps| {
            seen = steps.to_vec();
            // predictor: halve the noisy input
            Ok(t.scale(xt, 0.5))
        })
        .unwrap();

        let mut r = Rng::new(42);
        let t0 = 1 + r.below(3);
        let t1 = 1 + r.below(3);
        assert_eq!(seen, vec![t0, t1]);
        let eps: Vec<f64> = (0..4).map(|_| r.gaussian()).collect();
        let mut sq = 0.0;
        for (k, &x) in x0.as_slice().iter().enumerate() {
            let t = if k < 2 { t0 } else { t1 };
            let xt = s.alpha_bar(t).sqrt() * x + (1.0 - s.alpha_bar(t)).sqrt() * eps[k];
            sq += (0.5 * xt - x).powi(2);
        }
        assert!((tape.scalar(term.loss) - sq / 4.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_single_step_equals_mean() {
        let s = build_schedule(1, 0.05, 0.05).unwrap();
        let (store, d) = store_with(3, 4, 1, 6);
        let mut rng = Rng::new(7);
        let x0 = Dense::from_fn(5, 3, |_, _| rng.gaussian());
        let c = Dense::from_fn(5, 4, |_, _| rng.gaussian());
        for mean in [ReverseMean::Epsilon, ReverseMean::X0Posterior] {
            let got = reverse_denoise(
                &x0,
                &s,
                &c,
                &d,
                &store,
                SampleMode::Deterministic,
                mean,
                &mut Rng::new(8),
            )
            .unwrap();
            // replay: the chunk stream is derived the same way
            let mut crng = Rng::new(8).fork().derive(1);
            let (x1, _) = q_sample_at(&x0, 1, &s, &mut crng).unwrap();
            let f = d.predict(&store, &x1, &[1; 5], &c).unwrap();
            let mu = reverse_mean(&x1, &f, 1, &s, mean).unwrap();
            assert_eq!(got, mu);
            if mean == ReverseMean::X0Posterior {
                // the last posterior step returns the x̂0 estimate itself
                for (a, b) in got.as_slice().iter().zip(f.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn vanishing_noise_chain_returns_input() {
        let s = build_schedule(10, 1e-10, 1e-10).unwrap();
        let (store, d) = store_with(3, 4, 10, 9);
        let mut rng = Rng::new(10);
        let x0 = Dense::from_fn(6, 3, |_, _| rng.gaussian());
        let c = Dense::from_fn(6, 4, |_, _| rng.gaussian());
        for mode in [SampleMode::Deterministic, SampleMode::Stochastic] {
            let out = reverse_denoise(&x0, &s, &c, &d, &store, mode, ReverseMean::Epsilon, &mut Rng::new(1))
                .unwrap();
            for (a, b) in out.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn reverse_rejects_nan_params() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let (mut store, d) = store_with(3, 4, 2, 9);
        store.get_mut(d.w1).value.set(0, 0, f64::NAN);
        let r = reverse_denoise(
            &Dense::zeros(2, 3),
            &s,
            &Dense::zeros(2, 4),
            &d,
            &store,
            SampleMode::Deterministic,
            ReverseMean::X0Posterior,
            &mut Rng::new(1),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn deterministic_reverse_is_reproducible() {
        let s = build_schedule(5, 1e-4, 0.02).unwrap();
        let (store, d) = store_with(3, 4, 5, 11);
        let mut rng = Rng::new(12);
        let x0 = Dense::from_fn(4100, 3, |_, _| rng.gaussian());
        let c = Dense::from_fn(4100, 4, |_, _| rng.gaussian());
        let run = |seed| {
            reverse_denoise(
                &x0,
                &s,
                &c,
                &d,
                &store,
                SampleMode::Deterministic,
                ReverseMean::X0Posterior,
                &mut Rng::new(seed),
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn blend_cases() {
        let x = Dense::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]).unwrap();
        let y = Dense::from_vec(1, 3, vec![3.0f32, 0.0, -1.0]).unwrap();
        assert_eq!(blend(&x, &y, 0.0).unwrap(), x);
        assert_eq!(blend(&x, &y, 1.0).unwrap(), y);
        assert_eq!(blend(&x, &y, 0.5).unwrap().as_slice(), &[2.0, 1.0, 1.0]);
        assert!(matches!(blend(&x, &y, 1.5), Err(Error::Config(_))));
        assert!(blend(&x, &y, -0.1).is_err());
    }

    fn align(t_rows: Dense<f64>, v_rows: Dense<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let w = t_rows.cols();
        let t = tape.constant(t_rows);
        let v = tape.constant(v_rows);
        let pt = tape.constant(Dense::identity(w));
        let pv = tape.constant(Dense::identity(w));
        let l = modality_align_loss(&mut tape, t, v, pt, pv, tau).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn align_loss_cases() {
        assert_eq!(align(Dense::filled(1, 3, 1.0), Dense::filled(1, 3, 2.0), 0.2), 0.0);
        let n = 6;
        let same = align(Dense::filled(n, 4, 0.7), Dense::filled(n, 4, 0.7), 1.0);
        assert!((same - (n as f64).ln()).abs() < 1e-12);
        // strongly matched one-hot rows
        let e = Dense::from_fn(4, 4, |r, c| if r == c { 30.0 } else { 0.0 });
        assert!(align(e.clone(), e, 1.0) < 1e-100);
    }
}
