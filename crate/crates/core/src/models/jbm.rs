use super::{total_loss, LossWeights, ModelInputs, Recommender, StepReport};
use crate::config::{Ablation, TrainConfig};
use crate::data::{build_interaction_matrix, Modality, Triple, WeightedTriple};
use crate::debias::{weigh_triples, weighted_bpr, ModalView};
use crate::diffusion::{
    blend, blend_var, diffusion_loss, modality_align_loss, reverse_denoise, Denoiser, DenoiserShape,
    DiffusionSchedule,
};
use crate::error::{Error, Result};
use crate::fusion::{average_pool, cross_view_loss, final_embed, gated_fuse, mean_modal, FusionParams};
use crate::graphs::{
    aggregate_user_modal, build_collab_graph, build_semantic_graph, propagate_collab, propagate_semantic,
    CollabGraph, SemanticGraph,
};
use crate::substrate::{xavier_init, Dense, ParamId, ParamStore, Rng, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct JbmIds {
    pub e_id: ParamId,
    /// Per-modality `d_m×d` feature projection.
    pub proj: Vec<ParamId>,
    pub fusion: Option<FusionParams>,
    pub denoisers: Vec<Denoiser>,
}

/// Tape handles of one full forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub e_c: Var,
    pub modal_users: Vec<Var>,
    pub modal_items: Vec<Var>,
    pub e_s: Var,
    pub e: Var,
}

/// Inputs that enter the objective as data: the diffusion conditioning (item
/// rows of `Ê_c`) and the triple weights.
#[derive(Clone, Debug)]
pub struct Frozen<T> {
    pub item_condition: Dense<T>,
    pub weighted: Vec<WeightedTriple>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub bpr: Var,
    pub dm: Option<Var>,
    pub mm: Option<Var>,
    pub cl: Option<Var>,
}

/// Behavior-conditioned diffusion denoising, multi-view propagation with
/// gated fusion, and confidence-weighted BPR.
pub struct JbmDiff<T: Scalar = f32> {
    cfg: TrainConfig,
    n_users: usize,
    n_items: usize,
    modalities: Vec<Modality>,
    raw: Vec<Dense<T>>,
    /// Features the views propagate this epoch.
    denoised: Vec<Dense<T>>,
    collab: CollabGraph<T>,
    semantic: Vec<SemanticGraph<T>>,
    schedule: DiffusionSchedule,
    pub store: ParamStore<T>,
    pub ids: JbmIds,
}

impl<T: Scalar> JbmDiff<T> {
    pub fn new(inputs: &ModelInputs<'_>, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if inputs.features.is_empty() {
            return Err(Error::Config("jbm-diff needs at least one modality feature file".into()));
        }
        let o = build_interaction_matrix(inputs.train, inputs.n_users, inputs.n_items)?;
        let collab = build_collab_graph(&o, cfg.layers)?.cast();
        let modalities: Vec<Modality> = inputs.features.keys().copied().collect();
        let mut semantic = Vec::new();
        let mut raw = Vec::new();
        for f in inputs.features.values() {
            if f.matrix.rows() != inputs.n_items {
                return Err(Error::Shape {
                    expected: format!("{} {} feature rows", inputs.n_items, f.modality),
                    actual: format!("{} rows", f.matrix.rows()),
                });
            }
            semantic.push(build_semantic_graph(f.modality, &f.matrix, cfg.knn_k)?.cast());
            raw.push(f.matrix.cast::<T>());
        }
        let schedule = DiffusionSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;

        let base = rng.fork();
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let e_id = store.add(
            "embedding.id",
            xavier_init(inputs.n_users + inputs.n_items, d, &mut base.derive(1)),
        );
        let proj = modalities
            .iter()
            .zip(&raw)
            .enumerate()
            .map(|(k, (m, x))| {
                store.add(
                    format!("projection.{}", m.name()),
                    xavier_init(x.cols(), d, &mut base.derive(10 + k as u64)),
                )
            })
            .collect();
        let fusion = (!cfg.has(Ablation::NoFf))
            .then(|| FusionParams::register(&mut store, d, &mut base.derive(20)));
        let denoisers = if cfg.has(Ablation::NoMmd) {
            Vec::new()
        } else {
            modalities
                .iter()
                .zip(&raw)
                .enumerate()
                .map(|(k, (&m, x))| {
                    let shape = DenoiserShape::new(x.cols(), d, cfg.diffusion_steps);
                    Denoiser::register(&mut store, m, shape, &mut base.derive(30 + k as u64))
                })
                .collect()
        };
        Ok(JbmDiff {
            cfg: cfg.clone(),
            n_users: inputs.n_users,
            n_items: inputs.n_items,
            modalities,
            denoised: raw.clone(),
            raw,
            collab,
            semantic,
            schedule,
            store,
            ids: JbmIds {
                e_id,
                proj,
                fusion,
                denoisers,
            },
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn denoised(&self) -> &[Dense<T>] {
        &self.denoised
    }

    pub fn semantic_graphs(&self) -> &[SemanticGraph<T>] {
        &self.semantic
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Collaborative, modality, fused and final embeddings.
    pub fn forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Forward> {
        let e0 = tape.param(store, self.ids.e_id);
        let e_c = propagate_collab(tape, &self.collab, e0)?;
        let mut modal_users = Vec::new();
        let mut modal_items = Vec::new();
        let mut stacked = Vec::new();
        for (k, x) in self.denoised.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let p = tape.param(store, self.ids.proj[k]);
            let h = tape.matmul(xv, p)?;
            let items = propagate_semantic(tape, &self.semantic[k], h)?;
            let users = aggregate_user_modal(tape, &self.collab.user_items, items)?;
            stacked.push(tape.stack_rows(&[users, items])?);
            modal_users.push(users);
            modal_items.push(items);
        }
        let (e_s, e) = match &self.ids.fusion {
            Some(fp) => {
                let e_s = gated_fuse(tape, store, fp, &stacked, e_c)?;
                (e_s, final_embed(tape, e_s, e_c)?)
            }
            None => (mean_modal(tape, &stacked)?, average_pool(tape, &stacked, e_c)?),
        };
        Ok(Forward {
            e_c,
            modal_users,
            modal_items,
            e_s,
            e,
        })
    }

    fn frozen_from(&self, tape: &Tape<T>, f: &Forward, batch: &[Triple]) -> Frozen<T> {
        let views: Vec<ModalView<'_, T>> = f
            .modal_users
            .iter()
            .zip(&f.modal_items)
            .map(|(&u, &i)| ModalView {
                users: tape.value(u),
                items: tape.value(i),
            })
            .collect();
        let debias = self.cfg.debias();
        let cfg = (!self.cfg.has(Ablation::NoBd)).then_some(&debias);
        Frozen {
            item_condition: tape.value(f.e_c).slice_rows(self.n_users, self.n_users + self.n_items),
            weighted: weigh_triples(batch, &views, cfg),
        }
    }

    /// Data-like inputs of the objective at the given parameters.
    pub fn frozen(&self, store: &ParamStore<T>, batch: &[Triple]) -> Result<Frozen<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store)?;
        Ok(self.frozen_from(&tape, &f, batch))
    }

    /// All loss components for one batch of triples. Without `frozen`, the
    /// data-like inputs are taken from this forward pass.
    pub fn loss_terms(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[Triple],
        frozen: Option<&Frozen<T>>,
        rng: &mut Rng,
    ) -> Result<(LossTerms, Forward, Frozen<T>)> {
        let f = self.forward(tape, store)?;
        let frozen = match frozen {
            Some(fr) => fr.clone(),
            None => self.frozen_from(tape, &f, batch),
        };
        let bpr = weighted_bpr(tape, f.e, self.n_users, &frozen.weighted)?;

        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let items: Vec<usize> = batch.iter().map(|t| t.pos).collect();
        let cl = Some(cross_view_loss(tape, f.e_s, f.e_c, self.n_users, &users, &items, self.cfg.contrast())?);

        let (dm, mm) = if self.ids.denoisers.is_empty() {
            (None, None)
        } else {
            self.denoising_terms(tape, store, &frozen.item_condition, rng)?
        };
        Ok((LossTerms { bpr, dm, mm, cl }, f, frozen))
    }

    fn denoising_terms(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        item_condition: &Dense<T>,
        rng: &mut Rng,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let items = rng.sample_distinct(self.n_items, self.cfg.item_batch);
        let cond = item_condition.gather_rows(&items)?;
        let mut dm: Option<Var> = None;
        let mut blended = Vec::new();
        for (k, den) in self.ids.denoisers.iter().enumerate() {
            let x0 = self.raw[k].gather_rows(&items)?;
            let term = diffusion_loss(tape, store, den, &x0, &cond, &self.schedule, rng)?;
            dm = Some(match dm {
                Some(acc) => tape.add(acc, term.loss)?,
                None => term.loss,
            });
            let x0v = tape.constant(x0);
            blended.push(blend_var(tape, x0v, term.prediction, self.cfg.omega)?);
        }
        let pos = |m| self.modalities.iter().position(|&x| x == m);
        let mm = match (pos(Modality::Textual), pos(Modality::Visual)) {
            (Some(t), Some(v)) => {
                let pt = tape.param(store, self.ids.proj[t]);
                let pv = tape.param(store, self.ids.proj[v]);
                Some(modality_align_loss(tape, blended[t], blended[v], pt, pv, self.cfg.tau)?)
            }
            _ => None,
        };
        Ok((dm, mm))
    }

    /// Recompute the denoised features from the current parameters.
    pub fn refresh_denoised(&mut self, rng: &mut Rng) -> Result<()> {
        if self.ids.denoisers.is_empty() {
            return Ok(());
        }
        let mut tape = Tape::new();
        let e0 = tape.param(&self.store, self.ids.e_id);
        let e_c = propagate_collab(&mut tape, &self.collab, e0)?;
        let cond = tape.value(e_c).slice_rows(self.n_users, self.n_users + self.n_items);
        for (k, den) in self.ids.denoisers.iter().enumerate() {
            let x_hat = reverse_denoise(
                &self.raw[k],
                &self.schedule,
                &cond,
                den,
                &self.store,
                self.cfg.sample_mode,
                self.cfg.reverse_mean,
                rng,
            )?;
            self.denoised[k] = blend(&self.raw[k], &x_hat, self.cfg.omega)?;
        }
        Ok(())
    }

    pub fn step(&mut self, batch: &[Triple], rng: &mut Rng, capture: bool) -> Result<StepReport> {
        self.store.zero_grad();
        let mut tape = Tape::new();
        let (terms, f, frozen) = self.loss_terms(&mut tape, &self.store, batch, None, rng)?;
        let total = total_loss(&mut tape, &terms, LossWeights::of(&self.cfg))?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).f64());
        let report = StepReport {
            bpr: tape.scalar(terms.bpr).f64(),
            dm: val(terms.dm),
            mm: val(terms.mm),
            cl: val(terms.cl),
            total: tape.scalar(total).f64(),
            weights: frozen.weighted.iter().map(|w| w.w).collect(),
            embeddings: capture.then(|| tape.value(f.e).cast()),
        };
        tape.backward_into(total, &mut self.store)?;
        self.store.adam_step(&self.cfg.adam())?;
        Ok(report)
    }

    pub fn final_embeddings(&self) -> Result<Dense<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.store)?;
        Ok(tape.value(f.e).clone())
    }
}

fn cache_name(m: Modality) -> String {
    format!("cache.denoised.{}", m.name())
}

impl Recommender for JbmDiff<f32> {
    fn name(&self) -> &'static str {
        "jbm-diff"
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn begin_epoch(&mut self, rng: &mut Rng) -> Result<()> {
        self.refresh_denoised(rng)
    }

    fn train_step(&mut self, batch: &[Triple], rng: &mut Rng, capture: bool) -> Result<StepReport> {
        self.step(batch, rng, capture)
    }

    fn embeddings(&self) -> Result<Dense<f32>> {
        self.final_embeddings()
    }

    fn caches(&self) -> Vec<(String, Dense<f32>)> {
        self.modalities
            .iter()
            .zip(&self.denoised)
            .map(|(&m, d)| (cache_name(m), d.clone()))
            .collect()
    }

    fn restore_caches(&mut self, tensors: &[(String, Dense<f32>)]) -> Result<()> {
        for (k, &m) in self.modalities.iter().enumerate() {
            let name = cache_name(m);
            let Some((_, d)) = tensors.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Format(format!("checkpoint lacks `{name}`")));
            };
            if d.shape() != self.raw[k].shape() {
                return Err(Error::Shape {
                    expected: format!("{:?}", self.raw[k].shape()),
                    actual: format!("{:?}", d.shape()),
                });
            }
            self.denoised[k] = d.clone();
        }
        Ok(())
    }
}
