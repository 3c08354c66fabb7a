use super::{ModelInputs, Recommender, StepReport};
use crate::config::TrainConfig;
use crate::data::{build_interaction_matrix, Triple, WeightedTriple};
use crate::debias::weighted_bpr;
use crate::error::Result;
use crate::graphs::{build_collab_graph, propagate_collab, CollabGraph};
use crate::substrate::{xavier_init, AdamConfig, Dense, ParamId, ParamStore, Rng, Tape, Var};

/// ID embeddings with optional collaborative propagation, trained with plain BPR.
struct IdModel {
    n_users: usize,
    graph: Option<CollabGraph>,
    store: ParamStore<f32>,
    e_id: ParamId,
    adam: AdamConfig,
}

impl IdModel {
    fn new(inputs: &ModelInputs<'_>, cfg: &TrainConfig, rng: &mut Rng, propagate: bool) -> Result<Self> {
        let graph = if propagate {
            let o = build_interaction_matrix(inputs.train, inputs.n_users, inputs.n_items)?;
            Some(build_collab_graph(&o, cfg.layers)?)
        } else {
            None
        };
        let mut store = ParamStore::new();
        let mut init = rng.fork().derive(1);
        let e_id = store.add(
            "embedding.id",
            xavier_init(inputs.n_users + inputs.n_items, cfg.embed_dim, &mut init),
        );
        Ok(IdModel {
            n_users: inputs.n_users,
            graph,
            store,
            e_id,
            adam: cfg.adam(),
        })
    }

    fn embed(&self, tape: &mut Tape<f32>) -> Result<Var> {
        let e0 = tape.param(&self.store, self.e_id);
        match &self.graph {
            Some(g) => propagate_collab(tape, g, e0),
            None => Ok(e0),
        }
    }

    fn step(&mut self, batch: &[Triple], capture: bool) -> Result<StepReport> {
        self.store.zero_grad();
        let mut tape = Tape::new();
        let e = self.embed(&mut tape)?;
        let weighted: Vec<WeightedTriple> = batch
            .iter()
            .map(|&triple| WeightedTriple { triple, w: 1.0 })
            .collect();
        let loss = weighted_bpr(&mut tape, e, self.n_users, &weighted)?;
        let bpr = tape.scalar(loss) as f64;
        if !bpr.is_finite() {
            return Err(crate::Error::NonFinite("loss component L_bpr".into()));
        }
        let embeddings = capture.then(|| tape.value(e).clone());
        tape.backward_into(loss, &mut self.store)?;
        self.store.adam_step(&self.adam)?;
        Ok(StepReport {
            bpr,
            total: bpr,
            weights: vec![1.0; batch.len()],
            embeddings,
            ..StepReport::default()
        })
    }

    fn embeddings(&self) -> Result<Dense<f32>> {
        let mut tape = Tape::new();
        let e = self.embed(&mut tape)?;
        Ok(tape.value(e).clone())
    }
}

/// LightGCN: layer-averaged propagation over the normalized bipartite graph.
pub struct LightGcn(IdModel);

impl LightGcn {
    pub fn new(inputs: &ModelInputs<'_>, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        Ok(LightGcn(IdModel::new(inputs, cfg, rng, true)?))
    }
}

/// Matrix factorization: scores are dot products of ID embeddings.
pub struct BprMf(IdModel);

impl BprMf {
    pub fn new(inputs: &ModelInputs<'_>, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        Ok(BprMf(IdModel::new(inputs, cfg, rng, false)?))
    }
}

macro_rules! id_recommender {
    ($t:ty, $name:literal) => {
        impl Recommender for $t {
            fn name(&self) -> &'static str {
                $name
            }

            fn params(&self) -> &ParamStore<f32> {
                &self.0.store
            }

            fn params_mut(&mut self) -> &mut ParamStore<f32> {
                &mut self.0.store
            }

            fn train_step(&mut self, batch: &[Triple], _rng: &mut Rng, capture: bool) -> Result<StepReport> {
                self.0.step(batch, capture)
            }

            fn embeddings(&self) -> Result<Dense<f32>> {
                self.0.embeddings()
            }
        }
    };
}

id_recommender!(LightGcn, "lightgcn");
id_recommender!(BprMf, "bpr-mf");
