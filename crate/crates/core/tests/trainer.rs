mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use common::{plain_bpr, small_cfg, toy};
use jbm_core::checkpoint::Checkpoint;
use jbm_core::config::{Ablation, TrainConfig};
use jbm_core::data::{Interaction, TrainIndex, Triple};
use jbm_core::models::{ModelInputs, ModelRegistry, Recommender, StepReport};
use jbm_core::substrate::{Dense, ParamStore, Rng};
use jbm_core::trainer::{
    epoch_header, evaluate_model, expand_grid, fit, grid_search, parse_grid, run_epoch, BatchRecord, EpochReport,
    TrainData,
};
use jbm_core::Result;

const TOY_SEED: u64 = 9;

/// Validation pairs whose item sits outside every user's all-tied top 10.
fn validation_pairs() -> &'static Vec<Interaction> {
    static V: OnceLock<Vec<Interaction>> = OnceLock::new();
    V.get_or_init(|| toy(TOY_SEED).split.validation.into_iter().filter(|p| p.1 >= 20).collect())
}

/// Reveals one more hidden validation pair per epoch, so validation recall
/// rises strictly every epoch. `flat` never changes.
struct Stub {
    store: ParamStore<f32>,
    n_users: usize,
    n_items: usize,
    revealed: usize,
    flat: bool,
}

impl Stub {
    fn build(i: &ModelInputs<'_>, flat: bool) -> Box<dyn Recommender> {
        Box::new(Stub {
            store: ParamStore::new(),
            n_users: i.n_users,
            n_items: i.n_items,
            revealed: 0,
            flat,
        })
    }
}

impl Recommender for Stub {
    fn name(&self) -> &'static str {
        if self.flat {
            "flat"
        } else {
            "oracle"
        }
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn begin_epoch(&mut self, _rng: &mut Rng) -> Result<()> {
        if !self.flat {
            self.revealed += 1;
        }
        Ok(())
    }

    fn train_step(&mut self, _batch: &[Triple], _rng: &mut Rng, _capture: bool) -> Result<StepReport> {
        Ok(StepReport::default())
    }

    fn embeddings(&self) -> Result<Dense<f32>> {
        let mut e = Dense::zeros(self.n_users + self.n_items, self.n_users);
        for u in 0..self.n_users {
            e.set(u, u, 1.0);
        }
        for &(u, i) in validation_pairs().iter().take(self.revealed) {
            e.set(self.n_users + i, u, 1.0);
        }
        Ok(e)
    }

    fn caches(&self) -> Vec<(String, Dense<f32>)> {
        vec![("cache.revealed".into(), Dense::filled(1, 1, self.revealed as f32))]
    }

    fn restore_caches(&mut self, tensors: &[(String, Dense<f32>)]) -> Result<()> {
        if let Some((_, t)) = tensors.iter().find(|(n, _)| n == "cache.revealed") {
            self.revealed = t.get(0, 0) as usize;
        }
        Ok(())
    }
}

fn stub_registry() -> ModelRegistry {
    let mut r = ModelRegistry::with_defaults();
    r.register("oracle", |i, _, _| Ok(Stub::build(i, false)));
    r.register("flat", |i, _, _| Ok(Stub::build(i, true)));
    r
}

fn without_seconds(log: &[EpochReport]) -> Vec<String> {
    log.iter().map(|r| r.csv_row().rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    for (patience, epochs) in [(0, 2), (1, 2), (3, 4)] {
        let cfg = TrainConfig { model: "flat".into(), patience, max_epochs: 20, ..small_cfg() };
        let out = fit(&data, &cfg, &stub_registry(), None).unwrap();
        assert_eq!(out.log.len(), epochs, "patience {patience}");
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch(), 1);
    }
}

#[test]
fn improving_model_runs_to_max_epochs() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let cfg = TrainConfig { model: "oracle".into(), patience: 0, max_epochs: 5, ..small_cfg() };
    let out = fit(&data, &cfg, &stub_registry(), None).unwrap();
    assert!(validation_pairs().len() >= 5);
    assert_eq!(out.log.len(), 5);
    assert!(!out.stopped_early);
    assert_eq!(out.best_epoch(), 5);
    let vals: Vec<f64> = out.log.iter().map(|r| r.val_recall).collect();
    assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
}

#[test]
fn best_checkpoint_dominates_log_and_is_restored() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let cfg = TrainConfig { max_epochs: 6, patience: 2, ..small_cfg() };
    let out = fit(&data, &cfg, &ModelRegistry::with_defaults(), None).unwrap();
    assert!(out.log.iter().all(|r| out.best_val() >= r.val_recall));
    let restored = evaluate_model(out.model.as_ref(), &data.index(), data.validation, &[cfg.eval_k], cfg.eval_batch)
        .unwrap()
        .recall(cfg.eval_k)
        .unwrap();
    assert_eq!(restored, out.best_val());
    assert_eq!(out.log[out.best_epoch() - 1].val_recall, out.best_val());
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let cfg = TrainConfig { max_epochs: 2, ..small_cfg() };
    let reg = ModelRegistry::with_defaults();
    let out = fit(&data, &cfg, &reg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.jbmc");
    out.best.save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta.epoch, out.best.meta.epoch);
    assert_eq!(loaded.meta.config, cfg);
    let mut fresh = reg.build(&cfg.model, &data.inputs(), &cfg, &mut Rng::new(cfg.seed + 1)).unwrap();
    loaded.restore(fresh.as_mut()).unwrap();
    let ks = [10, 20];
    let a = evaluate_model(out.model.as_ref(), &data.index(), data.test, &ks, 64).unwrap();
    let b = evaluate_model(fresh.as_ref(), &data.index(), data.test, &ks, 64).unwrap();
    for k in ks {
        assert_eq!(a.recall(k).unwrap(), b.recall(k).unwrap());
        assert_eq!(a.ndcg(k).unwrap(), b.ndcg(k).unwrap());
    }

    let mut other = reg.build("lightgcn", &data.inputs(), &cfg, &mut Rng::new(1)).unwrap();
    assert!(loaded.restore(other.as_mut()).is_err());
}

#[test]
fn grid_rows_match_combinations() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let base = TrainConfig { max_epochs: 1, ..small_cfg() };
    let reg = ModelRegistry::with_defaults();

    let single = parse_grid(r#"{"omega": [0.3]}"#).unwrap();
    assert_eq!(grid_search(&data, &base, &single, &reg).unwrap().len(), 1);

    let square = parse_grid(r#"{"omega": [0.1, 0.5], "knn_k": [5, 10]}"#).unwrap();
    let combos = expand_grid(&base, &square).unwrap();
    let labels: Vec<&str> = combos.iter().map(|c| c.0.as_str()).collect();
    assert_eq!(labels, ["knn_k=5;omega=0.1", "knn_k=5;omega=0.5", "knn_k=10;omega=0.1", "knn_k=10;omega=0.5"]);
    assert_eq!(grid_search(&data, &base, &square, &reg).unwrap().len(), 4);

    assert!(parse_grid(r#"{"no_such_key": [1]}"#).and_then(|g| expand_grid(&base, &g)).is_err());
    assert!(parse_grid(r#"{"omega": [1.5]}"#).and_then(|g| expand_grid(&base, &g)).is_err());
}

#[test]
fn omega_extremes_give_different_models() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let reg = ModelRegistry::with_defaults();
    let emb = |omega: f64| {
        let cfg = TrainConfig { omega, max_epochs: 2, patience: 5, ..small_cfg() };
        fit(&data, &cfg, &reg, None).unwrap().model.embeddings().unwrap()
    };
    assert_ne!(emb(0.0).as_slice(), emb(1.0).as_slice());
}

#[test]
fn one_epoch_lowers_bpr() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let index = data.index();
    let cfg = small_cfg();
    let probe = index.epoch_triples(&mut Rng::new(3));
    for name in ["jbm-diff", "lightgcn", "bpr-mf"] {
        let mut model = ModelRegistry::with_defaults()
            .build(name, &data.inputs(), &cfg, &mut Rng::new(cfg.seed))
            .unwrap();
        // the first epoch also swaps in the denoised features, so measure from there
        run_epoch(model.as_mut(), &index, &cfg, 1, None).unwrap();
        let before = plain_bpr(&model.embeddings().unwrap(), data.n_users, &probe);
        run_epoch(model.as_mut(), &index, &cfg, 2, None).unwrap();
        let after = plain_bpr(&model.embeddings().unwrap(), data.n_users, &probe);
        assert!(after < before, "{name}: probe {before} -> {after}");
    }
}

#[test]
fn empty_training_set_is_a_no_op() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let cfg = small_cfg();
    let mut model = ModelRegistry::with_defaults()
        .build("bpr-mf", &data.inputs(), &cfg, &mut Rng::new(1))
        .unwrap();
    let before = model.embeddings().unwrap();
    let empty = TrainIndex::new(&[], data.n_users, data.n_items);
    let r = run_epoch(model.as_mut(), &empty, &cfg, 1, None).unwrap();
    assert_eq!(r.batches, 0);
    assert_eq!(r.bpr, 0.0);
    assert_eq!(model.embeddings().unwrap().as_slice(), before.as_slice());
}

#[test]
fn same_seed_same_run() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let cfg = TrainConfig { max_epochs: 3, ..small_cfg() };
    let reg = ModelRegistry::with_defaults();
    let a = fit(&data, &cfg, &reg, None).unwrap();
    let b = fit(&data, &cfg, &reg, None).unwrap();
    assert_eq!(without_seconds(&a.log), without_seconds(&b.log));
    assert_eq!(a.model.embeddings().unwrap().as_slice(), b.model.embeddings().unwrap().as_slice());
    assert!(epoch_header(cfg.eval_k).starts_with("epoch,L_bpr,L_dm,L_mm,L_cl,val_recall@10"));

    let c = fit(&data, &TrainConfig { seed: cfg.seed + 1, ..cfg }, &reg, None).unwrap();
    assert_ne!(a.model.embeddings().unwrap().as_slice(), c.model.embeddings().unwrap().as_slice());
}

#[test]
fn disabling_debiasing_touches_only_the_weights() {
    let p = toy(TOY_SEED);
    let data = TrainData::of(&p);
    let index = data.index();
    let first = |ablations: BTreeSet<Ablation>| {
        let cfg = TrainConfig { ablations, ..small_cfg() };
        let mut model = ModelRegistry::with_defaults()
            .build("jbm-diff", &data.inputs(), &cfg, &mut Rng::new(cfg.seed))
            .unwrap();
        let mut rec = None;
        let mut obs = |r: &BatchRecord<'_>| {
            if r.index == 0 {
                rec = Some((r.batch.to_vec(), r.report.clone()));
            }
        };
        run_epoch(model.as_mut(), &index, &cfg, 1, Some(&mut obs)).unwrap();
        rec.unwrap()
    };
    let (batch_full, full) = first(BTreeSet::new());
    let (batch_nobd, nobd) = first(BTreeSet::from([Ablation::NoBd]));
    assert_eq!(batch_full, batch_nobd);
    assert_eq!(full.embeddings, nobd.embeddings);
    assert_eq!((full.dm, full.mm, full.cl), (nobd.dm, nobd.mm, nobd.cl));
    assert!(nobd.weights.iter().all(|&w| w == 1.0));
    assert!(full.weights.iter().any(|&w| w != 1.0));
    assert!(full.weights.iter().all(|&w| w > 0.0 && w < 1.0));
    assert_ne!(full.bpr, nobd.bpr);
}
