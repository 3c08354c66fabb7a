//! Epoch loop, early stopping, checkpoints and grid search.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use serde_json::Value;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::{Interaction, Modality, ModalityFeatureMatrix, PreparedDataset, TrainIndex, Triple};
use crate::debias::ConfidenceHistogram;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingResult};
use crate::models::{ModelInputs, ModelRegistry, Recommender, StepReport};
use crate::substrate::Rng;

/// Borrowed view of a split dataset.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub n_users: usize,
    pub n_items: usize,
    pub train: &'a [Interaction],
    pub validation: &'a [Interaction],
    pub test: &'a [Interaction],
    pub features: &'a BTreeMap<Modality, ModalityFeatureMatrix>,
}

impl<'a> TrainData<'a> {
    pub fn of(p: &'a PreparedDataset) -> Self {
        TrainData {
            n_users: p.dataset.n_users,
            n_items: p.dataset.n_items,
            train: &p.split.train,
            validation: &p.split.validation,
            test: &p.split.test,
            features: &p.dataset.features,
        }
    }

    pub fn inputs(&self) -> ModelInputs<'a> {
        ModelInputs {
            n_users: self.n_users,
            n_items: self.n_items,
            train: self.train,
            features: self.features,
        }
    }

    pub fn index(&self) -> TrainIndex {
        TrainIndex::new(self.train, self.n_users, self.n_items)
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: usize,
    pub bpr: f64,
    pub dm: f64,
    pub mm: f64,
    pub cl: f64,
    pub total: f64,
    pub val_recall: f64,
    pub seconds: f64,
    pub histogram: ConfidenceHistogram,
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.bpr, self.dm, self.mm, self.cl, self.val_recall, self.seconds
        )
    }
}

pub fn epoch_header(k: usize) -> String {
    format!("epoch,L_bpr,L_dm,L_mm,L_cl,val_recall@{k},seconds")
}

pub fn epoch_log_csv(log: &[EpochReport], k: usize) -> String {
    let mut s = epoch_header(k);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn histogram_csv(log: &[EpochReport]) -> String {
    let mut s = String::from(crate::debias::HISTOGRAM_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.histogram.csv_rows(r.epoch));
    }
    s
}

/// What an observer sees after every optimization step.
pub struct BatchRecord<'a> {
    pub epoch: usize,
    pub index: usize,
    pub batch: &'a [Triple],
    pub report: &'a StepReport,
}

pub type Observer<'o> = &'o mut dyn FnMut(&BatchRecord<'_>);

/// Randomness of epoch `epoch` under `seed`, independent of earlier epochs.
pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::new(seed).derive(1000 + epoch as u64)
}

/// Refresh derived state, then one pass over shuffled triples of every
/// eligible training pair. An empty training set gives an empty report.
pub fn run_epoch(
    model: &mut dyn Recommender,
    index: &TrainIndex,
    cfg: &TrainConfig,
    epoch: usize,
    mut observer: Option<Observer<'_>>,
) -> Result<EpochReport> {
    let mut report = EpochReport {
        epoch,
        val_recall: f64::NAN,
        ..EpochReport::default()
    };
    if index.is_empty() {
        return Ok(report);
    }
    let mut rng = epoch_rng(cfg.seed, epoch);
    model.begin_epoch(&mut rng.fork())?;
    let triples = index.epoch_triples(&mut rng);
    for (k, batch) in triples.chunks(cfg.batch_size).enumerate() {
        let step = model.train_step(batch, &mut rng.fork(), observer.is_some())?;
        report.batches += 1;
        report.bpr += step.bpr;
        report.dm += step.dm;
        report.mm += step.mm;
        report.cl += step.cl;
        report.total += step.total;
        report.histogram.add_weights(step.weights.iter().copied());
        if let Some(obs) = observer.as_mut() {
            obs(&BatchRecord {
                epoch,
                index: k,
                batch,
                report: &step,
            });
        }
    }
    if report.batches > 0 {
        let n = report.batches as f64;
        report.bpr /= n;
        report.dm /= n;
        report.mm /= n;
        report.cl /= n;
        report.total /= n;
    }
    Ok(report)
}

pub fn evaluate_model(
    model: &dyn Recommender,
    index: &TrainIndex,
    held_out: &[Interaction],
    ks: &[usize],
    eval_batch: usize,
) -> Result<RankingResult> {
    evaluate(&model.embeddings()?, index, held_out, ks, eval_batch)
}

pub struct FitOutcome {
    /// The model, restored to its best validation state.
    pub model: Box<dyn Recommender>,
    pub best: Checkpoint,
    pub log: Vec<EpochReport>,
    pub stopped_early: bool,
    /// Set when a step produced a non-finite value; `best` is the last good state.
    pub diverged: Option<String>,
}

impl FitOutcome {
    pub fn best_epoch(&self) -> usize {
        self.best.meta.epoch
    }

    pub fn best_val(&self) -> f64 {
        self.best.meta.best_val
    }
}

/// Train `cfg.model` with early stopping on validation Recall@`eval_k`.
pub fn fit(
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    registry: &ModelRegistry,
    mut observer: Option<Observer<'_>>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let index = data.index();
    let mut model = registry.build(&cfg.model, &data.inputs(), cfg, &mut Rng::new(cfg.seed))?;
    let meta = |epoch: usize, best_val: f64| CheckpointMeta {
        model: cfg.model.clone(),
        epoch,
        best_val,
        config: cfg.clone(),
        fingerprints: BTreeMap::new(),
    };
    let mut best = Checkpoint::capture(model.as_ref(), meta(0, f64::NEG_INFINITY));
    let mut log = Vec::new();
    let mut bad = 0usize;
    let mut stopped_early = false;
    let mut diverged = None;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let obs = observer.as_mut().map(|o| &mut **o as Observer<'_>);
        let attempt = run_epoch(model.as_mut(), &index, cfg, epoch, obs).and_then(|r| {
            let val = evaluate_model(model.as_ref(), &index, data.validation, &[cfg.eval_k], cfg.eval_batch)?
                .recall(cfg.eval_k)?;
            Ok((r, val))
        });
        let (mut report, val) = match attempt {
            Ok(x) => x,
            Err(e) if e.is_numerical() => {
                warn!("epoch {epoch} diverged: {e}; keeping epoch {}", best.meta.epoch);
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        report.val_recall = val;
        report.seconds = start.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: L_bpr {:.5} L_dm {:.5} L_mm {:.5} L_cl {:.5} val R@{} {:.5}",
            report.bpr, report.dm, report.mm, report.cl, cfg.eval_k, val
        );
        log.push(report);
        if val > best.meta.best_val {
            best = Checkpoint::capture(model.as_ref(), meta(epoch, val));
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    best.restore(model.as_mut())?;
    Ok(FitOutcome {
        model,
        best,
        log,
        stopped_early,
        diverged,
    })
}

/// Values each hyperparameter takes in the published search.
pub fn published_grid(key: &str) -> Option<&'static [f64]> {
    const STEPS: &[f64] = &[5.0, 10.0, 15.0, 20.0];
    const OMEGA: &[f64] = &[0.1, 0.3, 0.5, 0.7, 0.9];
    const WEIGHTS: &[f64] = &[0.0001, 0.0005, 0.001, 0.005, 0.1, 0.5];
    const TEMPS: &[f64] = &[0.1, 0.2, 0.5, 1.0, 2.0, 3.0];
    match key {
        "diffusion_steps" | "knn_k" => Some(STEPS),
        "omega" => Some(OMEGA),
        "lambda_dm" | "lambda_mm" | "lambda_cl" => Some(WEIGHTS),
        "tau" | "tau_cl" => Some(TEMPS),
        _ => None,
    }
}

/// Hyperparameter name → values to try. Names are `TrainConfig` fields.
pub type GridSpec = BTreeMap<String, Vec<Value>>;

pub fn parse_grid(text: &str) -> Result<GridSpec> {
    let grid: GridSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    for (k, vs) in &grid {
        if vs.is_empty() {
            return Err(Error::Config(format!("grid key `{k}` has no values")));
        }
    }
    Ok(grid)
}

/// Every combination of `grid` applied to `base`, last key varying fastest.
pub fn expand_grid(base: &TrainConfig, grid: &GridSpec) -> Result<Vec<(String, TrainConfig)>> {
    let keys: Vec<&String> = grid.keys().collect();
    let total: usize = grid.values().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    for n in 0..total {
        let mut rest = n;
        let mut picks = vec![0usize; keys.len()];
        for (j, k) in keys.iter().enumerate().rev() {
            let len = grid[*k].len();
            picks[j] = rest % len;
            rest /= len;
        }
        let mut obj = serde_json::to_value(base)?;
        let mut label = Vec::new();
        for (j, k) in keys.iter().enumerate() {
            let v = &grid[*k][picks[j]];
            obj[k.as_str()] = v.clone();
            label.push(format!("{k}={v}"));
        }
        let cfg: TrainConfig =
            serde_json::from_value(obj).map_err(|e| Error::Config(format!("grid: {e}")))?;
        cfg.validate()?;
        out.push((label.join(";"), cfg));
    }
    Ok(out)
}

fn warn_off_grid(grid: &GridSpec) {
    for (k, vs) in grid {
        let Some(allowed) = published_grid(k) else { continue };
        for v in vs {
            let on = v.as_f64().is_some_and(|x| allowed.iter().any(|a| (a - x).abs() < 1e-12));
            if !on {
                warn!("grid value {k}={v} lies outside the published search grid");
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub combo: String,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test_recall: f64,
    pub test_ndcg: f64,
}

pub fn grid_header(k: usize) -> String {
    format!("combo,best_epoch,best_val_recall@{k},test_recall@{k},test_ndcg@{k}")
}

pub fn grid_csv(rows: &[GridRow], k: usize) -> String {
    let mut s = grid_header(k);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "\"{}\",{},{},{},{}",
            r.combo.replace('"', "\"\""),
            r.best_epoch,
            r.best_val,
            r.test_recall,
            r.test_ndcg
        );
    }
    s
}

/// One fit per combination, scored on the test split at the best validation epoch.
pub fn grid_search(
    data: &TrainData<'_>,
    base: &TrainConfig,
    grid: &GridSpec,
    registry: &ModelRegistry,
) -> Result<Vec<GridRow>> {
    warn_off_grid(grid);
    let index = data.index();
    let mut rows = Vec::new();
    for (combo, cfg) in expand_grid(base, grid)? {
        info!("grid: {combo}");
        let out = fit(data, &cfg, registry, None)?;
        let k = cfg.eval_k;
        let test = evaluate_model(out.model.as_ref(), &index, data.test, &[k], cfg.eval_batch)?;
        rows.push(GridRow {
            combo,
            best_epoch: out.best_epoch(),
            best_val: out.best_val(),
            test_recall: test.recall(k)?,
            test_ndcg: test.ndcg(k)?,
        });
    }
    Ok(rows)
}
