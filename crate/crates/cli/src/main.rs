mod features;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use jbm_core::checkpoint::Checkpoint;
use jbm_core::config::{Ablation, TrainConfig};
use jbm_core::data::{load_interactions, split_dataset, LoadOptions, Modality, PreparedDataset, SplitRatios};
use jbm_core::models::ModelRegistry;
use jbm_core::noiselab::{check_ratio, events_jsonl, noise_csv, run_noise_grid, CorruptionKind, CorruptionSpec};
use jbm_core::substrate::Rng;
use jbm_core::trainer::{
    epoch_log_csv, evaluate_model, fit, grid_csv, grid_search, histogram_csv, parse_grid, TrainData,
};
use jbm_core::Error;

use features::{load_feature_input, FeatureOrder};
use manifest::{fingerprint_dir, RunManifest};

#[derive(Parser)]
#[command(name = "jbm", version, about = "Multimodal recommendation with feature denoising and behavior debiasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index interactions, split them and validate item features.
    Prepare(PrepareArgs),
    /// Train a model with early stopping and write its checkpoint and logs.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Robustness runs under feature or feedback corruption.
    Noise(NoiseArgs),
    /// One training run per hyperparameter combination.
    Grid(GridArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    visual: Option<PathBuf>,
    #[arg(long)]
    textual: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// The interaction file starts with a column-header line.
    #[arg(long)]
    skip_header: bool,
    /// How feature rows map to items.
    #[arg(long, value_enum, default_value_t = FeatureOrder::Index)]
    feature_order: FeatureOrder,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with TrainConfig fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoMmd,
    NoFf,
    NoBd,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoMmd => Ablation::NoMmd,
            AblationArg::NoFf => Ablation::NoFf,
            AblationArg::NoBd => Ablation::NoBd,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum)]
    ablate: Vec<AblationArg>,
    /// Raw-logit contrastive scores instead of normalized rows.
    #[arg(long)]
    raw_contrast: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    k: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-user rankings as JSON lines.
    #[arg(long)]
    per_user: bool,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kind: CorruptionKind,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "jbm-diff,lightgcn,bpr-mf")]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON object mapping TrainConfig field names to lists of values.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CONSISTENCY: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Consistency(_) => EXIT_CONSISTENCY,
            Error::NonFinite(_) => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        Failure { code, msg: e.to_string() }
    }
}

trait Context<T> {
    fn context(self, what: &str) -> Result<T, Failure>;
}

impl<T> Context<T> for jbm_core::Result<T> {
    fn context(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| {
            let mut f = Failure::from(e);
            f.msg = format!("{what}: {}", f.msg);
            f
        })
    }
}

type CliResult<T> = Result<T, Failure>;

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| Failure::from(Error::io(path, e)))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::from(Error::io(path, e)))
}

fn load_config(run: &RunArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::load(p).context("--config")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(n) = run.max_epochs {
        cfg.max_epochs = n;
    }
    cfg.validate().context("config")?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> CliResult<PreparedDataset> {
    PreparedDataset::load(dir).context("--data")
}

fn cmd_prepare(a: &PrepareArgs, argv: &[String]) -> CliResult<()> {
    let mut dataset = load_interactions(&a.interactions, LoadOptions { skip_header: a.skip_header })
        .context("--interactions")?;
    for (flag, path, m) in [("--visual", &a.visual, Modality::Visual), ("--textual", &a.textual, Modality::Textual)] {
        if let Some(p) = path {
            let f = load_feature_input(p, m, &dataset.item_ids, a.feature_order).context(flag)?;
            dataset.attach_features(f).context(flag)?;
        }
    }
    let split = split_dataset(&dataset, SplitRatios::default(), &mut Rng::new(a.seed)).context("split")?;
    let prepared = PreparedDataset { dataset, split };
    prepared.write(&a.out).context("--out")?;
    let summary = prepared.summary();
    info!(
        "{} users, {} items, {} interactions, density {}",
        summary.users,
        summary.items,
        summary.interactions,
        summary.density_percent()
    );
    print!("{}", summary.to_text());
    let mut m = RunManifest::new("prepare", argv, a.seed);
    m.fingerprints = fingerprint_dir(&a.out)?;
    m.artifacts = PreparedDataset::content_files(&a.out);
    m.write(&a.out)
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = load_config(&a.run)?;
    if let Some(model) = &a.model {
        cfg.model = model.clone();
    }
    cfg.ablations.extend(a.ablate.iter().map(|&x| Ablation::from(x)));
    cfg.raw_contrast |= a.raw_contrast;
    let prepared = load_data(&a.data)?;
    let data = TrainData::of(&prepared);
    let fingerprints = fingerprint_dir(&a.data)?;
    create_dir(&a.out)?;
    let mut out = fit(&data, &cfg, &ModelRegistry::with_defaults(), None).context("train")?;
    out.best.meta.fingerprints = fingerprints.clone();

    let ckpt = a.out.join("checkpoint.jbmc");
    out.best.save(&ckpt).context("checkpoint")?;
    write_file(&a.out.join("epochs.csv"), &epoch_log_csv(&out.log, cfg.eval_k))?;
    write_file(&a.out.join("confidence_histogram.csv"), &histogram_csv(&out.log))?;
    let mut ks = vec![10, 20, cfg.eval_k];
    ks.sort_unstable();
    ks.dedup();
    let index = data.index();
    let metrics = evaluate_model(out.model.as_ref(), &index, data.test, &ks, cfg.eval_batch)
        .and_then(|r| r.metrics_csv(cfg.seed))
        .context("test evaluation")?;
    write_file(&a.out.join("metrics.csv"), &metrics)?;
    print!("{metrics}");

    let mut m = RunManifest::new("train", argv, cfg.seed);
    m.config = Some(cfg);
    m.fingerprints = fingerprints;
    m.best_epoch = Some(out.best_epoch());
    m.artifacts = ["checkpoint.jbmc", "checkpoint.jbmc.meta.json", "epochs.csv", "confidence_histogram.csv", "metrics.csv"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    m.write(&a.out)?;
    match out.diverged {
        Some(msg) => Err(Failure {
            code: EXIT_NUMERICAL,
            msg: format!("training diverged ({msg}); kept the checkpoint of epoch {}", out.best.meta.epoch),
        }),
        None => Ok(()),
    }
}

fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> CliResult<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Failure::usage("--k needs positive cut-offs"));
    }
    let prepared = load_data(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint).context("--checkpoint")?;
    let fingerprints = fingerprint_dir(&a.data)?;
    if ckpt.meta.fingerprints.is_empty() {
        warn!("checkpoint carries no dataset fingerprints; skipping the data check");
    } else if ckpt.meta.fingerprints != fingerprints {
        let differing: Vec<&str> = fingerprints
            .iter()
            .filter(|(k, v)| ckpt.meta.fingerprints.get(*k) != Some(*v))
            .map(|(k, _)| k.as_str())
            .chain(ckpt.meta.fingerprints.keys().filter(|k| !fingerprints.contains_key(*k)).map(String::as_str))
            .collect();
        return Err(Failure {
            code: EXIT_CONSISTENCY,
            msg: format!(
                "checkpoint was trained on different data; mismatched files: {}",
                differing.join(", ")
            ),
        });
    }
    let cfg = &ckpt.meta.config;
    let data = TrainData::of(&prepared);
    let mut model = ModelRegistry::with_defaults()
        .build(&cfg.model, &data.inputs(), cfg, &mut Rng::new(cfg.seed))
        .context("model")?;
    ckpt.restore(model.as_mut()).context("--checkpoint")?;
    let index = data.index();
    let res = evaluate_model(model.as_ref(), &index, data.test, &a.k, cfg.eval_batch).context("evaluation")?;
    let csv = res.metrics_csv(cfg.seed).context("evaluation")?;
    print!("{csv}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("metrics.csv"), &csv)?;
        let mut m = RunManifest::new("evaluate", argv, cfg.seed);
        m.config = Some(cfg.clone());
        m.fingerprints = fingerprints;
        m.artifacts = vec![out.join("metrics.csv")];
        if a.per_user {
            let p = out.join("per_user.jsonl");
            write_file(&p, &res.per_user_jsonl().context("evaluation")?)?;
            m.artifacts.push(p);
        }
        m.write(out)?;
    }
    Ok(())
}

fn cmd_noise(a: &NoiseArgs, argv: &[String]) -> CliResult<()> {
    for &r in &a.ratios {
        check_ratio(r).map_err(|e| Failure::usage(format!("--ratios: {e}")))?;
    }
    if a.kind == CorruptionKind::ModalityReplace && a.modality.is_none() {
        return Err(Failure::usage("--kind modality-replace needs --modality visual|textual"));
    }
    let base = load_config(&a.run)?;
    let prepared = load_data(&a.data)?;
    let data = TrainData::of(&prepared);
    let specs: Vec<CorruptionSpec> = a
        .ratios
        .iter()
        .map(|&ratio| CorruptionSpec {
            kind: a.kind,
            modality: a.modality,
            ratio,
            seed: base.seed,
        })
        .collect();
    let models: Vec<&str> = a.models.iter().map(String::as_str).collect();
    create_dir(&a.out)?;
    let run = run_noise_grid(&data, &models, &specs, &base, &ModelRegistry::with_defaults()).context("noise")?;
    let csv = noise_csv(&run.rows);
    write_file(&a.out.join("noise.csv"), &csv)?;
    write_file(&a.out.join("corruption_log.jsonl"), &events_jsonl(&run.events))?;
    print!("{csv}");
    let mut m = RunManifest::new("noise", argv, base.seed);
    m.config = Some(base);
    m.fingerprints = fingerprint_dir(&a.data)?;
    m.artifacts = vec![a.out.join("noise.csv"), a.out.join("corruption_log.jsonl")];
    m.write(&a.out)
}

fn cmd_grid(a: &GridArgs, argv: &[String]) -> CliResult<()> {
    let base = load_config(&a.run)?;
    let text = fs::read_to_string(&a.grid).map_err(|e| Failure::from(Error::io(&a.grid, e)))?;
    let grid = parse_grid(&text).context("--grid")?;
    let prepared = load_data(&a.data)?;
    let data = TrainData::of(&prepared);
    create_dir(&a.out)?;
    let rows = grid_search(&data, &base, &grid, &ModelRegistry::with_defaults()).context("grid")?;
    let csv = grid_csv(&rows, base.eval_k);
    write_file(&a.out.join("grid.csv"), &csv)?;
    print!("{csv}");
    let mut m = RunManifest::new("grid", argv, base.seed);
    m.config = Some(base);
    m.grid = Some(grid);
    m.fingerprints = fingerprint_dir(&a.data)?;
    m.artifacts = vec![a.out.join("grid.csv")];
    m.write(&a.out)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("JBM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("JBM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("JBM_THREADS: {e}")))
}

fn run(cli: &Cli, argv: &[String]) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Noise(a) => cmd_noise(a, argv),
        Command::Grid(a) => cmd_grid(a, argv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
