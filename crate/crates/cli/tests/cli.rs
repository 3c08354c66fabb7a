use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jbm_core::data::{toy_dataset, write_features, Dataset, Modality, ModalityFeatureMatrix, ToySpec};
use jbm_core::substrate::Dense;

fn jbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jbm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Minimal `.npy` writer: little-endian f32, C order.
fn write_npy(path: &Path, m: &Dense<f32>) {
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}", m.rows(), m.cols());
    let mut header = dict.into_bytes();
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(b' ');
    }
    header.push(b'\n');
    let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
    bytes.extend((header.len() as u16).to_le_bytes());
    bytes.extend(header);
    for v in m.as_slice() {
        bytes.extend(v.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

/// Raw inputs with feature rows stored in item-id order.
struct Inputs {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: Dataset,
}

impl Inputs {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let dataset = toy_dataset(&ToySpec::default(), 3).unwrap();
        let mut tsv = String::new();
        for &(u, i) in &dataset.interactions {
            tsv.push_str(&format!("{}\t{}\n", dataset.user_ids[u], dataset.item_ids[i]));
        }
        fs::write(root.join("inter.tsv"), tsv).unwrap();
        let by_id = |m: Modality| {
            let f = &dataset.features[&m].matrix;
            let mut out = Dense::zeros(dataset.n_items, f.cols());
            for (k, id) in dataset.item_ids.iter().enumerate() {
                out.row_mut(id.parse().unwrap()).copy_from_slice(f.row(k));
            }
            out
        };
        write_npy(&root.join("image.npy"), &by_id(Modality::Visual));
        let text = ModalityFeatureMatrix::new(Modality::Textual, by_id(Modality::Textual)).unwrap();
        write_features(&root.join("text.jbmf"), &text).unwrap();
        fs::write(
            root.join("config.json"),
            r#"{"embed_dim": 8, "batch_size": 32, "knn_k": 3, "item_batch": 30, "max_epochs": 3, "eval_k": 10}"#,
        )
        .unwrap();
        Inputs { _dir: dir, root, dataset }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn prepare(&self, out: &str) -> Output {
        jbm(&[
            "prepare",
            "--interactions",
            s(&self.path("inter.tsv")),
            "--visual",
            s(&self.path("image.npy")),
            "--textual",
            s(&self.path("text.jbmf")),
            "--feature-order",
            "id",
            "--out",
            s(&self.path(out)),
        ])
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "train",
            "--data",
            s(&self.root.join(data)).to_string().leak(),
            "--out",
            s(&self.root.join(out)).to_string().leak(),
            "--config",
            s(&self.root.join("config.json")).to_string().leak(),
        ];
        args.extend_from_slice(extra);
        jbm(&args)
    }
}

#[test]
fn prepare_writes_a_reproducible_directory() {
    let t = Inputs::new();
    let o = t.prepare("data");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains(&format!("users\t{}", t.dataset.n_users)), "{stdout}");
    for f in ["users.tsv", "items.tsv", "train.tsv", "validation.tsv", "test.tsv", "split_manifest.txt", "manifest.json"] {
        assert!(t.path("data").join(f).exists(), "{f}");
    }
    assert_eq!(code(&t.prepare("again")), 0);
    for f in ["split_manifest.txt", "train.tsv", "test.tsv"] {
        assert_eq!(fs::read(t.path("data").join(f)).unwrap(), fs::read(t.path("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn feature_rows_follow_item_ids() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    let prepared = jbm_core::data::PreparedDataset::load(&t.path("data")).unwrap();
    for m in [Modality::Visual, Modality::Textual] {
        let got = &prepared.dataset.features[&m].matrix;
        for (k, id) in prepared.dataset.item_ids.iter().enumerate() {
            let orig = t.dataset.item_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(got.row(k), t.dataset.features[&m].matrix.row(orig), "{m} item {id}");
        }
    }
}

#[test]
fn missing_feature_file_is_an_input_error() {
    let t = Inputs::new();
    let o = jbm(&[
        "prepare",
        "--interactions",
        s(&t.path("inter.tsv")),
        "--visual",
        s(&t.path("nope.npy")),
        "--out",
        s(&t.path("data")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--visual"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&jbm(&[])), 1);
    assert_eq!(code(&jbm(&["train", "--bogus"])), 1);
    assert_eq!(code(&jbm(&["--help"])), 0);
}

#[test]
fn train_then_evaluate_reproduces_metrics() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    let o = t.train("data", "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = t.path("run");
    for f in ["checkpoint.jbmc", "checkpoint.jbmc.meta.json", "epochs.csv", "confidence_histogram.csv", "metrics.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let epochs = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,L_bpr,L_dm,L_mm,L_cl,val_recall@10,seconds\n"), "{epochs}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["fingerprints"]["train.tsv"].as_str().is_some_and(|h| h.len() == 64));

    let e = jbm(&[
        "evaluate",
        "--data",
        s(&t.path("data")),
        "--checkpoint",
        s(&run.join("checkpoint.jbmc")),
        "--k",
        "10,20",
        "--out",
        s(&t.path("eval")),
        "--per-user",
    ]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let trained = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let printed = String::from_utf8_lossy(&e.stdout).into_owned();
    let printed_lines: Vec<&str> = printed.lines().collect();
    assert!(printed_lines.len() >= 3, "{printed}");
    for line in &printed_lines {
        assert!(trained.lines().any(|l| l == *line), "`{line}` not in\n{trained}");
    }
    assert!(t.path("eval").join("per_user.jsonl").exists());
}

#[test]
fn evaluate_rejects_changed_data() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    assert_eq!(code(&t.train("data", "run", &[])), 0);
    let test = t.path("data").join("test.tsv");
    let text = fs::read_to_string(&test).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&test, kept.join("\n") + "\n").unwrap();
    let e = jbm(&[
        "evaluate",
        "--data",
        s(&t.path("data")),
        "--checkpoint",
        s(&t.path("run").join("checkpoint.jbmc")),
    ]);
    assert_eq!(code(&e), 3, "{}", stderr(&e));
}

#[test]
fn disabling_debiasing_puts_every_weight_at_one() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    let o = t.train("data", "nobd", &["--ablate", "no-bd", "--max-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = fs::read_to_string(t.path("nobd").join("confidence_histogram.csv")).unwrap();
    let mut rows = hist.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let total: u64 = rows
        .by_ref()
        .map(|r| {
            let count: u64 = r[2].parse().unwrap();
            if count > 0 {
                assert_eq!(r[1], "0.9", "{hist}");
            }
            count
        })
        .sum();
    assert!(total > 0);
}

#[test]
fn noise_grid_and_ratio_cap() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    let base = [
        "noise",
        "--data",
        s(&t.path("data")).to_string().leak(),
        "--kind",
        "feedback-add",
        "--models",
        "lightgcn,bpr-mf",
        "--max-epochs",
        "1",
        "--out",
        s(&t.path("noise")).to_string().leak(),
    ];
    let o = jbm(&[&base[..], &["--ratios", "0.1"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path("noise").join("noise.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0], "model,corruption_kind,modality,ratio,seed,recall@20,ndcg@20");
    assert!(lines[1].starts_with("lightgcn,feedback-add,none,0.1,"));
    assert!(t.path("noise").join("corruption_log.jsonl").exists());

    let o = jbm(&[&base[..], &["--ratios", "0.3"]].concat());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("limited to 20%"), "{}", stderr(&o));
}

#[test]
fn singleton_grid_gives_one_row() {
    let t = Inputs::new();
    assert_eq!(code(&t.prepare("data")), 0);
    fs::write(t.path("grid.json"), r#"{"omega": [0.5]}"#).unwrap();
    let o = jbm(&[
        "grid",
        "--data",
        s(&t.path("data")),
        "--grid",
        s(&t.path("grid.json")),
        "--config",
        s(&t.path("config.json")),
        "--max-epochs",
        "1",
        "--out",
        s(&t.path("grid")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path("grid").join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("\"omega=0.5\","), "{csv}");
}
