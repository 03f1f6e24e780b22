use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_SYNTH: &str = "nodes_per_domain = 200\nfeature_dim = 8\nmean_shift = 1.0\n";
const FAST_TRAIN: [&str; 14] = [
    "--q", "20", "--warmup-epochs", "10", "--rounds", "1", "--epochs-per-round", "3", "--mi-inner-steps", "5", "--anchors",
    "8", "--batch-per-class", "16",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graph-transfer")).args(args).output().expect("spawn binary")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Generates a small pair under `root/pair` and returns its path.
fn small_pair(root: &Path, seed: &str) -> PathBuf {
    let cfg = root.join("synth.txt");
    std::fs::write(&cfg, SMALL_SYNTH).unwrap();
    let pair = root.join("pair");
    ok(&["generate", "--config", &s(&cfg), "--seed", seed, "--out", &s(&pair)]);
    pair
}

fn train(pair: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train".to_string(), "--pair".into(), s(pair), "--out".into(), s(out)];
    args.extend(FAST_TRAIN.iter().map(|a| a.to_string()));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_pair_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "1");
    for f in ["source.graph", "target.graph", "splits.jsonl", "meta.txt", "generate.manifest.json"] {
        assert!(pair.join(f).is_file(), "missing {f}");
    }
    let manifest = report(&pair.join("generate.manifest.json"));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["nodes_per_domain"], "200");
}

#[test]
fn same_seed_generates_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (pa, pb) = (small_pair(a.path(), "7"), small_pair(b.path(), "7"));
    for f in ["source.graph", "target.graph", "splits.jsonl"] {
        assert_eq!(std::fs::read(pa.join(f)).unwrap(), std::fs::read(pb.join(f)).unwrap());
    }
}

#[test]
fn non_homophilous_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "src_p_intra = 0.002\nsrc_p_inter = 0.02\n").unwrap();
    let out = run(&["generate", "--config", &s(&cfg), "--out", &s(&dir.path().join("pair"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-homophilous"));
}

#[test]
fn malformed_config_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "seed = 1\nthis line has no separator\n").unwrap();
    let out = run(&["generate", "--config", &s(&cfg), "--out", &s(&dir.path().join("pair"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));
}

#[test]
fn existing_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "2");
    let again = run(&["generate", "--config", &s(&dir.path().join("synth.txt")), "--out", &s(&pair)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["generate", "--config", &s(&dir.path().join("synth.txt")), "--out", &s(&pair), "--force"]);
}

#[test]
fn corrupt_at_zero_rate_flips_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "3");
    let out = ok(&["corrupt", "--pair", &s(&pair), "--rate", "0"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("flipped 0 of"));
    let csv = std::fs::read_to_string(pair.join("corruption.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",false") || l.ends_with(",0")));
    let refuse = run(&["corrupt", "--pair", &s(&pair), "--rate", "0.3"]);
    assert_eq!(refuse.status.code(), Some(2));
}

#[test]
fn train_then_evaluate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "4");
    ok(&["corrupt", "--pair", &s(&pair), "--rate", "0.2", "--seed", "4"]);
    let run_dir = dir.path().join("run");
    train(&pair, &run_dir, &[]);
    for f in ["model.ckpt", "report.json", "train_log.csv", "rounds.jsonl", "config.txt", "train.manifest.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let trained = report(&run_dir.join("report.json"));
    assert!(trained["clean_set"].is_object());

    let eval_path = dir.path().join("eval.json");
    let out = ok(&["evaluate", "--checkpoint", &s(&run_dir.join("model.ckpt")), "--pair", &s(&pair), "--out", &s(&eval_path)]);
    let evaluated = report(&eval_path);
    assert_eq!(evaluated["target_accuracy"], trained["target_accuracy"]);
    assert_eq!(evaluated["per_class_accuracy"], trained["per_class_accuracy"]);
    assert_eq!(evaluated["macro_f1"], trained["macro_f1"]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["target_accuracy"], trained["target_accuracy"]);

    let csv_path = dir.path().join("emb.csv");
    ok(&["export", "--checkpoint", &s(&run_dir.join("model.ckpt")), "--pair", &s(&pair), "--out", &s(&csv_path)]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("domain,node,label,e0"));
    assert_eq!(lines.count(), 400);

    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,l_sup,l_cl,l_da,l_mi,total,clean_set_size");
    assert_eq!(log.lines().count(), 1 + 10 + 3);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "5");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        &s(&dir.path().join("nope.ckpt")),
        "--pair",
        &s(&pair),
        "--out",
        &s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn ablation_variants_produce_distinct_runs() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "6");
    ok(&["corrupt", "--pair", &s(&pair), "--rate", "0.2"]);
    let mut logs = Vec::new();
    for (i, v) in ["w/o-G", "w/o-B", "w/o-M"].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        train(&pair, &out, &["--ablate", v]);
        assert!(std::fs::read_to_string(out.join("config.txt")).unwrap().contains("disable_"));
        logs.push(std::fs::read_to_string(out.join("train_log.csv")).unwrap());
    }
    assert_ne!(logs[0], logs[1]);
    assert_ne!(logs[1], logs[2]);
    assert_ne!(logs[0], logs[2]);

    let bad = run(&["train", "--pair", &s(&pair), "--out", &s(&dir.path().join("bad")), "--ablate", "w/o-X"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn noise_rates_give_one_report_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let pair = small_pair(dir.path(), "8");
    let out = dir.path().join("sweep");
    train(&pair, &out, &["--noise-rates", "0,20"]);
    let entries: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("report.json").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries.len(), 2, "{entries:?}");
    assert!(!pair.join("corruption.csv").exists());
}
