use std::path::Path;
use std::process::{Command, Output};

use fdmix_cli::manifest::{git_blob_sha1, Manifest, MANIFEST_FILE};
use serde_json::json;

const TINY: &str = r#"{
    "train.n_way": 2, "train.k_shot": 1, "train.m_query": 2,
    "train.channels": [2, 2, 4, 4],
    "train.epochs_pretrain": 1, "train.epochs_meta": 2, "train.iterations_per_epoch": 2,
    "train.pretrain_batch_size": 16, "train.select_episodes": 4,
    "bench.source.image_size": 16, "bench.target.image_size": 16,
    "bench.source_classes": 12, "bench.target_classes": 12, "bench.images_per_class": 6,
    "eval.n_episodes": 10
}"#;

fn fdmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdmix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn training_twice_gives_identical_output_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let runs: Vec<Manifest> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = tmp.path().join(d);
            let o = fdmix(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
            assert!(o.status.success(), "{}", stderr(&o));
            manifest(&out)
        })
        .collect();
    assert_eq!(runs[0].outputs, runs[1].outputs);
    let paths: Vec<&str> = runs[0].outputs.iter().map(|e| e.path.as_str()).collect();
    assert_eq!(
        paths,
        [
            "checkpoint_best.fdmx",
            "checkpoint_last.fdmx",
            "metrics.json",
            "train_log.json"
        ]
    );

    let bytes = std::fs::read(tmp.path().join("a/metrics.json")).unwrap();
    let entry = runs[0].outputs.iter().find(|e| e.path == "metrics.json").unwrap();
    assert_eq!(entry.sha1, git_blob_sha1(&bytes));
    assert_eq!(runs[0].config["train.seed"], json!(3));
}

#[test]
fn eval_reads_a_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("train");
    assert!(fdmix(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status
        .success());
    let ck = out.join("checkpoint_last.fdmx");
    let eval_dir = tmp.path().join("eval");
    let o = fdmix(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        eval_dir.to_str().unwrap(),
        &format!("eval.checkpoint={}", ck.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("target_novel"));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);

    let o = fdmix(&["eval", "--config", &cfg, "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eval.checkpoint"));
}

#[test]
fn baselines_study_reports_four_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("study");
    let o = fdmix(&[
        "study",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--kind",
        "baselines",
        "--seed",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("study_baselines.csv")).unwrap();
    let methods: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods.len(), 4, "{methods:?}");
    let md = std::fs::read_to_string(out.join("study_baselines.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && l.contains('±')).count(), 4);
    let m = manifest(&out);
    let paths: Vec<&str> = m.outputs.iter().map(|e| e.path.as_str()).collect();
    assert_eq!(
        paths,
        [
            "runs.json",
            "study_baselines.csv",
            "study_baselines.json",
            "study_baselines.md"
        ]
    );
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fdmix(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn generated_data_can_be_imported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let gen = tmp.path().join("gen");
    let o = fdmix(&["gen-data", "--config", &cfg, "--out", gen.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(manifest(&gen)
        .outputs
        .iter()
        .any(|e| e.path.starts_with("data/target/")));

    // Pixels are stored as f32, so an imported run is close to, not equal to,
    // a run on freshly generated data; it must still be reproducible.
    let import = format!("data.import={}", gen.join("data").display());
    let runs: Vec<Manifest> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = tmp.path().join(d);
            let o = fdmix(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), &import]);
            assert!(o.status.success(), "{}", stderr(&o));
            manifest(&out)
        })
        .collect();
    assert_eq!(runs[0].outputs, runs[1].outputs);
}

#[test]
fn usage_errors_exit_one() {
    let o = fdmix(&["train", "numm_target=20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("num_target"), "{}", stderr(&o));

    assert_eq!(fdmix(&["train", "num_target=five"]).status.code(), Some(1));
    assert_eq!(fdmix(&["study", "--kind", "nonsense"]).status.code(), Some(1));
    assert_eq!(fdmix(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        fdmix(&["train", "--config", "/nonexistent/cfg.json"]).status.code(),
        Some(1)
    );
    assert_eq!(fdmix(&["--help"]).status.code(), Some(0));
}
