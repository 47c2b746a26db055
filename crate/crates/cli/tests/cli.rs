use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn labo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labo"))
        .args(args)
        .env("LABO_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &TempDir) -> std::path::PathBuf {
    let out = dir.path().join("bench");
    let o = labo(&["synth", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn prepare_splits_and_sanitizes() {
    let dir = TempDir::new().unwrap();
    let sentences = dir.path().join("sentences.jsonl");
    fs::write(
        &sentences,
        concat!(
            r#"{"class_id": 0, "prompt_id": 0, "text": "The hen is brown and has a white chest."}"#,
            "\n",
            r#"{"class_id": 1, "prompt_id": 2, "text": "A cock has a red comb."}"#,
            "\n"
        ),
    )
    .unwrap();
    let classes = dir.path().join("classes.json");
    fs::write(&classes, r#"["hen", "cock"]"#).unwrap();
    let out = dir.path().join("out");
    let o = labo(&[
        "prepare",
        "--sentences",
        path(&sentences),
        "--classes",
        path(&classes),
        "--superclass",
        "bird",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let catalog = fs::read_to_string(out.join("concepts.jsonl")).unwrap();
    let texts: Vec<String> = catalog
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["text"].as_str().unwrap().to_string())
        .collect();
    assert!(texts.contains(&"brown".to_string()), "{texts:?}");
    assert!(texts.contains(&"white chest".to_string()), "{texts:?}");
    assert!(texts.iter().all(|t| !t.contains("hen") && !t.contains("cock")), "{texts:?}");
    assert!(out.join("prepare.config.json").exists());
    assert_eq!(fs::read_to_string(out.join("prompts.jsonl")).unwrap().lines().count(), 10);
}

#[test]
fn empty_sentences_warn_and_succeed() {
    let dir = TempDir::new().unwrap();
    let sentences = dir.path().join("empty.jsonl");
    fs::write(&sentences, "").unwrap();
    let classes = dir.path().join("classes.txt");
    fs::write(&classes, "hen\ncock\n").unwrap();
    let out = dir.path().join("out");
    let o = labo(&["prepare", "--sentences", path(&sentences), "--classes", path(&classes), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no sentences"));
    assert_eq!(fs::read_to_string(out.join("concepts.jsonl")).unwrap(), "");
}

#[test]
fn malformed_line_exits_2_with_line_number() {
    let dir = TempDir::new().unwrap();
    let sentences = dir.path().join("bad.jsonl");
    fs::write(
        &sentences,
        "{\"class_id\": 0, \"prompt_id\": 0, \"text\": \"brown\"}\n{\"class_id\": 0, oops}\n",
    )
    .unwrap();
    let classes = dir.path().join("classes.json");
    fs::write(&classes, r#"["hen"]"#).unwrap();
    let o = labo(&[
        "prepare",
        "--sentences",
        path(&sentences),
        "--classes",
        path(&classes),
        "--out",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn select_defaults_to_fifty_concepts_per_class() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let out = dir.path().join("sel");
    let manifest = bench.join("manifest.json");
    fs::write(
        dir.path().join("bare.json"),
        serde_json::json!({
            "images": bench.join("images.bin"),
            "labels": bench.join("labels.jsonl"),
            "catalog": bench.join("concepts.jsonl"),
            "concept_embeddings": bench.join("concept_embeddings.bin"),
        })
        .to_string(),
    )
    .unwrap();
    let o = labo(&["select", "--manifest", path(&dir.path().join("bare.json")), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = read_json(&out.join("select.config.json"));
    assert_eq!(echo["manifest"]["selection"]["k"], 50);
    let b = read_json(&out.join("bottleneck.json"));
    assert_eq!(b["k"], 50);
    assert!(b["classes"].as_array().unwrap().iter().all(|c| c["concept_ids"].as_array().unwrap().len() == 50));

    // a flag beats the manifest
    let o = labo(&["select", "--manifest", path(&manifest), "--k", "3", "--shots", "2", "--out", path(&out)]);
    assert!(o.status.success());
    assert_eq!(read_json(&out.join("bottleneck.json"))["k"], 3);
}

#[test]
fn train_explain_and_evaluate_checkpoint() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let manifest = bench.join("manifest.json");
    let out = dir.path().join("run");
    let o = labo(&["train", "--manifest", path(&manifest), "--shots", "1", "--epochs", "20", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.config.json", "checkpoint.json", "checkpoint.bin", "bottleneck.json", "bottleneck.bin", "train_summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = read_json(&out.join("train_summary.json"));
    assert_eq!(summary["history"].as_array().unwrap().len(), 20);

    let ckpt = out.join("checkpoint.json");
    let o = labo(&["explain", "--manifest", path(&manifest), "--checkpoint", path(&ckpt), "--class", "0", "--top", "5", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 6, "{stdout}");
    let rows = read_json(&out.join("explanations.json"));
    let ranks: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, vec![1, 2, 3, 4, 5]);

    let o = labo(&["eval", "--manifest", path(&manifest), "--checkpoint", path(&ckpt), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = read_json(&out.join("eval.json"));
    assert_eq!(eval["test_accuracy"], summary["test_accuracy"]);
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let o = labo(&[
        "eval",
        "--manifest",
        path(&bench.join("manifest.json")),
        "--checkpoint",
        path(&dir.path().join("absent.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let o = labo(&["select", "--manifest", path(&bench.join("manifest.json")), "--k", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = labo(&["select", "--manifest", path(&dir.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_reports_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let manifest = bench.join("manifest.json");
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let o = labo(&[
            "eval",
            "--manifest",
            path(&manifest),
            "--shots",
            "1,2",
            "--epochs",
            "10",
            "--jobs",
            jobs,
            "--out",
            path(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("shots\tmethod"));
        fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(run("a", "1"), run("b", "3"));
}

#[test]
fn probe_writes_its_sweep() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let out = dir.path().join("probe");
    let o = labo(&["probe", "--manifest", path(&bench.join("manifest.json")), "--shots", "2", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("probe_report.json"));
    assert_eq!(report["grid_accuracies"].as_array().unwrap().len(), 7);
    assert!(report["chosen_C"].as_f64().unwrap() > 0.0);
    assert!(report["test_accuracy"].as_f64().is_some());
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let bench = synth(&dir);
    let out = dir.path().join("diverge");
    let o = labo(&[
        "train",
        "--manifest",
        path(&bench.join("manifest.json")),
        "--activation",
        "none",
        "--lr",
        "1e308",
        "--epochs",
        "3",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
    // the resolved config was written before training started
    assert!(out.join("train.config.json").exists());
}
