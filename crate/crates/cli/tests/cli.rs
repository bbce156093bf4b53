use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = r#"
[data]
tokenizer = "word"
window = 12
val_fraction = 0.1

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32

[train]
learning_rate = 0.01
batch_tokens = 96
total_steps = 30
eval_interval = 10
warmup_steps = 5
"#;

fn film(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_film")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = film(args);
    assert!(
        out.status.success(),
        "film {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        ok(&["synth-corpus", "--size", "6000", "--seed", "4", "--out", s(&dir.path().join("corpus.txt"))]);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, objective: &str) -> PathBuf {
        let out = self.path(objective);
        ok(&[
            "train",
            "--config",
            s(&self.path("config.toml")),
            "--corpus",
            s(&self.path("corpus.txt")),
            "--out",
            s(&out),
            "--objective",
            objective,
            "--seed",
            "2",
        ]);
        out
    }
}

#[test]
fn train_writes_checkpoint_logs_and_manifest() {
    let fx = Fixture::new();
    let out = fx.path("run");
    let stdout = ok(&[
        "train",
        "--config",
        s(&fx.path("config.toml")),
        "--corpus",
        s(&fx.path("corpus.txt")),
        "--out",
        s(&out),
        "--schedule",
        "fixed:0.15",
        "--steps",
        "12",
    ]);
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["steps"], 12);
    for f in ["model.ckpt", "step-000012.ckpt", "metrics.jsonl", "timing.jsonl", "config.toml", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["total_steps"], 12);
    assert_eq!(manifest["config"]["train"]["schedule"], "fixed:0.15");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    assert!(!out.join(".manifest.json.tmp").exists());

    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("total_steps = 12"));
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let out = film(&["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let fx = Fixture::new();
    fs::write(fx.path("bad.toml"), "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = film(&[
        "train",
        "--config",
        s(&fx.path("bad.toml")),
        "--corpus",
        s(&fx.path("corpus.txt")),
        "--out",
        s(&fx.path("x")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");

    let out = film(&["eval-ppl", "--ckpt", "/nonexistent.ckpt", "--corpus", s(&fx.path("corpus.txt"))]);
    assert!(!out.status.success());
}

#[test]
fn film_checkpoint_serves_eval_infill_and_generate() {
    let fx = Fixture::new();
    let run = fx.train("film");
    let ckpt = run.join("model.ckpt");

    let report_dir = fx.path("eval");
    let stdout = ok(&[
        "eval-ppl",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&fx.path("corpus.txt")),
        "--policy",
        "l2r",
        "--policy",
        "max-ent",
        "--out",
        s(&report_dir),
    ]);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    for p in ["l2r", "max-ent"] {
        let ppl = report["policies"][p]["perplexity"].as_f64().unwrap();
        assert!(ppl.is_finite() && ppl > 1.0, "{p}: {ppl}");
    }
    assert!(report_dir.join("report.json").is_file());
    assert!(report_dir.join("manifest.json").is_file());

    let text = "the [MASK] [MASK] on the hill .";
    let infill = |seed: &str| {
        ok(&["infill", "--ckpt", s(&ckpt), "--text", text, "--greedy", "--policy", "min-ent", "--seed", seed])
    };
    let first = infill("0");
    assert_eq!(first, infill("0"));
    assert_eq!(first, infill("9"), "greedy decoding ignores the seed");
    assert!(!first.contains("[MASK]"));
    assert!(first.starts_with("the "));

    let trace = fx.path("trace.jsonl");
    ok(&["infill", "--ckpt", s(&ckpt), "--text", text, "--trace", s(&trace)]);
    let steps: Vec<Value> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 2);
    assert_eq!(steps[0]["position"], 1);

    let samples = ok(&["generate", "--ckpt", s(&ckpt), "--count", "3", "--seed", "5"]);
    assert_eq!(samples.lines().count(), 3);
    assert_eq!(samples, ok(&["generate", "--ckpt", s(&ckpt), "--count", "3", "--seed", "5"]));
}

#[test]
fn clm_and_cm_checkpoints() {
    let fx = Fixture::new();
    let film_ckpt = fx.train("film").join("model.ckpt");
    let clm = fx.train("clm").join("model.ckpt");
    let cm = fx.train("cm").join("model.ckpt");

    let report: Value =
        serde_json::from_str(&ok(&["eval-ppl", "--ckpt", s(&clm), "--corpus", s(&fx.path("corpus.txt"))])).unwrap();
    assert!(report["clm"]["perplexity"].as_f64().unwrap() > 1.0);
    assert_eq!(ok(&["generate", "--ckpt", s(&clm), "--count", "2"]).lines().count(), 2);
    assert!(!film(&["eval-ppl", "--ckpt", s(&cm), "--corpus", s(&fx.path("corpus.txt"))]).status.success());
    assert!(!film(&["infill", "--ckpt", s(&clm), "--text", "a [MASK]"]).status.success());

    let out = fx.path("bench");
    let bench = |dir: &Path| {
        ok(&[
            "bench",
            "--film-ckpt",
            s(&film_ckpt),
            "--cm-ckpt",
            s(&cm),
            "--corpus",
            s(&fx.path("corpus.txt")),
            "--limit",
            "5",
            "--seed",
            "1",
            "--out",
            s(dir),
        ])
    };
    bench(&out);
    let again = fx.path("bench2");
    bench(&again);
    let a = fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(a, fs::read_to_string(again.join("report.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 7);
    let header: Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(header["type"], "header");

    // swapped roles are rejected
    let out = film(&[
        "bench",
        "--film-ckpt",
        s(&cm),
        "--cm-ckpt",
        s(&film_ckpt),
        "--corpus",
        s(&fx.path("corpus.txt")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn transform_cm_matches_the_worked_example() {
    let out = ok(&["transform-cm", "--text", "They have really good ice cream", "--spans", "2,4,5,6"]);
    assert_eq!(out.trim(), "They [MASK:0] good [MASK:1] cream [FILL:0] have really [FILL:1] ice");
    assert!(!film(&["transform-cm", "--text", "a b", "--spans", "2,x"]).status.success());
}

#[test]
fn synth_corpus_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth-corpus", "--kind", "stories", "--size", "20", "--seed", "3", "--out", s(&a)]);
    ok(&["synth-corpus", "--kind", "stories", "--size", "20", "--seed", "3", "--out", s(&b)]);
    ok(&["synth-corpus", "--kind", "stories", "--size", "20", "--seed", "4", "--out", s(&c)]);
    let a = fs::read_to_string(a).unwrap();
    assert_eq!(a, fs::read_to_string(b).unwrap());
    assert_ne!(a, fs::read_to_string(c).unwrap());
    assert_eq!(a.lines().count(), 20);
    assert!(!film(&["synth-corpus", "--kind", "poems", "--out", s(&dir.path().join("d"))]).status.success());
}
