use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_materium"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn first_line_json(out: &str) -> Value {
    serde_json::from_str(out.lines().next().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const NACL: &str = r#"{"id":"nacl","lattice":[5.64,5.64,5.64,90,90,90],"sites":[{"element":"Na","oxidation_state":1,"frac":[0,0,0]},{"element":"Cl","oxidation_state":-1,"frac":[0.5,0.5,0.5]}],"properties":{"density":2.16}}"#;

/// A toy corpus and a small model trained on it, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    run_dir: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("toy.jsonl");
        ok(&["synth", "--n", "40", "--seed", "3", "--out", p(&corpus)]);
        let run_dir = dir.path().join("run");
        ok(&[
            "train", "--corpus", p(&corpus), "--out", p(&run_dir), "--n-layers", "1", "--n-heads", "2", "--d-emb", "32",
            "--d-ffn-hidden", "64", "--epochs", "3", "--batch-size", "8", "--lr", "3e-3", "--conditions",
            "density,formula", "--seed", "1",
        ]);
        Fixture { _dir: dir, corpus, run_dir }
    })
}

fn metrics(dir: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,step,train_loss,val_loss,lr,grad_norm");
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn tokenize_reports_lengths_and_clamps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let wide = NACL.replace("\"nacl\"", "\"wide\"").replace("[5.64,5.64,5.64,", "[25,25,25,");
    std::fs::write(&corpus, format!("{NACL}\n{wide}\n")).unwrap();
    let out = dir.path().join("tokens.jsonl");
    let text = ok(&["tokenize", "--corpus", p(&corpus), "--out", p(&out)]);
    let echoed = first_line_json(&text);
    assert_eq!(echoed["command"], "tokenize");
    assert_eq!(echoed["config"]["ordering"], "low");
    let stats: Value = serde_json::from_str(&text.lines().skip(1).collect::<String>()).unwrap();
    assert_eq!(stats["length_histogram"]["18"], 2);
    assert_eq!(stats["n_records_clamped"], 1);
    assert_eq!(stats["clamp_counts"][0], 1);
    let tokens = std::fs::read_to_string(&out).unwrap();
    let first: Value = serde_json::from_str(tokens.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "nacl");
    assert_eq!(first["tokens"].as_array().unwrap().len(), 18);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    let o = run(&["tokenize", "--corpus", p(&empty)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{NACL}\n{{\"id\":\"x\",\"sites\":[]}}\n")).unwrap();
    let o = run(&["tokenize", "--corpus", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.jsonl") && err.contains("line 2") && err.contains("lattice"), "{err}");

    let o = run(&["tokenize", "--corpus", p(&dir.path().join("missing.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["tokenize"]).status.code(), Some(1));
    assert_eq!(run(&["tokenize", "--corpus", "x", "--ordering", "sideways"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = run(&["train", "--corpus", "missing.jsonl", "--out", p(&out), "--lr", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[synth]\nn = 7\nseed = 4\n").unwrap();
    let out = dir.path().join("c.jsonl");
    let text = ok(&["--config", p(&cfg), "synth", "--n", "5", "--out", p(&out)]);
    let echoed = first_line_json(&text);
    assert_eq!(echoed["config"]["n"], 5);
    assert_eq!(echoed["config"]["seed"], 4);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
    std::fs::write(&cfg, "[synth]\nnn = 7\n").unwrap();
    assert_eq!(run(&["--config", p(&cfg), "synth", "--out", p(&out)]).status.code(), Some(1));
}

#[test]
fn training_writes_checkpoints_and_resumes_without_gaps() {
    let f = fixture();
    let rows = metrics(&f.run_dir);
    assert_eq!(rows.len(), 3);
    let loss = |r: &Vec<String>| r[2].parse::<f64>().unwrap();
    assert!(loss(&rows[2]) < loss(&rows[0]), "{rows:?}");
    for e in 1..=3 {
        assert!(f.run_dir.join(format!("epoch-{e:03}.ckpt")).exists());
    }

    // resume a copy for one more epoch
    let dir = tempfile::tempdir().unwrap();
    for name in ["last.ckpt", "metrics.csv"] {
        std::fs::copy(f.run_dir.join(name), dir.path().join(name)).unwrap();
    }
    ok(&[
        "train", "--corpus", p(&f.corpus), "--out", p(dir.path()), "--epochs", "4", "--batch-size", "8", "--lr", "3e-3",
        "--seed", "1", "--resume",
    ]);
    let rows = metrics(dir.path());
    let epochs: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
}

#[test]
fn generate_annotates_targets() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen.jsonl");
    let ckpt = f.run_dir.join("last.ckpt");
    let text = ok(&["generate", "--checkpoint", p(&ckpt), "--density", "5.0", "--n", "16", "--workers", "2", "--out", p(&out)]);
    assert_eq!(first_line_json(&text)["config"]["density"], 5.0);
    let lines: Vec<Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 16);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["targets"]["density"], 5.0);
        assert_eq!(l["seed"], i as u64);
        assert_eq!(l["valid"], true);
    }
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_samples"], 16);

    // same seed, one worker: identical output
    let again = dir.path().join("again.jsonl");
    ok(&["generate", "--checkpoint", p(&ckpt), "--density", "5.0", "--n", "16", "--out", p(&again)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), std::fs::read_to_string(&again).unwrap());

    ok(&["generate", "--checkpoint", p(&ckpt), "--n", "2", "--out", p(&out)]);
    ok(&["generate", "--checkpoint", p(&ckpt), "--formula", "Fe1O1", "--n", "2", "--out", p(&out)]);
    let first: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["targets"]["formula"], "Fe1O1");

    let o = run(&["generate", "--checkpoint", p(&ckpt), "--hhi", "2000", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
}

#[test]
fn generate_rejects_a_foreign_vocabulary() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/elements.csv");
    let text = std::fs::read_to_string(bundled).unwrap();
    let trimmed: Vec<&str> = text.lines().filter(|l| !l.starts_with("Gd,")).collect();
    let tables = dir.path().join("elements.csv");
    std::fs::write(&tables, trimmed.join("\n")).unwrap();
    let o = run(&[
        "generate", "--checkpoint", p(&f.run_dir.join("last.ckpt")), "--tables", p(&tables), "--out",
        p(&dir.path().join("g.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("vocab"), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_uniqueness_and_absent_markers() {
    let dir = tempfile::tempdir().unwrap();
    let line = NACL.replace("}}", "},\"valid\":true,\"seed\":0,\"targets\":{\"density\":2.0}}");
    let generated = dir.path().join("dup.jsonl");
    std::fs::write(&generated, format!("{line}\n{line}\n{line}\n{line}\n")).unwrap();
    let out = dir.path().join("report");
    ok(&["evaluate", "--generated", p(&generated), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frac_unique"], 0.25);
    assert_eq!(report["n_total"], 4);
    assert!(report["frac_novel"].is_null());
    assert!(report["sun_rate"].is_null());
    assert_eq!(report["density"][0]["target"], 2.0);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains("frac_unique,0.25"));
    assert!(csv.contains("frac_novel,NA"));

    let training = dir.path().join("train.jsonl");
    std::fs::write(&training, format!("{NACL}\n")).unwrap();
    ok(&["evaluate", "--generated", p(&generated), "--training", p(&training), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frac_novel"], 0.0);

    let o = run(&["evaluate", "--generated", p(&dir.path().join("nope.jsonl")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_reads_generated_output() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.jsonl");
    ok(&["generate", "--checkpoint", p(&f.run_dir.join("last.ckpt")), "--n", "12", "--unconstrained", "--out", p(&gen)]);
    let out = dir.path().join("report");
    ok(&["evaluate", "--generated", p(&gen), "--training", p(&f.corpus), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_total"], 12);
    assert!(report["timing"]["seconds_per_sample"].as_f64().unwrap() > 0.0);
}

#[test]
fn inspect_names_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, format!("{NACL}\n")).unwrap();
    let text = ok(&["inspect", "--corpus", p(&corpus)]);
    assert!(text.contains("formula: NaCl") || text.contains("formula: ClNa"), "{text}");
    assert!(text.contains("[LATTICE]") && text.contains("[Na|+1]"), "{text}");
    let text = ok(&["inspect", "--tokens", "0 2 1"]);
    assert!(text.contains("[SOS]") && text.contains("grammar error"), "{text}");
    assert_eq!(run(&["inspect"]).status.code(), Some(1));
    let f = fixture();
    let text = ok(&["inspect", "--checkpoint", p(&f.run_dir.join("last.ckpt"))]);
    assert!(text.contains("matches tables") && text.contains("epoch: 3"), "{text}");
}
