use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn deidkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deidkit"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic workspace plus a masking and a privatizing spec.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = deidkit(&[
        "synth",
        "--out",
        p(dir.path()),
        "--docs",
        "6",
        "--words",
        "3000",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(
        dir.path().join("hybrid.json"),
        r#"{"stages":[{"type":"mask","rules":"rules.json"},{"type":"privatize","mechanism":"rantext","epsilon":16}]}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("dp.json"),
        r#"{"stages":[{"type":"privatize","mechanism":"metric_dp","epsilon":16}]}"#,
    )
    .unwrap();
    dir
}

fn file(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn synth_writes_every_file() {
    let w = workspace();
    for f in [
        "corpus.jsonl",
        "gold.jsonl",
        "utility.jsonl",
        "store.tdpe",
        "rules.json",
        "synth.manifest.json",
    ] {
        assert!(file(&w, f).is_file(), "{f}");
    }
}

#[test]
fn deidentify_is_reproducible_and_writes_a_manifest() {
    let w = workspace();
    let run = |out: &str| {
        let o = deidkit(&[
            "deidentify",
            "--corpus",
            p(&file(&w, "corpus.jsonl")),
            "--spec",
            p(&file(&w, "hybrid.json")),
            "--store",
            p(&file(&w, "store.tdpe")),
            "--out",
            p(&file(&w, out)),
            "--seed",
            "42",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(file(&w, out)).unwrap()
    };
    assert_eq!(run("a.jsonl"), run("b.jsonl"));
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(file(&w, "a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["master_seed"], 42);
    assert_eq!(m["mechanism"], "rantext");
    assert_eq!(m["preserve_placeholders"], true);
    assert_eq!(m["docs"], 6);

    let o = deidkit(&[
        "evaluate",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--output",
        p(&file(&w, "a.jsonl")),
        "--gold",
        p(&file(&w, "gold.jsonl")),
        "--utility",
        p(&file(&w, "utility.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.is_object());
}

#[test]
fn omitted_seed_is_reported() {
    let w = workspace();
    let o = deidkit(&[
        "deidentify",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--spec",
        p(&file(&w, "dp.json")),
        "--store",
        p(&file(&w, "store.tdpe")),
        "--out",
        p(&file(&w, "out.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed:"), "{}", stderr(&o));
}

#[test]
fn missing_store_is_a_usage_error() {
    let w = workspace();
    let o = deidkit(&[
        "deidentify",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--spec",
        p(&file(&w, "dp.json")),
        "--out",
        p(&file(&w, "out.jsonl")),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--store"), "{}", stderr(&o));
}

#[test]
fn bad_spec_and_flags_exit_1() {
    let w = workspace();
    fs::write(file(&w, "bad.json"), r#"{"stages":[{"type":"shuffle"}]}"#).unwrap();
    let o = deidkit(&[
        "deidentify",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--spec",
        p(&file(&w, "bad.json")),
        "--out",
        p(&file(&w, "out.jsonl")),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(
        deidkit(&["--jobs", "0", "inspect-store", "--store", "x"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(deidkit(&["deidentify", "--bogus"]).status.code(), Some(1));
    assert_eq!(deidkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_2() {
    let w = workspace();
    // the output path is a directory
    let o = deidkit(&[
        "deidentify",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--spec",
        p(&file(&w, "dp.json")),
        "--store",
        p(&file(&w, "store.tdpe")),
        "--out",
        p(w.path()),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn sweep_defaults_to_eight_epsilons() {
    let w = workspace();
    let o = deidkit(&[
        "sweep",
        "--corpus",
        p(&file(&w, "corpus.jsonl")),
        "--gold",
        p(&file(&w, "gold.jsonl")),
        "--utility",
        p(&file(&w, "utility.jsonl")),
        "--spec",
        p(&file(&w, "dp.json")),
        "--store",
        p(&file(&w, "store.tdpe")),
        "--seed",
        "3",
        "--manifest",
        p(&file(&w, "sweep.manifest.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("pipeline_id,mechanism,epsilon,seed,pct_total"));
    let eps: Vec<f64> = lines
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(
        eps,
        vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0]
    );
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(file(&w, "sweep.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["content_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn inspect_store_reads_the_exported_fixture() {
    let fixture =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny_model.tdpe");
    let o = deidkit(&["inspect-store", "--store", p(&fixture), "--full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for line in [
        "magic: TDPE",
        "version: 1",
        "dim: 4",
        "vocab_count: 10",
        "valid: true",
    ] {
        assert!(out.lines().any(|l| l == line), "{line}\n{out}");
    }
    let bad = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/bad_magic.tdpe");
    assert_eq!(
        deidkit(&["inspect-store", "--store", p(&bad)])
            .status
            .code(),
        Some(1)
    );
}
