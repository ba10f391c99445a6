use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_llfer"))
            .args(args)
            .env("LLFER_OUT", self.path("out"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn records(&self) -> Vec<serde_json::Value> {
        let text = std::fs::read_to_string(self.path("out/runs.jsonl")).unwrap_or_default();
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn losses(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect()
}

#[test]
fn help_exits_zero() {
    let e = Env::new();
    let o = e.run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in
        ["degrade", "synth-toy", "train-stage1", "train-stage2", "eval", "ablate", "sweep-T", "export-emb", "plot"]
    {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_subcommand_suggests() {
    let e = Env::new();
    let o = e.run(&["evl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eval"));
}

#[test]
fn stage2_without_stage1_checkpoint_names_the_flag() {
    let e = Env::new();
    let o = e.run(&["train-stage2", "--data", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--s1-ckpt"));
}

#[test]
fn config_errors_name_the_key() {
    let e = Env::new();
    e.ok(&["synth-toy", "--out", s(&e.path("toy")), "--per-class", "2"]);
    let cfg = e.path("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = e.run(&["train-stage1", "--data", s(&e.path("toy")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = e.run(&["train-stage1", "--data", s(&e.path("missing"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degrade_writes_manifest_and_is_reproducible() {
    let e = Env::new();
    e.ok(&["synth-toy", "--out", s(&e.path("toy")), "--per-class", "2"]);
    for dst in ["d1", "d2"] {
        e.ok(&["degrade", "--src", s(&e.path("toy")), "--dst", s(&e.path(dst)), "--ev", "-2", "--seed", "3"]);
    }
    let m1 = std::fs::read(e.path("d1/degrade_manifest.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&m1).lines().count(), 4);
    let a = std::fs::read(e.path("d1/train/surprise/00000.png")).unwrap();
    let b = std::fs::read(e.path("d2/train/surprise/00000.png")).unwrap();
    assert_eq!(a, b);
    e.ok(&["plot", "--input", s(&e.path("d1/histograms.json")), "--out", s(&e.path("hist.svg"))]);
    assert!(e.path("hist.svg").exists());
    assert_eq!(e.records().len(), 4);
}

#[test]
fn pipeline_end_to_end_is_deterministic() {
    let e = Env::new();
    let toy = e.path("toy");
    e.ok(&["synth-toy", "--out", s(&toy), "--per-class", "4", "--test-per-class", "2"]);
    let cfg = e.path("run.toml");
    std::fs::write(&cfg, "batch_size = 4\nmax_steps = 3\nlr = 0.002\n").unwrap();
    let common = ["--config", s(&cfg), "--seed", "5"];

    let s1a = e.path("a/s1.safetensors");
    let s1b = e.path("b/s1.safetensors");
    for p in [&s1a, &s1b] {
        let mut args = vec!["train-stage1", "--data", s(&toy), "--out", s(p)];
        args.extend(common);
        e.ok(&args);
    }
    let la = losses(&s1a.with_extension("log.jsonl"));
    assert_eq!(la.len(), 3);
    assert_eq!(la, losses(&s1b.with_extension("log.jsonl")));

    let s2 = e.path("a/s2.safetensors");
    let mut args = vec!["train-stage2", "--data", s(&toy), "--s1-ckpt", s(&s1a), "--out", s(&s2), "--T", "2"];
    args.extend(common);
    e.ok(&args);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s2.with_extension("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frozen_intact"], true);

    let o = e.ok(&["eval", "--ckpt", s(&s2), "--data", s(&toy), "--split", "test", "--out", s(&e.path("eval.json"))]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e.path("eval.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 4);
    assert_eq!(report["t_steps"], 2);

    for stem in ["emb1", "emb2"] {
        e.ok(&["export-emb", "--ckpt", s(&s2), "--data", s(&toy), "--layer", "penultimate", "--out", s(&e.path(stem))]);
    }
    assert_eq!(std::fs::read(e.path("emb1.bin")).unwrap(), std::fs::read(e.path("emb2.bin")).unwrap());
    let labels = std::fs::read_to_string(e.path("emb1.labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 12);

    e.ok(&["sweep-T", "--ckpt", s(&s2), "--data", s(&toy), "--t-list", "1,2", "--out", s(&e.path("sweep"))]);
    let sweep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e.path("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 2);
    assert!(e.path("sweep/prior_T1.bin").exists());
    e.ok(&["plot", "--input", s(&e.path("sweep/sweep.json"))]);
    e.ok(&["plot", "--input", s(&e.path("eval.json"))]);
    e.ok(&[
        "plot",
        "--input",
        s(&s1a.with_extension("log.jsonl")),
        "--kind",
        "curve",
        "--out",
        s(&e.path("curve.svg")),
    ]);

    let bad = e.run(&["sweep-T", "--ckpt", s(&s2), "--data", s(&toy), "--t-list", "0,2"]);
    assert_eq!(bad.status.code(), Some(2));

    let records = e.records();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r["started_at"].is_string() && r["subcommand"].is_string()));
    assert_eq!(records.last().unwrap()["status"], "error");
    let s1_runs: Vec<_> = records.iter().filter(|r| r["subcommand"] == "train-stage1").collect();
    assert_eq!(s1_runs[0]["input_hash"], s1_runs[1]["input_hash"]);
    assert_eq!(s1_runs[0]["seed"], 5);
}

#[test]
fn ablate_emits_four_rows() {
    let e = Env::new();
    let toy = e.path("toy");
    e.ok(&["synth-toy", "--out", s(&toy), "--per-class", "3"]);
    let s1 = e.path("s1.safetensors");
    e.ok(&["train-stage1", "--data", s(&toy), "--out", s(&s1), "--max-steps", "1"]);
    let out = e.path("ablation.json");
    let o = e.ok(&["ablate", "--data", s(&toy), "--s1-ckpt", s(&s1), "--out", s(&out), "--max-steps", "1"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("V4") && table.contains("92.97"));
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let rows = grid["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["built_denoiser"], false);
    assert_eq!(rows[0]["built_schedule"], false);
    assert!(rows[1..].iter().all(|r| r["built_denoiser"] == true));
    e.ok(&["plot", "--input", s(&out), "--out", s(&e.path("ablation.svg"))]);
}
