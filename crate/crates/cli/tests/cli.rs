use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn mdkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdkd"))
        .args(args)
        .env("MDKD_LOG_LEVEL", "error")
        .output()
        .expect("spawn mdkd")
}

fn ok(args: &[&str]) -> String {
    let out = mdkd(args);
    assert!(
        out.status.success(),
        "mdkd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = mdkd(args);
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic corpus plus a config file for a tiny teacher.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&[
            "gen-synthetic",
            "--out",
            p(&data),
            "--seed",
            "3",
            "--n-train",
            "48",
            "--n-dev",
            "24",
            "--symbols",
            "8",
            "--max-len",
            "3",
        ]);
        let cfg = json!({
            "train.recipe": "exp1.0",
            "train.epochs": 2,
            "train.batch_size": 8,
            "train.lr": 0.003,
            "data.train": data.join("train.tsv"),
            "data.dev": data.join("dev.tsv"),
            "data.vocab": data.join("vocab.txt"),
            "max_seq_len": 9,
            "model": {"n_layers": 4, "n_heads": 2, "d_model": 8, "d_ff": 16},
        });
        fs::write(dir.path().join("teacher.json"), cfg.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        p(&self.path(rel)).to_string()
    }

    fn teacher(&self) -> PathBuf {
        let ckpt = self.path("teacher/model.ckpt");
        if !ckpt.exists() {
            ok(&["train-base", "--config", &self.s("teacher.json"), "--out", &self.s("teacher")]);
        }
        ckpt
    }

    /// Distillation config: the teacher config with its model section
    /// replaced by a teacher checkpoint.
    fn distill_args(&self, recipe: &str, out: &str) -> Vec<String> {
        let teacher = self.teacher();
        [
            "distill",
            "--config",
            &self.s("teacher.json"),
            "--set",
            "model=null",
            "--set",
            &format!("train.recipe={recipe}"),
            "--set",
            &format!("teacher=\"{}\"", p(&teacher)),
            "--set",
            "student_layers=2",
            "--out",
            &self.s(out),
        ]
        .map(String::from)
        .to_vec()
    }
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn read_log(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_synthetic_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&["gen-synthetic", "--out", p(&dir.path().join(name)), "--seed", "9", "--n-train", "40", "--n-dev", "10"]);
    }
    for file in ["train.tsv", "dev.tsv", "vocab.txt"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file}");
    }
    let train = fs::read_to_string(dir.path().join("a/train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 40);
    let positives = train.lines().filter(|l| l.ends_with("\t1")).count();
    assert_eq!(positives, 20);
    let names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let fx = Fixture::new();
    let first = fs::read(fx.teacher()).unwrap();
    ok(&["train-base", "--config", &fx.s("teacher.json"), "--out", &fx.s("again")]);
    assert_eq!(first, fs::read(fx.path("again/model.ckpt")).unwrap());
    let log = read_log(&fx.path("teacher"));
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e["dev_metrics"]["accuracy"].is_number()));
    let saved: Value = serde_json::from_str(&fs::read_to_string(fx.path("teacher/config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["recipe"], "exp1.0");
    assert_eq!(saved["model"]["n_layers"], 4);

    ok(&["train-base", "--config", &fx.s("teacher.json"), "--seed", "1", "--out", &fx.s("other")]);
    assert_ne!(first, fs::read(fx.path("other/model.ckpt")).unwrap());
}

#[test]
fn configuration_errors_exit_2_without_outputs() {
    let fx = Fixture::new();
    let cfg = fx.s("teacher.json");
    let out = fx.s("run");
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["train-base", "--config", &cfg, "--set", "data.train=\"/nonexistent/x.tsv\"", "--out", &out], "x.tsv"),
        (vec!["train-base", "--config", &cfg, "--set", "train.bogus=1", "--out", &out], "bogus"),
        (vec!["train-base", "--config", &cfg, "--set", "train.recipe=exp2.0", "--out", &out], "exp1.0"),
        (vec!["train-base", "--config", &cfg, "--set", "train.warmup_fraction=1.5", "--out", &out], "warmup"),
        (vec!["distill", "--config", &cfg, "--out", &out], "exp1.0"),
        (vec!["finetune-teacher", "--config", &cfg, "--out", &out], "base"),
        (vec!["train-base", "--config", "/nonexistent.json", "--out", &out], "nonexistent"),
        (vec!["train-base", "--config", &cfg, "--set", "novalue", "--out", &out], "KEY=VALUE"),
    ];
    for (a, needle) in cases {
        let err = fails_with(&a, 2);
        assert!(err.contains(needle), "{a:?}: {err}");
        assert!(!fx.path("run").exists(), "{a:?} left output behind");
    }
    fails_with(&["train-base", "--no-such-flag"], 2);
}

#[test]
fn finetune_and_distill_every_student_recipe() {
    let fx = Fixture::new();
    let teacher = fx.teacher();
    ok(&[
        "finetune-teacher",
        "--config",
        &fx.s("teacher.json"),
        "--set",
        "model=null",
        "--set",
        &format!("base=\"{}\"", p(&teacher)),
        "--out",
        &fx.s("ft"),
    ]);
    assert!(fx.path("ft/model.ckpt").exists());
    for recipe in ["exp1.1", "exp2.0", "exp3.0", "exp3.1", "exp3.2", "exp3.3", "exp3.4", "exp3.5", "exp3.6"] {
        let mut a = fx.distill_args(recipe, &format!("s-{recipe}"));
        if matches!(recipe, "exp3.3" | "exp3.4" | "exp3.5" | "exp3.6") {
            a.extend(["--set".into(), "train.stage_limit=1".into()]);
        }
        let stdout = ok(&args(&a));
        let report: Value = serde_json::from_str(&stdout).unwrap();
        assert!(report["final_metrics"]["accuracy"].is_number(), "{recipe}: {stdout}");
    }
}

#[test]
fn progressive_trace_unlocks_one_layer_per_stage() {
    let fx = Fixture::new();
    let mut a = fx.distill_args("exp3.3", "pid");
    a.extend(["--set", "train.stage_limit=1", "--set", "train.epochs=4"].map(String::from));
    ok(&args(&a));
    let log = read_log(&fx.path("pid"));
    let internal: Vec<&Value> = log.iter().filter(|e| e["phase"] == "internal").collect();
    assert_eq!(internal.len(), 2);
    let locked: Vec<u64> = internal.iter().map(|e| e["next_locked"].as_u64().unwrap()).collect();
    assert!(locked.windows(2).all(|w| w[0] < w[1]), "{locked:?}");
    for e in &internal {
        assert!(e["l_soft"].is_null() && e["l_kl"].is_number() && e["tau"].is_number(), "{e}");
    }
    let tail: Vec<&Value> = log.iter().filter(|e| e["phase"] == "classification").collect();
    assert_eq!(tail.len(), 2);
    assert!(tail.iter().all(|e| e["l_soft"].is_number()));
}

#[test]
fn incompatible_heads_name_both_models() {
    let fx = Fixture::new();
    fx.teacher();
    ok(&[
        "train-base",
        "--config",
        &fx.s("teacher.json"),
        "--set",
        "model.n_heads=4",
        "--out",
        &fx.s("base4"),
    ]);
    let mut a = fx.distill_args("exp3.2", "bad");
    a.extend(["--set".into(), format!("base=\"{}\"", fx.s("base4/model.ckpt"))]);
    let err = fails_with(&args(&a), 2);
    assert!(err.contains("heads"), "{err}");
    assert!(err.contains('2') && err.contains('4'), "{err}");
    assert!(!fx.path("bad").exists());
}

#[test]
fn eval_reports_metrics_and_rejects_bad_files() {
    let fx = Fixture::new();
    let ckpt = fx.teacher();
    let vocab = fx.s("data/vocab.txt");
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--data", &fx.s("data/dev.tsv"), "--vocab", &vocab]);
    let m: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(m["n"], 24);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(fx.path("teacher/metrics.json")).unwrap()).unwrap();
    assert_eq!(m, metrics);

    fs::write(fx.path("empty.tsv"), "").unwrap();
    let err = fails_with(&["eval", "--checkpoint", p(&ckpt), "--data", &fx.s("empty.tsv"), "--vocab", &vocab], 2);
    assert!(err.contains("no examples"), "{err}");

    fs::write(fx.path("three.tsv"), "s1 s2\ts3\t2\n").unwrap();
    let err = fails_with(&["eval", "--checkpoint", p(&ckpt), "--data", &fx.s("three.tsv"), "--vocab", &vocab], 2);
    assert!(err.contains("label 2"), "{err}");

    let err = fails_with(&["eval", "--checkpoint", &fx.s("nope.ckpt"), "--data", &fx.s("three.tsv"), "--vocab", &vocab], 2);
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn attention_dump_shapes_and_determinism() {
    let fx = Fixture::new();
    let mut a = fx.distill_args("exp2.0", "student");
    a.extend(["--set", "train.epochs=1"].map(String::from));
    ok(&args(&a));
    let ckpt = fx.s("student/model.ckpt");
    let vocab = fx.s("data/vocab.txt");
    let dump = |out: &str, extra: &[&str]| {
        let mut v = vec!["dump-attention", "--checkpoint", &ckpt, "--vocab", &vocab, "--text-a", "s0 s1 s2", "--out", out];
        v.extend_from_slice(extra);
        mdkd(&v)
    };
    let d1 = fx.s("d1");
    let d2 = fx.s("d2");
    assert!(dump(&d1, &[]).status.success());
    assert!(dump(&d2, &[]).status.success());
    let bytes = fs::read(fx.path("d1/attention.json")).unwrap();
    assert_eq!(bytes, fs::read(fx.path("d2/attention.json")).unwrap());

    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 5);
    let mats = v["matrices"].as_array().unwrap();
    assert_eq!(mats.len(), 4);
    for m in mats {
        let rows = m["matrix"].as_array().unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            let r: Vec<f64> = r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(r.len(), 5);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    let d3 = fx.s("d3");
    assert!(dump(&d3, &["--layer", "1", "--head", "0"]).status.success());
    let v: Value = serde_json::from_slice(&fs::read(fx.path("d3/attention.json")).unwrap()).unwrap();
    assert_eq!(v["matrices"].as_array().unwrap().len(), 1);
    assert_eq!(v["matrices"][0]["layer"], 1);

    let bad = dump(&fx.s("d4"), &["--layer", "2"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!fx.path("d4").exists());
    assert_eq!(dump(&fx.s("d5"), &["--head", "2"]).status.code(), Some(2));
}

#[test]
fn attention_comparison() {
    let fx = Fixture::new();
    let teacher = fx.teacher();
    let vocab = fx.s("data/vocab.txt");
    let dump = |ckpt: &Path, out: &str, text: &str| {
        ok(&["dump-attention", "--checkpoint", p(ckpt), "--vocab", &vocab, "--text-a", text, "--text-b", "s3", "--out", out]);
    };
    dump(&teacher, &fx.s("t"), "s0 s1");
    dump(&teacher, &fx.s("t2"), "s0 s2 s1");
    let t = fx.s("t/attention.json");

    let same: Value = serde_json::from_str(&ok(&["compare-attention", "--teacher", &t, "--student", &t])).unwrap();
    assert_eq!(same["mean"], 0.0);
    assert_eq!(same["pairs"].as_array().unwrap().len(), 8);

    let mut a = fx.distill_args("exp3.2", "student");
    a.extend(["--set", "train.epochs=1"].map(String::from));
    ok(&args(&a));
    dump(&fx.path("student/model.ckpt"), &fx.s("s"), "s0 s1");
    let s = fx.s("s/attention.json");
    let out = fx.s("cmp");
    let r: Value =
        serde_json::from_str(&ok(&["compare-attention", "--teacher", &t, "--student", &s, "--out", &out])).unwrap();
    let pairs = r["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 4);
    assert_eq!(pairs[0]["teacher_layer"], 1);
    assert_eq!(pairs[3]["teacher_layer"], 3);
    let mean = pairs.iter().map(|x| x["kl"].as_f64().unwrap()).sum::<f64>() / 4.0;
    assert!((r["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(fx.path("cmp/comparison.json").exists());

    let explicit: Value =
        serde_json::from_str(&ok(&["compare-attention", "--teacher", &t, "--student", &s, "--plan", "0:0,1:3"])).unwrap();
    assert_eq!(explicit["pairs"][0]["teacher_layer"], 0);

    let err = fails_with(&["compare-attention", "--teacher", &t, "--student", &fx.s("t2/attention.json")], 2);
    assert!(err.contains("tokenize"), "{err}");
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.splitn(5, ',').map(String::from).collect())
        .collect()
}

#[test]
fn datasize_sweep_row_count() {
    let fx = Fixture::new();
    let mut a = fx.distill_args("exp2.0", "sweep");
    a[0] = "sweep".into();
    a.extend(["--axis", "datasize", "--values", "16,48", "--seeds", "0,1", "--set", "train.epochs=1", "--equal-updates"].map(String::from));
    ok(&args(&a));
    let rows = csv_rows(&fx.path("sweep/sweep.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().is_ok() && r[4].is_empty()), "{rows:?}");
    assert_eq!(rows[0][..2], ["16".to_string(), "exp2.0".into()]);
    let small = read_log(&fx.path("sweep/datasize-16/exp3.2/seed-1"));
    assert_eq!(small.len(), 3);
}

#[test]
fn layers_sweep_records_failures_and_continues() {
    let fx = Fixture::new();
    let cfg = fx.s("teacher.json");
    ok(&["train-base", "--config", &cfg, "--set", "model.n_layers=8", "--set", "train.epochs=1", "--out", &fx.s("t8")]);
    ok(&[
        "sweep",
        "--config",
        &cfg,
        "--set",
        "model=null",
        "--set",
        &format!("teacher=\"{}\"", fx.s("t8/model.ckpt")),
        "--set",
        "train.epochs=1",
        "--axis",
        "layers",
        "--values",
        "1,2,4,9",
        "--out",
        &fx.s("sw"),
    ]);
    let rows = csv_rows(&fx.path("sw/sweep.csv"));
    assert_eq!(rows.len(), 8);
    let (good, bad): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r[4].is_empty());
    assert_eq!(good.len(), 6);
    assert!(bad.iter().all(|r| r[0] == "9" && r[2].is_empty()), "{bad:?}");
}
