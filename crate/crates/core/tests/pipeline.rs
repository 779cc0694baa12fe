use std::fs;
use std::path::Path;

use mdkd_core::data::{gen_synthetic, write_tsv, SyntheticTask};
use mdkd_core::model::load_checkpoint;
use mdkd_core::trainer::{
    run_experiment, ArchSettings, DataSettings, Recipe, RunConfig, TrainSettings, CHECKPOINT_FILE, CONFIG_FILE,
    LOG_FILE, METRICS_FILE,
};
use mdkd_core::Error;

fn task() -> SyntheticTask {
    SyntheticTask {
        n_symbols: 8,
        min_len: 2,
        max_len: 3,
        threshold: 0.5,
    }
}

fn write_corpus(dir: &Path, n: usize) {
    let (train, vocab) = gen_synthetic(&task(), n, 1).unwrap();
    let (dev, _) = gen_synthetic(&task(), 16, 2).unwrap();
    write_tsv(&dir.join("train.tsv"), &train).unwrap();
    write_tsv(&dir.join("dev.tsv"), &dev).unwrap();
    fs::write(dir.join("vocab.txt"), vocab.to_file_string()).unwrap();
}

fn config(dir: &Path, recipe: Recipe, out: &str) -> RunConfig {
    let mut train = TrainSettings::new(recipe);
    train.epochs = 2;
    train.batch_size = 4;
    train.lr = 3e-3;
    RunConfig {
        train,
        data: DataSettings {
            train: dir.join("train.tsv"),
            dev: Some(dir.join("dev.tsv")),
            vocab: dir.join("vocab.txt"),
            text_a: 0,
            text_b: Some(1),
            label: Some(2),
            skip_header: false,
            n_classes: 2,
            limit: None,
        },
        max_seq_len: 9,
        out: dir.join(out),
        teacher: None,
        base: None,
        init_from: Default::default(),
        student_layers: 2,
        model: Some(ArchSettings {
            n_layers: 4,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            dropout: 0.0,
        }),
    }
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 24);
    let cfg = config(dir.path(), Recipe::Exp1_0, "t");
    let outcome = run_experiment(&cfg).unwrap();
    for f in [CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, METRICS_FILE] {
        assert!(cfg.out.join(f).exists(), "{f}");
    }
    assert_eq!(outcome.log.len(), 2);
    assert_eq!(outcome.final_metrics.unwrap().n, 16);
    let reloaded = load_checkpoint(&outcome.checkpoint).unwrap();
    assert_eq!(reloaded.params(), outcome.model.params());
    let saved: RunConfig = serde_json::from_str(&fs::read_to_string(cfg.out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn limit_matches_a_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 24);
    let mut limited = config(dir.path(), Recipe::Exp1_0, "limited");
    limited.data.limit = Some(10);
    let a = run_experiment(&limited).unwrap();

    let text = fs::read_to_string(dir.path().join("train.tsv")).unwrap();
    let head: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("head.tsv"), head).unwrap();
    let mut cut = config(dir.path(), Recipe::Exp1_0, "cut");
    cut.data.train = dir.path().join("head.tsv");
    let b = run_experiment(&cut).unwrap();
    assert_eq!(fs::read(a.checkpoint).unwrap(), fs::read(b.checkpoint).unwrap());

    limited.data.limit = Some(0);
    limited.out = dir.path().join("zero");
    assert!(matches!(run_experiment(&limited), Err(Error::Config(_))));
    assert!(!limited.out.exists());
}

#[test]
fn failures_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 24);
    let mut cfg = config(dir.path(), Recipe::Exp1_0, "missing");
    cfg.data.train = dir.path().join("absent.tsv");
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_user_error());
    assert!(err.to_string().contains("absent.tsv"), "{err}");
    assert!(!cfg.out.exists());

    fs::write(dir.path().join("empty.tsv"), "").unwrap();
    cfg.data.train = dir.path().join("empty.tsv");
    assert!(matches!(run_experiment(&cfg), Err(Error::Data(m)) if m.contains("no examples")));
    assert!(!cfg.out.exists());

    let mut both = config(dir.path(), Recipe::Exp1_0, "both");
    both.base = Some(dir.path().join("x.ckpt"));
    assert!(run_experiment(&both).is_err());
    assert!(!both.out.exists());
}

#[test]
fn student_recipes_initialize_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 24);
    let teacher = run_experiment(&config(dir.path(), Recipe::Exp1_0, "t")).unwrap().checkpoint;

    let mut no_kd = config(dir.path(), Recipe::Exp1_1, "no-kd");
    no_kd.model = None;
    assert!(matches!(run_experiment(&no_kd), Err(Error::Config(_))));
    no_kd.teacher = Some(teacher.clone());
    let out = run_experiment(&no_kd).unwrap();
    assert_eq!(out.model.config().n_layers, 2);

    let mut kd = config(dir.path(), Recipe::Exp3_2, "kd");
    kd.model = None;
    assert!(matches!(run_experiment(&kd), Err(Error::Config(m)) if m.contains("teacher")));
    kd.teacher = Some(teacher);
    kd.model = config(dir.path(), Recipe::Exp3_2, "kd").model;
    assert!(matches!(run_experiment(&kd), Err(Error::Config(m)) if m.contains("model section")));
    kd.model = None;
    let a = run_experiment(&kd).unwrap();
    kd.out = dir.path().join("kd-again");
    let b = run_experiment(&kd).unwrap();
    assert_eq!(fs::read(a.checkpoint).unwrap(), fs::read(b.checkpoint).unwrap());
}
