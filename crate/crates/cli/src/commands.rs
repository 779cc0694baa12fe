use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mdkd_core::analysis::{compare_attention, dump_attention, sweep_csv, AttentionDump, SweepRow};
use mdkd_core::data::{gen_synthetic, write_tsv, Example, SyntheticTask, TsvSchema, Vocab};
use mdkd_core::mapping::{match_layers, LayerMatchPlan};
use mdkd_core::model::load_checkpoint;
use mdkd_core::trainer::{evaluate, load_split, run_experiment, Recipe, RunConfig, RunOutcome};
use mdkd_core::Error;
use serde_json::{json, Value};

use crate::config::ConfigDoc;

fn user_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Writes through a temporary sibling so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(doc: &ConfigDoc) -> Result<RunOutcome> {
    let cfg: RunConfig = doc.build()?;
    Ok(run_experiment(&cfg)?)
}

fn report(outcome: &RunOutcome) -> Result<()> {
    print_json(&json!({
        "checkpoint": outcome.checkpoint,
        "epochs": outcome.log.len(),
        "final_metrics": outcome.final_metrics,
    }))
}

pub fn train_base(mut doc: ConfigDoc) -> Result<()> {
    doc.require("train.recipe", json!("exp1.0"))?;
    if doc.get("base").is_some_and(|v| !v.is_null()) {
        bail!(user_error("train-base starts from scratch; use finetune-teacher to start from a base checkpoint"));
    }
    if doc.get("model").is_none() {
        bail!(user_error("train-base needs a model section (n_layers, n_heads, d_model, d_ff)"));
    }
    report(&run(&doc)?)
}

pub fn finetune_teacher(mut doc: ConfigDoc) -> Result<()> {
    doc.require("train.recipe", json!("exp1.0"))?;
    if doc.get("base").is_none_or(Value::is_null) {
        bail!(user_error("finetune-teacher needs a base checkpoint"));
    }
    report(&run(&doc)?)
}

pub fn distill(doc: ConfigDoc) -> Result<()> {
    match doc.get("train.recipe") {
        None => bail!(user_error("distill needs train.recipe")),
        Some(v) if *v == json!("exp1.0") => {
            bail!(user_error("exp1.0 trains a teacher; use train-base or finetune-teacher"))
        }
        Some(_) => {}
    }
    report(&run(&doc)?)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub vocab: PathBuf,
    pub schema: TsvSchema,
    pub batch_size: usize,
    pub out: Option<PathBuf>,
}

pub fn eval(mut args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let cfg = model.config();
    let vocab = Vocab::load(&args.vocab)?;
    if vocab.len() != cfg.vocab_size {
        bail!(user_error(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    args.schema.n_classes = cfg.n_classes;
    let data = load_split(&args.data, &args.schema, &vocab, cfg.max_seq_len)?;
    let metrics = evaluate(&model, &data, args.batch_size)?
        .ok_or_else(|| Error::Data(format!("{}: no labels to evaluate against", args.data.display())))?;
    if let Some(out) = &args.out {
        write_atomic(&out.join("eval.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    }
    print_json(&metrics)
}

pub struct DumpArgs {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub text_a: String,
    pub text_b: Option<String>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub model_id: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn dump(args: DumpArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    let model_id = args.model_id.unwrap_or_else(|| args.checkpoint.display().to_string());
    let example = Example {
        text_a: args.text_a,
        text_b: args.text_b,
        label: None,
    };
    let dumped = dump_attention(&model, &model_id, &example, &vocab, args.layer, args.head)?;
    let text = serde_json::to_string_pretty(&dumped)?;
    match &args.out {
        Some(out) => {
            let path = out.join("attention.json");
            write_atomic(&path, text.as_bytes())?;
            info!("wrote {} matrices to {}", dumped.matrices.len(), path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn read_dump(path: &Path) -> Result<AttentionDump> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: not an attention dump: {e}", path.display())).into())
}

/// Parses `s:t,s:t` student-to-teacher layer pairs.
fn parse_plan(raw: &str, n_teacher: usize) -> Result<LayerMatchPlan> {
    let mut pairs = Vec::new();
    for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parsed = item
            .split_once(':')
            .and_then(|(s, t)| Some((s.trim().parse().ok()?, t.trim().parse().ok()?)));
        match parsed {
            Some(p) => pairs.push(p),
            None => bail!(user_error(format!("plan entry {item:?} is not student:teacher"))),
        }
    }
    Ok(LayerMatchPlan::new(pairs, n_teacher)?)
}

pub fn compare(teacher: &Path, student: &Path, plan: Option<&str>, out: Option<&Path>) -> Result<()> {
    let t = read_dump(teacher)?;
    let s = read_dump(student)?;
    let plan = match plan {
        Some(raw) => parse_plan(raw, t.n_layers)?,
        None => match_layers(t.n_layers, s.n_layers)?,
    };
    let report = compare_attention(&t, &s, &plan)?;
    if let Some(out) = out {
        write_atomic(&out.join("comparison.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    print_json(&report)
}

/// Offset between the train and dev generator seeds.
pub const DEV_SEED_OFFSET: u64 = 1_000_000;

pub fn gen(task: &SyntheticTask, n_train: usize, n_dev: usize, seed: u64, out: &Path) -> Result<()> {
    let (train, vocab) = gen_synthetic(task, n_train, seed)?;
    let (dev, _) = gen_synthetic(task, n_dev, seed.wrapping_add(DEV_SEED_OFFSET))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let staged = [("train.tsv", &train), ("dev.tsv", &dev)];
    for (name, rows) in staged {
        write_tsv(&out.join(name).with_extension("tsv.tmp-write"), rows)?;
    }
    write_atomic(&out.join("vocab.txt"), vocab.to_file_string().as_bytes())?;
    for (name, _) in staged {
        let path = out.join(name);
        fs::rename(path.with_extension("tsv.tmp-write"), &path)?;
    }
    print_json(&json!({
        "train": out.join("train.tsv"),
        "dev": out.join("dev.tsv"),
        "vocab": out.join("vocab.txt"),
        "vocab_size": vocab.len(),
        "max_seq_len": 2 * task.max_len + 3,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Student depth.
    Layers,
    /// Number of training examples.
    Datasize,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Layers => "layers",
            Axis::Datasize => "datasize",
        }
    }
}

pub struct SweepArgs {
    pub axis: Axis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub recipes: Vec<Recipe>,
    pub equal_updates: bool,
}

fn sub_run(base: &ConfigDoc, out: &Path, args: &SweepArgs, value: usize, recipe: Recipe, seed: u64) -> Result<f64> {
    let mut doc = base.clone();
    doc.set("train.recipe", json!(recipe))?;
    doc.set("train.seed", json!(seed))?;
    doc.set("out", json!(out))?;
    match args.axis {
        Axis::Layers => doc.set("student_layers", json!(value))?,
        Axis::Datasize => {
            doc.set("data.limit", json!(value))?;
            if args.equal_updates {
                let largest = args.values.iter().copied().max().unwrap_or(value);
                let epochs = doc.get("train.epochs").and_then(Value::as_u64).unwrap_or(50) as usize;
                doc.set("train.epochs", json!((epochs * largest).div_ceil(value)))?;
            }
        }
    }
    let outcome = run(&doc)?;
    outcome
        .final_metrics
        .map(|m| m.accuracy)
        .ok_or_else(|| user_error("run produced no dev metrics"))
}

pub fn sweep(base: ConfigDoc, args: SweepArgs) -> Result<()> {
    if args.values.is_empty() || args.seeds.is_empty() || args.recipes.is_empty() {
        bail!(user_error("sweep needs at least one value, seed and recipe"));
    }
    if args.values.contains(&0) {
        bail!(user_error("sweep values must be positive"));
    }
    if base.get("data.dev").is_none_or(Value::is_null) {
        bail!(user_error("sweep reports dev accuracy; set data.dev"));
    }
    let root: PathBuf = match base.get("out") {
        Some(Value::String(s)) => s.into(),
        _ => bail!(user_error("sweep needs --out")),
    };
    let mut rows = Vec::new();
    for &value in &args.values {
        for &recipe in &args.recipes {
            for &seed in &args.seeds {
                let dir = root.join(format!("{}-{value}", args.axis.name())).join(recipe.id()).join(format!("seed-{seed}"));
                info!("sweep {} = {value}, {recipe}, seed {seed}", args.axis.name());
                let (metric, error) = match sub_run(&base, &dir, &args, value, recipe, seed) {
                    Ok(m) => (Some(m), None),
                    Err(e) => {
                        warn!("sub-run {} failed: {e:#}", dir.display());
                        (None, Some(format!("{e:#}")))
                    }
                };
                rows.push(SweepRow {
                    axis_value: value,
                    recipe,
                    metric,
                    seed,
                    error,
                });
            }
        }
    }
    let csv = sweep_csv(&rows);
    write_atomic(&root.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
