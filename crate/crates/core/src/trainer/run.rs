use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, fit, EpochLog, Recipe, RunConfig};
use crate::data::{load_tsv, tokenize_all, Encoded, TsvSchema, Vocab};
use crate::error::{config, Error, Result};
use crate::mapping::{init_student, match_layers};
use crate::metrics::Metrics;
use crate::model::{load_checkpoint, save_checkpoint, EncoderModel, ModelConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: EncoderModel,
    pub log: Vec<EpochLog>,
    pub final_metrics: Option<Metrics>,
    pub checkpoint: PathBuf,
}

fn schema(cfg: &RunConfig) -> TsvSchema {
    TsvSchema {
        text_a: cfg.data.text_a,
        text_b: cfg.data.text_b,
        label: cfg.data.label,
        skip_header: cfg.data.skip_header,
        n_classes: cfg.data.n_classes,
    }
}

/// Loads and tokenizes a TSV split, skipping malformed lines with a warning.
pub fn load_split(path: &Path, schema: &TsvSchema, vocab: &Vocab, max_len: usize) -> Result<Vec<Encoded>> {
    let corpus = load_tsv(path, schema)?;
    if !corpus.malformed.is_empty() {
        warn!(
            "{}: skipped {} malformed line(s), first at line {}",
            path.display(),
            corpus.malformed.len(),
            corpus.malformed[0]
        );
    }
    if corpus.examples.is_empty() {
        return Err(Error::Data(format!("{}: no examples", path.display())));
    }
    tokenize_all(&corpus.examples, vocab, max_len)
}

fn check_against_data(model: &EncoderModel, what: &str, vocab: &Vocab, max_len: usize) -> Result<()> {
    let c = model.config();
    if c.vocab_size != vocab.len() {
        return config(format!(
            "{what} vocabulary size {} differs from the vocabulary file ({})",
            c.vocab_size,
            vocab.len()
        ));
    }
    if c.max_seq_len < max_len {
        return config(format!("{what} supports sequences up to {}, config asks for {max_len}", c.max_seq_len));
    }
    Ok(())
}

fn initial_model(cfg: &RunConfig, vocab: &Vocab, teacher: Option<&EncoderModel>) -> Result<EncoderModel> {
    let recipe = cfg.train.recipe;
    let seed = cfg.train.seed;
    let base = cfg.base.as_deref().map(load_checkpoint).transpose()?;
    if let Some(b) = &base {
        check_against_data(b, "base", vocab, cfg.max_seq_len)?;
    }
    if recipe == Recipe::Exp1_0 {
        return match (base, &cfg.model) {
            (Some(_), Some(_)) => config("give either a base checkpoint or a model architecture, not both"),
            (Some(b), None) => {
                let mut sc = b.config().clone();
                sc.n_classes = cfg.data.n_classes;
                init_student(&b, &sc, &match_layers(sc.n_layers, sc.n_layers)?, seed)
            }
            (None, Some(arch)) => EncoderModel::new(
                ModelConfig {
                    n_layers: arch.n_layers,
                    n_heads: arch.n_heads,
                    d_model: arch.d_model,
                    d_ff: arch.d_ff,
                    vocab_size: vocab.len(),
                    max_seq_len: cfg.max_seq_len,
                    n_classes: cfg.data.n_classes,
                    dropout: arch.dropout,
                },
                &mut ChaCha8Rng::seed_from_u64(seed),
            ),
            (None, None) => config("recipe exp1.0 needs a base checkpoint or a model architecture"),
        };
    }
    if cfg.model.is_some() {
        return config(format!("recipe {recipe} initializes from a checkpoint; remove the model section"));
    }
    let source = match (cfg.init_from, base.as_ref(), teacher) {
        (super::InitSource::Base, Some(b), _) => b,
        (_, _, Some(t)) => t,
        (_, Some(b), None) => b,
        (_, None, None) => return config(format!("recipe {recipe} needs a base or teacher checkpoint")),
    };
    let mut sc = source.config().clone();
    sc.n_layers = cfg.student_layers;
    sc.n_classes = cfg.data.n_classes;
    init_student(source, &sc, &match_layers(source.config().n_layers, cfg.student_layers)?, seed)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Executes a recipe end to end and writes `model.ckpt`, `log.jsonl`,
/// `config.json` and `metrics.json` into `cfg.out`.
///
/// Nothing is written unless training succeeds.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.train.validate()?;
    let recipe = cfg.train.recipe;
    let vocab = Vocab::load(&cfg.data.vocab)?;
    let schema = schema(cfg);
    let mut train = load_split(&cfg.data.train, &schema, &vocab, cfg.max_seq_len)?;
    match cfg.data.limit {
        Some(0) => return config("data.limit must be positive"),
        Some(n) => train.truncate(n),
        None => {}
    }
    let dev = cfg
        .data
        .dev
        .as_deref()
        .map(|p| load_split(p, &schema, &vocab, cfg.max_seq_len))
        .transpose()?;

    if recipe.needs_teacher() && cfg.teacher.is_none() {
        return config(format!("recipe {recipe} needs a teacher checkpoint"));
    }
    // exp1.1 never distills but may still initialize from the teacher.
    let teacher = match (&cfg.teacher, recipe) {
        (Some(path), r) if r != Recipe::Exp1_0 => {
            let t = load_checkpoint(path)?;
            check_against_data(&t, "teacher", &vocab, cfg.max_seq_len)?;
            Some(t)
        }
        _ => None,
    };
    let student = initial_model(cfg, &vocab, teacher.as_ref())?;
    info!(
        "{recipe}: {} train / {} dev examples, student {} layers ({} parameters)",
        train.len(),
        dev.as_ref().map_or(0, Vec::len),
        student.config().n_layers,
        student.num_parameters()
    );
    let out = fit(&cfg.train, teacher.as_ref().filter(|_| recipe.needs_teacher()), student, None, &train, dev.as_deref())?;
    let final_metrics = match &dev {
        Some(d) => evaluate(&out.student, d, cfg.train.batch_size)?,
        None => None,
    };

    fs::create_dir_all(&cfg.out)?;
    let mut log_text = String::new();
    for entry in &out.log {
        log_text.push_str(&serde_json::to_string(entry)?);
        log_text.push('\n');
    }
    write_atomic(&cfg.out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    write_atomic(&cfg.out.join(LOG_FILE), log_text.as_bytes())?;
    write_atomic(&cfg.out.join(METRICS_FILE), serde_json::to_string_pretty(&final_metrics)?.as_bytes())?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    save_checkpoint(&out.student, &checkpoint)?;
    Ok(RunOutcome {
        model: out.student,
        log: out.log,
        final_metrics,
        checkpoint,
    })
}
