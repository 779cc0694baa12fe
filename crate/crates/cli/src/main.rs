//! `mdkd`: train teachers, distill students and inspect their attention.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mdkd_core::data::{SyntheticTask, TsvSchema};
use mdkd_core::trainer::Recipe;
use serde_json::json;

use crate::commands::Axis;
use crate::config::ConfigDoc;

#[derive(Debug, Parser)]
#[command(name = "mdkd", version, about = "Knowledge distillation from transformer internals")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration (flat dotted keys or nested sections).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration key; the value is parsed as JSON when possible.
    #[arg(long = "set", global = true, value_name = "K=V")]
    sets: Vec<String>,
    /// Seed for all randomness in the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch (recipe exp1.0 with a model section).
    TrainBase,
    /// Fine-tune a base checkpoint into a teacher (recipe exp1.0).
    FinetuneTeacher,
    /// Train a student under a distillation recipe.
    Distill,
    /// Evaluate a checkpoint on a labelled TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Write the attention matrices of one input as JSON.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text_a: String,
        #[arg(long)]
        text_b: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
        /// Label stored in the dump; defaults to the checkpoint path.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Per-head attention KL between a teacher dump and a student dump.
    CompareAttention {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Layer pairs as `student:teacher,...`; defaults to the standard matching.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Generate the synthetic overlap task (train.tsv, dev.tsv, vocab.txt).
    GenSynthetic {
        #[arg(long, default_value_t = 10_000)]
        n_train: usize,
        #[arg(long, default_value_t = 2_000)]
        n_dev: usize,
        #[arg(long, default_value_t = 24)]
        symbols: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 5)]
        max_len: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Repeat a distillation over student depths or training sizes.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "exp2.0,exp3.2")]
        recipes: Vec<Recipe>,
        /// Scale epochs so every training size gets the same number of updates.
        #[arg(long)]
        equal_updates: bool,
    },
}

#[derive(Debug, Args)]
struct SchemaArgs {
    #[arg(long, default_value_t = 0)]
    text_a_col: usize,
    #[arg(long, default_value_t = 1)]
    text_b_col: usize,
    /// Single-sentence input.
    #[arg(long)]
    no_text_b: bool,
    #[arg(long, default_value_t = 2)]
    label_col: usize,
    #[arg(long)]
    skip_header: bool,
}

impl SchemaArgs {
    fn schema(&self) -> TsvSchema {
        TsvSchema {
            text_a: self.text_a_col,
            text_b: (!self.no_text_b).then_some(self.text_b_col),
            label: Some(self.label_col),
            skip_header: self.skip_header,
            n_classes: 2,
        }
    }
}

fn run_config(global: &GlobalArgs) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc::load(global.config.as_deref(), &global.sets)?;
    if let Some(seed) = global.seed {
        doc.set("train.seed", json!(seed))?;
    }
    if let Some(out) = &global.out {
        doc.set("out", json!(out))?;
    }
    Ok(doc)
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::TrainBase => commands::train_base(run_config(g)?),
        Command::FinetuneTeacher => commands::finetune_teacher(run_config(g)?),
        Command::Distill => commands::distill(run_config(g)?),
        Command::Eval {
            checkpoint,
            data,
            vocab,
            schema,
            batch_size,
        } => commands::eval(commands::EvalArgs {
            checkpoint,
            data,
            vocab,
            schema: schema.schema(),
            batch_size,
            out: g.out.clone(),
        }),
        Command::DumpAttention {
            checkpoint,
            vocab,
            text_a,
            text_b,
            layer,
            head,
            model_id,
        } => commands::dump(commands::DumpArgs {
            checkpoint,
            vocab,
            text_a,
            text_b,
            layer,
            head,
            model_id,
            out: g.out.clone(),
        }),
        Command::CompareAttention { teacher, student, plan } => {
            commands::compare(&teacher, &student, plan.as_deref(), g.out.as_deref())
        }
        Command::GenSynthetic {
            n_train,
            n_dev,
            symbols,
            min_len,
            max_len,
            threshold,
        } => {
            let Some(out) = &g.out else {
                return Err(mdkd_core::Error::Config("gen-synthetic needs --out".into()).into());
            };
            let task = SyntheticTask {
                n_symbols: symbols,
                min_len,
                max_len,
                threshold,
            };
            commands::gen(&task, n_train, n_dev, g.seed.unwrap_or(0), out)
        }
        Command::Sweep {
            axis,
            values,
            seeds,
            recipes,
            equal_updates,
        } => commands::sweep(
            run_config(g)?,
            commands::SweepArgs {
                axis,
                values,
                seeds,
                recipes,
                equal_updates,
            },
        ),
    }
}

/// 2 for bad configuration or data, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mdkd_core::Error>() {
            return if e.is_user_error() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let level = std::env::var("MDKD_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
