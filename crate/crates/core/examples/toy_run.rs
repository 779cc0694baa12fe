//! Trains a teacher on the synthetic overlap task, then distills two students
//! (soft labels only vs soft labels plus internal losses) and prints dev
//! accuracy and attention KL to the teacher.
//!
//! Usage: `cargo run --release -p mdkd-core --example toy_run -- [n_train] [seed] [teacher_epochs] [student_epochs]`
//!
//! `SUBS=500,2000` distills on the first N training examples instead, keeping
//! the number of updates equal to a full-size run.

use std::time::Instant;

use mdkd_core::analysis::mean_attention_kl;
use mdkd_core::data::{gen_synthetic, tokenize_all, SyntheticTask};
use mdkd_core::mapping::{init_student, match_layers};
use mdkd_core::model::{EncoderModel, ModelConfig};
use mdkd_core::trainer::{evaluate, fit, Recipe, TrainSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mdkd_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let teacher_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let student_epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5);

    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let task = SyntheticTask {
        n_symbols: env("SYMBOLS", 24.0) as usize,
        min_len: env("MIN_LEN", 3.0) as usize,
        max_len: env("MAX_LEN", 5.0) as usize,
        threshold: env("THRESHOLD", 0.5),
    };
    let lr = env("LR", 1e-3);
    let student_lr = env("SLR", 1e-3);
    let max_len = 2 * task.max_len + 3;
    let (train, vocab) = gen_synthetic(&task, n_train, seed)?;
    let (dev, _) = gen_synthetic(&task, 2000, seed + 1_000_000)?;
    let train = tokenize_all(&train, &vocab, max_len)?;
    let dev = tokenize_all(&dev, &vocab, max_len)?;

    let cfg = ModelConfig {
        n_layers: 4,
        n_heads: env("H", 2.0) as usize,
        d_model: env("D", 16.0) as usize,
        d_ff: env("FF", 32.0) as usize,
        vocab_size: vocab.len(),
        max_seq_len: max_len,
        n_classes: 2,
        dropout: 0.0,
    };
    let base = EncoderModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut s = TrainSettings::new(Recipe::Exp1_0);
    s.epochs = teacher_epochs;
    s.lr = lr;
    s.batch_size = env("BS", 32.0) as usize;
    s.seed = seed;
    let t0 = Instant::now();
    let teacher = fit(&s, None, base.clone(), None, &train, Some(&dev))?.student;
    let train_acc = evaluate(&teacher, &train, 256)?.map(|m| m.accuracy);
    println!(
        "teacher: train acc {:?}, dev acc {:?}, {:.1}s",
        train_acc,
        evaluate(&teacher, &dev, 256)?.map(|m| m.accuracy),
        t0.elapsed().as_secs_f64()
    );

    let plan = match_layers(4, 2)?;
    let mut student_cfg = cfg.clone();
    student_cfg.n_layers = 2;
    let subs: Vec<usize> = std::env::var("SUBS")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| vec![n_train]);
    for (sub, recipe) in subs
        .iter()
        .flat_map(|&n| [(n.min(n_train), Recipe::Exp2_0), (n.min(n_train), Recipe::Exp3_2)])
    {
        let student_train = &train[..sub];
        let student_epochs = student_epochs * n_train / sub;
        let t0 = Instant::now();
        let source = if env("INIT_BASE", 0.0) > 0.0 { &base } else { &teacher };
        let student = init_student(source, &student_cfg, &plan, seed)?;
        let mut s = TrainSettings::new(recipe);
        s.epochs = student_epochs;
        s.lr = student_lr;
        s.seed = seed;
        let out = fit(&s, Some(&teacher), student, Some(&plan), student_train, None)?;
        let acc = evaluate(&out.student, &dev, 256)?.map(|m| m.accuracy);
        let kl = mean_attention_kl(&teacher, &out.student, &plan, &dev, 256)?;
        println!("n={sub} {recipe}: dev acc {acc:?}, attention KL {kl:.4}, {:.1}s", t0.elapsed().as_secs_f64());
    }
    Ok(())
}
