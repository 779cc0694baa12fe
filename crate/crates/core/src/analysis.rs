//! Attention inspection: per-example dumps, teacher/student comparison,
//! dataset-level attention KL, and sweep result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, tokenize, Encoded, Example, Vocab};
use crate::error::{config, Error, Result};
use crate::losses::{head_loss, kl_attention_row};
use crate::mapping::LayerMatchPlan;
use crate::model::EncoderModel;
use crate::trainer::Recipe;

/// Attention probabilities of one head over the real tokens of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMatrix {
    pub layer: usize,
    pub head: usize,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub model_id: String,
    pub text_a: String,
    pub text_b: Option<String>,
    pub tokens: Vec<String>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub matrices: Vec<HeadMatrix>,
}

impl AttentionDump {
    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadMatrix> {
        self.matrices.iter().find(|m| m.layer == layer && m.head == head)
    }
}

/// Runs `model` on one example and keeps the matrices selected by the
/// optional layer and head filters.
pub fn dump_attention(
    model: &EncoderModel,
    model_id: &str,
    example: &Example,
    vocab: &Vocab,
    layer: Option<usize>,
    head: Option<usize>,
) -> Result<AttentionDump> {
    let cfg = model.config();
    if let Some(l) = layer.filter(|&l| l >= cfg.n_layers) {
        return config(format!("layer {l} out of range for a {}-layer model", cfg.n_layers));
    }
    if let Some(h) = head.filter(|&h| h >= cfg.n_heads) {
        return config(format!("head {h} out of range for a {}-head model", cfg.n_heads));
    }
    if vocab.len() != cfg.vocab_size {
        return config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            cfg.vocab_size
        ));
    }
    let encoded = tokenize(example, vocab, cfg.max_seq_len)?;
    let n = encoded.n_real();
    let tokens = encoded.ids[..n]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect();
    let record = model.encode(&encoded, true)?;
    let mut matrices = Vec::new();
    for (l, heads) in record.attention.iter().enumerate() {
        if layer.is_some_and(|want| want != l) {
            continue;
        }
        for (h, m) in heads.iter().enumerate() {
            if head.is_some_and(|want| want != h) {
                continue;
            }
            let width = m.cols();
            let matrix = (0..n).map(|i| m.data()[i * width..i * width + n].to_vec()).collect();
            matrices.push(HeadMatrix { layer: l, head: h, matrix });
        }
    }
    Ok(AttentionDump {
        model_id: model_id.to_string(),
        text_a: example.text_a.clone(),
        text_b: example.text_b.clone(),
        tokens,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        matrices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHeadKl {
    pub student_layer: usize,
    pub teacher_layer: usize,
    pub head: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionComparison {
    pub pairs: Vec<PairHeadKl>,
    pub mean: f64,
}

/// Mean row `KL(teacher ‖ student)` for every matched layer pair and head,
/// plus the overall mean.
pub fn compare_attention(
    teacher: &AttentionDump,
    student: &AttentionDump,
    plan: &LayerMatchPlan,
) -> Result<AttentionComparison> {
    if teacher.tokens != student.tokens {
        return Err(Error::Data(format!(
            "dumps tokenize differently: {:?} vs {:?}",
            teacher.tokens, student.tokens
        )));
    }
    if plan.teacher_depth() != teacher.n_layers || plan.len() != student.n_layers {
        return config(format!(
            "plan covers {} teacher / {} student layers, dumps have {} / {}",
            plan.teacher_depth(),
            plan.len(),
            teacher.n_layers,
            student.n_layers
        ));
    }
    if teacher.n_heads != student.n_heads {
        return config(format!(
            "teacher has {} heads, student {}",
            teacher.n_heads, student.n_heads
        ));
    }
    let mut pairs = Vec::new();
    for &(ls, lt) in plan.pairs() {
        for h in 0..teacher.n_heads {
            let (Some(t), Some(s)) = (teacher.get(lt, h), student.get(ls, h)) else {
                continue;
            };
            let mut sum = 0.0;
            for (p, q) in t.matrix.iter().zip(&s.matrix) {
                sum += kl_attention_row(p, q)?;
            }
            pairs.push(PairHeadKl {
                student_layer: ls,
                teacher_layer: lt,
                head: h,
                kl: sum / t.matrix.len().max(1) as f64,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("the dumps share no matched (layer, head) matrices".into()));
    }
    let mean = pairs.iter().map(|p| p.kl).sum::<f64>() / pairs.len() as f64;
    Ok(AttentionComparison { pairs, mean })
}

/// Attention KL to the teacher averaged over matched layers and samples.
pub fn mean_attention_kl(
    teacher: &EncoderModel,
    student: &EncoderModel,
    plan: &LayerMatchPlan,
    data: &[Encoded],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let mut total = 0.0;
    for batch in make_batches(data, batch_size, None)? {
        let t = teacher.record(&batch)?;
        let s = student.record(&batch)?;
        for &(ls, lt) in plan.pairs() {
            total += head_loss(&t, &s, lt, ls)? * batch.n as f64;
        }
    }
    Ok(total / (data.len() * plan.len()) as f64)
}

/// One sweep measurement. Failed sub-runs keep their error and no metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: usize,
    pub recipe: Recipe,
    pub metric: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

/// CSV with rows sorted by axis value, recipe and seed.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.axis_value, r.recipe, r.seed));
    let mut out = String::from("axis_value,recipe,metric,seed,error\n");
    for r in sorted {
        let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
        let error = r
            .error
            .as_deref()
            .map(|e| format!("\"{}\"", e.replace('"', "\"\"")))
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.axis_value, r.recipe, metric, r.seed, error);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;
    use crate::mapping::match_layers;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: usize, vocab: usize, seed: u64) -> EncoderModel {
        let cfg = ModelConfig {
            n_layers: layers,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: vocab,
            max_seq_len: 16,
            n_classes: 2,
            dropout: 0.0,
        };
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn example() -> (Example, Vocab) {
        let vocab = SyntheticTask::default().vocab();
        let ex = Example {
            text_a: "s1 s2".into(),
            text_b: None,
            label: None,
        };
        (ex, vocab)
    }

    #[test]
    fn dump_shapes_and_rows() {
        let (ex, vocab) = example();
        let m = model(2, vocab.len(), 1);
        let dump = dump_attention(&m, "m", &ex, &vocab, None, None).unwrap();
        assert_eq!(dump.tokens, ["[CLS]", "s1", "s2", "[SEP]"]);
        assert_eq!(dump.matrices.len(), 4);
        for hm in &dump.matrices {
            assert_eq!(hm.matrix.len(), 4);
            for row in &hm.matrix {
                assert_eq!(row.len(), 4);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let one = dump_attention(&m, "m", &ex, &vocab, Some(1), Some(0)).unwrap();
        assert_eq!(one.matrices.len(), 1);
        assert_eq!(one.matrices[0], *dump.get(1, 0).unwrap());
        assert!(matches!(dump_attention(&m, "m", &ex, &vocab, Some(2), None), Err(Error::Config(_))));
        assert!(matches!(dump_attention(&m, "m", &ex, &vocab, None, Some(2)), Err(Error::Config(_))));
    }

    #[test]
    fn self_comparison_is_zero() {
        let (ex, vocab) = example();
        let m = model(2, vocab.len(), 2);
        let dump = dump_attention(&m, "m", &ex, &vocab, None, None).unwrap();
        let cmp = compare_attention(&dump, &dump, &match_layers(2, 2).unwrap()).unwrap();
        assert_eq!(cmp.mean, 0.0);
        assert_eq!(cmp.pairs.len(), 4);
    }

    #[test]
    fn hand_built_comparison_matches_scalar_kl() {
        let dump = |rows: Vec<Vec<f64>>| AttentionDump {
            model_id: "x".into(),
            text_a: "a".into(),
            text_b: None,
            tokens: vec!["a".into(), "b".into()],
            n_layers: 1,
            n_heads: 1,
            matrices: vec![HeadMatrix { layer: 0, head: 0, matrix: rows }],
        };
        let t = dump(vec![vec![0.75, 0.25], vec![0.5, 0.5]]);
        let s = dump(vec![vec![0.25, 0.75], vec![0.5, 0.5]]);
        let cmp = compare_attention(&t, &s, &match_layers(1, 1).unwrap()).unwrap();
        let expected = (0.75 * 3f64.ln() + 0.25 * (1.0f64 / 3.0).ln()) / 2.0;
        assert!((cmp.mean - expected).abs() < 1e-15);
        let mut other = s.clone();
        other.tokens[1] = "c".into();
        assert!(matches!(compare_attention(&t, &other, &match_layers(1, 1).unwrap()), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_kl_is_zero_for_identical_models() {
        let (ex, vocab) = example();
        let data = vec![tokenize(&ex, &vocab, 16).unwrap(); 3];
        let m = model(2, vocab.len(), 3);
        let plan = match_layers(2, 2).unwrap();
        assert!(mean_attention_kl(&m, &m, &plan, &data, 2).unwrap().abs() < 1e-12);
        let other = model(2, vocab.len(), 4);
        assert!(mean_attention_kl(&m, &other, &plan, &data, 2).unwrap() > 0.0);
    }

    #[test]
    fn sweep_csv_is_sorted() {
        let row = |v, r, s| SweepRow {
            axis_value: v,
            recipe: r,
            metric: Some(0.5),
            seed: s,
            error: None,
        };
        let mut rows = vec![row(4, Recipe::Exp3_2, 1), row(1, Recipe::Exp3_2, 0), row(1, Recipe::Exp2_0, 1)];
        rows.push(SweepRow {
            metric: None,
            error: Some("bad \"x\"".into()),
            ..row(1, Recipe::Exp2_0, 0)
        });
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "axis_value,recipe,metric,seed,error");
        assert_eq!(lines[1], "1,exp2.0,,0,\"bad \"\"x\"\"\"");
        assert_eq!(lines[2], "1,exp2.0,0.5,1,");
        assert_eq!(lines[3], "1,exp3.2,0.5,0,");
        assert_eq!(lines[4], "4,exp3.2,0.5,1,");
        rows.reverse();
        assert_eq!(sweep_csv(&rows), csv);
    }
}
