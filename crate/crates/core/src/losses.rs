//! Distillation losses: soft/hard label cross-entropy, attention KL and
//! `[CLS]` cosine.
//!
//! Each loss exists twice: as a plain function over detached values (used for
//! reporting and analysis) and as a tape builder used for training. Teacher
//! quantities always enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::model::{BatchRecord, GraphOutput};
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::{clamp_prob, PROB_CLAMP};

/// Teacher class distributions for a batch, `[N × C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels(Tensor);

impl SoftLabels {
    pub fn new(probs: Tensor) -> Result<Self> {
        for (i, row) in probs.data().chunks(probs.cols()).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "soft label {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self(probs))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Which loss terms a recipe enables, and the hard-label weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub lambda_hard: f64,
    pub use_soft: bool,
    pub use_kl: bool,
    pub use_cos: bool,
    pub use_hard: bool,
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_soft || self.use_kl || self.use_cos || self.use_hard) {
            return config("at least one loss term must be enabled");
        }
        if !(self.lambda_hard >= 0.0) {
            return config(format!("lambda must be non-negative, got {}", self.lambda_hard));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            op: "hard labels",
            lhs: vec![labels.len()],
            rhs: vec![n],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("hard label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// `−(1/N) Σᵢ Σ_c p_T(c|xᵢ) ln ŷᵢ(c) − λ (1/N) Σᵢ ln ŷᵢ(yᵢ)`.
///
/// The hard term is present only when `lambda > 0`, in which case labels are
/// required.
pub fn soft_label_loss(
    teacher: &SoftLabels,
    student_probs: &Tensor,
    hard_labels: Option<&[usize]>,
    lambda: f64,
) -> Result<f64> {
    let t = teacher.tensor();
    if t.shape() != student_probs.shape() {
        return Err(Error::Shape {
            op: "soft_label_loss",
            lhs: t.shape().to_vec(),
            rhs: student_probs.shape().to_vec(),
        });
    }
    let n = t.rows();
    let c = t.cols();
    let mut soft = 0.0;
    for (tr, sr) in t.data().chunks(c).zip(student_probs.data().chunks(c)) {
        for (p, q) in tr.iter().zip(sr) {
            if *p != 0.0 {
                soft -= p * clamp_prob(*q).ln();
            }
        }
    }
    let mut loss = soft / n as f64;
    if lambda > 0.0 {
        let labels = hard_labels
            .ok_or_else(|| Error::Data("hard labels are required when lambda > 0".into()))?;
        check_labels(labels, n, c)?;
        let hard: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -clamp_prob(student_probs.data()[i * c + y]).ln())
            .sum();
        loss += lambda * hard / n as f64;
    } else if let Some(labels) = hard_labels {
        check_labels(labels, n, c)?;
    }
    Ok(loss)
}

/// `Σⱼ pⱼ ln(pⱼ / qⱼ)` with `0 ln 0 = 0` and `q` clamped at 1e-12.
pub fn kl_attention_row(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_attention_row",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    for (name, row) in [("p", p), ("q", q)] {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return contract(format!("{name} sums to {s}, not 1"));
        }
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pj, _)| **pj > 0.0)
        .map(|(pj, qj)| pj * (pj.ln() - clamp_prob(*qj).ln()))
        .sum())
}

/// `1 − cos(h_t, h_s)`.
pub fn cosine_cls_loss(h_t: &[f64], h_s: &[f64]) -> Result<f64> {
    if h_t.len() != h_s.len() {
        return Err(Error::Shape {
            op: "cosine_cls_loss",
            lhs: vec![h_t.len()],
            rhs: vec![h_s.len()],
        });
    }
    let nt = h_t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ns = h_s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nt <= 1e-12 {
        return Err(Error::Numeric("teacher [CLS] vector has zero norm".into()));
    }
    if ns <= 1e-12 {
        return Err(Error::Numeric("student [CLS] vector has zero norm".into()));
    }
    let dot: f64 = h_t.iter().zip(h_s).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nt * ns))
}

/// Mean of [`cosine_cls_loss`] over the rows of two `[N × d]` matrices.
pub fn cosine_batch_loss(h_t: &Tensor, h_s: &Tensor) -> Result<f64> {
    if h_t.shape() != h_s.shape() {
        return Err(Error::Shape {
            op: "cosine_batch_loss",
            lhs: h_t.shape().to_vec(),
            rhs: h_s.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for i in 0..h_t.rows() {
        total += cosine_cls_loss(h_t.row(i), h_s.row(i))?;
    }
    Ok(total / h_t.rows() as f64)
}

fn check_pair(teacher: &BatchRecord, student: &BatchRecord, layer_t: usize, layer_s: usize) -> Result<()> {
    if teacher.heads != student.heads {
        return config(format!(
            "teacher has {} attention heads but student has {}",
            teacher.heads, student.heads
        ));
    }
    if teacher.n != student.n || teacher.seq_len != student.seq_len || teacher.mask != student.mask {
        return contract("teacher and student records cover different batches");
    }
    if layer_t >= teacher.attention.len() {
        return contract(format!("teacher layer {layer_t} out of range"));
    }
    if layer_s >= student.attention.len() {
        return contract(format!("student layer {layer_s} out of range"));
    }
    Ok(())
}

/// Attention KL between one teacher layer and one student layer.
///
/// Per sample: the mean over all heads and non-padded query rows of the row
/// KL divergence `KL(A_T ‖ A_S)`; then the mean over samples.
pub fn head_loss(
    teacher: &BatchRecord,
    student: &BatchRecord,
    layer_t: usize,
    layer_s: usize,
) -> Result<f64> {
    check_pair(teacher, student, layer_t, layer_s)?;
    let (n, h, l) = (teacher.n, teacher.heads, teacher.seq_len);
    let p = teacher.attention[layer_t].data();
    let q = student.attention[layer_s].data();
    let mut total = 0.0;
    for s in 0..n {
        let mut sum = 0.0;
        let mut rows = 0usize;
        for head in 0..h {
            for i in 0..l {
                if !teacher.mask[s * l + i] {
                    continue;
                }
                let off = ((s * h + head) * l + i) * l;
                sum += kl_attention_row(&p[off..off + l], &q[off..off + l])?;
                rows += 1;
            }
        }
        total += sum / rows as f64;
    }
    Ok(total / n as f64)
}

/// Summed internal losses over a set of matched layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InternalLoss {
    pub cos: f64,
    pub kl: f64,
}

/// Sums the `[CLS]` cosine and attention KL losses over `(student, teacher)`
/// layer pairs.
pub fn internal_distill_loss(
    teacher: &BatchRecord,
    student: &BatchRecord,
    active_pairs: &[(usize, usize)],
) -> Result<InternalLoss> {
    if active_pairs.is_empty() {
        return contract("internal distillation needs at least one layer pair");
    }
    let mut out = InternalLoss::default();
    for &(ls, lt) in active_pairs {
        out.kl += head_loss(teacher, student, lt, ls)?;
        out.cos += cosine_batch_loss(&teacher.cls[lt], &student.cls[ls])?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tape builders

/// Soft-label cross-entropy of the student probabilities against constant
/// teacher probabilities, averaged over the batch.
pub fn graph_soft_loss(tape: &mut Tape, student_probs: Var, teacher: &SoftLabels) -> Result<Var> {
    let n = tape.value(student_probs).rows();
    tape.row_cross_entropy(
        student_probs,
        teacher.tensor().data().to_vec(),
        vec![1.0 / n as f64; n],
        0.0,
    )
}

/// `−weight · (1/N) Σᵢ ln ŷᵢ(yᵢ)`.
pub fn graph_hard_loss(tape: &mut Tape, student_probs: Var, labels: &[usize], weight: f64) -> Result<Var> {
    let (n, c) = (tape.value(student_probs).rows(), tape.value(student_probs).cols());
    check_labels(labels, n, c)?;
    let mut target = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        target[i * c + y] = 1.0;
    }
    tape.row_cross_entropy(student_probs, target, vec![weight / n as f64; n], 0.0)
}

/// Tape version of [`head_loss`] for one layer pair.
pub fn graph_head_loss(
    tape: &mut Tape,
    student_attention: Var,
    teacher: &BatchRecord,
    layer_t: usize,
) -> Result<Var> {
    let (n, h, l) = (teacher.n, teacher.heads, teacher.seq_len);
    let p = teacher.attention[layer_t].data();
    if tape.value(student_attention).numel() != p.len() {
        return config(format!(
            "attention shapes differ: teacher {:?}, student {:?} (head counts must match)",
            teacher.attention[layer_t].shape(),
            tape.value(student_attention).shape()
        ));
    }
    let mut weights = vec![0.0; n * h * l];
    let mut offset = 0.0;
    for s in 0..n {
        let valid = teacher.mask[s * l..(s + 1) * l].iter().filter(|&&m| m).count();
        let w = 1.0 / (n * h * valid) as f64;
        for head in 0..h {
            for i in 0..l {
                if !teacher.mask[s * l + i] {
                    continue;
                }
                let r = (s * h + head) * l + i;
                weights[r] = w;
                let entropy: f64 = p[r * l..(r + 1) * l]
                    .iter()
                    .filter(|&&x| x > 0.0)
                    .map(|x| x * x.ln())
                    .sum();
                offset += w * entropy;
            }
        }
    }
    tape.row_cross_entropy(student_attention, p.to_vec(), weights, offset)
}

/// Tape version of [`cosine_batch_loss`]; the teacher side is constant.
pub fn graph_cosine_loss(tape: &mut Tape, student_cls: Var, teacher_cls: &Tensor) -> Result<Var> {
    let t = tape.constant(teacher_cls);
    tape.cosine_rows(t, student_cls)
}

/// Summed cosine and KL losses on the tape over `(student, teacher)` pairs.
pub fn graph_internal_loss(
    tape: &mut Tape,
    student: &GraphOutput,
    teacher: &BatchRecord,
    active_pairs: &[(usize, usize)],
) -> Result<(Var, Var)> {
    if active_pairs.is_empty() {
        return contract("internal distillation needs at least one layer pair");
    }
    let mut cos: Option<Var> = None;
    let mut kl: Option<Var> = None;
    for &(ls, lt) in active_pairs {
        if ls >= student.attention.len() || lt >= teacher.attention.len() {
            return contract(format!("layer pair ({ls}, {lt}) out of range"));
        }
        let c = graph_cosine_loss(tape, student.cls[ls], &teacher.cls[lt])?;
        let k = graph_head_loss(tape, student.attention[ls], teacher, lt)?;
        cos = Some(match cos {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
        kl = Some(match kl {
            Some(acc) => tape.add(acc, k)?,
            None => k,
        });
    }
    Ok((cos.expect("non-empty"), kl.expect("non-empty")))
}
