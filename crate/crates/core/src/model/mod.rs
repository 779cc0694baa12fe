//! Post-layer-norm transformer encoder with a linear classifier over the
//! final `[CLS]` state.
//!
//! Every forward pass exposes, per layer, the attention probabilities of all
//! heads and the hidden vector at position 0. Distillation losses read these
//! directly from the tape.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Encoded, CLS};
use crate::error::{config, contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Number of segment ids the embedding table supports.
pub const N_SEGMENTS: usize = 2;
const PARAMS_PER_LAYER: usize = 16;
const EMBEDDING_PARAMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config(format!("model {name} must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.vocab_size + self.max_seq_len + N_SEGMENTS) * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d + 2 * d;
        let classifier = d * self.n_classes + self.n_classes;
        embeddings + self.n_layers * (attention + ffn) + classifier
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, d]),
            ("embeddings.segment".to_string(), vec![N_SEGMENTS, d]),
            ("embeddings.norm.gamma".to_string(), vec![d]),
            ("embeddings.norm.beta".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            for (suffix, shape) in layer_param_specs(d, self.d_ff) {
                specs.push((format!("layers.{l}.{suffix}"), shape));
            }
        }
        specs.push(("classifier.weight".to_string(), vec![d, self.n_classes]));
        specs.push(("classifier.bias".to_string(), vec![self.n_classes]));
        specs
    }
}

fn layer_param_specs(d: usize, ff: usize) -> [(&'static str, Vec<usize>); PARAMS_PER_LAYER] {
    [
        ("attention.query.weight", vec![d, d]),
        ("attention.query.bias", vec![d]),
        ("attention.key.weight", vec![d, d]),
        ("attention.key.bias", vec![d]),
        ("attention.value.weight", vec![d, d]),
        ("attention.value.bias", vec![d]),
        ("attention.output.weight", vec![d, d]),
        ("attention.output.bias", vec![d]),
        ("attention.norm.gamma", vec![d]),
        ("attention.norm.beta", vec![d]),
        ("ffn.inner.weight", vec![d, ff]),
        ("ffn.inner.bias", vec![ff]),
        ("ffn.outer.weight", vec![ff, d]),
        ("ffn.outer.bias", vec![d]),
        ("ffn.norm.gamma", vec![d]),
        ("ffn.norm.beta", vec![d]),
    ]
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Attention and `[CLS]` states captured for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// `[layer][head]`, each `[L × L]`.
    pub attention: Vec<Vec<Tensor>>,
    /// Per layer, `[d_model]`.
    pub cls_hidden: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Detached forward values for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    /// Per layer, `[n·h·L × L]`.
    pub attention: Vec<Tensor>,
    /// Per layer, `[n × d_model]`.
    pub cls: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
    pub n: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub mask: Vec<bool>,
}

/// Forward outputs that still live on a tape.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub attention: Vec<Var>,
    pub cls: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
}

impl EncoderModel {
    /// Random initialization: linear maps `N(0, 1/fan_in)`, embeddings
    /// `N(0, 1)`, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = init_tensor(&name, &shape, rng);
                Param { name, tensor }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from parameters in manifest order.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return config_err(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return config_err(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Indices of the parameters belonging to the classifier head.
    pub fn classifier_indices(&self) -> std::ops::Range<usize> {
        self.params.len() - 2..self.params.len()
    }

    pub fn layer_indices(&self, layer: usize) -> std::ops::Range<usize> {
        let start = EMBEDDING_PARAMS + layer * PARAMS_PER_LAYER;
        start..start + PARAMS_PER_LAYER
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(&p.tensor, requires_grad))
            .collect()
    }

    /// Adds tape gradients into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &crate::tensor::Gradients, vars: &[Var]) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Graph forward pass using this model's configuration.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        batch: &Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutput> {
        forward_graph(&self.config, tape, params, batch, dropout)
    }

    /// Dropout-free forward pass returning detached values.
    pub fn record(&self, batch: &Batch) -> Result<BatchRecord> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward(&mut tape, &vars, batch, None)?;
        Ok(BatchRecord {
            attention: out.attention.iter().map(|v| tape.value(*v).clone()).collect(),
            cls: out.cls.iter().map(|v| tape.value(*v).clone()).collect(),
            logits: tape.value(out.logits).clone(),
            probs: tape.value(out.probs).clone(),
            n: batch.n,
            heads: self.config.n_heads,
            seq_len: batch.seq_len,
            mask: batch.mask.clone(),
        })
    }

    /// Runs one packed sequence. With `capture` false only logits and
    /// probabilities are filled.
    pub fn encode(&self, input: &Encoded, capture: bool) -> Result<ForwardRecord> {
        let batch = Batch::from_encoded(&[input])?;
        let rec = self.record(&batch)?;
        let l = batch.seq_len;
        let (attention, cls_hidden) = if capture {
            let attention = rec
                .attention
                .iter()
                .map(|a| {
                    a.data()
                        .chunks(l * l)
                        .map(|h| Tensor::new(vec![l, l], h.to_vec()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let cls = rec
                .cls
                .iter()
                .map(|c| Tensor::new(vec![self.config.d_model], c.data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            (attention, cls)
        } else {
            (Vec::new(), Vec::new())
        };
        let c = self.config.n_classes;
        Ok(ForwardRecord {
            attention,
            cls_hidden,
            logits: Tensor::new(vec![c], rec.logits.into_data())?,
            probs: Tensor::new(vec![c], rec.probs.into_data())?,
        })
    }

    /// Class probabilities for one packed sequence.
    pub fn classify(&self, input: &Encoded) -> Result<Tensor> {
        Ok(self.encode(input, false)?.probs)
    }

    /// Self-attention sublayer of `layer` on a single `[L × d_model]`
    /// sequence: the output-projected context and per-head probabilities.
    pub fn self_attention(
        &self,
        layer: usize,
        hidden: &Tensor,
        mask: &[bool],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (mut tape, vars, x) = self.single_layer_tape(layer, hidden, mask)?;
        let p = &vars[self.layer_indices(layer)];
        let l = mask.len();
        let (ctx, probs) = attention_sublayer(&self.config, &mut tape, p, x, mask, l)?;
        let heads = tape
            .value(probs)
            .data()
            .chunks(l * l)
            .map(|h| Tensor::new(vec![l, l], h.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(ctx).clone(), heads))
    }

    /// Full forward of transformer layer `layer` on one `[L × d_model]`
    /// sequence.
    pub fn layer_forward(&self, layer: usize, hidden: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let (mut tape, vars, x) = self.single_layer_tape(layer, hidden, mask)?;
        let p = &vars[self.layer_indices(layer)];
        let (out, _) = layer_graph(&self.config, &mut tape, p, x, mask, mask.len(), None)?;
        Ok(tape.value(out).clone())
    }

    fn single_layer_tape(
        &self,
        layer: usize,
        hidden: &Tensor,
        mask: &[bool],
    ) -> Result<(Tape, Vec<Var>, Var)> {
        if layer >= self.config.n_layers {
            return contract(format!("layer {layer} out of range"));
        }
        if hidden.shape() != [mask.len(), self.config.d_model] {
            return Err(Error::Shape {
                op: "layer_forward",
                lhs: hidden.shape().to_vec(),
                rhs: vec![mask.len(), self.config.d_model],
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(hidden);
        Ok((tape, vars, x))
    }
}

fn config_err<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = if name.ends_with("gamma") {
        vec![1.0; numel]
    } else if name.ends_with("bias") || name.ends_with("beta") {
        vec![0.0; numel]
    } else {
        let std = if name.starts_with("embeddings") {
            1.0
        } else {
            1.0 / (shape[0] as f64).sqrt()
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        (0..numel).map(|_| normal.sample(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("spec shapes are valid")
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => {
            let mask = dropout_mask(r, tape.value(x).numel(), p);
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Attention sublayer: returns the output-projected context and the
/// per-head probabilities `[n·h·L × L]`.
fn attention_sublayer(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
    mask: &[bool],
    seq_len: usize,
) -> Result<(Var, Var)> {
    let q = linear(tape, x, p[0], p[1])?;
    let k = linear(tape, x, p[2], p[3])?;
    let v = linear(tape, x, p[4], p[5])?;
    let probs = tape.attention_probs(q, k, mask, cfg.n_heads, seq_len)?;
    let ctx = tape.attention_context(probs, v, cfg.n_heads, seq_len)?;
    let out = linear(tape, ctx, p[6], p[7])?;
    Ok((out, probs))
}

/// One post-LN transformer layer. Returns the new hidden states and the
/// attention probabilities.
fn layer_graph(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
    mask: &[bool],
    seq_len: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let (attn, probs) = attention_sublayer(cfg, tape, p, x, mask, seq_len)?;
    let attn = maybe_dropout(tape, attn, cfg.dropout, &mut rng)?;
    let res = tape.add(x, attn)?;
    let h = tape.layer_norm(res, p[8], p[9])?;
    let inner = linear(tape, h, p[10], p[11])?;
    let inner = tape.gelu(inner);
    let outer = linear(tape, inner, p[12], p[13])?;
    let outer = maybe_dropout(tape, outer, cfg.dropout, &mut rng)?;
    let res = tape.add(h, outer)?;
    let out = tape.layer_norm(res, p[14], p[15])?;
    Ok((out, probs))
}

/// Builds the full encoder graph for `batch` on `tape`.
///
/// `params` must be laid out in the model's manifest order (as returned by
/// [`EncoderModel::register`]). Dropout is applied only when `dropout` is
/// given and the configured rate is positive.
pub fn forward_graph(
    cfg: &ModelConfig,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<GraphOutput> {
    let expected = EMBEDDING_PARAMS + cfg.n_layers * PARAMS_PER_LAYER + 2;
    if params.len() != expected {
        return contract(format!("expected {expected} parameter vars, got {}", params.len()));
    }
    let (n, l) = (batch.n, batch.seq_len);
    if l > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {l} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if let Some(&bad) = batch.segments.iter().find(|&&s| s >= N_SEGMENTS) {
        return Err(Error::Data(format!("segment id {bad} out of range")));
    }
    if (0..n).any(|i| batch.ids[i * l] != CLS) {
        return contract("every sequence must start with the [CLS] token");
    }

    let positions: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
    let tok = tape.gather(params[0], &batch.ids)?;
    let pos = tape.gather(params[1], &positions)?;
    let seg = tape.gather(params[2], &batch.segments)?;
    let emb = tape.add(tok, pos)?;
    let emb = tape.add(emb, seg)?;
    let emb = tape.layer_norm(emb, params[3], params[4])?;
    let mut x = maybe_dropout(tape, emb, cfg.dropout, &mut dropout)?;

    let cls_rows: Vec<usize> = (0..n).map(|i| i * l).collect();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut cls = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let start = EMBEDDING_PARAMS + layer * PARAMS_PER_LAYER;
        let p = &params[start..start + PARAMS_PER_LAYER];
        let (out, probs) = layer_graph(cfg, tape, p, x, &batch.mask, l, dropout.as_deref_mut())?;
        x = out;
        attention.push(probs);
        cls.push(tape.select_rows(x, &cls_rows)?);
    }
    let last_cls = *cls.last().expect("at least one layer");
    let w = params[expected - 2];
    let b = params[expected - 1];
    let logits = linear(tape, last_cls, w, b)?;
    let probs = tape.softmax_rows(logits);
    Ok(GraphOutput {
        attention,
        cls,
        logits,
        probs,
    })
}

/// Argmax prediction for each packed sequence.
pub fn predict(model: &EncoderModel, data: &[Encoded], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    for batch in crate::data::make_batches(data, batch_size, None)? {
        let rec = model.record(&batch)?;
        for row in rec.probs.data().chunks(model.config.n_classes) {
            preds.push(argmax(row));
        }
    }
    Ok(preds)
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
