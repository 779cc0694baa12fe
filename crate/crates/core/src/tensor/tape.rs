//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its forward value and the inputs
//! needed by its backward rule. `backward` walks the nodes once in reverse
//! order. Nodes whose inputs are all constants are marked as not requiring a
//! gradient and are skipped entirely.

use super::{gemm, softmax_in_place, Tensor};
use crate::error::{contract, Error, Result};

/// Additive bias applied to padded key columns before the attention softmax.
pub const MASK_BIAS: f64 = -1e9;
/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Clamps a probability from below; NaN passes through.
pub fn clamp_prob(p: f64) -> f64 {
    if p < PROB_CLAMP {
        PROB_CLAMP
    } else {
        p
    }
}
const LN_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    SoftmaxRows(Var),
    AttnProbs {
        q: Var,
        k: Var,
        heads: usize,
        seq_len: usize,
        scale: f64,
    },
    AttnContext {
        probs: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    },
    RowCrossEntropy {
        x: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    CosineRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Its gradient buffer, if any, is not carried over.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad,
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape.clone(),
            rhs: self.value(b).shape.clone(),
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(self.shape_err("add", a, b));
        }
        let mut value = self.value(a).clone();
        value
            .data
            .iter_mut()
            .zip(&self.value(b).data)
            .for_each(|(x, y)| *x += y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(self.shape_err("mul", a, b));
        }
        let mut value = self.value(a).clone();
        value
            .data
            .iter_mut()
            .zip(&self.value(b).data)
            .for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let mut value = self.value(x).clone();
        let b = &self.nodes[bias.0].value.data;
        value
            .data
            .chunks_mut(c)
            .for_each(|row| row.iter_mut().zip(b).for_each(|(r, b)| *r += b));
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value
            .data
            .iter_mut()
            .for_each(|v| *v = 0.5 * *v * (1.0 + libm::erf(*v * std::f64::consts::FRAC_1_SQRT_2)));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.value(beta).numel() != d {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let xs = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(self.value(x).shape.clone(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Looks up rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("row id {bad} out of range for table of {rows} rows")));
        }
        if ids.is_empty() {
            return contract("gather needs at least one id");
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies elementwise by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.value(x).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut value = self.value(x).clone();
        value.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "select_rows")?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return contract(format!("row selection {rows:?} invalid for {r} rows"));
        }
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// A contiguous block of `x`'s flat storage reinterpreted with `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let src = &self.value(x).data;
        if offset + numel > src.len() {
            return contract(format!(
                "slice [{offset}, {}) exceeds {} elements",
                offset + numel,
                src.len()
            ));
        }
        let value = Tensor::new(shape.to_vec(), src[offset..offset + numel].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, offset }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-head scaled dot-product attention probabilities.
    ///
    /// `q` and `k` are `[n·L × d]` with heads laid out as contiguous column
    /// blocks. The output is `[n·h·L × L]`, indexed `((sample·h + head)·L +
    /// query)·L + key`. Columns where `key_mask` is false receive
    /// [`MASK_BIAS`] before the softmax.
    pub fn attention_probs(
        &mut self,
        q: Var,
        k: Var,
        key_mask: &[bool],
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(q, "attention_probs")?;
        if self.value(k).shape != self.value(q).shape {
            return Err(self.shape_err("attention_probs", q, k));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return contract(format!(
                "attention layout invalid: rows={rows}, d={d}, heads={heads}, seq_len={seq_len}"
            ));
        }
        if key_mask.len() != rows {
            return contract("attention mask length must equal n·L");
        }
        let n = rows / seq_len;
        for s in 0..n {
            if !key_mask[s * seq_len..(s + 1) * seq_len].iter().any(|&m| m) {
                return contract(format!("sample {s} has no valid tokens"));
            }
        }
        let da = d / heads;
        let scale = 1.0 / (da as f64).sqrt();
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let l = seq_len;
        let mut out = vec![0.0; n * heads * l * l];
        for s in 0..n {
            for h in 0..heads {
                for i in 0..l {
                    let qrow = &qd[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                    let base = ((s * heads + h) * l + i) * l;
                    let row = &mut out[base..base + l];
                    for (j, r) in row.iter_mut().enumerate() {
                        let krow = &kd[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *r = scale * dot + if key_mask[s * l + j] { 0.0 } else { MASK_BIAS };
                    }
                    softmax_in_place(row);
                }
            }
        }
        let value = Tensor::new(vec![n * heads * l, l], out)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(
            value,
            Op::AttnProbs {
                q,
                k,
                heads,
                seq_len,
                scale,
            },
            rg,
        ))
    }

    /// Applies per-head attention probabilities to `v` (`[n·L × d]`).
    pub fn attention_context(
        &mut self,
        probs: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(v, "attention_context")?;
        let l = seq_len;
        let n = rows / l;
        if self.value(probs).shape != [n * heads * l, l] || d % heads != 0 {
            return Err(self.shape_err("attention_context", probs, v));
        }
        let da = d / heads;
        let p = &self.value(probs).data;
        let vd = &self.value(v).data;
        let mut out = vec![0.0; rows * d];
        for s in 0..n {
            for h in 0..heads {
                for i in 0..l {
                    let prow = &p[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                    let orow = &mut out[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                    for (j, &pj) in prow.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[probs, v]);
        Ok(self.push(
            value,
            Op::AttnContext {
                probs,
                v,
                heads,
                seq_len,
            },
            rg,
        ))
    }

    /// `offset + Σ_r w_r · Σ_c −t_rc · ln max(x_rc, 1e-12)` as a scalar.
    ///
    /// With `offset = Σ_r w_r Σ_c t_rc ln t_rc` this is a weighted sum of
    /// row KL divergences `KL(t_r ‖ x_r)`.
    pub fn row_cross_entropy(
        &mut self,
        x: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        offset: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if target.len() != xv.numel() || weights.len() * c != xv.numel() {
            return Err(Error::Shape {
                op: "row_cross_entropy",
                lhs: xv.shape.clone(),
                rhs: vec![weights.len(), target.len() / weights.len().max(1)],
            });
        }
        let mut total = offset;
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in r * c..(r + 1) * c {
                if target[j] != 0.0 {
                    row -= target[j] * clamp_prob(xv.data[j]).ln();
                }
            }
            total += w * row;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowCrossEntropy { x, target, weights },
            rg,
        ))
    }

    /// Mean over rows of `1 − cos(a_r, b_r)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(self.shape_err("cosine_rows", a, b));
        }
        let c = self.value(a).cols();
        let ad = &self.value(a).data;
        let bd = &self.value(b).data;
        let rows = ad.len() / c;
        let mut total = 0.0;
        for r in 0..rows {
            let (x, y) = (&ad[r * c..(r + 1) * c], &bd[r * c..(r + 1) * c]);
            let (na, nb) = (norm(x), norm(y));
            if na <= 1e-12 {
                return Err(Error::Numeric(format!("zero-norm vector on the left side (row {r})")));
            }
            if nb <= 1e-12 {
                return Err(Error::Numeric(format!("zero-norm vector on the right side (row {r})")));
            }
            total += 1.0 - dot(x, y) / (na * nb);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CosineRows(a, b),
            rg,
        ))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, &self.value(*b).data, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, &self.value(*a).data, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = &self.value(*b).data;
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = &self.value(*a).data;
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Gelu(x) => {
                let xd = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for i in 0..g.len() {
                        let v = xd[i];
                        let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = c * (-0.5 * v * v).exp();
                        gx[i] += g[i] * (cdf + v * pdf);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gam = &self.value(*gamma).data;
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        let df = d as f64;
                        for c in 0..d {
                            gx[r * d + c] += is / df * (df * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = self.value(*table).cols();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = g.len() / rows.len();
                    for (r, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Slice { x, offset } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx[*offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let y = &node.value;
                    let c = y.cols();
                    for (r, yr) in y.data.chunks(c).enumerate() {
                        softmax_backward_row(yr, &g[r * c..(r + 1) * c], 1.0, &mut gx[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::AttnProbs {
                q,
                k,
                heads,
                seq_len,
                scale,
            } => self.attn_probs_backward(node, g, grads, *q, *k, *heads, *seq_len, *scale),
            Op::AttnContext {
                probs,
                v,
                heads,
                seq_len,
            } => self.attn_context_backward(g, grads, *probs, *v, *heads, *seq_len),
            Op::RowCrossEntropy { x, target, weights } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let xd = &self.value(*x).data;
                    let c = xd.len() / weights.len();
                    for (r, w) in weights.iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            if target[j] != 0.0 && xd[j] > PROB_CLAMP {
                                gx[j] -= g[0] * w * (target[j] / xd[j]);
                            }
                        }
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let c = self.value(*a).cols();
                let ad = &self.value(*a).data;
                let bd = &self.value(*b).data;
                let rows = ad.len() / c;
                let coef = -g[0] / rows as f64;
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for r in 0..rows {
                    let (x, y) = (&ad[r * c..(r + 1) * c], &bd[r * c..(r + 1) * c]);
                    // Identical rows are a stationary point of the cosine.
                    if x == y {
                        continue;
                    }
                    let (na, nb) = (norm(x), norm(y));
                    let cos = dot(x, y) / (na * nb);
                    for j in 0..c {
                        da[r * c + j] = coef * (y[j] / (na * nb) - cos * x[j] / (na * na));
                        db[r * c + j] = coef * (x[j] / (na * nb) - cos * y[j] / (nb * nb));
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&da).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&db).for_each(|(p, q)| *p += q);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_probs_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        heads: usize,
        l: usize,
        scale: f64,
    ) {
        let p = &node.value.data;
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        let n = rows / l;
        let da = d / heads;
        // Gradient with respect to the pre-softmax scores, already scaled.
        let mut ds = vec![0.0; p.len()];
        for (r, (pr, gr)) in p.chunks(l).zip(g.chunks(l)).enumerate() {
            softmax_backward_row(pr, gr, scale, &mut ds[r * l..(r + 1) * l]);
        }
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        if let Some(gq) = self.acc(grads, q) {
            for s in 0..n {
                for h in 0..heads {
                    for i in 0..l {
                        let dsr = &ds[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                        let out = &mut gq[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                        for (j, &w) in dsr.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let krow = &kd[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                            out.iter_mut().zip(krow).for_each(|(o, x)| *o += w * x);
                        }
                    }
                }
            }
        }
        if let Some(gk) = self.acc(grads, k) {
            for s in 0..n {
                for h in 0..heads {
                    for i in 0..l {
                        let dsr = &ds[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                        let qrow = &qd[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                        for (j, &w) in dsr.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let out = &mut gk[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                            out.iter_mut().zip(qrow).for_each(|(o, x)| *o += w * x);
                        }
                    }
                }
            }
        }
    }

    fn attn_context_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        probs: Var,
        v: Var,
        heads: usize,
        l: usize,
    ) {
        let (rows, d) = (self.value(v).rows(), self.value(v).cols());
        let n = rows / l;
        let da = d / heads;
        let p = &self.value(probs).data;
        let vd = &self.value(v).data;
        if let Some(gp) = self.acc(grads, probs) {
            for s in 0..n {
                for h in 0..heads {
                    for i in 0..l {
                        let grow = &g[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                        let base = ((s * heads + h) * l + i) * l;
                        for j in 0..l {
                            let vrow = &vd[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                            gp[base + j] += dot(grow, vrow);
                        }
                    }
                }
            }
        }
        if let Some(gv) = self.acc(grads, v) {
            for s in 0..n {
                for h in 0..heads {
                    for i in 0..l {
                        let grow = &g[(s * l + i) * d + h * da..(s * l + i) * d + (h + 1) * da];
                        let base = ((s * heads + h) * l + i) * l;
                        for j in 0..l {
                            let pj = p[base + j];
                            if pj == 0.0 {
                                continue;
                            }
                            let out = &mut gv[(s * l + j) * d + h * da..(s * l + j) * d + (h + 1) * da];
                            out.iter_mut().zip(grow).for_each(|(o, x)| *o += pj * x);
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Adds `scale · y ⊙ (g − ⟨g, y⟩)` to `out`, with `g` shifted by its value at
/// the largest probability so that a constant upstream gradient cancels
/// exactly.
fn softmax_backward_row(y: &[f64], g: &[f64], scale: f64, out: &mut [f64]) {
    let top = y
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > y[best] { j } else { best });
    let r = g[top];
    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * (b - r)).sum();
    for j in 0..y.len() {
        out[j] += scale * y[j] * ((g[j] - r) - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn clamp_prob_keeps_nan() {
        assert_eq!(clamp_prob(0.0), PROB_CLAMP);
        assert_eq!(clamp_prob(-1.0), PROB_CLAMP);
        assert_eq!(clamp_prob(0.25), 0.25);
        assert!(clamp_prob(f64::NAN).is_nan());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(&t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1.0]), true);
        let unused = tape.leaf(&t(&[1], &[5.0]), true);
        let _ = tape.scale(unused, 2.0);
        let y = tape.scale(x, 3.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]), true);
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        // z = 2x², dz/dx = 4x
        assert_eq!(g.get(x).unwrap(), &[8.0]);
    }

    #[test]
    fn uniform_attention_for_zero_scores() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[4, 4]));
        let p = tape.attention_probs(z, z, &[true; 4], 2, 4).unwrap();
        assert!(tape.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn padded_key_columns_get_exactly_zero() {
        let mut tape = Tape::new();
        let q = tape.constant(&t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0]));
        let p = tape.attention_probs(q, q, &[true, true, false], 1, 3).unwrap();
        for row in tape.value(p).data().chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn all_padding_is_a_contract_error() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[2, 2]));
        let err = tape.attention_probs(q, q, &[false, false], 1, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cosine_zero_norm_names_side() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[0.0, 0.0]));
        let b = tape.constant(&t(&[1, 2], &[1.0, 0.0]));
        let err = tape.cosine_rows(a, b).unwrap_err().to_string();
        assert!(err.contains("left"), "{err}");
        let err = tape.cosine_rows(b, a).unwrap_err().to_string();
        assert!(err.contains("right"), "{err}");
    }
}
