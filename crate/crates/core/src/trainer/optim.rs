use crate::error::{config, contract, Result};
use crate::model::Param;

/// Linear warmup to `base_lr`, then linear decay to zero at `total`.
pub fn lr_at(step: usize, base_lr: f64, warmup: usize, total: usize) -> Result<f64> {
    if total <= warmup || warmup == 0 {
        return config(format!(
            "learning-rate schedule needs 0 < warmup < total, got warmup {warmup}, total {total}"
        ));
    }
    if step > total {
        return contract(format!("step {step} beyond schedule end {total}"));
    }
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total - step) as f64 / (total - warmup) as f64
    })
}

/// Adam with bias correction and per-parameter step counts.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.tensor.numel()],
                    v: vec![0.0; p.tensor.numel()],
                    step: 0,
                })
                .collect(),
        }
    }

    /// Number of updates applied to parameter `i`.
    pub fn steps(&self, i: usize) -> u64 {
        self.slots[i].step
    }

    /// Updates every parameter with `trainable[i]` set and a gradient buffer.
    /// Gradients are multiplied by `grad_scale` first.
    pub fn step(&mut self, params: &mut [Param], trainable: &[bool], lr: f64, grad_scale: f64) -> Result<()> {
        if params.len() != self.slots.len() || trainable.len() != params.len() {
            return contract("optimizer state does not match the parameter list");
        }
        for ((p, slot), &on) in params.iter_mut().zip(&mut self.slots).zip(trainable) {
            if !on {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            slot.step += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let data = p.tensor.data_mut();
            for i in 0..g.len() {
                let gi = g[i] * grad_scale;
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of the selected parameters.
pub fn grad_norm(params: &[Param], trainable: &[bool]) -> f64 {
    params
        .iter()
        .zip(trainable)
        .filter(|(_, &on)| on)
        .filter_map(|(p, _)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale factor that brings the global gradient norm down to `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
