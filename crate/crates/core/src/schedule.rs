//! Distillation schedules: all layers at once, progressive (one matched layer
//! at a time) and stacked (a growing prefix of matched layers), followed by a
//! classification-only phase.
//!
//! A stage ends after an epoch whose mean `[CLS]` cosine loss falls below the
//! threshold, or once the stage has used its epoch budget, whichever comes
//! first.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::mapping::LayerMatchPlan;

pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const DEFAULT_STAGE_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    AllLayers,
    Progressive,
    Stacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleMode {
    pub kind: ScheduleKind,
    /// Keep the soft-label loss active during the internal phase.
    pub soft_during_internal: bool,
    /// Add the hard-label loss (in both phases).
    pub hard_during_internal: bool,
}

impl ScheduleMode {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            soft_during_internal: false,
            hard_during_internal: false,
        }
    }

    /// Whether the schedule walks through layers and advances between epochs.
    pub fn is_layerwise(&self) -> bool {
        !matches!(self.kind, ScheduleKind::AllLayers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Internal,
    Classification,
}

/// Loss terms enabled for an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub soft: bool,
    pub kl: bool,
    pub cos: bool,
    pub hard: bool,
}

/// Advancement state of a layer-wise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    next_locked: usize,
    n_layers: usize,
    tau_sum: f64,
    tau_batches: usize,
    threshold: f64,
    /// 1-based index of the current epoch within its stage.
    epoch_in_stage: usize,
    stage_limits: Vec<usize>,
}

impl ScheduleState {
    /// `stage_limits[i]` is the epoch budget of stage `i`.
    pub fn new(n_layers: usize, threshold: f64, stage_limits: Vec<usize>) -> Result<Self> {
        if n_layers == 0 {
            return config("schedule needs at least one student layer");
        }
        if stage_limits.len() != n_layers {
            return config(format!(
                "{} stage limits given for {n_layers} layers",
                stage_limits.len()
            ));
        }
        if stage_limits.contains(&0) {
            return config("stage epoch limits must be at least 1");
        }
        if !(threshold >= 0.0) {
            return config(format!("threshold must be non-negative, got {threshold}"));
        }
        Ok(Self {
            next_locked: 0,
            n_layers,
            tau_sum: 0.0,
            tau_batches: 0,
            threshold,
            epoch_in_stage: 1,
            stage_limits,
        })
    }

    pub fn uniform(n_layers: usize, threshold: f64, limit: usize) -> Result<Self> {
        Self::new(n_layers, threshold, vec![limit; n_layers])
    }

    pub fn next_locked(&self) -> usize {
        self.next_locked
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn epoch_in_stage(&self) -> usize {
        self.epoch_in_stage
    }

    pub fn stage_limit(&self, stage: usize) -> usize {
        self.stage_limits[stage]
    }

    pub fn phase(&self) -> Phase {
        if self.next_locked < self.n_layers {
            Phase::Internal
        } else {
            Phase::Classification
        }
    }

    /// Adds one batch's cosine loss to the epoch accumulator.
    pub fn accumulate(&mut self, l_cos: f64) {
        self.tau_sum += l_cos;
        self.tau_batches += 1;
    }

    /// Mean per-batch cosine loss accumulated this epoch.
    pub fn tau(&self) -> f64 {
        if self.tau_batches == 0 {
            0.0
        } else {
            self.tau_sum / self.tau_batches as f64
        }
    }

    pub fn reset_tau(&mut self) {
        self.tau_sum = 0.0;
        self.tau_batches = 0;
    }

    /// Closes an internal-distillation epoch. Unlocks the next layer when the
    /// mean cosine loss is below the threshold or the stage budget is spent.
    /// Returns whether the schedule advanced.
    pub fn advance(&mut self) -> Result<bool> {
        if self.phase() == Phase::Classification {
            return contract("advance called in the classification phase");
        }
        let advanced = self.tau() < self.threshold
            || self.epoch_in_stage >= self.stage_limits[self.next_locked];
        if advanced {
            self.next_locked += 1;
            self.epoch_in_stage = 1;
        } else {
            self.epoch_in_stage += 1;
        }
        self.reset_tau();
        Ok(advanced)
    }
}

/// Layer pairs whose internal losses are active this epoch.
pub fn active_pairs(
    mode: &ScheduleMode,
    state: &ScheduleState,
    plan: &LayerMatchPlan,
) -> Vec<(usize, usize)> {
    let pairs = plan.pairs();
    let k = state.next_locked();
    if k >= pairs.len() {
        return Vec::new();
    }
    match mode.kind {
        ScheduleKind::AllLayers => pairs.to_vec(),
        ScheduleKind::Progressive => vec![pairs[k]],
        ScheduleKind::Stacked => pairs[..=k].to_vec(),
    }
}

/// Loss terms for the current phase.
pub fn loss_plan(mode: &ScheduleMode, state: &ScheduleState) -> LossTerms {
    match state.phase() {
        Phase::Internal => LossTerms {
            soft: mode.soft_during_internal,
            kl: true,
            cos: true,
            hard: mode.hard_during_internal,
        },
        Phase::Classification => LossTerms {
            soft: true,
            kl: false,
            cos: false,
            hard: mode.hard_during_internal,
        },
    }
}
