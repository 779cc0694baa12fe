//! Training loop: Adam with warmup-linear decay, per-epoch loss assembly
//! following the recipe's schedule, and run orchestration.

mod optim;
mod recipe;
mod run;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Encoded};
use crate::error::{config, Error, Result};
use crate::losses::{graph_hard_loss, graph_internal_loss, graph_soft_loss, DistillWeights, SoftLabels};
use crate::mapping::{match_layers, LayerMatchPlan};
use crate::metrics::Metrics;
use crate::model::{predict, EncoderModel};
use crate::schedule::{active_pairs, loss_plan, LossTerms, Phase, ScheduleMode, ScheduleState};
use crate::tensor::{Tape, Var};

pub use optim::{clip_scale, grad_norm, lr_at, Adam};
pub use recipe::{ArchSettings, DataSettings, InitSource, Recipe, RunConfig, TrainSettings};
pub use run::{load_split, run_experiment, RunOutcome, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, METRICS_FILE};

/// What one epoch optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub terms: LossTerms,
    pub lambda_hard: f64,
    /// Layer pairs whose internal losses carry gradient.
    pub pairs: Vec<(usize, usize)>,
    /// Layer pairs whose internal losses are only reported, used when no
    /// internal term is active.
    pub report_pairs: Vec<(usize, usize)>,
    pub train_classifier: bool,
}

impl EpochPlan {
    /// Combines the recipe's terms with the schedule's view of this epoch.
    pub fn new(
        weights: &DistillWeights,
        mode: Option<&ScheduleMode>,
        state: Option<&ScheduleState>,
        plan: Option<&LayerMatchPlan>,
    ) -> Result<Self> {
        let recipe_terms = LossTerms {
            soft: weights.use_soft,
            kl: weights.use_kl,
            cos: weights.use_cos,
            hard: weights.use_hard,
        };
        let (terms, pairs) = match (mode, state) {
            (Some(mode), Some(state)) => {
                let plan = plan.ok_or_else(|| Error::Config("internal distillation needs a layer plan".into()))?;
                let sched = loss_plan(mode, state);
                let terms = LossTerms {
                    soft: sched.soft && recipe_terms.soft,
                    kl: sched.kl && recipe_terms.kl,
                    cos: sched.cos && recipe_terms.cos,
                    hard: sched.hard && recipe_terms.hard,
                };
                let pairs = if terms.kl || terms.cos {
                    active_pairs(mode, state, plan)
                } else {
                    Vec::new()
                };
                (terms, pairs)
            }
            (None, _) => (recipe_terms, Vec::new()),
            (Some(_), None) => return config("a schedule needs schedule state"),
        };
        let report_pairs = if pairs.is_empty() {
            plan.map(|p| p.pairs().to_vec()).unwrap_or_default()
        } else {
            Vec::new()
        };
        Ok(Self {
            terms,
            lambda_hard: weights.lambda_hard,
            pairs,
            report_pairs,
            train_classifier: terms.soft || terms.hard,
        })
    }
}

/// Loss values of one batch. Internal losses are present whenever they were
/// computed, whether or not they carried gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLosses {
    pub soft: Option<f64>,
    pub kl: Option<f64>,
    pub cos: Option<f64>,
    pub hard: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochStats {
    pub batches: Vec<BatchLosses>,
}

impl EpochStats {
    fn mean_of(&self, f: impl Fn(&BatchLosses) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.batches.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn soft(&self) -> Option<f64> {
        self.mean_of(|b| b.soft)
    }

    pub fn kl(&self) -> Option<f64> {
        self.mean_of(|b| b.kl)
    }

    pub fn cos(&self) -> Option<f64> {
        self.mean_of(|b| b.cos)
    }

    pub fn hard(&self) -> Option<f64> {
        self.mean_of(|b| b.hard)
    }

    pub fn total(&self) -> Option<f64> {
        self.mean_of(|b| Some(b.total))
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub next_locked: Option<usize>,
    pub l_soft: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_cos: Option<f64>,
    pub l_hard: Option<f64>,
    pub tau: Option<f64>,
    pub dev_metrics: Option<Metrics>,
}

/// Optimizer and step bookkeeping for a single run.
#[derive(Debug, Clone)]
pub struct Trainer {
    settings: TrainSettings,
    adam: Adam,
    updates: usize,
    total_updates: usize,
    warmup: usize,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    /// `updates_per_epoch` is the number of batches in one epoch.
    pub fn new(settings: &TrainSettings, student: &EncoderModel, updates_per_epoch: usize) -> Result<Self> {
        settings.validate()?;
        if updates_per_epoch == 0 {
            return config("training set is empty");
        }
        let total_updates = settings.epochs * updates_per_epoch;
        let horizon = total_updates + 1;
        let warmup = ((settings.warmup_fraction * horizon as f64).round() as usize).max(1);
        lr_at(0, settings.lr, warmup, horizon)?;
        Ok(Self {
            settings: settings.clone(),
            adam: Adam::new(student.params()),
            updates: 0,
            total_updates,
            warmup,
            dropout_rng: ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5EED_D80F),
        })
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn total_updates(&self) -> usize {
        self.total_updates
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Learning rate of the next update. Update `k` uses step `k + 1` of a
    /// schedule spanning `total_updates + 1` steps, so no update runs at zero.
    pub fn current_lr(&self) -> Result<f64> {
        lr_at(self.updates + 1, self.settings.lr, self.warmup, self.total_updates + 1)
    }

    /// Runs one pass over `batches`, updating `student` once per batch.
    ///
    /// When `state` is given and in its internal phase, each batch's cosine
    /// loss is added to its accumulator.
    pub fn train_epoch(
        &mut self,
        teacher: Option<&EncoderModel>,
        student: &mut EncoderModel,
        plan: &EpochPlan,
        mut state: Option<&mut ScheduleState>,
        batches: &[Batch],
    ) -> Result<EpochStats> {
        let needs_teacher = plan.terms.soft || !plan.pairs.is_empty() || !plan.report_pairs.is_empty();
        if needs_teacher && teacher.is_none() {
            return config("this recipe needs a teacher model");
        }
        let mut trainable = vec![true; student.params().len()];
        if !plan.train_classifier {
            for i in student.classifier_indices() {
                trainable[i] = false;
            }
        }
        let mut stats = EpochStats::default();
        for (bi, batch) in batches.iter().enumerate() {
            let record = match teacher {
                Some(t) if needs_teacher => Some(t.record(batch)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let vars = student.register(&mut tape, true);
            let dropout = (student.config().dropout > 0.0).then_some(&mut self.dropout_rng);
            let out = student.forward(&mut tape, &vars, batch, dropout)?;

            let mut losses = BatchLosses::default();
            let mut parts: Vec<Var> = Vec::new();
            let internal_pairs = if plan.pairs.is_empty() { &plan.report_pairs } else { &plan.pairs };
            if let (Some(rec), false) = (&record, internal_pairs.is_empty()) {
                let (cos, kl) = graph_internal_loss(&mut tape, &out, rec, internal_pairs)?;
                losses.cos = Some(tape.value(cos).data()[0]);
                losses.kl = Some(tape.value(kl).data()[0]);
                if !plan.pairs.is_empty() {
                    if plan.terms.kl {
                        parts.push(kl);
                    }
                    if plan.terms.cos {
                        parts.push(cos);
                    }
                }
            }
            if plan.terms.soft {
                let rec = record.as_ref().expect("teacher record");
                let soft = graph_soft_loss(&mut tape, out.probs, &SoftLabels::new(rec.probs.clone())?)?;
                losses.soft = Some(tape.value(soft).data()[0]);
                parts.push(soft);
            }
            if plan.terms.hard && plan.lambda_hard > 0.0 {
                let labels = batch
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("batch {bi} has unlabeled examples")))?;
                let hard = graph_hard_loss(&mut tape, out.probs, labels, plan.lambda_hard)?;
                losses.hard = Some(tape.value(hard).data()[0]);
                parts.push(hard);
            }
            for (name, v) in [("soft", losses.soft), ("kl", losses.kl), ("cos", losses.cos), ("hard", losses.hard)] {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("non-finite {name} loss ({v}) at batch {bi}")));
                    }
                }
            }
            let Some((&first, rest)) = parts.split_first() else {
                return config("no loss term is active for this epoch");
            };
            let mut total = first;
            for &p in rest {
                total = tape.add(total, p)?;
            }
            losses.total = tape.value(total).data()[0];

            let grads = tape.backward(total)?;
            student.zero_grad();
            student.accumulate_grads(&grads, &vars)?;
            let scale = clip_scale(grad_norm(student.params(), &trainable), self.settings.clip_norm);
            let lr = self.current_lr()?;
            self.adam.step(student.params_mut(), &trainable, lr, scale)?;
            student.zero_grad();
            self.updates += 1;

            if let Some(state) = state.as_deref_mut() {
                if state.phase() == Phase::Internal && !plan.pairs.is_empty() {
                    state.accumulate(losses.cos.unwrap_or(0.0));
                }
            }
            debug!("batch {bi}: total {:.6} lr {lr:.3e}", losses.total);
            stats.batches.push(losses);
        }
        Ok(stats)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub student: EncoderModel,
    pub log: Vec<EpochLog>,
}

/// Checks that a teacher and student can be compared layer by layer.
pub fn check_compatible(teacher: &EncoderModel, student: &EncoderModel) -> Result<()> {
    let (t, s) = (teacher.config(), student.config());
    if t.n_heads != s.n_heads || t.d_model != s.d_model {
        return config(format!(
            "teacher (layers {}, heads {}, d_model {}) and student (layers {}, heads {}, d_model {}) \
             need equal head counts and widths",
            t.n_layers, t.n_heads, t.d_model, s.n_layers, s.n_heads, s.d_model
        ));
    }
    Ok(())
}

/// Dev metrics, or `None` when the set is empty or unlabeled.
pub fn evaluate(model: &EncoderModel, data: &[Encoded], batch_size: usize) -> Result<Option<Metrics>> {
    let gold: Option<Vec<usize>> = data.iter().map(|e| e.label).collect();
    match gold {
        Some(gold) if !gold.is_empty() => {
            let pred = predict(model, data, batch_size)?;
            Ok(Some(Metrics::compute(&pred, &gold)?))
        }
        _ => Ok(None),
    }
}

/// Trains `student` under `settings.recipe`.
///
/// `plan` defaults to the standard matching for the two depths. Internal
/// losses are reported for recipes that do not optimize them whenever a
/// plan exists and the models are compatible.
pub fn fit(
    settings: &TrainSettings,
    teacher: Option<&EncoderModel>,
    mut student: EncoderModel,
    plan: Option<&LayerMatchPlan>,
    train: &[Encoded],
    dev: Option<&[Encoded]>,
) -> Result<FitOutput> {
    settings.validate()?;
    let recipe = settings.recipe;
    if recipe.needs_teacher() && teacher.is_none() {
        return config(format!("recipe {recipe} needs a teacher checkpoint"));
    }
    let teacher = if recipe.needs_teacher() { teacher } else { None };
    let mode = recipe.schedule();
    let mut plan_owned = None;
    if let Some(t) = teacher {
        if t.config().n_classes != student.config().n_classes {
            return config(format!(
                "teacher has {} classes, student {}",
                t.config().n_classes,
                student.config().n_classes
            ));
        }
        if mode.is_some() {
            check_compatible(t, &student)?;
        }
        let compatible = check_compatible(t, &student).is_ok();
        plan_owned = match plan {
            Some(p) => {
                if p.teacher_depth() != t.config().n_layers || p.len() != student.config().n_layers {
                    return config(format!(
                        "layer plan covers {} teacher / {} student layers, models have {} / {}",
                        p.teacher_depth(),
                        p.len(),
                        t.config().n_layers,
                        student.config().n_layers
                    ));
                }
                Some(p.clone())
            }
            None if mode.is_some() => Some(match_layers(t.config().n_layers, student.config().n_layers)?),
            None if compatible => match_layers(t.config().n_layers, student.config().n_layers).ok(),
            None => None,
        };
        if !compatible {
            plan_owned = None;
        }
    }
    let plan = plan_owned.as_ref();
    let mut state = match (&mode, plan) {
        (Some(_), Some(p)) => Some(ScheduleState::uniform(p.len(), settings.threshold(), settings.stage_limit())?),
        _ => None,
    };
    let weights = settings.weights();
    let per_epoch = train.len().div_ceil(settings.batch_size);
    let mut trainer = Trainer::new(settings, &student, per_epoch)?;
    let mut log = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let epoch_plan = EpochPlan::new(&weights, mode.as_ref(), state.as_ref(), plan)?;
        let next_locked = state.as_ref().map(ScheduleState::next_locked);
        let phase = match &state {
            Some(s) => s.phase(),
            None => Phase::Classification,
        };
        let batches = make_batches(train, settings.batch_size, Some((settings.seed, epoch)))?;
        let stats = trainer.train_epoch(teacher, &mut student, &epoch_plan, state.as_mut(), &batches)?;
        let tau = match state.as_mut() {
            Some(s) if s.phase() == Phase::Internal => {
                let tau = s.tau();
                if mode.as_ref().is_some_and(ScheduleMode::is_layerwise) {
                    s.advance()?;
                } else {
                    s.reset_tau();
                }
                Some(tau)
            }
            _ => None,
        };
        let dev_metrics = match dev {
            Some(d) => evaluate(&student, d, settings.batch_size)?,
            None => None,
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            phase,
            next_locked,
            l_soft: stats.soft(),
            l_kl: stats.kl(),
            l_cos: stats.cos(),
            l_hard: stats.hard(),
            tau,
            dev_metrics,
        };
        info!(
            "{recipe} epoch {}: loss {:.5}{}",
            entry.epoch,
            stats.total().unwrap_or(f64::NAN),
            entry
                .dev_metrics
                .map(|m| format!(", dev acc {:.4}", m.accuracy))
                .unwrap_or_default()
        );
        log.push(entry);
    }
    Ok(FitOutput { student, log })
}
