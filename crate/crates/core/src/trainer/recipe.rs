use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::losses::DistillWeights;
use crate::schedule::{ScheduleKind, ScheduleMode, DEFAULT_STAGE_LIMIT, DEFAULT_THRESHOLD};

/// Named training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Recipe {
    /// Fine-tune on task labels without a teacher.
    #[serde(rename = "exp1.0")]
    Exp1_0,
    /// Layer-subset student trained on task labels without a teacher.
    #[serde(rename = "exp1.1")]
    Exp1_1,
    /// Soft labels only.
    #[serde(rename = "exp2.0")]
    Exp2_0,
    /// Soft labels plus attention KL on every matched layer.
    #[serde(rename = "exp3.0")]
    Exp3_0,
    /// Soft labels plus `[CLS]` cosine on every matched layer.
    #[serde(rename = "exp3.1")]
    Exp3_1,
    /// Soft labels plus both internal losses on every matched layer.
    #[serde(rename = "exp3.2")]
    Exp3_2,
    /// Progressive internal distillation, then soft labels.
    #[serde(rename = "exp3.3")]
    Exp3_3,
    /// Stacked internal distillation, then soft labels.
    #[serde(rename = "exp3.4")]
    Exp3_4,
    /// Stacked, with soft labels during the internal phase as well.
    #[serde(rename = "exp3.5")]
    Exp3_5,
    /// As exp3.5 plus hard labels in both phases.
    #[serde(rename = "exp3.6")]
    Exp3_6,
}

impl Recipe {
    pub const ALL: [Recipe; 10] = [
        Recipe::Exp1_0,
        Recipe::Exp1_1,
        Recipe::Exp2_0,
        Recipe::Exp3_0,
        Recipe::Exp3_1,
        Recipe::Exp3_2,
        Recipe::Exp3_3,
        Recipe::Exp3_4,
        Recipe::Exp3_5,
        Recipe::Exp3_6,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Recipe::Exp1_0 => "exp1.0",
            Recipe::Exp1_1 => "exp1.1",
            Recipe::Exp2_0 => "exp2.0",
            Recipe::Exp3_0 => "exp3.0",
            Recipe::Exp3_1 => "exp3.1",
            Recipe::Exp3_2 => "exp3.2",
            Recipe::Exp3_3 => "exp3.3",
            Recipe::Exp3_4 => "exp3.4",
            Recipe::Exp3_5 => "exp3.5",
            Recipe::Exp3_6 => "exp3.6",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Recipe::Exp1_0 | Recipe::Exp1_1)
    }

    /// Internal-distillation schedule, if the recipe uses internal losses.
    ///
    /// The all-layers recipes keep soft labels on throughout and never
    /// advance.
    pub fn schedule(&self) -> Option<ScheduleMode> {
        let mut mode = match self {
            Recipe::Exp1_0 | Recipe::Exp1_1 | Recipe::Exp2_0 => return None,
            Recipe::Exp3_0 | Recipe::Exp3_1 | Recipe::Exp3_2 => ScheduleMode::new(ScheduleKind::AllLayers),
            Recipe::Exp3_3 => ScheduleMode::new(ScheduleKind::Progressive),
            Recipe::Exp3_4 | Recipe::Exp3_5 | Recipe::Exp3_6 => ScheduleMode::new(ScheduleKind::Stacked),
        };
        mode.soft_during_internal = matches!(
            self,
            Recipe::Exp3_0 | Recipe::Exp3_1 | Recipe::Exp3_2 | Recipe::Exp3_5 | Recipe::Exp3_6
        );
        mode.hard_during_internal = matches!(self, Recipe::Exp3_6);
        Some(mode)
    }

    pub fn is_layerwise(&self) -> bool {
        self.schedule().is_some_and(|m| m.is_layerwise())
    }

    /// Hard-label weight used when the config does not set one.
    pub fn default_lambda(&self) -> f64 {
        match self {
            Recipe::Exp1_0 | Recipe::Exp1_1 => 1.0,
            Recipe::Exp3_6 => 0.1,
            _ => 0.0,
        }
    }

    /// The full set of terms this recipe may ever enable.
    pub fn weights(&self, lambda: f64) -> DistillWeights {
        let none = DistillWeights {
            lambda_hard: 0.0,
            use_soft: false,
            use_kl: false,
            use_cos: false,
            use_hard: false,
        };
        match self {
            Recipe::Exp1_0 | Recipe::Exp1_1 => DistillWeights {
                lambda_hard: lambda,
                use_hard: true,
                ..none
            },
            Recipe::Exp2_0 => DistillWeights { use_soft: true, ..none },
            Recipe::Exp3_0 => DistillWeights {
                use_soft: true,
                use_kl: true,
                ..none
            },
            Recipe::Exp3_1 => DistillWeights {
                use_soft: true,
                use_cos: true,
                ..none
            },
            Recipe::Exp3_2 | Recipe::Exp3_3 | Recipe::Exp3_4 | Recipe::Exp3_5 => DistillWeights {
                use_soft: true,
                use_kl: true,
                use_cos: true,
                ..none
            },
            Recipe::Exp3_6 => DistillWeights {
                lambda_hard: lambda,
                use_soft: true,
                use_kl: true,
                use_cos: true,
                use_hard: true,
            },
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s:?}")))
    }
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub recipe: Recipe,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Hard-label weight; only meaningful for recipes with a hard term.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Cosine-loss threshold for layerwise schedules.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Epoch budget per stage for layerwise schedules.
    #[serde(default)]
    pub stage_limit: Option<usize>,
}

mod defaults {
    pub fn seed() -> u64 {
        0
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        2e-5
    }
    pub fn warmup_fraction() -> f64 {
        0.1
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn max_seq_len() -> usize {
        64
    }
    pub fn student_layers() -> usize {
        6
    }
}

impl TrainSettings {
    pub fn new(recipe: Recipe) -> Self {
        Self {
            recipe,
            seed: defaults::seed(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            warmup_fraction: defaults::warmup_fraction(),
            clip_norm: defaults::clip_norm(),
            lambda: None,
            threshold: None,
            stage_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config("epochs must be positive");
        }
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return config(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.clip_norm >= 0.0) {
            return config(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if !self.recipe.is_layerwise() && (self.threshold.is_some() || self.stage_limit.is_some()) {
            return config(format!(
                "recipe {} has no layerwise schedule; remove threshold/stage_limit",
                self.recipe
            ));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return config(format!("threshold must be non-negative, got {t}"));
            }
        }
        if self.stage_limit == Some(0) {
            return config("stage_limit must be positive");
        }
        if let Some(l) = self.lambda {
            if self.recipe.default_lambda() == 0.0 {
                return config(format!("recipe {} has no hard-label term; remove lambda", self.recipe));
            }
            if !(l >= 0.0 && l.is_finite()) {
                return config(format!("lambda must be non-negative, got {l}"));
            }
        }
        self.weights().validate()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.recipe.default_lambda())
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(DEFAULT_THRESHOLD)
    }

    pub fn stage_limit(&self) -> usize {
        self.stage_limit.unwrap_or(DEFAULT_STAGE_LIMIT)
    }

    pub fn weights(&self) -> DistillWeights {
        self.recipe.weights(self.lambda())
    }
}

/// Where a student's initial weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// The base (pre-fine-tuning) checkpoint.
    #[default]
    Base,
    /// The fine-tuned teacher.
    Teacher,
}

/// Architecture used when a model is built from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
}

/// Training/dev files and their TSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    pub vocab: PathBuf,
    #[serde(default)]
    pub text_a: usize,
    #[serde(default = "default_text_b")]
    pub text_b: Option<usize>,
    #[serde(default = "default_label")]
    pub label: Option<usize>,
    #[serde(default)]
    pub skip_header: bool,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    /// Use only the first `limit` training examples.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_text_b() -> Option<usize> {
    Some(1)
}

fn default_label() -> Option<usize> {
    Some(2)
}

fn default_classes() -> usize {
    2
}

/// Everything needed to execute a recipe end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSettings,
    pub data: DataSettings,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    /// Output directory for the checkpoint and run log.
    pub out: PathBuf,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub init_from: InitSource,
    #[serde(default = "defaults::student_layers")]
    pub student_layers: usize,
    /// Architecture for models trained from scratch.
    #[serde(default)]
    pub model: Option<ArchSettings>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{loss_plan, ScheduleState};

    #[test]
    fn recipe_ids_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.id().parse::<Recipe>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.id()));
        }
        assert!("exp9.9".parse::<Recipe>().is_err());
    }

    #[test]
    fn recipe_terms() {
        let w = Recipe::Exp1_1.weights(1.0);
        assert!(w.use_hard && !w.use_soft && !w.use_kl && !w.use_cos);
        let w = Recipe::Exp2_0.weights(0.0);
        assert!(w.use_soft && !w.use_hard && !w.use_kl && !w.use_cos);
        assert!(Recipe::Exp3_0.weights(0.0).use_kl && !Recipe::Exp3_0.weights(0.0).use_cos);
        assert!(Recipe::Exp3_1.weights(0.0).use_cos && !Recipe::Exp3_1.weights(0.0).use_kl);
        assert_eq!(Recipe::Exp3_3.schedule().unwrap().kind, ScheduleKind::Progressive);
        assert_eq!(Recipe::Exp3_4.schedule().unwrap().kind, ScheduleKind::Stacked);
        assert!(Recipe::Exp3_5.schedule().unwrap().soft_during_internal);
        assert!(!Recipe::Exp3_4.schedule().unwrap().soft_during_internal);
        let m = Recipe::Exp3_6.schedule().unwrap();
        assert!(m.soft_during_internal && m.hard_during_internal);
        assert_eq!(Recipe::Exp3_6.default_lambda(), 0.1);
        assert!(Recipe::Exp2_0.schedule().is_none());
    }

    #[test]
    fn all_layers_recipes_keep_soft_labels() {
        let state = ScheduleState::uniform(3, 0.01, 10).unwrap();
        for r in [Recipe::Exp3_0, Recipe::Exp3_1, Recipe::Exp3_2] {
            let terms = loss_plan(&r.schedule().unwrap(), &state);
            assert!(terms.soft && terms.kl && terms.cos && !terms.hard);
        }
    }

    #[test]
    fn contradictions_are_config_errors() {
        let mut s = TrainSettings::new(Recipe::Exp2_0);
        s.threshold = Some(0.05);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = TrainSettings::new(Recipe::Exp3_2);
        s.stage_limit = Some(3);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = TrainSettings::new(Recipe::Exp3_4);
        s.lambda = Some(0.5);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = TrainSettings::new(Recipe::Exp3_6);
        s.lambda = Some(0.5);
        s.threshold = Some(0.05);
        s.validate().unwrap();
        assert_eq!(s.weights().lambda_hard, 0.5);
    }

    #[test]
    fn settings_defaults_from_json() {
        let s: TrainSettings = serde_json::from_str(r#"{"recipe": "exp3.4"}"#).unwrap();
        assert_eq!(s, TrainSettings::new(Recipe::Exp3_4));
        assert!(serde_json::from_str::<TrainSettings>(r#"{"recipe": "exp3.4", "bogus": 1}"#).is_err());
    }
}
