//! Teacher/student layer matching and student initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::{EncoderModel, ModelConfig, Param};

/// Ordered `(student_layer, teacher_layer)` pairs, one per student layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMatchPlan {
    pairs: Vec<(usize, usize)>,
}

impl LayerMatchPlan {
    /// Validates an explicit plan against a teacher depth.
    pub fn new(pairs: Vec<(usize, usize)>, n_teacher: usize) -> Result<Self> {
        if pairs.is_empty() {
            return config("layer plan is empty");
        }
        for (i, &(s, t)) in pairs.iter().enumerate() {
            if s != i {
                return config(format!("plan pair {i} maps student layer {s}"));
            }
            if i > 0 && t <= pairs[i - 1].1 {
                return config("teacher layers in a plan must strictly increase");
            }
        }
        if pairs.last().map(|p| p.1 + 1) != Some(n_teacher) {
            return config("the last student layer must match the top teacher layer");
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn teacher_depth(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.1 + 1)
    }
}

/// Student layer `i` compresses teacher group `i` of `r = n_teacher /
/// n_student` consecutive layers and is matched to its upper layer,
/// `(i + 1)·r − 1`.
pub fn match_layers(n_teacher: usize, n_student: usize) -> Result<LayerMatchPlan> {
    if n_student == 0 || n_teacher == 0 {
        return config("layer counts must be positive");
    }
    if n_teacher % n_student != 0 {
        return config(format!(
            "teacher depth {n_teacher} is not a multiple of student depth {n_student}"
        ));
    }
    let r = n_teacher / n_student;
    Ok(LayerMatchPlan {
        pairs: (0..n_student).map(|i| (i, (i + 1) * r - 1)).collect(),
    })
}

/// Builds a student whose embeddings come from `base`, whose layer `i` is a
/// copy of base layer `plan[i]`, and whose classifier is copied when the class
/// counts agree (otherwise freshly initialized from `seed`).
pub fn init_student(
    base: &EncoderModel,
    student_config: &ModelConfig,
    plan: &LayerMatchPlan,
    seed: u64,
) -> Result<EncoderModel> {
    student_config.validate()?;
    let bc = base.config();
    if plan.teacher_depth() != bc.n_layers {
        return config(format!(
            "plan expects a {}-layer base, got {}",
            plan.teacher_depth(),
            bc.n_layers
        ));
    }
    if plan.len() != student_config.n_layers {
        return config(format!(
            "plan has {} pairs for a {}-layer student",
            plan.len(),
            student_config.n_layers
        ));
    }
    if bc.n_heads != student_config.n_heads || bc.d_model != student_config.d_model {
        return config(format!(
            "student (heads {}, d_model {}) must match base (heads {}, d_model {})",
            student_config.n_heads, student_config.d_model, bc.n_heads, bc.d_model
        ));
    }
    let fresh = EncoderModel::new(student_config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let classes_match = bc.n_classes == student_config.n_classes;
    let mut params: Vec<Param> = Vec::with_capacity(fresh.params().len());
    for p in fresh.params() {
        let source_name = match p.name.strip_prefix("layers.") {
            Some(rest) => {
                let (idx, suffix) = rest.split_once('.').expect("layer parameter names");
                let i: usize = idx.parse().expect("numeric layer index");
                Some(format!("layers.{}.{suffix}", plan.pairs()[i].1))
            }
            None if p.name.starts_with("classifier") && !classes_match => None,
            None => Some(p.name.clone()),
        };
        let tensor = match source_name {
            Some(name) => {
                let src = base
                    .param(&name)
                    .ok_or_else(|| Error::Config(format!("base has no parameter {name}")))?;
                if src.tensor.shape() != p.tensor.shape() {
                    return config(format!(
                        "parameter {}: base shape {:?} differs from student shape {:?}",
                        p.name,
                        src.tensor.shape(),
                        p.tensor.shape()
                    ));
                }
                let mut t = src.tensor.clone();
                t.zero_grad();
                t
            }
            None => p.tensor.clone(),
        };
        params.push(Param {
            name: p.name.clone(),
            tensor,
        });
    }
    EncoderModel::from_params(student_config.clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 8,
            n_classes: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn matching_examples() {
        assert_eq!(match_layers(12, 6).unwrap().teacher_layers(), vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(match_layers(12, 12).unwrap().teacher_layers(), (0..12).collect::<Vec<_>>());
        assert_eq!(match_layers(12, 4).unwrap().teacher_layers(), vec![2, 5, 8, 11]);
        assert_eq!(match_layers(12, 1).unwrap().teacher_layers(), vec![11]);
        assert!(matches!(match_layers(12, 5), Err(Error::Config(_))));
        assert!(match_layers(12, 0).is_err());
    }

    #[test]
    fn matching_is_total_for_divisible_depths() {
        for t in 1..=48 {
            for s in (1..=t).filter(|s| t % s == 0) {
                let plan = match_layers(t, s).unwrap();
                assert_eq!(plan, match_layers(t, s).unwrap());
                assert_eq!(plan.len(), s);
                assert!(LayerMatchPlan::new(plan.pairs().to_vec(), t).is_ok());
            }
        }
    }

    #[test]
    fn explicit_plan_validation() {
        assert!(LayerMatchPlan::new(vec![(0, 1), (1, 1)], 2).is_err());
        assert!(LayerMatchPlan::new(vec![(0, 0), (1, 2)], 4).is_err());
        assert!(LayerMatchPlan::new(vec![(1, 3)], 4).is_err());
    }

    #[test]
    fn identity_plan_copies_everything() {
        let base = EncoderModel::new(cfg(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let student = init_student(&base, &cfg(3), &match_layers(3, 3).unwrap(), 9).unwrap();
        assert_eq!(student, base);
    }

    #[test]
    fn layers_come_from_the_upper_layer_of_each_group() {
        let base = EncoderModel::new(cfg(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let student = init_student(&base, &cfg(2), &match_layers(4, 2).unwrap(), 9).unwrap();
        for (s, t) in [(0, 1), (1, 3)] {
            let si = student.layer_indices(s);
            let ti = base.layer_indices(t);
            for (a, b) in student.params()[si].iter().zip(&base.params()[ti]) {
                assert_eq!(a.tensor, b.tensor);
            }
        }
        let mut touched = student.clone();
        touched.params_mut()[0].tensor.data_mut()[0] += 1.0;
        assert_ne!(touched.params()[0].tensor, base.params()[0].tensor);
        assert_eq!(student.params()[0].tensor, base.params()[0].tensor);
    }

    #[test]
    fn classifier_is_reinitialized_when_classes_differ() {
        let base = EncoderModel::new(cfg(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut sc = cfg(1);
        sc.n_classes = 3;
        let student = init_student(&base, &sc, &match_layers(2, 1).unwrap(), 4).unwrap();
        assert_eq!(student.param("classifier.weight").unwrap().tensor.shape(), &[8, 3]);
    }

    #[test]
    fn incompatible_shapes_are_config_errors() {
        let base = EncoderModel::new(cfg(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut sc = cfg(1);
        sc.vocab_size = 30;
        let err = init_student(&base, &sc, &match_layers(2, 1).unwrap(), 4).unwrap_err();
        assert!(err.to_string().contains("embeddings.token"), "{err}");
        let mut sc = cfg(1);
        sc.n_heads = 4;
        assert!(matches!(
            init_student(&base, &sc, &match_layers(2, 1).unwrap(), 4),
            Err(Error::Config(_))
        ));
        assert!(init_student(&base, &cfg(1), &match_layers(4, 1).unwrap(), 4).is_err());
    }

    #[test]
    fn copied_layer_forward_is_bit_exact() {
        let base = EncoderModel::new(cfg(4), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let plan = match_layers(4, 2).unwrap();
        let student = init_student(&base, &cfg(2), &plan, 0).unwrap();
        let hidden = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect()).unwrap();
        let mask = [true, true, true, true, false];
        for &(s, t) in plan.pairs() {
            let a = student.layer_forward(s, &hidden, &mask).unwrap();
            let b = base.layer_forward(t, &hidden, &mask).unwrap();
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }
}
