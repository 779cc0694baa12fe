//! Knowledge distillation from the internal representations of a transformer
//! encoder into a shallower student.
//!
//! The crate carries its own small reverse-mode autodiff engine ([`tensor`]),
//! a BERT-style encoder that can capture per-layer attention and `[CLS]`
//! states ([`model`]), the soft-label, attention-KL and `[CLS]`-cosine losses
//! ([`losses`]), teacher/student layer matching ([`mapping`]), the
//! all-layers / progressive / stacked distillation schedules ([`schedule`])
//! and the training loop that ties them together ([`trainer`]).

pub mod analysis;
pub mod data;
pub mod error;
pub mod losses;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
