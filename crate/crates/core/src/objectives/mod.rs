//! Training objectives for adversarially robust domain adaptation.
//!
//! A [`Variant`] fixes which sub-batches a step trains on (clean and
//! adversarial source and target) and which loss terms combine them; a
//! [`BatchMode`] fixes which sub-batches share batch-norm statistics.

mod groups;
mod spec;
mod step;
mod train;

pub use groups::{compose_norm_groups, NormalizationGroupPlan};
pub use spec::{BatchMode, ConsistencyLoss, ObjectiveSpec, Tag, TrainConfig, Variant, VariantLayout};
pub use step::{compute_objective, make_adversarial_minibatch, ObjectiveOutput, TaggedBatch, Term};
pub use train::{pseudo_labeler_fit, train, EpochRecord, PseudoLabeler, TrainOutcome};
