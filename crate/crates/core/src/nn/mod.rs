//! Layers, the UDA model triple (F, C, D) and the losses used to train it.

pub mod checkpoint;
mod layers;
mod losses;
mod model;

pub use layers::{
    batchnorm_forward, linear_forward, Activation, BatchNorm, BatchStats, BnMode, Linear, BN_EPS, BN_MOMENTUM,
};
pub use losses::{
    cross_entropy, domain_adversarial, domain_bce, kl_consistency, logit_distance, DistanceKind, KlDirection,
};
pub use model::{BoundModel, Branch, FeatureLayer, ModelSpec, UdaModel};
