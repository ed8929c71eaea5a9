//! Gradient-sign adversarial example generation under an L-infinity budget.
//!
//! FGSM, PGD and MI-FGSM share one loop: take `j_max` steps of size `alpha`
//! along the sign of the loss gradient (or of the momentum accumulator for
//! MI-FGSM), projecting back into the epsilon-ball around the clean input and
//! into the optional data bounds after every step. The loss is either
//! cross-entropy against labels or a distance between the current logits and
//! fixed reference logits computed on the clean input (self-supervised).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sign, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{self, BnMode, Branch, DistanceKind, KlDirection, UdaModel};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mifgsm,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mifgsm => "mifgsm",
        }
    }
}

/// Loss maximized by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    Ce,
    Kl,
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Labels,
    SelfLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Step size; `None` means `2.5 * epsilon / j_max` (FGSM: `epsilon`).
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "one")]
    pub j_max: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "one_f")]
    pub momentum_mu: f64,
    #[serde(default)]
    pub clip_bounds: Option<(f64, f64)>,
    #[serde(default = "default_loss")]
    pub loss: AttackLoss,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    /// Batch-norm statistics used while attacking.
    #[serde(default = "default_bn")]
    pub bn_mode: BnMode,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_loss() -> AttackLoss {
    AttackLoss::Ce
}
fn default_supervision() -> Supervision {
    Supervision::Labels
}
fn default_bn() -> BnMode {
    BnMode::Eval
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: None,
            j_max: 1,
            random_start: false,
            momentum_mu: 1.0,
            clip_bounds: None,
            loss: AttackLoss::Ce,
            supervision: Supervision::Labels,
            bn_mode: BnMode::Eval,
            kl_direction: KlDirection::CleanToAdv,
        }
    }

    /// PGD with random start and the default step size.
    pub fn pgd(epsilon: f64, j_max: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            j_max,
            random_start: true,
            ..Self::fgsm(epsilon)
        }
    }

    /// MI-FGSM with decay 1 and no random start.
    pub fn mifgsm(epsilon: f64, j_max: usize) -> Self {
        Self {
            kind: AttackKind::Mifgsm,
            j_max,
            ..Self::fgsm(epsilon)
        }
    }

    /// Switches to self-supervision with the given consistency loss.
    pub fn self_supervised(mut self, loss: AttackLoss) -> Self {
        self.supervision = Supervision::SelfLogits;
        self.loss = loss;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_j_max(mut self, j_max: usize) -> Self {
        self.j_max = j_max;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(match self.kind {
            AttackKind::Fgsm => self.epsilon,
            _ => 2.5 * self.epsilon / self.j_max as f64,
        })
    }

    /// Short label such as `pgd20`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "fgsm".into(),
            k => format!("{}{}", k.name(), self.j_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("attack epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.j_max < 1 {
            return Err(Error::Config("attack j_max must be >= 1".into()));
        }
        let alpha = self.step_size();
        if !(alpha > 0.0) && self.epsilon > 0.0 {
            return Err(Error::Config(format!("attack alpha must be > 0, got {alpha}")));
        }
        if !(self.momentum_mu >= 0.0) {
            return Err(Error::Config("momentum_mu must be >= 0".into()));
        }
        if self.kind == AttackKind::Fgsm && (self.j_max != 1 || self.random_start) {
            return Err(Error::Config("fgsm is single-step without random start".into()));
        }
        if let Some((lo, hi)) = self.clip_bounds {
            if !(lo < hi) {
                return Err(Error::Config(format!("clip bounds ({lo}, {hi}) are empty")));
            }
        }
        match (self.supervision, self.loss) {
            (Supervision::Labels, AttackLoss::Ce) => Ok(()),
            (Supervision::Labels, l) => Err(Error::Config(format!(
                "label supervision uses cross-entropy, got {l:?}"
            ))),
            (Supervision::SelfLogits, AttackLoss::Ce) => Err(Error::Config(
                "self-supervised attacks need a logit consistency loss (kl, l1, l2)".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Clamps `x` into the epsilon-ball around `x_orig`, then into `clip`.
pub fn project_linf(x: &Tensor, x_orig: &Tensor, epsilon: f64, clip: Option<(f64, f64)>) -> Result<Tensor> {
    if x.shape() != x_orig.shape() {
        return Err(Error::ShapeMismatch {
            op: "project_linf",
            shapes: vec![x.shape().to_vec(), x_orig.shape().to_vec()],
        });
    }
    let data = x
        .data()
        .iter()
        .zip(x_orig.data())
        .map(|(&v, &o)| {
            let v = v.max(o - epsilon).min(o + epsilon);
            match clip {
                Some((lo, hi)) => v.max(lo).min(hi),
                None => v,
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// What the attack loss is measured against.
enum Target<'a> {
    Labels(&'a [usize]),
    Reference(&'a Tensor),
}

fn loss_gradient(model: &UdaModel, x: &Tensor, cfg: &AttackConfig, target: &Target) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let logits = bound.forward(&mut tape, xv, Branch::ClassLogits, cfg.bn_mode)?;
    let loss = match target {
        Target::Labels(y) => nn::cross_entropy(&mut tape, logits, y)?,
        Target::Reference(r) => {
            let rv = tape.constant((*r).clone());
            match cfg.loss {
                AttackLoss::Kl => nn::kl_consistency(&mut tape, logits, rv, cfg.kl_direction)?,
                AttackLoss::L1 => nn::logit_distance(&mut tape, DistanceKind::L1, logits, rv)?,
                AttackLoss::L2 => nn::logit_distance(&mut tape, DistanceKind::L2, logits, rv)?,
                AttackLoss::Ce => unreachable!("rejected by validate"),
            }
        }
    };
    tape.input_gradient(loss, xv)
}

/// Generates adversarial examples for the batch `x`.
///
/// With label supervision `labels` must be given; with self-supervision
/// `reference_logits` (the clean logits C(x), held fixed) must be given and
/// `labels` is never read.
pub fn generate(
    model: &UdaModel,
    x: &Tensor,
    cfg: &AttackConfig,
    labels: Option<&[usize]>,
    reference_logits: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let target = match cfg.supervision {
        Supervision::Labels => Target::Labels(
            labels.ok_or_else(|| Error::Config("label-supervised attack called without labels".into()))?,
        ),
        Supervision::SelfLogits => Target::Reference(reference_logits.ok_or_else(|| {
            Error::Config("self-supervised attack called without reference logits".into())
        })?),
    };
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = cfg.epsilon;
    let alpha = cfg.step_size();
    let mut adv = x.clone();
    if cfg.random_start {
        let noisy = adv.data().iter().map(|v| v + rng.random_range(-eps..=eps)).collect();
        adv = project_linf(&Tensor::new(x.shape().to_vec(), noisy)?, x, eps, cfg.clip_bounds)?;
    }
    let cols = x.cols();
    let mut momentum = vec![0.0; x.numel()];
    for _ in 0..cfg.j_max {
        let grad = loss_gradient(model, &adv, cfg, &target)?;
        let direction: Vec<f64> = match cfg.kind {
            AttackKind::Mifgsm => {
                for (m_row, g_row) in momentum.chunks_mut(cols).zip(grad.data().chunks(cols)) {
                    let l1: f64 = g_row.iter().map(|v| v.abs()).sum();
                    for (m, g) in m_row.iter_mut().zip(g_row) {
                        let scaled = if l1 > 0.0 { g / l1 } else { 0.0 };
                        *m = cfg.momentum_mu * *m + scaled;
                    }
                }
                momentum.iter().map(|&m| sign(m)).collect()
            }
            _ => grad.data().iter().map(|&g| sign(g)).collect(),
        };
        let stepped = adv.data().iter().zip(&direction).map(|(v, d)| v + alpha * d).collect();
        adv = project_linf(&Tensor::new(x.shape().to_vec(), stepped)?, x, eps, cfg.clip_bounds)?;
    }
    Ok(adv)
}

/// Crafts examples on `substitute` and classifies them with `target`.
///
/// Only the substitute's gradients are used.
pub fn transfer_attack(
    substitute: &UdaModel,
    target: &UdaModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if substitute.input_dim() != target.input_dim() || x.cols() != target.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "transfer_attack",
            shapes: vec![
                vec![substitute.input_dim()],
                vec![target.input_dim()],
                x.shape().to_vec(),
            ],
        });
    }
    let adv = generate(substitute, x, cfg, Some(labels), None, rng)?;
    let preds = target.predict(&adv)?;
    Ok((adv, preds))
}
