use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackLoss};
use crate::error::{Error, Result};
use crate::nn::KlDirection;

/// The four kinds of sub-batch a training step can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    /// Clean source.
    #[serde(rename = "x_s")]
    Xs,
    /// Adversarial source.
    #[serde(rename = "x_s_adv")]
    XsAdv,
    /// Clean target.
    #[serde(rename = "x_t")]
    Xt,
    /// Adversarial target.
    #[serde(rename = "x_t_adv")]
    XtAdv,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Xs, Tag::XsAdv, Tag::Xt, Tag::XtAdv];

    pub fn name(&self) -> &'static str {
        match self {
            Tag::Xs => "x_s",
            Tag::XsAdv => "x_s_adv",
            Tag::Xt => "x_t",
            Tag::XtAdv => "x_t_adv",
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Tag::XsAdv | Tag::XtAdv)
    }

    pub fn is_source(&self) -> bool {
        matches!(self, Tag::Xs | Tag::XsAdv)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyLoss {
    Kl,
    L1,
    L2,
}

impl ConsistencyLoss {
    pub fn attack_loss(&self) -> AttackLoss {
        match self {
            ConsistencyLoss::Kl => AttackLoss::Kl,
            ConsistencyLoss::L1 => AttackLoss::L1,
            ConsistencyLoss::L2 => AttackLoss::L2,
        }
    }
}

/// Training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Natural,
    ConvAt,
    PseudoLabel,
    Ssat(ConsistencyLoss),
    SsatStt1,
    SsatStt2,
    SsatSstt1,
    SsatSstt2,
    SsatSstt3,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Natural,
        Variant::ConvAt,
        Variant::PseudoLabel,
        Variant::Ssat(ConsistencyLoss::Kl),
        Variant::Ssat(ConsistencyLoss::L1),
        Variant::Ssat(ConsistencyLoss::L2),
        Variant::SsatStt1,
        Variant::SsatStt2,
        Variant::SsatSstt1,
        Variant::SsatSstt2,
        Variant::SsatSstt3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Natural => "natural",
            Variant::ConvAt => "conv_at",
            Variant::PseudoLabel => "pseudo_label",
            Variant::Ssat(ConsistencyLoss::Kl) => "ssat_kl",
            Variant::Ssat(ConsistencyLoss::L1) => "ssat_l1",
            Variant::Ssat(ConsistencyLoss::L2) => "ssat_l2",
            Variant::SsatStt1 => "ssat_stt_1",
            Variant::SsatStt2 => "ssat_stt_2",
            Variant::SsatSstt1 => "ssat_sstt_1",
            Variant::SsatSstt2 => "ssat_sstt_2",
            Variant::SsatSstt3 => "ssat_sstt_3",
        }
    }

    /// Which sub-batches and loss terms the variant uses.
    pub fn layout(&self) -> VariantLayout {
        use Tag::*;
        let base = |tags: &[Tag], da: &[(Tag, Tag)]| VariantLayout {
            tags: tags.to_vec(),
            ce_source: tags.contains(&Xs),
            ce_source_adv: tags.contains(&XsAdv),
            ce_pseudo_target: false,
            consistency: Some(ConsistencyLoss::Kl),
            da_pairs: da.to_vec(),
        };
        match self {
            Variant::Natural => VariantLayout {
                consistency: None,
                ..base(&[Xs, Xt], &[(Xs, Xt)])
            },
            Variant::ConvAt => VariantLayout {
                consistency: None,
                ..base(&[XsAdv, Xt], &[(XsAdv, Xt)])
            },
            Variant::PseudoLabel => VariantLayout {
                consistency: None,
                ce_pseudo_target: true,
                ..base(&[Xs, XtAdv], &[(Xs, XtAdv)])
            },
            Variant::Ssat(loss) => VariantLayout {
                consistency: Some(*loss),
                ..base(&[Xs, XtAdv], &[(Xs, XtAdv)])
            },
            Variant::SsatStt1 => base(&[Xs, Xt, XtAdv], &[(Xs, Xt)]),
            Variant::SsatStt2 => base(&[Xs, Xt, XtAdv], &[(Xs, Xt), (Xs, XtAdv)]),
            Variant::SsatSstt1 => base(&[Xs, XsAdv, Xt, XtAdv], &[(Xs, Xt), (XsAdv, XtAdv)]),
            Variant::SsatSstt2 => base(&[Xs, XsAdv, Xt, XtAdv], &[(Xs, XtAdv), (XsAdv, Xt)]),
            Variant::SsatSstt3 => base(
                &[Xs, XsAdv, Xt, XtAdv],
                &[(Xs, Xt), (Xs, XtAdv), (XsAdv, Xt), (XsAdv, XtAdv)],
            ),
        }
    }

    /// Default normalization grouping for this variant.
    pub fn default_batch_mode(&self) -> BatchMode {
        let tags = self.layout().tags;
        if [Tag::Xs, Tag::Xt, Tag::XtAdv].iter().all(|t| tags.contains(t)) {
            BatchMode::CleanAdvSplit
        } else {
            BatchMode::Joint
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .or(match s {
                "ssat" => Some(Variant::Ssat(ConsistencyLoss::Kl)),
                "artuda" => Some(Variant::SsatStt2),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown objective variant `{s}`")))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

/// Sub-batches and loss terms of one variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantLayout {
    /// Sub-batches fed to the model, in canonical order.
    pub tags: Vec<Tag>,
    /// `L_CE(C(x_s), y_s)`.
    pub ce_source: bool,
    /// `L_CE(C(x~_s), y_s)`.
    pub ce_source_adv: bool,
    /// `L_CE(C(x~_t), y'_t)` with pseudo labels.
    pub ce_pseudo_target: bool,
    /// Consistency between `C(x~_t)` and the detached clean logits `C(x_t)`.
    pub consistency: Option<ConsistencyLoss>,
    /// Domain-adversarial terms as (source side, target side).
    pub da_pairs: Vec<(Tag, Tag)>,
}

/// Which sub-batches share batch-norm statistics during a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchMode {
    /// `[x_s, x_t], [x~_t]`; clean and adversarial data normalized apart.
    #[serde(rename = "st_tadv")]
    CleanAdvSplit,
    /// `[x_s], [x_t, x~_t]`; source and target normalized apart.
    #[serde(rename = "s_ttadv")]
    SourceTargetSplit,
    /// `[x_s], [x_t], [x~_t]`; every sub-batch on its own.
    #[serde(rename = "s_t_tadv")]
    AllSplit,
    /// `[x_s, x_t, x~_t]`; one shared group.
    #[serde(rename = "sttadv")]
    Shared,
    /// Every sub-batch present in one group, for variants outside the
    /// `{x_s, x_t, x~_t}` study.
    #[serde(rename = "joint")]
    Joint,
}

impl BatchMode {
    pub const STUDY: [BatchMode; 4] = [
        BatchMode::CleanAdvSplit,
        BatchMode::SourceTargetSplit,
        BatchMode::AllSplit,
        BatchMode::Shared,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BatchMode::CleanAdvSplit => "st_tadv",
            BatchMode::SourceTargetSplit => "s_ttadv",
            BatchMode::AllSplit => "s_t_tadv",
            BatchMode::Shared => "sttadv",
            BatchMode::Joint => "joint",
        }
    }
}

/// A training objective: variant, consistency weight, normalization
/// grouping and the attack used to craft the adversarial sub-batches.
///
/// `inner_attack` supplies kind, budget and step schedule. Source examples
/// are always crafted with label supervision and cross-entropy; target
/// examples with self-supervision and the variant's consistency loss
/// (pseudo labels for [`Variant::PseudoLabel`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    #[serde(default = "one")]
    pub lambda_weight: f64,
    #[serde(default)]
    pub batch_mode: Option<BatchMode>,
    pub inner_attack: AttackConfig,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

fn one() -> f64 {
    1.0
}

impl ObjectiveSpec {
    pub fn new(variant: Variant, inner_attack: AttackConfig) -> Self {
        Self {
            variant,
            lambda_weight: 1.0,
            batch_mode: None,
            inner_attack,
            kl_direction: KlDirection::CleanToAdv,
        }
    }

    /// SSAT-s-t-t~-2 under the shared `[x_s, x_t, x~_t]` normalization group.
    pub fn artuda(inner_attack: AttackConfig) -> Self {
        Self {
            batch_mode: Some(BatchMode::Shared),
            ..Self::new(Variant::SsatStt2, inner_attack)
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_weight = lambda;
        self
    }

    pub fn with_batch_mode(mut self, mode: BatchMode) -> Self {
        self.batch_mode = Some(mode);
        self
    }

    pub fn batch_mode(&self) -> BatchMode {
        self.batch_mode.unwrap_or_else(|| self.variant.default_batch_mode())
    }

    /// Human-readable method name, e.g. `artuda` or `ssat_stt_2[s_ttadv]`.
    pub fn summary(&self) -> String {
        let mode = self.batch_mode();
        let base = if self.variant == Variant::SsatStt2 && mode == BatchMode::Shared {
            "artuda".to_string()
        } else if mode == self.variant.default_batch_mode() {
            self.variant.name().to_string()
        } else {
            format!("{}[{}]", self.variant.name(), mode.name())
        };
        if self.lambda_weight != 1.0 && self.variant.layout().consistency.is_some() {
            format!("{base}@lambda={}", self.lambda_weight)
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_weight >= 0.0) || !self.lambda_weight.is_finite() {
            return Err(Error::Config(format!(
                "lambda_weight must be >= 0, got {}",
                self.lambda_weight
            )));
        }
        if self.variant != Variant::Natural {
            let mut probe = self.inner_attack.clone();
            probe.supervision = crate::attacks::Supervision::Labels;
            probe.loss = AttackLoss::Ce;
            probe.validate()?;
        }
        super::compose_norm_groups(self.batch_mode(), &self.variant.layout().tags).map(|_| ())
    }

    /// Attack used on source sub-batches.
    pub fn source_attack(&self) -> AttackConfig {
        let mut a = self.inner_attack.clone();
        a.supervision = crate::attacks::Supervision::Labels;
        a.loss = AttackLoss::Ce;
        a
    }

    /// Attack used on target sub-batches.
    pub fn target_attack(&self) -> AttackConfig {
        match self.variant.layout().consistency {
            _ if self.variant == Variant::PseudoLabel => self.source_attack(),
            Some(c) => {
                let mut a = self.inner_attack.clone().self_supervised(c.attack_loss());
                a.kl_direction = self.kl_direction;
                a
            }
            None => self.source_attack(),
        }
    }
}

/// Optimizer and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub seed: u64,
    pub grl_coefficient: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            sgd_momentum: 0.9,
            seed: 0,
            grl_coefficient: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("train.sgd_momentum must be in [0, 1)".into()));
        }
        if !(self.grl_coefficient >= 0.0) {
            return Err(Error::Config("train.grl_coefficient must be >= 0".into()));
        }
        Ok(())
    }
}
