use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use super::groups::{compose_norm_groups, NormalizationGroupPlan};
use super::spec::{ConsistencyLoss, ObjectiveSpec, Tag};
use crate::attacks;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BatchStats, BnMode, BoundModel, Branch, DistanceKind, UdaModel};
use crate::rng::Rng;

/// The sub-batches of one training step, keyed by tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBatch {
    pub parts: BTreeMap<Tag, Tensor>,
    /// Source labels, shared by `x_s` and `x~_s`.
    pub source_labels: Vec<usize>,
    /// Pseudo labels of the target rows (pseudo-label variant only).
    pub pseudo_labels: Option<Vec<usize>>,
    /// The clean target rows, kept even when `x_t` is not a sub-batch since
    /// the consistency term compares against them.
    pub clean_target: Tensor,
}

impl TaggedBatch {
    pub fn tags(&self) -> Vec<Tag> {
        self.parts.keys().copied().collect()
    }

    pub fn get(&self, tag: Tag) -> Result<&Tensor> {
        self.parts
            .get(&tag)
            .ok_or_else(|| Error::InvalidArgument(format!("batch has no {tag} sub-batch")))
    }
}

fn clean_logits(model: &UdaModel, x: &Tensor, mode: BnMode) -> Result<Tensor> {
    match mode {
        BnMode::Eval => model.predict_logits(x),
        BnMode::Train => {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = bound.forward(&mut tape, xv, Branch::ClassLogits, BnMode::Train)?;
            Ok(tape.value(out).clone())
        }
    }
}

/// Builds the sub-batches the variant trains on, crafting the adversarial
/// ones against the current `model`.
///
/// Source examples are attacked with the source labels. Target examples are
/// attacked self-supervised against the clean logits `C(x_t)`, or with the
/// pseudo labels for the pseudo-label variant. Target labels are never
/// available here.
pub fn make_adversarial_minibatch(
    model: &UdaModel,
    spec: &ObjectiveSpec,
    source_x: &Tensor,
    source_y: &[usize],
    target_x: &Tensor,
    pseudo_labels: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<TaggedBatch> {
    if source_y.len() != source_x.rows() {
        return Err(Error::ShapeMismatch {
            op: "make_adversarial_minibatch",
            shapes: vec![source_x.shape().to_vec(), vec![source_y.len()]],
        });
    }
    let layout = spec.variant.layout();
    let pseudo = if layout.ce_pseudo_target {
        let p = pseudo_labels.ok_or_else(|| {
            Error::Config("pseudo-label variant needs a fitted pseudo-labeler".into())
        })?;
        if p.len() != target_x.rows() {
            return Err(Error::ShapeMismatch {
                op: "make_adversarial_minibatch",
                shapes: vec![target_x.shape().to_vec(), vec![p.len()]],
            });
        }
        Some(p.to_vec())
    } else {
        None
    };

    let mut parts = BTreeMap::new();
    for tag in &layout.tags {
        let x = match tag {
            Tag::Xs => source_x.clone(),
            Tag::Xt => target_x.clone(),
            Tag::XsAdv => attacks::generate(model, source_x, &spec.source_attack(), Some(source_y), None, rng)?,
            Tag::XtAdv => {
                let cfg = spec.target_attack();
                if let Some(p) = &pseudo {
                    attacks::generate(model, target_x, &cfg, Some(p), None, rng)?
                } else {
                    let r = clean_logits(model, target_x, cfg.bn_mode)?;
                    attacks::generate(model, target_x, &cfg, None, Some(&r), rng)?
                }
            }
        };
        parts.insert(*tag, x);
    }
    Ok(TaggedBatch {
        parts,
        source_labels: source_y.to_vec(),
        pseudo_labels: pseudo,
        clean_target: target_x.clone(),
    })
}

/// One named, unweighted loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    CeSource,
    CeSourceAdv,
    CePseudoTarget,
    Consistency,
    Domain(Tag, Tag),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::CeSource => "ce_s".into(),
            Term::CeSourceAdv => "ce_s_adv".into(),
            Term::CePseudoTarget => "ce_t_pseudo".into(),
            Term::Consistency => "consistency".into(),
            Term::Domain(a, b) => format!("da({a},{b})"),
        }
    }
}

/// Result of [`compute_objective`].
pub struct ObjectiveOutput {
    /// Scalar training loss.
    pub loss: Var,
    /// Each term before weighting; the consistency term is multiplied by
    /// lambda in `loss`.
    pub terms: Vec<(Term, Var)>,
    pub plan: NormalizationGroupPlan,
    /// Train-mode statistics of each normalization group, in plan order.
    pub group_stats: Vec<Vec<BatchStats>>,
}

/// Assembles the training loss of `spec.variant` on `batch`.
///
/// Sub-batches are concatenated per normalization group and passed through
/// the feature extractor in train mode, so every group is normalized with
/// its own batch statistics. The clean logits in the consistency term are
/// detached.
pub fn compute_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &TaggedBatch,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveOutput> {
    let layout = spec.variant.layout();
    for t in &layout.tags {
        batch.get(*t)?;
    }
    let plan = compose_norm_groups(spec.batch_mode(), &layout.tags)?;

    let mut feats: BTreeMap<Tag, Var> = BTreeMap::new();
    let mut group_stats = Vec::with_capacity(plan.groups.len());
    for group in &plan.groups {
        let parts: Vec<&Tensor> = group.iter().map(|t| &batch.parts[t]).collect();
        let x = tape.constant(Tensor::concat_rows(&parts)?);
        let (f, stats) = bound.features(tape, x, BnMode::Train)?;
        group_stats.push(stats);
        let mut start = 0;
        for (tag, p) in group.iter().zip(&parts) {
            let end = start + p.rows();
            let piece = if group.len() == 1 { f } else { tape.slice(f, start, end)? };
            feats.insert(*tag, piece);
            start = end;
        }
    }

    let mut logits: BTreeMap<Tag, Var> = BTreeMap::new();
    let mut class_logits = |tape: &mut Tape, tag: Tag| -> Result<Var> {
        if let Some(v) = logits.get(&tag) {
            return Ok(*v);
        }
        let v = bound.classify(tape, feats[&tag])?;
        logits.insert(tag, v);
        Ok(v)
    };

    let ys = &batch.source_labels;
    let mut terms = Vec::new();
    if layout.ce_source {
        let l = class_logits(tape, Tag::Xs)?;
        terms.push((Term::CeSource, nn::cross_entropy(tape, l, ys)?));
    }
    if layout.ce_source_adv {
        let l = class_logits(tape, Tag::XsAdv)?;
        terms.push((Term::CeSourceAdv, nn::cross_entropy(tape, l, ys)?));
    }
    if layout.ce_pseudo_target {
        let p = batch
            .pseudo_labels
            .as_deref()
            .ok_or_else(|| Error::Config("pseudo-label variant needs a fitted pseudo-labeler".into()))?;
        let l = class_logits(tape, Tag::XtAdv)?;
        terms.push((Term::CePseudoTarget, nn::cross_entropy(tape, l, p)?));
    }
    if let Some(kind) = layout.consistency {
        let adv = class_logits(tape, Tag::XtAdv)?;
        let clean = if layout.tags.contains(&Tag::Xt) {
            class_logits(tape, Tag::Xt)?
        } else {
            // x_t is not trained on: normalize it with the statistics of the
            // group holding x~_t and detach
            let g = plan.group_of(Tag::XtAdv).expect("x_t_adv is planned");
            let x = tape.constant(batch.clean_target.clone());
            let f = bound.features_with_stats(tape, x, &group_stats[g])?;
            let l = bound.classify(tape, f)?;
            tape.stop_gradient(l)?
        };
        let c = match kind {
            ConsistencyLoss::Kl => nn::kl_consistency(tape, adv, clean, spec.kl_direction)?,
            ConsistencyLoss::L1 => nn::logit_distance(tape, DistanceKind::L1, adv, clean)?,
            ConsistencyLoss::L2 => nn::logit_distance(tape, DistanceKind::L2, adv, clean)?,
        };
        terms.push((Term::Consistency, c));
    }
    let mut domain: BTreeMap<Tag, Var> = BTreeMap::new();
    for &(s, t) in &layout.da_pairs {
        for tag in [s, t] {
            if let Entry::Vacant(e) = domain.entry(tag) {
                e.insert(bound.discriminate(tape, feats[&tag])?);
            }
        }
        terms.push((Term::Domain(s, t), nn::domain_adversarial(tape, domain[&s], domain[&t])?));
    }

    let mut total: Option<Var> = None;
    for (term, v) in &terms {
        let weighted = if *term == Term::Consistency {
            tape.scale(*v, spec.lambda_weight)?
        } else {
            *v
        };
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let loss = total.ok_or_else(|| Error::InvalidArgument("objective has no terms".into()))?;
    Ok(ObjectiveOutput {
        loss,
        terms,
        plan,
        group_stats,
    })
}
