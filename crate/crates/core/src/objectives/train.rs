use std::collections::BTreeMap;

use serde::Serialize;

use super::spec::{ObjectiveSpec, TrainConfig, Variant};
use super::step::{compute_objective, make_adversarial_minibatch};
use crate::attacks::AttackConfig;
use crate::autodiff::{Tape, Tensor};
use crate::data::{batch_indices, LabeledData, UnlabeledData};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, UdaModel};
use crate::rng;

/// Mean loss and mean unweighted terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UdaModel,
    pub history: Vec<EpochRecord>,
}

/// A natural-variant model whose target predictions serve as pseudo labels.
#[derive(Debug, Clone)]
pub struct PseudoLabeler {
    pub model: UdaModel,
    /// `argmax C(x_t)` for every target row, fixed once at fit time.
    pub labels: Vec<usize>,
}

/// Trains the natural variant with the given budget and freezes its target
/// predictions.
pub fn pseudo_labeler_fit(
    source: &LabeledData,
    target: &UnlabeledData,
    model_spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<PseudoLabeler> {
    let spec = ObjectiveSpec::new(Variant::Natural, AttackConfig::fgsm(0.0));
    let out = train(source, target, &spec, model_spec, cfg, None)?;
    let labels = out.model.predict(&target.features)?;
    Ok(PseudoLabeler {
        model: out.model,
        labels,
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NumericOverflow { op } => Error::Divergence {
            epoch,
            step,
            reason: format!("non-finite value in {op}"),
        },
        Error::InvalidTensor(m) => Error::Divergence { epoch, step, reason: m },
        other => other,
    }
}

/// Trains a fresh model on labeled source and unlabeled target data.
///
/// Each epoch visits the shuffled source once; the target is shuffled on its
/// own schedule and restarts when exhausted. Every step crafts the variant's
/// adversarial sub-batches against the current weights, takes one SGD step
/// with momentum on the objective, then folds each normalization group's
/// batch statistics into the running estimates in group order.
///
/// `pseudo_labels` (one per target row) are required by the pseudo-label
/// variant and ignored otherwise.
pub fn train(
    source: &LabeledData,
    target: &UnlabeledData,
    spec: &ObjectiveSpec,
    model_spec: &ModelSpec,
    cfg: &TrainConfig,
    pseudo_labels: Option<&[usize]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    let mut ms = model_spec.clone();
    ms.grl_coefficient = cfg.grl_coefficient;
    ms.validate()?;
    if source.features.cols() != ms.input_dim || target.features.cols() != ms.input_dim {
        return Err(Error::ShapeMismatch {
            op: "train",
            shapes: vec![
                source.features.shape().to_vec(),
                target.features.shape().to_vec(),
                vec![ms.input_dim],
            ],
        });
    }
    if source.classes != ms.classes {
        return Err(Error::Config(format!(
            "source has {} classes but the model has {}",
            source.classes, ms.classes
        )));
    }
    if spec.variant.layout().ce_pseudo_target {
        match pseudo_labels {
            None => return Err(Error::Config("pseudo-label variant needs a fitted pseudo-labeler".into())),
            Some(p) if p.len() != target.len() => {
                return Err(Error::InvalidArgument(format!(
                    "{} pseudo labels for {} target rows",
                    p.len(),
                    target.len()
                )))
            }
            _ => {}
        }
    }

    let mut model = UdaModel::init(&ms, cfg.seed)?;
    let mut attack_rng = rng::seeded(cfg.seed, rng::stream::ATTACK);
    let target_seed = rng::derive_seed(cfg.seed, rng::stream::TARGET_DATA);
    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();

    let mut target_epoch = 0u64;
    let mut target_queue = batch_indices(target.len(), cfg.batch_size, target_seed, target_epoch)?.into_iter();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let src_batches = batch_indices(source.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        for (step, s_idx) in src_batches.iter().enumerate() {
            let t_idx = match target_queue.next() {
                Some(b) => b,
                None => {
                    target_epoch += 1;
                    target_queue =
                        batch_indices(target.len(), cfg.batch_size, target_seed, target_epoch)?.into_iter();
                    target_queue.next().expect("target has at least one batch")
                }
            };
            let sx = source.features.select_rows(s_idx)?;
            let sy: Vec<usize> = s_idx.iter().map(|&i| source.labels[i]).collect();
            let tx = target.features.select_rows(&t_idx)?;
            let tp: Option<Vec<usize>> = pseudo_labels.map(|p| t_idx.iter().map(|&i| p[i]).collect());

            let batch = make_adversarial_minibatch(&model, spec, &sx, &sy, &tx, tp.as_deref(), &mut attack_rng)
                .map_err(|e| diverged(epoch, step, e))?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let out = compute_objective(&mut tape, &bound, &batch, spec).map_err(|e| diverged(epoch, step, e))?;
            let grads = tape.backward(out.loss).map_err(|e| diverged(epoch, step, e))?;
            let loss = tape.value(out.loss).item().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("loss = {loss}"),
                });
            }
            loss_sum += loss;
            for (term, v) in &out.terms {
                *term_sums.entry(term.name()).or_default() += tape.value(*v).item().unwrap_or(f64::NAN);
            }
            let param_grads: Vec<Option<Tensor>> =
                bound.param_vars().iter().map(|v| grads.get(*v).cloned()).collect();
            drop(bound);

            for ((p, vel), g) in model.params_mut().into_iter().zip(velocity.iter_mut()).zip(param_grads) {
                let Some(g) = g else { continue };
                let v_new: Vec<f64> = vel
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, g)| cfg.sgd_momentum * v + g)
                    .collect();
                let p_new: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(&v_new)
                    .map(|(w, v)| w - cfg.learning_rate * v)
                    .collect();
                let shape = p.shape().to_vec();
                *vel = Tensor::new(shape.clone(), v_new).map_err(|e| diverged(epoch, step, e))?;
                *p = Tensor::new(shape, p_new).map_err(|e| diverged(epoch, step, e))?;
            }
            for stats in &out.group_stats {
                model.update_running_stats(stats);
            }
        }
        let steps = src_batches.len();
        history.push(EpochRecord {
            epoch,
            steps,
            mean_loss: loss_sum / steps as f64,
            terms: term_sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
        });
    }
    Ok(TrainOutcome { model, history })
}
