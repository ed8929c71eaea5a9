//! Accuracy and stability measurements on labeled evaluation data.
//!
//! Every function runs the model in eval mode (running BN statistics) on a
//! borrowed model, so evaluation cannot change parameters or statistics.
//! Attacks draw their randomness from the eval stream of `seed`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use udalab_core::attacks::{self, AttackConfig, Supervision};
use udalab_core::autodiff::Tensor;
use udalab_core::data::DomainDataset;
use udalab_core::nn::UdaModel;
use udalab_core::rng;
use udalab_core::{Error, Result};

use crate::plot;

pub(crate) fn labels(ds: &DomainDataset) -> Result<&[usize]> {
    ds.eval_labels().ok_or_else(|| {
        Error::InvalidArgument(format!("dataset `{}` has no evaluation labels", ds.provenance()))
    })
}

/// Adversarial versions of the dataset's features (or the clean features
/// when `attack` is `None`).
pub fn attacked_features(model: &UdaModel, ds: &DomainDataset, attack: Option<&AttackConfig>, seed: u64) -> Result<Tensor> {
    let y = labels(ds)?;
    let Some(cfg) = attack else {
        return Ok(ds.features().clone());
    };
    let mut r = rng::seeded(seed, rng::stream::EVAL);
    match cfg.supervision {
        Supervision::Labels => attacks::generate(model, ds.features(), cfg, Some(y), None, &mut r),
        Supervision::SelfLogits => {
            let reference = model.predict_logits(ds.features())?;
            attacks::generate(model, ds.features(), cfg, None, Some(&reference), &mut r)
        }
    }
}

fn fraction_correct(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

/// Fraction of correct argmax predictions, on clean or attacked inputs.
pub fn eval_accuracy(model: &UdaModel, ds: &DomainDataset, attack: Option<&AttackConfig>, seed: u64) -> Result<f64> {
    let x = attacked_features(model, ds, attack, seed)?;
    Ok(fraction_correct(&model.predict(&x)?, labels(ds)?))
}

/// Accuracy of `model` on examples crafted against `substitute`.
pub fn black_box_accuracy(
    substitute: &UdaModel,
    model: &UdaModel,
    ds: &DomainDataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    let y = labels(ds)?;
    let mut r = rng::seeded(seed, rng::stream::EVAL);
    let (_, pred) = attacks::transfer_attack(substitute, model, ds.features(), y, attack, &mut r)?;
    Ok(fraction_correct(&pred, y))
}

/// Mean L2 distance between last-layer features of clean and attacked inputs.
pub fn feature_distance(model: &UdaModel, ds: &DomainDataset, attack: &AttackConfig, seed: u64) -> Result<f64> {
    let adv = attacked_features(model, ds, Some(attack), seed)?;
    let f0 = model.predict_features(ds.features())?;
    let f1 = model.predict_features(&adv)?;
    let total: f64 = (0..f0.rows())
        .map(|i| {
            f0.row(i)
                .iter()
                .zip(f1.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / f0.rows() as f64)
}

/// Per-class accuracy; `None` for classes absent from the dataset.
pub fn classwise_accuracy(
    model: &UdaModel,
    ds: &DomainDataset,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let x = attacked_features(model, ds, attack, seed)?;
    let pred = model.predict(&x)?;
    let y = labels(ds)?;
    let mut hits = vec![0usize; ds.classes()];
    let mut counts = vec![0usize; ds.classes()];
    for (p, &t) in pred.iter().zip(y) {
        counts[t] += 1;
        hits[t] += usize::from(*p == t);
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect())
}

/// Robust accuracy over an epsilon by j_max grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub epsilons: Vec<f64>,
    pub j_max: Vec<usize>,
    /// `accuracy[j][e]` for `j_max[j]` and `epsilons[e]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl SweepTable {
    /// Long-format CSV: `j_max,epsilon,accuracy`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv { line: 0, message: e.to_string() };
        out.write_record(["j_max", "epsilon", "accuracy"]).map_err(err)?;
        for (j, row) in self.j_max.iter().zip(&self.accuracy) {
            for (e, a) in self.epsilons.iter().zip(row) {
                out.write_record([j.to_string(), e.to_string(), a.to_string()]).map_err(err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One line per j_max, accuracy against epsilon.
    pub fn write_svg(&self, path: impl AsRef<Path>, title: &str) -> Result<()> {
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .j_max
            .iter()
            .zip(&self.accuracy)
            .map(|(j, row)| {
                (
                    format!("j_max = {j}"),
                    self.epsilons.iter().copied().zip(row.iter().copied()).collect(),
                )
            })
            .collect();
        plot::line_plot(path, title, "epsilon", "robust accuracy", &series)
    }
}

fn ascending<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Robust accuracy of `model` for every (j_max, epsilon) pair, with `base`
/// supplying the attack kind and the remaining settings. The step size
/// follows the default rule for each grid point unless `base.alpha` is set.
pub fn budget_sweep(
    model: &UdaModel,
    ds: &DomainDataset,
    base: &AttackConfig,
    eps_list: &[f64],
    jmax_list: &[usize],
    seed: u64,
) -> Result<SweepTable> {
    if eps_list.is_empty() || jmax_list.is_empty() {
        return Err(Error::InvalidArgument("sweep lists must be non-empty".into()));
    }
    if !ascending(eps_list) || !ascending(jmax_list) {
        return Err(Error::InvalidArgument("sweep lists must be sorted ascending".into()));
    }
    let accuracy = jmax_list
        .iter()
        .map(|&j| {
            eps_list
                .iter()
                .map(|&e| {
                    let cfg = base.clone().with_epsilon(e).with_j_max(j);
                    eval_accuracy(model, ds, Some(&cfg), seed)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        epsilons: eps_list.to_vec(),
        j_max: jmax_list.to_vec(),
        accuracy,
    })
}
