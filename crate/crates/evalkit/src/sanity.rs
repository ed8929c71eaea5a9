//! Checks that robustness numbers are not an artifact of a weak attack.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use udalab_core::attacks::AttackConfig;
use udalab_core::data::DomainDataset;
use udalab_core::nn::UdaModel;
use udalab_core::{Error, Result};

use crate::metrics::{black_box_accuracy, eval_accuracy, labels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanityConfig {
    pub epsilon: f64,
    pub pgd_j_max: usize,
    /// Off by default so PGD and FGSM start from the same clean point.
    pub pgd_random_start: bool,
    pub unbounded_j_max: usize,
    /// Budgets for the monotonicity check, ascending.
    pub eps_grid: Vec<f64>,
    /// Slack above chance allowed for the unbounded attack.
    pub chance_slack: f64,
}

impl Default for SanityConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.15,
            pgd_j_max: 20,
            pgd_random_start: false,
            unbounded_j_max: 100,
            eps_grid: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            chance_slack: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub name: String,
    pub passed: bool,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub checks: Vec<SanityCheck>,
}

impl SanityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&SanityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SanityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let values: Vec<String> = c.measured.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            writeln!(
                f,
                "[{}] {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                values.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Largest per-coordinate range of the dataset's features.
pub fn data_diameter(ds: &DomainDataset) -> f64 {
    let x = ds.features();
    (0..x.cols())
        .map(|j| {
            let col = (0..x.rows()).map(|i| x.row(i)[j]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Accuracy of always predicting the most frequent class.
pub fn chance_level(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

fn check(name: &str, passed: bool, measured: &[(&str, f64)]) -> SanityCheck {
    SanityCheck {
        name: name.to_string(),
        passed,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Runs the four checks:
///
/// - `pgd_below_fgsm`: iterative PGD is at least as strong as FGSM on both
///   models;
/// - `white_box_below_black_box`: white-box PGD on the defended model is at
///   least as strong as the same PGD transferred from the substitute;
/// - `unbounded_reaches_chance`: PGD with a budget equal to the data
///   diameter drives the natural model to at most chance plus the slack,
///   and strictly below its clean accuracy (a model the attack cannot move
///   at all fails);
/// - `monotone_in_epsilon`: accuracy never increases along the budget grid,
///   for both models.
pub fn sanity_suite(
    natural: &UdaModel,
    defended: &UdaModel,
    substitute: &UdaModel,
    ds: &DomainDataset,
    cfg: &SanityConfig,
    seed: u64,
) -> Result<SanityReport> {
    let y = labels(ds)?;
    if cfg.eps_grid.windows(2).any(|w| w[0] >= w[1]) || cfg.eps_grid.is_empty() {
        return Err(Error::Config("sanity.eps_grid must be non-empty and ascending".into()));
    }
    let fgsm = AttackConfig::fgsm(cfg.epsilon);
    let pgd = AttackConfig::pgd(cfg.epsilon, cfg.pgd_j_max).with_random_start(cfg.pgd_random_start);
    let mut checks = Vec::new();

    let nat_fgsm = eval_accuracy(natural, ds, Some(&fgsm), seed)?;
    let nat_pgd = eval_accuracy(natural, ds, Some(&pgd), seed)?;
    let def_fgsm = eval_accuracy(defended, ds, Some(&fgsm), seed)?;
    let def_pgd = eval_accuracy(defended, ds, Some(&pgd), seed)?;
    checks.push(check(
        "pgd_below_fgsm",
        nat_pgd <= nat_fgsm && def_pgd <= def_fgsm,
        &[
            ("natural_fgsm", nat_fgsm),
            ("natural_pgd", nat_pgd),
            ("defended_fgsm", def_fgsm),
            ("defended_pgd", def_pgd),
        ],
    ));

    let transfer = black_box_accuracy(substitute, defended, ds, &pgd, seed)?;
    checks.push(check(
        "white_box_below_black_box",
        def_pgd <= transfer,
        &[("white_box_pgd", def_pgd), ("black_box_pgd", transfer)],
    ));

    let diameter = data_diameter(ds);
    let unbounded = AttackConfig::pgd(diameter, cfg.unbounded_j_max).with_random_start(cfg.pgd_random_start);
    let unb = eval_accuracy(natural, ds, Some(&unbounded), seed)?;
    let clean = eval_accuracy(natural, ds, None, seed)?;
    let chance = chance_level(y, ds.classes());
    checks.push(check(
        "unbounded_reaches_chance",
        unb <= chance + cfg.chance_slack && unb < clean,
        &[("accuracy", unb), ("clean", clean), ("chance", chance), ("epsilon", diameter)],
    ));

    let mut measured = Vec::new();
    let mut monotone = true;
    for (name, model) in [("natural", natural), ("defended", defended)] {
        let mut prev = f64::INFINITY;
        for &e in &cfg.eps_grid {
            let acc = eval_accuracy(model, ds, Some(&pgd.clone().with_epsilon(e)), seed)?;
            monotone &= acc <= prev;
            prev = acc;
            measured.push((format!("{name}@{e}"), acc));
        }
    }
    checks.push(SanityCheck {
        name: "monotone_in_epsilon".into(),
        passed: monotone,
        measured: measured.into_iter().collect(),
    });
    Ok(SanityReport { checks })
}
