//! Experiment orchestration: train every (method, seed) pair, evaluate it,
//! and persist records, checkpoints and tables.
//!
//! Grid points run in parallel on the rayon pool; each one is sequential and
//! seeded only by its own seed, and results are collected in grid order, so
//! outputs do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use udalab_core::data::DomainDataset;
use udalab_core::nn::{checkpoint, ModelSpec, UdaModel};
use udalab_core::objectives::{pseudo_labeler_fit, train, ObjectiveSpec, PseudoLabeler, TrainConfig, Variant};
use udalab_core::{rng, Error, Result};

use crate::config::ExperimentConfig;
use crate::metrics::{
    black_box_accuracy, budget_sweep, classwise_accuracy, eval_accuracy, feature_distance, SweepTable,
};
use crate::record::{write_classwise_csv, write_jsonl, write_metrics_csv, MetricsRecord};
use crate::report::emit_report;
use crate::sanity::{sanity_suite, SanityReport};

/// Label for deriving the substitute model's seed from the run seed.
pub const SUBSTITUTE_SEED_LABEL: u64 = 0x5b5;

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CLASSWISE_CSV: &str = "classwise.csv";
pub const FAILURE_JSON: &str = "failure.json";
pub const SANITY_JSON: &str = "sanity.json";
pub const SWEEP_DIR: &str = "sweeps";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything shared by the methods trained for one seed.
pub struct SeedContext {
    pub seed: u64,
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub model_spec: ModelSpec,
    pub train: TrainConfig,
    /// Naturally trained model from an independent seed, used for transfer attacks.
    pub substitute: UdaModel,
    pub pseudo: Option<PseudoLabeler>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub method: ObjectiveSpec,
    pub seed: u64,
    pub model: UdaModel,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

pub struct ExperimentRun {
    pub records: Vec<MetricsRecord>,
    pub models: Vec<TrainedModel>,
    pub contexts: Vec<SeedContext>,
}

impl ExperimentRun {
    pub fn model(&self, method: &str, seed: u64) -> Option<&UdaModel> {
        self.models
            .iter()
            .find(|m| m.seed == seed && m.method.summary() == method)
            .map(|m| &m.model)
    }

    pub fn context(&self, seed: u64) -> Option<&SeedContext> {
        self.contexts.iter().find(|c| c.seed == seed)
    }
}

#[derive(Serialize)]
struct Failure<'a> {
    experiment_id: &'a str,
    method: String,
    seed: u64,
    error: String,
}

/// Replaces characters that do not belong in file names.
pub fn file_stem(method: &str) -> String {
    method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64, methods: &[ObjectiveSpec]) -> Result<SeedContext> {
    let (source, target) = cfg.data.load(seed, &cfg.base_dir)?;
    let model_spec = ModelSpec {
        input_dim: source.dim(),
        classes: source.classes().max(target.classes()),
        ..cfg.model.clone()
    };
    model_spec.validate()?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let labeled = source.labeled()?;
    let unlabeled = target.unlabeled();
    let sub_cfg = TrainConfig {
        seed: rng::derive_seed(seed, SUBSTITUTE_SEED_LABEL),
        ..train_cfg.clone()
    };
    let natural = ObjectiveSpec::new(Variant::Natural, cfg.eval.reference_attack.clone());
    let substitute = train(&labeled, &unlabeled, &natural, &model_spec, &sub_cfg, None)?.model;
    let pseudo = if methods.iter().any(|m| m.variant == Variant::PseudoLabel) {
        Some(pseudo_labeler_fit(&labeled, &unlabeled, &model_spec, &train_cfg)?)
    } else {
        None
    };
    Ok(SeedContext {
        seed,
        source,
        target,
        model_spec,
        train: train_cfg,
        substitute,
        pseudo,
    })
}

pub fn train_method(ctx: &SeedContext, method: &ObjectiveSpec) -> Result<TrainedModel> {
    let t0 = Instant::now();
    let pseudo = ctx.pseudo.as_ref().map(|p| p.labels.as_slice());
    let out = train(
        &ctx.source.labeled()?,
        &ctx.target.unlabeled(),
        method,
        &ctx.model_spec,
        &ctx.train,
        pseudo,
    )?;
    Ok(TrainedModel {
        method: method.clone(),
        seed: ctx.seed,
        model: out.model,
        final_loss: out.history.last().map(|h| h.mean_loss).unwrap_or(f64::NAN),
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Evaluates a trained model on the labeled target data.
pub fn evaluate(cfg: &ExperimentConfig, ctx: &SeedContext, trained: &TrainedModel) -> Result<MetricsRecord> {
    let t0 = Instant::now();
    let (model, ds, seed) = (&trained.model, &ctx.target, ctx.seed);
    let mut robust_acc = BTreeMap::new();
    for attack in &cfg.eval.attacks {
        robust_acc.insert(attack.label(), eval_accuracy(model, ds, Some(attack), seed)?);
    }
    if let Some(bb) = &cfg.eval.black_box {
        robust_acc.insert(
            "black_box".to_string(),
            black_box_accuracy(&ctx.substitute, model, ds, bb, seed)?,
        );
    }
    let reference = &cfg.eval.reference_attack;
    let per_class_acc = if cfg.eval.classwise {
        Some(classwise_accuracy(model, ds, Some(reference), seed)?)
    } else {
        None
    };
    let pseudo_label_acc = match (&ctx.pseudo, trained.method.variant) {
        (Some(p), Variant::PseudoLabel) => {
            let y = ds.eval_labels().unwrap_or_default();
            Some(p.labels.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
        }
        _ => None,
    };
    let record = MetricsRecord {
        experiment_id: cfg.experiment_id.clone(),
        method: trained.method.summary(),
        variant: trained.method.variant.name().to_string(),
        batch_mode: trained.method.batch_mode().name().to_string(),
        lambda: trained.method.lambda_weight,
        seed,
        clean_acc: eval_accuracy(model, ds, None, seed)?,
        robust_acc,
        feature_distance: feature_distance(model, ds, reference, seed)?,
        per_class_acc,
        pseudo_label_acc,
        final_train_loss: trained.final_loss,
        wall_time_s: trained.wall_time_s + t0.elapsed().as_secs_f64(),
    };
    record.validate()?;
    Ok(record)
}

fn write_failure(cfg: &ExperimentConfig, method: String, seed: u64, e: &Error) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let failure = Failure {
        experiment_id: &cfg.experiment_id,
        method,
        seed,
        error: e.to_string(),
    };
    let text = serde_json::to_string_pretty(&failure).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(cfg.output_dir.join(FAILURE_JSON), text)?;
    Ok(())
}

fn contexts(cfg: &ExperimentConfig, methods: &[ObjectiveSpec]) -> Result<Vec<SeedContext>> {
    let results: Vec<Result<SeedContext>> = cfg.seeds.par_iter().map(|&s| prepare_seed(cfg, s, methods)).collect();
    let mut out = Vec::with_capacity(results.len());
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(c) => out.push(c),
            Err(e) => {
                write_failure(cfg, "substitute".into(), seed, &e)?;
                return Err(e);
            }
        }
    }
    Ok(out)
}

/// Trains every method on every seed. On the first failure a diagnostic is
/// written to `failure.json` and the error is returned.
fn train_grid(cfg: &ExperimentConfig, ctxs: &[SeedContext], methods: &[ObjectiveSpec]) -> Result<Vec<TrainedModel>> {
    let grid: Vec<(&SeedContext, &ObjectiveSpec)> =
        ctxs.iter().flat_map(|c| methods.iter().map(move |m| (c, m))).collect();
    let results: Vec<Result<TrainedModel>> = grid.par_iter().map(|(c, m)| train_method(c, m)).collect();
    let mut out = Vec::with_capacity(results.len());
    for ((c, m), r) in grid.iter().zip(results) {
        match r {
            Ok(t) => out.push(t),
            Err(e) => {
                write_failure(cfg, m.summary(), c.seed, &e)?;
                return Err(e);
            }
        }
    }
    Ok(out)
}

fn sweep_methods(cfg: &ExperimentConfig, methods: &[ObjectiveSpec]) -> Vec<ObjectiveSpec> {
    methods
        .iter()
        .filter(|m| cfg.sweep.methods.is_empty() || cfg.sweep.methods.contains(&m.summary()))
        .cloned()
        .collect()
}

fn write_sweeps(cfg: &ExperimentConfig, ctxs: &[SeedContext], models: &[TrainedModel]) -> Result<Vec<(String, u64, SweepTable)>> {
    let s = &cfg.sweep;
    let jobs: Vec<&TrainedModel> = models
        .iter()
        .filter(|m| s.methods.is_empty() || s.methods.contains(&m.method.summary()))
        .collect();
    let tables: Vec<Result<(String, u64, SweepTable)>> = jobs
        .par_iter()
        .map(|t| {
            let ctx = ctxs.iter().find(|c| c.seed == t.seed).expect("context for every seed");
            let table = budget_sweep(&t.model, &ctx.target, &s.base, &s.epsilons, &s.j_max, t.seed)?;
            Ok((t.method.summary(), t.seed, table))
        })
        .collect();
    let tables = tables.into_iter().collect::<Result<Vec<_>>>()?;
    let dir = cfg.output_dir.join(SWEEP_DIR);
    std::fs::create_dir_all(&dir)?;
    for (method, seed, table) in &tables {
        let file = std::fs::File::create(dir.join(format!("{}__seed{seed}.csv", file_stem(method))))?;
        table.write_csv(file)?;
    }
    Ok(tables)
}

fn checkpoint_path(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join(format!("{}__seed{seed}.ckpt", file_stem(method)))
}

/// Trains, evaluates and persists the full experiment, then writes the report.
///
/// Outputs under `output_dir`: `metrics.jsonl`, `metrics.csv`,
/// `classwise.csv`, `checkpoints/`, `sweeps/` (when a budget grid is set)
/// and the report files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let methods = cfg.expanded_methods();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ctxs = contexts(cfg, &methods)?;
    let models = train_grid(cfg, &ctxs, &methods)?;
    let records: Vec<Result<MetricsRecord>> = models
        .par_iter()
        .map(|t| {
            let ctx = ctxs.iter().find(|c| c.seed == t.seed).expect("context for every seed");
            evaluate(cfg, ctx, t)
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    let out = &cfg.output_dir;
    write_jsonl(&records, out.join(METRICS_JSONL))?;
    write_metrics_csv(&records, out.join(METRICS_CSV))?;
    if cfg.eval.classwise {
        write_classwise_csv(&records, out.join(CLASSWISE_CSV))?;
    }
    let ckpt = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt)?;
    for t in &models {
        checkpoint::save(&t.model, checkpoint_path(&ckpt, &t.method.summary(), t.seed))?;
    }
    for c in &ctxs {
        checkpoint::save(&c.substitute, checkpoint_path(&ckpt, "substitute", c.seed))?;
    }
    if !cfg.sweep.epsilons.is_empty() {
        write_sweeps(cfg, &ctxs, &models)?;
    }
    emit_report(out)?;
    Ok(ExperimentRun {
        records,
        models,
        contexts: ctxs,
    })
}

/// Trains the sweep methods and writes only the budget sweep tables and plots.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, u64, SweepTable)>> {
    cfg.validate()?;
    if cfg.sweep.epsilons.is_empty() {
        return Err(Error::Config("sweep.epsilons and sweep.j_max are required for a sweep".into()));
    }
    let methods = sweep_methods(cfg, &cfg.expanded_methods());
    if methods.is_empty() {
        return Err(Error::Config("sweep.methods matches no configured method".into()));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ctxs = contexts(cfg, &methods)?;
    let models = train_grid(cfg, &ctxs, &methods)?;
    let tables = write_sweeps(cfg, &ctxs, &models)?;
    crate::report::render_sweeps(&cfg.output_dir)?;
    Ok(tables)
}

/// Runs the sanity suite per seed with the natural method as the
/// undefended model and the first other method as the defended one.
pub fn run_sanity(cfg: &ExperimentConfig) -> Result<Vec<(u64, SanityReport)>> {
    cfg.validate()?;
    let all = cfg.expanded_methods();
    let natural = all
        .iter()
        .find(|m| m.variant == Variant::Natural)
        .cloned()
        .unwrap_or_else(|| ObjectiveSpec::new(Variant::Natural, cfg.eval.reference_attack.clone()));
    let defended = all
        .iter()
        .find(|m| m.variant != Variant::Natural)
        .cloned()
        .ok_or_else(|| Error::Config("sanity needs at least one non-natural method".into()))?;
    let methods = vec![natural, defended];
    let ctxs = contexts(cfg, &methods)?;
    let models = train_grid(cfg, &ctxs, &methods)?;
    let reports: Vec<Result<(u64, SanityReport)>> = ctxs
        .par_iter()
        .map(|c| {
            let pick = |i: usize| {
                models
                    .iter()
                    .find(|t| t.seed == c.seed && t.method == methods[i])
                    .map(|t| &t.model)
                    .expect("trained for every seed")
            };
            let report = sanity_suite(pick(0), pick(1), &c.substitute, &c.target, &cfg.sanity, c.seed)?;
            Ok((c.seed, report))
        })
        .collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let json: Vec<_> = reports
        .iter()
        .map(|(s, r)| serde_json::json!({ "seed": s, "checks": r.checks }))
        .collect();
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(cfg.output_dir.join(SANITY_JSON), text)?;
    Ok(reports)
}
