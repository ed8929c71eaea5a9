use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use udalab_core::{Error, Result};

/// Evaluation results of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment_id: String,
    /// Objective summary, e.g. `artuda` or `ssat_stt_2[s_ttadv]`.
    pub method: String,
    pub variant: String,
    pub batch_mode: String,
    pub lambda: f64,
    pub seed: u64,
    pub clean_acc: f64,
    /// Attack label to robust accuracy.
    pub robust_acc: BTreeMap<String, f64>,
    pub feature_distance: f64,
    /// Per-class accuracy under the reference attack; `None` marks classes
    /// absent from the evaluation data.
    #[serde(default)]
    pub per_class_acc: Option<Vec<Option<f64>>>,
    /// Agreement of frozen pseudo labels with the target labels.
    #[serde(default)]
    pub pseudo_label_acc: Option<f64>,
    pub final_train_loss: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Schema(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("clean_acc", self.clean_acc)?;
        for (k, v) in &self.robust_acc {
            unit(k, *v)?;
        }
        for v in self.per_class_acc.iter().flatten().flatten() {
            unit("per_class_acc", *v)?;
        }
        if let Some(p) = self.pseudo_label_acc {
            unit("pseudo_label_acc", p)?;
        }
        if !(self.feature_distance >= 0.0) {
            return Err(Error::Schema(format!("feature_distance = {} is negative", self.feature_distance)));
        }
        if !(self.wall_time_s >= 0.0) {
            return Err(Error::Schema("wall_time_s is negative".into()));
        }
        Ok(())
    }
}

pub fn write_jsonl(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

fn attack_rank(name: &str) -> u8 {
    match name {
        n if n.starts_with("fgsm") => 0,
        n if n.starts_with("pgd") => 1,
        n if n.starts_with("mifgsm") => 2,
        "black_box" => 4,
        _ => 3,
    }
}

/// Attack columns: FGSM, PGD, MI-FGSM, others, then black-box.
pub fn attack_names(records: &[MetricsRecord]) -> Vec<String> {
    let mut names: Vec<String> = records.iter().flat_map(|r| r.robust_acc.keys().cloned()).collect();
    names.sort_by(|a, b| attack_rank(a).cmp(&attack_rank(b)).then_with(|| a.cmp(b)));
    names.dedup();
    names
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv { line: 0, message: e.to_string() }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat table of the records. Wall time is left out so reruns compare equal.
pub fn write_metrics_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let attacks = attack_names(records);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["experiment_id", "method", "variant", "batch_mode", "lambda", "seed", "clean_acc"]
        .map(String::from)
        .to_vec();
    header.extend(attacks.iter().map(|a| format!("robust_{a}")));
    header.extend(["feature_distance", "pseudo_label_acc", "final_train_loss"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![
            r.experiment_id.clone(),
            r.method.clone(),
            r.variant.clone(),
            r.batch_mode.clone(),
            r.lambda.to_string(),
            r.seed.to_string(),
            r.clean_acc.to_string(),
        ];
        row.extend(attacks.iter().map(|a| opt(r.robust_acc.get(a).copied())));
        row.push(r.feature_distance.to_string());
        row.push(opt(r.pseudo_label_acc));
        row.push(r.final_train_loss.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Long table of per-class accuracies: `method,seed,class,accuracy`.
pub fn write_classwise_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["method", "seed", "class", "accuracy"]).map_err(csv_err)?;
    for r in records {
        for (k, a) in r.per_class_acc.iter().flatten().enumerate() {
            w.write_record([r.method.clone(), r.seed.to_string(), k.to_string(), opt(*a)])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
