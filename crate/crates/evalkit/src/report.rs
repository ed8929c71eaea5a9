//! Seed-aggregated summary tables and plots built from a results directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use udalab_core::objectives::Variant;
use udalab_core::{Error, Result};

use crate::metrics::SweepTable;
use crate::record::{attack_names, read_jsonl, MetricsRecord};
use crate::runner::{METRICS_JSONL, SWEEP_DIR};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const LAMBDA_CSV: &str = "lambda_table.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median and mean of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub median: f64,
    pub mean: f64,
}

impl Aggregate {
    fn of(values: &[f64]) -> Self {
        Self {
            median: median(values),
            mean: mean(values),
        }
    }
}

/// One row of the summary: a method aggregated over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub variant: String,
    pub batch_mode: String,
    pub lambda: f64,
    pub seeds: usize,
    pub clean: Aggregate,
    /// Keyed by attack label; attacks missing from some seeds aggregate the rest.
    pub robust: BTreeMap<String, Aggregate>,
    pub feature_distance: Aggregate,
}

/// Groups records by method in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.method == method).collect();
            let collect = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let mut robust = BTreeMap::new();
            for a in attack_names(records) {
                let v = collect(&|r| r.robust_acc.get(&a).copied());
                if !v.is_empty() {
                    robust.insert(a, Aggregate::of(&v));
                }
            }
            MethodSummary {
                method: method.to_string(),
                variant: rs[0].variant.clone(),
                batch_mode: rs[0].batch_mode.clone(),
                lambda: rs[0].lambda,
                seeds: rs.len(),
                clean: Aggregate::of(&collect(&|r| Some(r.clean_acc))),
                robust,
                feature_distance: Aggregate::of(&collect(&|r| Some(r.feature_distance))),
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv { line: 0, message: e.to_string() }
}

fn write_summary_csv(rows: &[MethodSummary], attacks: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "seeds".into(), "clean_median".into(), "clean_mean".into()];
    for a in attacks {
        header.push(format!("{a}_median"));
        header.push(format!("{a}_mean"));
    }
    header.extend(["feature_distance_median".into(), "feature_distance_mean".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut row = vec![
            r.method.clone(),
            r.seeds.to_string(),
            r.clean.median.to_string(),
            r.clean.mean.to_string(),
        ];
        for a in attacks {
            match r.robust.get(a) {
                Some(g) => row.extend([g.median.to_string(), g.mean.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.extend([r.feature_distance.median.to_string(), r.feature_distance.mean.to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn markdown(rows: &[MethodSummary], attacks: &[String]) -> String {
    let mut s = String::new();
    let table = |s: &mut String, pick: fn(&Aggregate) -> f64| {
        let _ = write!(s, "| method | seeds | clean |");
        for a in attacks {
            let _ = write!(s, " {a} |");
        }
        let _ = writeln!(s, " feature distance |");
        let _ = writeln!(s, "|---|---:|---:|{}---:|", "---:|".repeat(attacks.len()));
        for r in rows {
            let _ = write!(s, "| {} | {} | {} |", r.method, r.seeds, pct(pick(&r.clean)));
            for a in attacks {
                let cell = r.robust.get(a).map(|g| pct(pick(g))).unwrap_or_else(|| "-".into());
                let _ = write!(s, " {cell} |");
            }
            let _ = writeln!(s, " {:.4} |", pick(&r.feature_distance));
        }
    };
    let _ = writeln!(s, "# Summary\n\nAccuracies in percent on the target domain.\n\n## Median over seeds\n");
    table(&mut s, |g| g.median);
    let _ = writeln!(s, "\n## Mean over seeds\n");
    table(&mut s, |g| g.mean);
    s
}

/// Rows of consistency-weighted methods that appear with more than one
/// weight, sorted by (variant, batch mode, lambda).
fn lambda_rows(rows: &[MethodSummary]) -> Vec<&MethodSummary> {
    let mut out: Vec<&MethodSummary> = rows
        .iter()
        .filter(|r| {
            let weighted = r
                .variant
                .parse::<Variant>()
                .map(|v| v.layout().consistency.is_some())
                .unwrap_or(false);
            weighted
                && rows
                    .iter()
                    .any(|o| o.variant == r.variant && o.batch_mode == r.batch_mode && o.lambda != r.lambda)
        })
        .collect();
    out.sort_by(|a, b| (&a.variant, &a.batch_mode).cmp(&(&b.variant, &b.batch_mode)).then(a.lambda.total_cmp(&b.lambda)));
    out
}

fn write_lambda_csv(rows: &[&MethodSummary], attacks: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["variant".to_string(), "batch_mode".into(), "lambda".into(), "clean_median".into()];
    header.extend(attacks.iter().map(|a| format!("{a}_median")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut row = vec![r.variant.clone(), r.batch_mode.clone(), r.lambda.to_string(), r.clean.median.to_string()];
        row.extend(attacks.iter().map(|a| r.robust.get(a).map(|g| g.median.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a long-format sweep CSV written by [`SweepTable::write_csv`].
pub fn read_sweep_csv(path: &Path) -> Result<SweepTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut cells: Vec<(usize, f64, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Csv { line: i as u64 + 2, message: format!("malformed sweep row in {}", path.display()) };
        if rec.len() != 3 {
            return Err(bad());
        }
        let j = rec[0].parse().map_err(|_| bad())?;
        let e = rec[1].parse().map_err(|_| bad())?;
        let a = rec[2].parse().map_err(|_| bad())?;
        cells.push((j, e, a));
    }
    let mut j_max: Vec<usize> = cells.iter().map(|c| c.0).collect();
    j_max.sort_unstable();
    j_max.dedup();
    let mut epsilons: Vec<f64> = cells.iter().map(|c| c.1).collect();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut accuracy = vec![vec![f64::NAN; epsilons.len()]; j_max.len()];
    for (j, e, a) in cells {
        let ji = j_max.binary_search(&j).expect("collected above");
        let ei = epsilons.iter().position(|&x| x == e).expect("collected above");
        accuracy[ji][ei] = a;
    }
    if accuracy.iter().flatten().any(|a| a.is_nan()) {
        return Err(Error::Csv { line: 0, message: format!("incomplete sweep grid in {}", path.display()) });
    }
    Ok(SweepTable { epsilons, j_max, accuracy })
}

/// Aggregates `sweeps/<method>__seed<k>.csv` over seeds into per-method
/// median tables, plots each as `sweeps/<method>.svg` and writes
/// `sweep_summary.csv`. Returns the number of methods rendered.
pub fn render_sweeps(dir: &Path) -> Result<usize> {
    let sweep_dir = dir.join(SWEEP_DIR);
    if !sweep_dir.is_dir() {
        return Ok(0);
    }
    let mut files: Vec<_> = std::fs::read_dir(&sweep_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut groups: BTreeMap<String, Vec<SweepTable>> = BTreeMap::new();
    for f in &files {
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let method = name.split("__seed").next().unwrap_or(name).to_string();
        groups.entry(method).or_default().push(read_sweep_csv(f)?);
    }
    let mut w = csv::Writer::from_path(dir.join(SWEEP_SUMMARY_CSV)).map_err(csv_err)?;
    w.write_record(["method", "seeds", "j_max", "epsilon", "accuracy_median"]).map_err(csv_err)?;
    for (method, tables) in &groups {
        let first = &tables[0];
        if tables.iter().any(|t| t.epsilons != first.epsilons || t.j_max != first.j_max) {
            return Err(Error::Schema(format!("sweep grids differ across seeds for `{method}`")));
        }
        let accuracy = (0..first.j_max.len())
            .map(|j| {
                (0..first.epsilons.len())
                    .map(|e| median(&tables.iter().map(|t| t.accuracy[j][e]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let agg = SweepTable {
            epsilons: first.epsilons.clone(),
            j_max: first.j_max.clone(),
            accuracy,
        };
        for (j, row) in agg.j_max.iter().zip(&agg.accuracy) {
            for (e, a) in agg.epsilons.iter().zip(row) {
                w.write_record([method.clone(), tables.len().to_string(), j.to_string(), e.to_string(), a.to_string()])
                    .map_err(csv_err)?;
            }
        }
        agg.write_svg(sweep_dir.join(format!("{method}.svg")), &format!("{method}: median over seeds"))?;
    }
    w.flush()?;
    Ok(groups.len())
}

/// Writes `summary.csv`, `summary.md`, `lambda_table.csv` (when a method
/// appears with several consistency weights) and the sweep plots for the
/// records in `dir/metrics.jsonl`.
pub fn emit_report(dir: impl AsRef<Path>) -> Result<Vec<MethodSummary>> {
    let dir = dir.as_ref();
    let path = dir.join(METRICS_JSONL);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("no {METRICS_JSONL} in {}", dir.display())));
    }
    let records = read_jsonl(&path)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no records", path.display())));
    }
    let attacks = attack_names(&records);
    let rows = summarize(&records);
    write_summary_csv(&rows, &attacks, &dir.join(SUMMARY_CSV))?;
    std::fs::write(dir.join(SUMMARY_MD), markdown(&rows, &attacks))?;
    let lambda = lambda_rows(&rows);
    if !lambda.is_empty() {
        write_lambda_csv(&lambda, &attacks, &dir.join(LAMBDA_CSV))?;
    }
    render_sweeps(dir)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[5.0, 1.0, 3.0, 2.0, 4.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3.0);
    }
}
