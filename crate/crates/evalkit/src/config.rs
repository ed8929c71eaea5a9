use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udalab_core::attacks::AttackConfig;
use udalab_core::data::{
    gen_blobs_shift, gen_two_moons_shift, load_csv, BlobsConfig, CsvSchema, DomainDataset, DomainTag, TwoMoonsConfig,
};
use udalab_core::nn::ModelSpec;
use udalab_core::objectives::{ObjectiveSpec, TrainConfig};
use udalab_core::{Error, Result};

use crate::sanity::SanityConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "UDALAB_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    TwoMoons(TwoMoonsConfig),
    Blobs(BlobsConfig),
    Csv(CsvData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub source: PathBuf,
    pub target: PathBuf,
    pub feature_columns: Vec<String>,
    pub label_column: String,
    #[serde(default)]
    pub classes: Option<usize>,
}

impl DataSpec {
    /// Source and target datasets. Generated data is redrawn per seed; file
    /// data ignores the seed. Relative CSV paths resolve against `base`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<(DomainDataset, DomainDataset)> {
        match self {
            DataSpec::TwoMoons(c) => gen_two_moons_shift(&TwoMoonsConfig { seed, ..c.clone() }),
            DataSpec::Blobs(c) => gen_blobs_shift(&BlobsConfig { seed, ..c.clone() }),
            DataSpec::Csv(c) => {
                let schema = |domain| CsvSchema {
                    feature_columns: c.feature_columns.clone(),
                    label_column: Some(c.label_column.clone()),
                    classes: c.classes,
                    domain,
                };
                let s = load_csv(base.join(&c.source), &schema(DomainTag::Source))?;
                let t = load_csv(base.join(&c.target), &schema(DomainTag::Target))?;
                if s.dim() != t.dim() {
                    return Err(Error::Schema("source and target feature widths differ".into()));
                }
                Ok((s, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// White-box attacks, keyed in the metrics by their label (`fgsm`, `pgd20`).
    pub attacks: Vec<AttackConfig>,
    /// Transfer attack from a naturally trained substitute, reported as `black_box`.
    pub black_box: Option<AttackConfig>,
    /// Attack for the feature-distance and class-wise measurements.
    pub reference_attack: AttackConfig,
    pub classwise: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attacks: vec![
                AttackConfig::fgsm(0.15),
                AttackConfig::pgd(0.15, 20),
                AttackConfig::mifgsm(0.15, 3),
            ],
            black_box: Some(AttackConfig::mifgsm(0.15, 3)),
            reference_attack: AttackConfig::pgd(0.15, 20),
            classwise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Budget grid; the budget sweep is skipped when empty.
    pub epsilons: Vec<f64>,
    pub j_max: Vec<usize>,
    /// Attack kind and settings for the budget sweep.
    pub base: AttackConfig,
    /// Method summaries to sweep; all methods when empty.
    pub methods: Vec<String>,
    /// Consistency weights; each method with a consistency term is trained
    /// once per value.
    pub lambda_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![],
            j_max: vec![],
            base: AttackConfig::pgd(0.15, 20),
            methods: vec![],
            lambda_grid: vec![],
        }
    }
}

/// A full experiment: data, model, objectives, seeds and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    /// `input_dim` and `classes` are taken from the data.
    #[serde(default)]
    pub model: ModelSpec,
    /// `seed` is replaced by each entry of `seeds`.
    #[serde(default)]
    pub train: TrainConfig,
    pub methods: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub sanity: SanityConfig,
    /// Directory that relative data paths resolve against; set by
    /// [`ExperimentConfig::from_file`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("udalab-out")
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a config file, applying the output-directory
    /// override from the environment.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        } else if cfg.output_dir.is_relative() {
            cfg.output_dir = cfg.base_dir.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty() {
            return Err(Error::Config("experiment_id must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must list at least one objective".into()));
        }
        self.train.validate()?;
        for (i, m) in self.methods.iter().enumerate() {
            m.validate().map_err(|e| Error::Config(format!("methods[{i}]: {e}")))?;
        }
        let mut labels = Vec::new();
        for (i, a) in self.eval.attacks.iter().enumerate() {
            a.validate().map_err(|e| Error::Config(format!("eval.attacks[{i}]: {e}")))?;
            if labels.contains(&a.label()) {
                return Err(Error::Config(format!("eval.attacks[{i}]: duplicate attack label `{}`", a.label())));
            }
            labels.push(a.label());
        }
        if let Some(b) = &self.eval.black_box {
            b.validate().map_err(|e| Error::Config(format!("eval.black_box: {e}")))?;
        }
        self.eval
            .reference_attack
            .validate()
            .map_err(|e| Error::Config(format!("eval.reference_attack: {e}")))?;
        let s = &self.sweep;
        if s.epsilons.is_empty() != s.j_max.is_empty() {
            return Err(Error::Config("sweep.epsilons and sweep.j_max must both be set or both empty".into()));
        }
        if s.epsilons.windows(2).any(|w| w[0] >= w[1]) || s.j_max.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep grids must be sorted ascending".into()));
        }
        if s.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("sweep.lambda_grid values must be >= 0".into()));
        }
        Ok(())
    }

    /// Methods after expanding the lambda grid, deduplicated by summary.
    pub fn expanded_methods(&self) -> Vec<ObjectiveSpec> {
        let mut out: Vec<ObjectiveSpec> = Vec::new();
        for m in &self.methods {
            let variants: Vec<ObjectiveSpec> =
                if self.sweep.lambda_grid.is_empty() || m.variant.layout().consistency.is_none() {
                    vec![m.clone()]
                } else {
                    self.sweep.lambda_grid.iter().map(|&l| m.clone().with_lambda(l)).collect()
                };
            for v in variants {
                if !out.iter().any(|o| o.summary() == v.summary()) {
                    out.push(v);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use udalab_core::objectives::{BatchMode, Variant};

    const MINIMAL: &str = r#"
experiment_id = "smoke"
seeds = [0]

[data]
kind = "two_moons"
n = 200

[[methods]]
variant = "natural"
inner_attack = { kind = "pgd", epsilon = 0.15, j_max = 3, random_start = true }
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.methods[0].variant, Variant::Natural);
        assert!(matches!(&cfg.data, DataSpec::TwoMoons(c) if c.n == 200 && c.rotation_deg == 35.0));
        assert_eq!(cfg.eval.attacks.len(), 3);
    }

    #[test]
    fn full_method_fields() {
        let text = MINIMAL.replace(
            "variant = \"natural\"",
            "variant = \"ssat_stt_2\"\nbatch_mode = \"sttadv\"\nlambda_weight = 2.0",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.methods[0].batch_mode, Some(BatchMode::Shared));
        assert_eq!(cfg.methods[0].summary(), "artuda@lambda=2");
    }

    #[test]
    fn unknown_field_names_the_field() {
        let text = MINIMAL.replace("seeds = [0]", "seeds = [0]\nepochz = 3");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config(m)) => assert!(m.contains("epochz"), "{m}"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("n = 200", "n = 200\nrotation = 3");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nbatch_size = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("variant = \"natural\"", "variant = \"bogus\"");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[sweep]\nepsilons = [0.1, 0.0]\nj_max = [1]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn lambda_grid_expands_consistency_methods_only() {
        let text = format!(
            "{MINIMAL}\n[[methods]]\nvariant = \"artuda\"\nbatch_mode = \"sttadv\"\ninner_attack = {{ kind = \"pgd\", epsilon = 0.15, j_max = 3 }}\n\n[sweep]\nlambda_grid = [0.2, 1.0, 5.0]\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let names: Vec<String> = cfg.expanded_methods().iter().map(|m| m.summary()).collect();
        assert_eq!(names, ["natural", "artuda@lambda=0.2", "artuda", "artuda@lambda=5"]);
    }
}
