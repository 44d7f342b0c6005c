//! Declarative experiment files.
//!
//! A spec names a dataset, a scenario, the method settings and where results
//! go. A `[grid]` table maps dotted paths to lists of values; the cartesian
//! product expands into one resolved spec per combination and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sril_core::trainer::SrilConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SRIL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub method: SrilConfig,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_center_scale")]
        center_scale: f64,
    },
    Rings {
        classes: usize,
        dim: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_ring_spread")]
        spread: f64,
    },
    /// IDX image files (MNIST layout), values scaled to [0, 1].
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Numeric CSV files with a label column.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_train_per_class() -> usize {
    200
}

fn default_test_per_class() -> usize {
    50
}

fn default_spread() -> f64 {
    1.0
}

fn default_center_scale() -> f64 {
    3.0
}

fn default_ring_spread() -> f64 {
    0.1
}

fn default_label_column() -> String {
    "label".into()
}

impl DatasetSpec {
    /// Class count declared by generator datasets.
    pub fn declared_classes(&self) -> Option<usize> {
        match *self {
            DatasetSpec::Blobs { classes, .. } | DatasetSpec::Rings { classes, .. } => Some(classes),
            _ => None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
            DatasetSpec::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub initial_task_size: usize,
    pub increment: usize,
    /// Defaults to the dataset's class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_memory")]
    pub memory_per_class: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_memory() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Table => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output root; falls back to the environment, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
    /// Train an undistilled reference per run to measure intransigence.
    pub intransigence: bool,
    /// Test samples of the initial classes used for CKA and channel shift.
    pub probe_size: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![ReportFormat::Table],
            intransigence: true,
            probe_size: 256,
        }
    }
}

/// One concrete run: a spec with an empty grid and a single seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub spec: ExperimentSpec,
    /// Method-level grid assignments, `default` when none.
    pub variant: String,
    /// Scenario- and dataset-level grid assignments, `default` when none.
    pub scenario_label: String,
    pub seed: u64,
}

impl ResolvedRun {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(&self.spec.name)
            .join(&self.variant)
            .join(&self.scenario_label)
            .join(format!("seed-{}", self.seed))
    }
}

impl fmt::Display for ResolvedRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.relative_dir().display())
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).context("invalid experiment spec")?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file; relative dataset and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
        let mut spec = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.dataset.resolve_paths(base);
        if let Some(dir) = spec.outputs.dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.seeds.is_empty() {
            bail!("scenario.seeds must list at least one seed");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            bail!("name {:?} must be a plain directory name", self.name);
        }
        if let (Some(n), Some(d)) = (self.scenario.num_classes, self.dataset.declared_classes()) {
            if n != d {
                bail!("scenario.num_classes = {n} but the dataset generates {d} classes");
            }
        }
        if self.scenario.memory_per_class == 0 {
            bail!("scenario.memory_per_class must be positive");
        }
        if self.outputs.probe_size < 2 {
            bail!("outputs.probe_size must be at least 2");
        }
        for (key, values) in &self.grid {
            let block = key.split('.').next().unwrap_or_default();
            if !matches!(block, "method" | "scenario" | "dataset") || !key.contains('.') {
                bail!("grid key {key:?} must start with method., scenario. or dataset.");
            }
            if key == "scenario.seeds" || key == "method.seed" {
                bail!("seeds are set by scenario.seeds, not by the grid");
            }
            if values.is_empty() {
                bail!("grid key {key:?} has no values");
            }
        }
        self.method.validate().context("invalid [method] block")?;
        Ok(())
    }

    /// Output root: explicit override, then the spec, then the environment.
    pub fn output_root(&self, overridden: Option<&Path>) -> PathBuf {
        overridden
            .map(Path::to_path_buf)
            .or_else(|| self.outputs.dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Expands the grid and seeds into concrete runs, in grid order then
    /// seed order. `seed` replaces the spec's seed list.
    pub fn expand(&self, seed: Option<u64>) -> Result<Vec<ResolvedRun>> {
        let seeds = seed.map_or_else(|| self.scenario.seeds.clone(), |s| vec![s]);
        let mut base = self.clone();
        base.grid.clear();
        let table = toml::Table::try_from(&base).context("cannot serialize spec")?;

        let mut combos: Vec<Vec<(&str, &toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.as_str(), v));
                        c
                    })
                })
                .collect();
        }

        let mut runs = Vec::new();
        for combo in combos {
            let mut table = table.clone();
            for &(key, value) in &combo {
                set_path(&mut table, key, value.clone())?;
            }
            let label = |method: bool| {
                let parts: Vec<String> = combo
                    .iter()
                    .filter(|(k, _)| k.starts_with("method.") == method)
                    .map(|(k, v)| format!("{}={}", k.split_once('.').map_or(*k, |p| p.1), plain(v)))
                    .collect();
                if parts.is_empty() {
                    "default".to_string()
                } else {
                    parts.join(",")
                }
            };
            let (variant, scenario_label) = (label(true), label(false));
            for &s in &seeds {
                let mut t = table.clone();
                set_path(
                    &mut t,
                    "scenario.seeds",
                    toml::Value::Array(vec![toml::Value::Integer(s as i64)]),
                )?;
                set_path(&mut t, "method.seed", toml::Value::Integer(s as i64))?;
                let spec: ExperimentSpec = t
                    .try_into()
                    .with_context(|| format!("grid combination {variant} / {scenario_label} is invalid"))?;
                spec.validate()
                    .with_context(|| format!("grid combination {variant} / {scenario_label} is invalid"))?;
                runs.push(ResolvedRun {
                    spec,
                    variant: variant.clone(),
                    scenario_label: scenario_label.clone(),
                    seed: s,
                });
            }
        }
        Ok(runs)
    }
}

fn plain(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("grid key {path:?}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
