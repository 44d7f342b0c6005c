//! Comparison tables across run directories: one row per method variant,
//! one column group per scenario, mean ± std over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use sril_core::metrics::mean_std;

use crate::metrics::{RunMetrics, ScenarioShape};
use crate::runner::{read_json, METRICS_FILE, REFERENCE_DIR};
use crate::spec::ReportFormat;

/// Metrics directories below `roots`, skipping intransigence references.
pub fn find_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if dir.join(METRICS_FILE).is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != REFERENCE_DIR))
            .collect();
        entries.sort();
        entries.iter().try_for_each(|e| walk(e, out))
    }
    let mut out = Vec::new();
    for root in roots {
        if !root.is_dir() {
            bail!("{} is not a directory", root.display());
        }
        walk(root, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn load_metrics(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    dirs.iter().map(|d| read_json(&d.join(METRICS_FILE))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Self {
            mean,
            std,
            n: values.len(),
        })
    }
}

/// One (variant, scenario) cell of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub shape: Option<ScenarioShape>,
    /// Set when runs in this cell disagree on the scenario shape.
    pub heterogeneous: bool,
    pub aa_cnn: Option<Stat>,
    pub aa_nme: Option<Stat>,
    pub fm: Option<Stat>,
    pub im: Option<Stat>,
}

pub const COLUMNS: [&str; 4] = ["AA-CNN", "AA-NME", "FM", "IM"];

impl Cell {
    fn stats(&self) -> [Option<Stat>; 4] {
        [self.aa_cnn, self.aa_nme, self.fm, self.im]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<String>,
    pub scenarios: Vec<String>,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
}

/// Groups runs by variant and scenario. Runs from several experiments are
/// told apart by prefixing the experiment name.
pub fn build(runs: &[RunMetrics]) -> Report {
    let names: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    let row_of = |r: &RunMetrics| {
        if names.len() > 1 {
            format!("{}/{}", r.name, r.variant)
        } else {
            r.variant.clone()
        }
    };
    let mut groups: BTreeMap<(String, String), Vec<&RunMetrics>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut scenarios = Vec::new();
    for r in runs {
        let row = row_of(r);
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        if !scenarios.contains(&r.scenario_label) {
            scenarios.push(r.scenario_label.clone());
        }
        groups.entry((row, r.scenario_label.clone())).or_default().push(r);
    }

    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    for ((row, scenario), group) in groups {
        let shape = &group[0].scenario;
        let heterogeneous = group.iter().any(|r| &r.scenario != shape);
        if heterogeneous {
            warnings.push(format!(
                "{row} / {scenario}: runs disagree on the scenario shape and are not merged"
            ));
        }
        let mut seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            warnings.push(format!("{row} / {scenario}: the same seed appears more than once"));
        }
        let collect = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Option<Stat> {
            if heterogeneous {
                return None;
            }
            let v: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
            if v.len() == group.len() {
                Stat::of(&v)
            } else {
                None
            }
        };
        cells.push(Cell {
            aa_cnn: collect(&|r| Some(r.cnn.average_accuracy)),
            aa_nme: collect(&|r| Some(r.nme.average_accuracy)),
            fm: collect(&|r| r.cnn.forgetting),
            im: collect(&|r| r.cnn.intransigence),
            shape: (!heterogeneous).then(|| shape.clone()),
            heterogeneous,
            row,
            scenario,
            seeds,
        });
    }
    Report {
        rows,
        scenarios,
        cells,
        warnings,
    }
}

impl Report {
    pub fn cell(&self, row: &str, scenario: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.scenario == scenario)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Table => self.table(),
            ReportFormat::Csv => self.csv()?,
            ReportFormat::Json => serde_json::to_string_pretty(self)? + "\n",
        })
    }

    fn table(&self) -> String {
        let fmt = |s: Option<Stat>| match s {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            None => "-".to_string(),
        };
        let mut header = vec!["method".to_string()];
        for sc in &self.scenarios {
            header.extend(COLUMNS.iter().map(|c| format!("{sc} {c}")));
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.clone()];
            for sc in &self.scenarios {
                match self.cell(row, sc) {
                    Some(c) if c.heterogeneous => line.extend(COLUMNS.iter().map(|_| "heterogeneous".to_string())),
                    Some(c) => line.extend(c.stats().into_iter().map(fmt)),
                    None => line.extend(COLUMNS.iter().map(|_| "-".to_string())),
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(
                    out,
                    "{}",
                    "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
                );
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "metric", "mean", "std", "n", "seeds"])?;
        for c in &self.cells {
            let seeds = c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
            for (name, stat) in COLUMNS.iter().zip(c.stats()) {
                let (mean, std, n) = match stat {
                    Some(s) => (s.mean.to_string(), s.std.to_string(), s.n.to_string()),
                    None if c.heterogeneous => ("heterogeneous".into(), String::new(), String::new()),
                    None => (String::new(), String::new(), String::new()),
                };
                w.write_record([c.row.as_str(), &c.scenario, name, &mean, &std, &n, &seeds])?;
            }
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}
