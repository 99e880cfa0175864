//! Aggregated few-shot results and their on-disk form.
//!
//! `report.csv` holds one row per run (`seed, fold, n_per_class, f1`);
//! `summary.json` holds a [`Summary`] with one [`SummaryRow`] per `n`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convention used when a class is absent from a fold's test split.
pub const ABSENT_CLASS_POLICY: &str = "absent classes score 0 and count in the divisor";

/// Macro F1 of one (seed, fold, n) fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub n_per_class: usize,
    pub f1: f64,
}

/// Statistics for one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSummary {
    pub n_per_class: usize,
    /// Per fold, averaged over seeds.
    pub fold_means: Vec<f64>,
    /// Per seed, averaged over folds; order follows the seed list.
    pub seed_means: Vec<f64>,
    /// Mean of `seed_means`.
    pub mean_f1: f64,
    /// Population standard deviation of `seed_means`.
    pub std_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub target: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub n_per_class: Vec<usize>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<NSummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl MetricsReport {
    /// Aggregates `runs`, which must hold exactly one record per
    /// (seed, fold, n) of the declared grid.
    pub fn from_runs(
        method: impl Into<String>,
        target: impl Into<String>,
        config_hash: impl Into<String>,
        seeds: &[u64],
        folds: &[usize],
        n_per_class: &[usize],
        mut runs: Vec<RunRecord>,
    ) -> Result<Self> {
        if seeds.is_empty() || folds.is_empty() || n_per_class.is_empty() {
            return Err(Error::Evaluation("empty seed, fold or n grid".into()));
        }
        let mut by_key = BTreeMap::new();
        for r in &runs {
            if !seeds.contains(&r.seed) || !folds.contains(&r.fold) || !n_per_class.contains(&r.n_per_class) {
                return Err(Error::Evaluation(format!("run {r:?} lies outside the declared grid")));
            }
            if !r.f1.is_finite() {
                return Err(Error::Evaluation(format!("run {r:?} has a non-finite score")));
            }
            if by_key.insert((r.seed, r.fold, r.n_per_class), r.f1).is_some() {
                return Err(Error::Evaluation(format!("duplicate run {r:?}")));
            }
        }
        let expected = seeds.len() * folds.len() * n_per_class.len();
        if by_key.len() != expected {
            return Err(Error::Evaluation(format!("{} of {expected} runs present", by_key.len())));
        }
        let summary = n_per_class
            .iter()
            .map(|&n| {
                let seed_means: Vec<f64> = seeds
                    .iter()
                    .map(|&s| mean(&folds.iter().map(|&f| by_key[&(s, f, n)]).collect::<Vec<_>>()))
                    .collect();
                let fold_means = folds
                    .iter()
                    .map(|&f| mean(&seeds.iter().map(|&s| by_key[&(s, f, n)]).collect::<Vec<_>>()))
                    .collect();
                NSummary {
                    n_per_class: n,
                    fold_means,
                    mean_f1: mean(&seed_means),
                    std_f1: population_std(&seed_means),
                    seed_means,
                }
            })
            .collect();
        runs.sort_by_key(|r| (r.seed, r.fold, r.n_per_class));
        Ok(Self {
            method: method.into(),
            target: target.into(),
            config_hash: config_hash.into(),
            seeds: seeds.to_vec(),
            folds: folds.to_vec(),
            n_per_class: n_per_class.to_vec(),
            runs,
            summary,
        })
    }

    pub fn at(&self, n: usize) -> Option<&NSummary> {
        self.summary.iter().find(|s| s.n_per_class == n)
    }

    /// True when every grid cell has a run and every `n` a finite summary.
    pub fn is_complete(&self) -> bool {
        self.runs.len() == self.seeds.len() * self.folds.len() * self.n_per_class.len()
            && self.summary.len() == self.n_per_class.len()
            && self.summary.iter().all(|s| s.mean_f1.is_finite() && s.std_f1.is_finite())
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Evaluation(format!("{}: {e}", csv_path.display())))?;
        for r in &self.runs {
            w.serialize(r).map_err(|e| Error::Evaluation(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&Summary::of(self)).expect("summary serializes");
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }

    /// Reads a report written by [`MetricsReport::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let json_path = dir.join("summary.json");
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let summary: Summary = serde_json::from_str(&text).map_err(|e| Error::Evaluation(format!("{}: {e}", json_path.display())))?;
        let csv_path = dir.join("report.csv");
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::Evaluation(format!("{}: {e}", csv_path.display())))?;
        let runs = r
            .deserialize()
            .collect::<std::result::Result<Vec<RunRecord>, _>>()
            .map_err(|e| Error::Evaluation(format!("{}: {e}", csv_path.display())))?;
        Self::from_runs(
            summary.method,
            summary.target,
            summary.config_hash,
            &summary.seeds,
            &summary.folds,
            &summary.rows.iter().map(|r| r.n_per_class).collect::<Vec<_>>(),
            runs,
        )
    }
}

/// Structured record stored as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub target: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub absent_class_policy: String,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub target: String,
    pub n_per_class: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl Summary {
    pub fn of(report: &MetricsReport) -> Self {
        Self {
            method: report.method.clone(),
            target: report.target.clone(),
            config_hash: report.config_hash.clone(),
            seeds: report.seeds.clone(),
            folds: report.folds.clone(),
            absent_class_policy: ABSENT_CLASS_POLICY.into(),
            rows: report
                .summary
                .iter()
                .map(|s| SummaryRow {
                    method: report.method.clone(),
                    target: report.target.clone(),
                    n_per_class: s.n_per_class,
                    mean_f1: s.mean_f1,
                    std_f1: s.std_f1,
                    seeds: report.seeds.clone(),
                    config_hash: report.config_hash.clone(),
                })
                .collect(),
        }
    }
}

/// Files written by [`compare_methods`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
    pub rows: usize,
}

#[derive(Debug, Serialize)]
struct TableRow<'a> {
    target: &'a str,
    method: &'a str,
    n_per_class: usize,
    mean_f1: f64,
    std_f1: f64,
    config_hash: &'a str,
}

/// Writes `comparison.csv` (one row per method and `n`) and one
/// `<target>_fewshot.svg` per target with a mean line and a ±std band per
/// method. Reports of one target must share the same `n` grid.
pub fn compare_methods(reports: &[MetricsReport], out_dir: &Path) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Evaluation("no reports to compare".into()));
    }
    let mut by_target: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        by_target.entry(r.target.as_str()).or_default().push(r);
    }
    for (target, group) in &by_target {
        let grid = &group[0].n_per_class;
        if let Some(bad) = group.iter().find(|r| &r.n_per_class != grid) {
            return Err(Error::Evaluation(format!(
                "cannot align `{}` ({:?}) with `{}` ({grid:?}) on target {target}",
                bad.method, bad.n_per_class, group[0].method
            )));
        }
        let methods: BTreeSet<&str> = group.iter().map(|r| r.method.as_str()).collect();
        if methods.len() != group.len() {
            return Err(Error::Evaluation(format!("duplicate method on target {target}")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Error::Evaluation(format!("{}: {e}", table.display())))?;
    let mut rows = 0;
    for group in by_target.values() {
        for r in group {
            for s in &r.summary {
                w.serialize(TableRow {
                    target: &r.target,
                    method: &r.method,
                    n_per_class: s.n_per_class,
                    mean_f1: s.mean_f1,
                    std_f1: s.std_f1,
                    config_hash: &r.config_hash,
                })
                .map_err(|e| Error::Evaluation(e.to_string()))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    let mut plots = Vec::new();
    for (target, group) in &by_target {
        let path = out_dir.join(format!("{}_fewshot.svg", sanitize(target)));
        plot_target(&path, target, group)?;
        plots.push(path);
    }
    Ok(Comparison { table, plots, rows })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn plot_target(path: &Path, target: &str, reports: &[&MetricsReport]) -> Result<()> {
    use plotters::prelude::*;
    let plot_err = |e: &dyn std::fmt::Display| Error::Evaluation(format!("{}: {e}", path.display()));
    let ns = &reports[0].n_per_class;
    // Categorical x axis: position i stands for the i-th n.
    let x_max = ns.len().saturating_sub(1).max(1) as f64;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{target}: macro F1 vs labeled windows per class"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.2f64..x_max + 0.2, 0f64..1.0)
        .map_err(|e| plot_err(&e))?;
    let labels: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
    chart
        .configure_mesh()
        .x_labels(ns.len().max(2))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("n per class")
        .y_desc("macro F1")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (k, r) in reports.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let upper: Vec<(f64, f64)> = r.summary.iter().enumerate().map(|(i, s)| (i as f64, (s.mean_f1 + s.std_f1).min(1.0))).collect();
        let lower: Vec<(f64, f64)> = r.summary.iter().enumerate().map(|(i, s)| (i as f64, (s.mean_f1 - s.std_f1).max(0.0))).collect();
        let band: Vec<(f64, f64)> = upper.iter().copied().chain(lower.iter().rev().copied()).collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.15).filled())))
            .map_err(|e| plot_err(&e))?;
        let line: Vec<(f64, f64)> = r.summary.iter().enumerate().map(|(i, s)| (i as f64, s.mean_f1)).collect();
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(r.method.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_runs(seeds: &[u64], folds: &[usize], ns: &[usize], f: impl Fn(u64, usize, usize) -> f64) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for &seed in seeds {
            for &fold in folds {
                for &n in ns {
                    out.push(RunRecord {
                        seed,
                        fold,
                        n_per_class: n,
                        f1: f(seed, fold, n),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn aggregation_by_hand() {
        let runs = grid_runs(&[0, 1], &[0, 1], &[2], |s, f, _| 0.1 * s as f64 + 0.2 * f as f64 + 0.5);
        let r = MetricsReport::from_runs("m", "t", "h", &[0, 1], &[0, 1], &[2], runs).unwrap();
        let s = r.at(2).unwrap();
        assert!((s.seed_means[0] - 0.6).abs() < 1e-12 && (s.seed_means[1] - 0.7).abs() < 1e-12);
        assert!((s.fold_means[1] - 0.75).abs() < 1e-12);
        assert!((s.mean_f1 - 0.65).abs() < 1e-12);
        assert!((s.std_f1 - 0.05).abs() < 1e-12);
        assert!(r.is_complete());
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let runs = grid_runs(&[3, 4, 5], &[0, 1, 2], &[2, 10], |_, f, n| 0.3 + 0.1 * f as f64 + 0.01 * n as f64);
        let r = MetricsReport::from_runs("m", "t", "h", &[3, 4, 5], &[0, 1, 2], &[2, 10], runs).unwrap();
        assert!(r.summary.iter().all(|s| s.std_f1 == 0.0));
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let mut runs = grid_runs(&[0], &[0, 1], &[2], |_, _, _| 0.5);
        runs.pop();
        assert!(MetricsReport::from_runs("m", "t", "h", &[0], &[0, 1], &[2], runs).is_err());
    }

    #[test]
    fn write_read_compare() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |m: &str, ns: &[usize]| {
            MetricsReport::from_runs(m, "tgt", "h", &[0], &[0], ns, grid_runs(&[0], &[0], ns, |_, _, n| n as f64 / 100.0)).unwrap()
        };
        let a = mk("a", &[2, 10]);
        a.write(dir.path()).unwrap();
        assert_eq!(MetricsReport::read(dir.path()).unwrap(), a);
        let out = compare_methods(&[a.clone(), mk("b", &[2, 10])], dir.path()).unwrap();
        assert_eq!(out.rows, 4);
        assert_eq!(out.plots, vec![dir.path().join("tgt_fewshot.svg")]);
        assert!(out.plots[0].exists());
        assert!(compare_methods(&[a, mk("c", &[2, 5])], dir.path()).is_err());
        assert!(compare_methods(&[], dir.path()).is_err());
    }
}
