//! Ablation runner: trains and evaluates every `(variant, seed)` cell and
//! consolidates the reports into per-run rows and per-variant aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, far_key, EvalConfig, EvalReport};
use crate::model::ModelVariant;
use crate::training::{self, TrainConfig};

pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";
/// Subdirectories of a data directory.
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";

/// Training and evaluation datasets for a configuration: image folders under
/// `data_dir` when given, otherwise the synthetic generator.
pub fn load_datasets(cfg: &TrainConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match data_dir {
        Some(dir) => Ok((
            data::load_image_folder(&dir.join(TRAIN_DIR))?,
            data::load_image_folder(&dir.join(EVAL_DIR))?,
        )),
        None => Ok((data::synthetic_train(&cfg.data)?, data::synthetic_eval(&cfg.data)?)),
    }
}

/// Configuration of one cell: `base` with the variant and seed replaced. The
/// synthetic data seed follows the run seed.
pub fn cell_config(base: &TrainConfig, variant: ModelVariant, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg
}

pub fn cell_dir(root: &Path, variant: ModelVariant, seed: u64) -> PathBuf {
    root.join(format!("{variant}_seed{seed}"))
}

/// Trains and evaluates one configuration, writing run artifacts and the
/// report into `out_dir` when given.
pub fn run_cell(
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    data_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (train_set, eval_set) = load_datasets(cfg, data_dir)?;
    let trained = training::train(cfg, &train_set, out_dir)?;
    let report = evaluate(
        &trained.model,
        &eval_set,
        eval_cfg,
        &cfg.augment(),
        cfg.ma_probability,
        cfg.seed,
    )?;
    if let Some(dir) = out_dir {
        let path = dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Outcome of one `(variant, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: ModelVariant,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Names of the scalar columns reported for a FAR grid.
pub fn metric_names(far_grid: &[f64]) -> Vec<String> {
    let mut names: Vec<String> = far_grid.iter().map(|f| format!("masked TAR@{}", far_key(*f))).collect();
    names.extend(far_grid.iter().map(|f| format!("clean TAR@{}", far_key(*f))));
    names.push("A_um in mask".into());
    names.push("A_m in mask".into());
    names
}

/// Column values of a report, in [`metric_names`] order.
pub fn metric_values(report: &EvalReport, far_grid: &[f64]) -> Vec<Option<f64>> {
    let mut v: Vec<Option<f64>> = far_grid
        .iter()
        .map(|f| report.tar_at_far.get(&far_key(*f)).copied())
        .collect();
    v.extend(far_grid.iter().map(|f| report.clean_tar_at_far.get(&far_key(*f)).copied()));
    v.push(report.a_um_mass_in_mask);
    v.push(report.a_m_mass_in_mask);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub variant: ModelVariant,
    pub seed: u64,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub variant: ModelVariant,
    /// Seeds that completed.
    pub runs: usize,
    pub mean: Vec<Option<f64>>,
    /// Sample standard deviation; absent when only one seed was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ma: f64,
    pub far_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<String>,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

impl AblationReport {
    pub fn from_cells(cells: &[Cell], variants: &[ModelVariant], seeds: &[u64], ma: f64, far_grid: &[f64]) -> Self {
        let metrics = metric_names(far_grid);
        let rows: Vec<RunRow> = cells
            .iter()
            .map(|c| RunRow {
                label: c.variant.label(ma),
                variant: c.variant,
                seed: c.seed,
                failed: c.report.is_none(),
                error: c.error.clone(),
                values: c
                    .report
                    .as_ref()
                    .map_or_else(|| vec![None; metrics.len()], |r| metric_values(r, far_grid)),
            })
            .collect();
        let aggregates = variants
            .iter()
            .map(|&variant| {
                let ok: Vec<&RunRow> = rows.iter().filter(|r| r.variant == variant && !r.failed).collect();
                let columns: Vec<(Option<f64>, Option<f64>)> = (0..metrics.len())
                    .map(|k| mean_sd(&ok.iter().filter_map(|r| r.values[k]).collect::<Vec<_>>()))
                    .collect();
                AggregateRow {
                    label: variant.label(ma),
                    variant,
                    runs: ok.len(),
                    mean: columns.iter().map(|c| c.0).collect(),
                    sd: (seeds.len() > 1).then(|| columns.iter().map(|c| c.1).collect()),
                }
            })
            .collect();
        AblationReport {
            ma,
            far_grid: far_grid.to_vec(),
            seeds: seeds.to_vec(),
            metrics,
            rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: one row per run, then one aggregate row per
    /// variant (`mean ± sd` when several seeds were requested).
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut header = vec!["Model".to_string(), "Seed".to_string()];
        header.extend(self.metrics.iter().cloned());
        let mut table: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![r.label.clone(), r.seed.to_string()];
            if r.failed {
                line.extend(self.metrics.iter().map(|_| "FAILED".to_string()));
            } else {
                line.extend(r.values.iter().map(|v| fmt(*v)));
            }
            table.push(line);
        }
        for a in &self.aggregates {
            let mut line = vec![a.label.clone(), format!("mean (n={})", a.runs)];
            for (k, m) in a.mean.iter().enumerate() {
                let cell = match (m, a.sd.as_ref().and_then(|sd| sd[k])) {
                    (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                    (m, _) => fmt(*m),
                };
                line.push(cell);
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }

    /// Aggregate row of a variant.
    pub fn aggregate(&self, variant: ModelVariant) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    /// Column index of a metric name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == name)
    }
}

/// Ablation request: every listed variant crossed with every seed.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub base: TrainConfig,
    pub eval: EvalConfig,
    pub variants: Vec<ModelVariant>,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Ablation {
    /// Runs every cell (in parallel across the rayon pool); a failed cell is
    /// recorded and the others continue.
    pub fn run(&self) -> Result<(AblationReport, Vec<Cell>)> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        self.base.validate()?;
        let jobs: Vec<(ModelVariant, u64)> = self
            .variants
            .iter()
            .flat_map(|&v| self.seeds.iter().map(move |&s| (v, s)))
            .collect();
        let cells: Vec<Cell> = jobs
            .par_iter()
            .map(|&(variant, seed)| {
                let cfg = cell_config(&self.base, variant, seed);
                let dir = self.out_dir.as_deref().map(|d| cell_dir(d, variant, seed));
                let result = run_cell(&cfg, &self.eval, self.data_dir.as_deref(), dir.as_deref());
                if let Err(e) = &result {
                    log::warn!("{variant} seed {seed} failed: {e}");
                }
                Cell {
                    variant,
                    seed,
                    error: result.as_ref().err().map(ToString::to_string),
                    report: result.ok(),
                }
            })
            .collect();
        let report = AblationReport::from_cells(
            &cells,
            &self.variants,
            &self.seeds,
            self.base.ma_probability,
            &self.eval.far_grid,
        );
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (name, text) in [(ABLATION_JSON, report.to_json() + "\n"), (ABLATION_TEXT, report.to_text())] {
                let path = dir.join(name);
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok((report, cells))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(variant: ModelVariant, seed: u64, tar: f64) -> EvalReport {
        let grid: BTreeMap<String, f64> = [(far_key(0.01), tar)].into_iter().collect();
        EvalReport {
            variant,
            ma: 0.5,
            tar_at_far: grid.clone(),
            clean_tar_at_far: grid,
            clean_accuracy: 0.9,
            masked_accuracy: 0.8,
            a_um_mass_in_mask: variant.has_mask_head().then_some(0.05),
            a_m_mass_in_mask: variant.has_mask_head().then_some(0.3),
            a_bg_mass_in_mask: None,
            mask_region_share: 0.15,
            seed,
        }
    }

    fn cells(seeds: &[u64]) -> Vec<Cell> {
        [ModelVariant::Baseline, ModelVariant::MfsaCal]
            .iter()
            .flat_map(|&v| {
                seeds.iter().map(move |&s| Cell {
                    variant: v,
                    seed: s,
                    report: Some(report(v, s, 0.5 + 0.1 * s as f64)),
                    error: None,
                })
            })
            .collect()
    }

    #[test]
    fn three_seeds_give_six_rows_and_two_aggregates() {
        let variants = [ModelVariant::Baseline, ModelVariant::MfsaCal];
        let r = AblationReport::from_cells(&cells(&[0, 1, 2]), &variants, &[0, 1, 2], 0.5, &[0.01]);
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.aggregates.len(), 2);
        let col = r.column("masked TAR@0.01").unwrap();
        let agg = r.aggregate(ModelVariant::MfsaCal).unwrap();
        assert!((agg.mean[col].unwrap() - 0.6).abs() < 1e-12);
        assert!((agg.sd.as_ref().unwrap()[col].unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.aggregate(ModelVariant::Baseline).unwrap().mean[r.column("A_um in mask").unwrap()], None);
        let text = r.to_text();
        assert!(text.contains("MFSA + CAL + MA=0.5"), "{text}");
        assert!(text.contains("±"), "{text}");
    }

    #[test]
    fn single_seed_has_no_sd() {
        let variants = [ModelVariant::Baseline, ModelVariant::MfsaCal];
        let r = AblationReport::from_cells(&cells(&[4]), &variants, &[4], 0.5, &[0.01]);
        assert!(r.aggregates.iter().all(|a| a.sd.is_none()));
        assert!(!r.to_json().contains("\"sd\""));
        assert!(!r.to_text().contains('±'));
    }

    #[test]
    fn failed_cell_is_marked_and_excluded() {
        let mut cs = cells(&[0, 1]);
        cs[1].report = None;
        cs[1].error = Some("diverged".into());
        let variants = [ModelVariant::Baseline, ModelVariant::MfsaCal];
        let r = AblationReport::from_cells(&cs, &variants, &[0, 1], 0.5, &[0.01]);
        assert!(r.rows[1].failed);
        assert_eq!(r.aggregate(ModelVariant::Baseline).unwrap().runs, 1);
        assert!(r.to_text().contains("FAILED"));
    }

    #[test]
    fn row_values_match_run_reports_exactly() {
        let cs = cells(&[0, 1]);
        let r = AblationReport::from_cells(&cs, &[ModelVariant::Baseline, ModelVariant::MfsaCal], &[0, 1], 0.5, &[0.01]);
        let back: AblationReport = serde_json::from_str(&r.to_json()).unwrap();
        for (row, cell) in back.rows.iter().zip(&cs) {
            let rep = cell.report.as_ref().unwrap();
            assert_eq!(row.values[0], rep.tar_at_far.get("0.01").copied());
        }
    }
}
