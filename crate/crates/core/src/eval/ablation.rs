use super::{evaluate, summarize_rollouts, svg, EncoderSimulator, EvalSummary, RolloutOptions};
use crate::datasets::Dataset;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::mesh::TargetMode;
use crate::train::{multi_dataset_pretrain, Phase, RunConfig, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// One pretrain-then-finetune experiment. An empty `pretrain` list is the
/// no-pretraining baseline, trained on the finetune task for the whole budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub pretrain: Vec<String>,
    pub finetune: String,
    pub mask_ratio: f64,
    pub task: TargetMode,
    pub seed: u64,
}

impl Cell {
    pub fn is_baseline(&self) -> bool {
        self.pretrain.is_empty()
    }

    pub fn pretrain_label(&self) -> String {
        if self.pretrain.is_empty() {
            "none".into()
        } else {
            self.pretrain.join("+")
        }
    }

    /// Baselines ignore ratio and task; pin them so duplicates collapse.
    fn normalized(mut self) -> Self {
        if self.mask_ratio == 0.0 {
            self.pretrain.clear();
        }
        if self.is_baseline() {
            self.mask_ratio = 0.0;
            self.task = TargetMode::NextStep;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    /// Model, optimizer, feature and noise settings shared by every cell.
    pub base: RunConfig,
    pub budget: Budget,
    pub cells: Vec<Cell>,
}

/// Parses `key=v1,v2,...`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("grid {spec:?} is not key=v1,v2,...")))?;
    let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("grid {spec:?} has no values")));
    }
    Ok((k.trim().to_string(), values))
}

fn set_axis(cell: &mut Cell, key: &str, value: &str) -> Result<()> {
    let bad = |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("{key}={value}: {e}"));
    match key {
        "mask_ratio" => cell.mask_ratio = value.parse().map_err(|e| bad(&e))?,
        "seed" => cell.seed = value.parse().map_err(|e| bad(&e))?,
        "task" => {
            cell.task = match value {
                "next_step" => TargetMode::NextStep,
                "reconstruction" => TargetMode::Reconstruction,
                _ => return Err(bad(&"expected next_step or reconstruction")),
            }
        }
        "finetune" => cell.finetune = value.to_string(),
        "pretrain" => {
            cell.pretrain = if value == "none" {
                Vec::new()
            } else {
                value.split('+').map(str::to_string).collect()
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown grid axis {key:?} (mask_ratio, seed, task, finetune, pretrain)"
            )))
        }
    }
    Ok(())
}

impl ExperimentMatrix {
    /// Cartesian product of `axes` applied to `template`. A mask ratio of 0
    /// denotes the no-pretraining baseline; duplicate cells are dropped.
    pub fn grid(base: RunConfig, budget: Budget, template: Cell, axes: &[(String, Vec<String>)]) -> Result<Self> {
        let mut cells = vec![template];
        for (key, values) in axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for c in &cells {
                for v in values {
                    let mut c = c.clone();
                    set_axis(&mut c, key, v)?;
                    next.push(c);
                }
            }
            cells = next;
        }
        Ok(Self::from_cells(base, budget, cells))
    }

    pub fn from_cells(base: RunConfig, budget: Budget, cells: Vec<Cell>) -> Self {
        let mut out: Vec<Cell> = Vec::new();
        for c in cells {
            let c = c.normalized();
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Self {
            base,
            budget,
            cells: out,
        }
    }

    /// Four pretraining rows (none, `a`, `b`, `a+b`) by two finetune columns.
    pub fn transfer(base: RunConfig, budget: Budget, a: &str, b: &str, mask_ratio: f64, seeds: &[u64]) -> Self {
        let rows = [vec![], vec![a.to_string()], vec![b.to_string()], vec![a.to_string(), b.to_string()]];
        let mut cells = Vec::new();
        for &seed in seeds {
            for pretrain in &rows {
                for finetune in [a, b] {
                    cells.push(Cell {
                        pretrain: pretrain.clone(),
                        finetune: finetune.to_string(),
                        mask_ratio,
                        task: base.train.task,
                        seed,
                    });
                }
            }
        }
        Self::from_cells(base, budget, cells)
    }

    fn with_budget(&self, phase: Phase, steps: u64, seed: u64) -> RunConfig {
        let mut run = self.base.clone();
        let frac = if self.base.train.total_steps == 0 {
            0.5
        } else {
            self.base.train.decay_start as f64 / self.base.train.total_steps as f64
        };
        run.train.phase = phase;
        run.train.total_steps = steps;
        run.train.decay_start = ((steps as f64) * frac).round() as u64;
        run.train.seed = seed;
        run.train.checkpoint_every = 0;
        run
    }

    /// Configuration of the pretraining phase of `cell`, if it has one.
    pub fn pretrain_config(&self, cell: &Cell) -> Option<RunConfig> {
        if cell.is_baseline() {
            return None;
        }
        let mut run = self.with_budget(Phase::Pretrain, self.budget.pretrain_steps, cell.seed);
        run.train.mask_ratio = cell.mask_ratio;
        run.train.task = cell.task;
        run.train.datasets = cell.pretrain.clone();
        Some(run)
    }

    /// Configuration of the finetuning phase; baselines get the combined budget.
    pub fn finetune_config(&self, cell: &Cell) -> RunConfig {
        let steps = if cell.is_baseline() {
            self.budget.pretrain_steps + self.budget.finetune_steps
        } else {
            self.budget.finetune_steps
        };
        let mut run = self.with_budget(Phase::Finetune, steps, cell.seed);
        run.train.datasets = vec![cell.finetune.clone()];
        run
    }
}

fn hex16(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable identifier of everything that determines a cell's result.
pub fn config_hash(matrix: &ExperimentMatrix, cell: &Cell) -> Result<String> {
    let v = serde_json::json!({
        "pretrain": matrix.pretrain_config(cell),
        "finetune": matrix.finetune_config(cell),
    });
    Ok(hex16(serde_json::to_string(&v)?.as_bytes()))
}

/// `100 * (result - baseline) / baseline`.
pub fn percent_difference(baseline: f64, result: f64) -> f64 {
    100.0 * (result - baseline) / baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub hash: String,
    /// `None` on success, else the error message.
    pub error: Option<String>,
    pub summary: Option<EvalSummary>,
    pub pct_vs_baseline: Option<f64>,
    pub pretrain_ms: u64,
    pub finetune_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub pretrain: String,
    pub finetune: String,
    pub mask_ratio: f64,
    pub task: TargetMode,
    pub n_cells: usize,
    pub n_ok: usize,
    pub rmse_1step: f64,
    pub rmse_all: f64,
    pub rmse_all_step_mean: f64,
    pub pct_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

pub const REPORT_HEADER: &str =
    "hash,pretrain,finetune,mask_ratio,task,seed,status,rmse_1step,rmse_all,rmse_all_step_mean,pct_vs_baseline,pretrain_ms,finetune_ms";
pub const SUMMARY_HEADER: &str =
    "pretrain,finetune,mask_ratio,task,n_cells,n_ok,rmse_1step,rmse_all,rmse_all_step_mean,pct_vs_baseline";

fn task_str(t: TargetMode) -> &'static str {
    match t {
        TargetMode::NextStep => "next_step",
        TargetMode::Reconstruction => "reconstruction",
    }
}

fn opt(v: Option<f64>, fmt: fn(f64) -> String) -> String {
    v.map(fmt).unwrap_or_default()
}

fn sci(v: f64) -> String {
    format!("{v:.6e}")
}

fn pct(v: f64) -> String {
    format!("{v:.1}")
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl AblationReport {
    pub fn report_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.cells {
            let s = r.summary;
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.hash,
                r.cell.pretrain_label(),
                r.cell.finetune,
                r.cell.mask_ratio,
                task_str(r.cell.task),
                r.cell.seed,
                status,
                opt(s.map(|s| s.rmse_1step), sci),
                opt(s.map(|s| s.rmse_all), sci),
                opt(s.map(|s| s.rmse_all_step_mean), sci),
                opt(r.pct_vs_baseline, pct),
                r.pretrain_ms,
                r.finetune_ms
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for r in &self.summary {
            let ok = r.n_ok > 0;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.pretrain,
                r.finetune,
                r.mask_ratio,
                task_str(r.task),
                r.n_cells,
                r.n_ok,
                opt(ok.then_some(r.rmse_1step), sci),
                opt(ok.then_some(r.rmse_all), sci),
                opt(ok.then_some(r.rmse_all_step_mean), sci),
                opt(r.pct_vs_baseline, pct)
            ));
        }
        out
    }

    /// Pretraining rows by finetune columns: median all-rollout RMSE and the
    /// percent difference to the no-pretraining row.
    pub fn transfer_csv(&self) -> String {
        let mut cols: Vec<&str> = Vec::new();
        let mut rows: Vec<&str> = Vec::new();
        for r in &self.summary {
            if !cols.contains(&r.finetune.as_str()) {
                cols.push(&r.finetune);
            }
            if !rows.contains(&r.pretrain.as_str()) {
                rows.push(&r.pretrain);
            }
        }
        let mut out = String::from("pretrain");
        for c in &cols {
            out.push_str(&format!(",{c}_rmse_all,{c}_pct"));
        }
        out.push('\n');
        for row in rows {
            out.push_str(row);
            for c in &cols {
                let cell = self.summary.iter().find(|r| r.pretrain == row && r.finetune == *c && r.n_ok > 0);
                let (v, p) = cell.map_or((String::new(), String::new()), |r| {
                    (sci(r.rmse_all), opt(r.pct_vs_baseline, pct))
                });
                out.push_str(&format!(",{v},{p}"));
            }
            out.push('\n');
        }
        out
    }

    /// All-rollout RMSE against mask ratio, one curve per finetune dataset and
    /// task; the baseline sits at ratio 0 and is also drawn as a dashed level.
    pub fn ratio_svg(&self) -> String {
        let mut series: Vec<(String, Vec<[f64; 2]>, bool)> = Vec::new();
        let mut keys: Vec<(String, String, TargetMode)> = Vec::new();
        for r in self.summary.iter().filter(|r| r.pretrain != "none") {
            let k = (r.finetune.clone(), r.pretrain.clone(), r.task);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (ft, pre, task) in &keys {
            let base = self.summary.iter().find(|r| r.pretrain == "none" && &r.finetune == ft && r.n_ok > 0);
            let mut pts: Vec<[f64; 2]> = base.map(|b| vec![[0.0, b.rmse_all]]).unwrap_or_default();
            pts.extend(
                self.summary
                    .iter()
                    .filter(|r| &r.finetune == ft && &r.pretrain == pre && r.task == *task && r.n_ok > 0)
                    .map(|r| [r.mask_ratio, r.rmse_all]),
            );
            pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
            series.push((format!("{pre} -> {ft} ({})", task_str(*task)), pts, false));
        }
        for b in self.summary.iter().filter(|r| r.pretrain == "none" && r.n_ok > 0) {
            series.push((format!("no pretraining -> {}", b.finetune), vec![[0.0, b.rmse_all], [1.0, b.rmse_all]], true));
        }
        svg::line_chart(&series, "mask ratio", "all-rollout RMSE (median)", "Finetuned rollout error vs masking ratio")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.report_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("transfer.csv"), self.transfer_csv())?;
        std::fs::write(dir.join("ratio.svg"), self.ratio_svg())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fills in baseline percentages and groups seeds by median.
pub fn summarize(cells: &mut [CellResult]) -> Vec<SummaryRow> {
    let rmse = |r: &CellResult| r.summary.map(|s| s.rmse_all);
    let baselines: Vec<(String, u64, f64)> = cells
        .iter()
        .filter(|r| r.cell.is_baseline())
        .filter_map(|r| rmse(r).map(|v| (r.cell.finetune.clone(), r.cell.seed, v)))
        .collect();
    for r in cells.iter_mut() {
        let base = baselines.iter().find(|b| b.0 == r.cell.finetune && b.1 == r.cell.seed);
        r.pct_vs_baseline = match (base, rmse(r)) {
            (Some(b), Some(v)) if !r.cell.is_baseline() => Some(percent_difference(b.2, v)),
            _ => None,
        };
    }
    let mut groups: Vec<SummaryRow> = Vec::new();
    for r in cells.iter() {
        let key = (r.cell.pretrain_label(), r.cell.finetune.clone(), r.cell.mask_ratio, r.cell.task);
        if groups
            .iter()
            .any(|g| (g.pretrain.clone(), g.finetune.clone(), g.mask_ratio, g.task) == key)
        {
            continue;
        }
        let members: Vec<&CellResult> = cells
            .iter()
            .filter(|c| (c.cell.pretrain_label(), c.cell.finetune.clone(), c.cell.mask_ratio, c.cell.task) == key)
            .collect();
        let ok: Vec<EvalSummary> = members.iter().filter_map(|c| c.summary).collect();
        let med = |f: fn(&EvalSummary) -> f64| median(ok.iter().map(f).collect()).unwrap_or(f64::NAN);
        groups.push(SummaryRow {
            pretrain: key.0,
            finetune: key.1,
            mask_ratio: key.2,
            task: key.3,
            n_cells: members.len(),
            n_ok: ok.len(),
            rmse_1step: med(|s| s.rmse_1step),
            rmse_all: med(|s| s.rmse_all),
            rmse_all_step_mean: med(|s| s.rmse_all_step_mean),
            pct_vs_baseline: None,
        });
    }
    let base: Vec<(String, f64)> = groups
        .iter()
        .filter(|g| g.pretrain == "none" && g.n_ok > 0)
        .map(|g| (g.finetune.clone(), g.rmse_all))
        .collect();
    for g in groups.iter_mut().filter(|g| g.pretrain != "none" && g.n_ok > 0) {
        g.pct_vs_baseline = base.iter().find(|b| b.0 == g.finetune).map(|b| percent_difference(b.1, g.rmse_all));
    }
    groups
}

fn lookup(datasets: &HashMap<String, Arc<Dataset>>, names: &[String]) -> Result<Vec<Arc<Dataset>>> {
    names
        .iter()
        .map(|n| {
            datasets
                .get(n)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("dataset {n:?} not available")))
        })
        .collect()
}

/// Pretrained parameters shared by every cell with the same pretraining run.
type PretrainCache = HashMap<String, Arc<ParamStore<f32>>>;

fn run_cell(
    matrix: &ExperimentMatrix,
    cell: &Cell,
    datasets: &HashMap<String, Arc<Dataset>>,
    cache: &mut PretrainCache,
    dir: Option<&Path>,
    timing: &mut (u64, u64),
) -> Result<EvalSummary> {
    let ft_data = lookup(datasets, std::slice::from_ref(&cell.finetune))?;
    let ft_run = matrix.finetune_config(cell);
    let mut trainer = match matrix.pretrain_config(cell) {
        None => Trainer::new(ft_run, ft_data.clone())?,
        Some(pre_run) => {
            let key = hex16(serde_json::to_string(&pre_run)?.as_bytes());
            let params = match cache.get(&key) {
                Some(p) => p.clone(),
                None => {
                    let t0 = Instant::now();
                    let pre_dir = dir.map(|d| d.join("pretrain").join(&key));
                    let t = multi_dataset_pretrain(pre_run, lookup(datasets, &cell.pretrain)?, pre_dir.as_deref())?;
                    timing.0 = t0.elapsed().as_millis() as u64;
                    let p = Arc::new(t.store);
                    cache.insert(key, p.clone());
                    p
                }
            };
            Trainer::from_params(ft_run, ft_data.clone(), &params)?
        }
    };
    let t0 = Instant::now();
    trainer.run(dir)?;
    timing.1 = t0.elapsed().as_millis() as u64;
    let sim = EncoderSimulator::from_trainer(&trainer);
    let results = evaluate(&sim, &ft_data[0].test, RolloutOptions::default())?;
    if let Some(d) = dir {
        std::fs::write(d.join("eval.csv"), super::eval_csv(&results))?;
    }
    Ok(summarize_rollouts(&results))
}

/// Runs every cell (pretrain, finetune, evaluate on the finetune test split).
/// A failing cell is recorded and the matrix continues.
pub fn run_ablation(
    matrix: &ExperimentMatrix,
    datasets: &HashMap<String, Arc<Dataset>>,
    out: Option<&Path>,
    progress: &mut dyn FnMut(usize, &CellResult),
) -> Result<AblationReport> {
    let mut cache = PretrainCache::new();
    let mut cells = Vec::with_capacity(matrix.cells.len());
    for (i, cell) in matrix.cells.iter().enumerate() {
        let hash = config_hash(matrix, cell)?;
        let dir = out.map(|d| d.join("cells").join(&hash));
        let mut timing = (0, 0);
        let outcome = run_cell(matrix, cell, datasets, &mut cache, dir.as_deref(), &mut timing);
        let result = CellResult {
            cell: cell.clone(),
            hash,
            error: outcome.as_ref().err().map(ToString::to_string),
            summary: outcome.ok(),
            pct_vs_baseline: None,
            pretrain_ms: timing.0,
            finetune_ms: timing.1,
        };
        progress(i, &result);
        cells.push(result);
    }
    let summary = summarize(&mut cells);
    let report = AblationReport { cells, summary };
    if let Some(d) = out {
        report.write(d)?;
    }
    Ok(report)
}
