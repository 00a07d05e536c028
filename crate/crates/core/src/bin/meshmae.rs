//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single JSON object `{"error": kind, "message": ...}` on stderr.

use clap::{Args, Parser, Subcommand};
use meshmae::datasets::{generate_dataset, Dataset, SyntheticSpec};
use meshmae::diffcore::Checkpoint;
use meshmae::eval::{
    evaluate, parse_grid, run_ablation, summarize_rollouts, svg, Budget, Cell, EncoderSimulator, ExperimentMatrix,
    RolloutOptions,
};
use meshmae::masking::{khop_augment, sample_mask};
use meshmae::mesh::TargetMode;
use meshmae::partition::metis_like_partition;
use meshmae::train::{checkpoint_run_config, Phase, RunConfig, Trainer};
use meshmae::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "meshmae", version, about = "Masked pretraining for mesh-based GNN simulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Masked pretraining of encoder and decoder.
    Pretrain(TrainArgs),
    /// Finetune the encoder on next-step prediction.
    Finetune(TrainArgs),
    /// Roll out a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw one sampled mask over a mesh.
    PreviewMask(PreviewArgs),
    /// Partition a mesh and draw the parts.
    Partition(PartitionArgs),
    /// Run an ablation or transfer matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Preset: advection, vortex, vortex_multi, pulsatile.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 20)]
    n_train: usize,
    #[arg(long, default_value_t = 5)]
    n_test: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration with `[model]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directories (several for multi-dataset pretraining).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Initial parameters (finetune) or a run to continue (`--resume`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue the run stored in `--checkpoint`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    k_hop: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    decay_start: Option<u64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// next_step or reconstruction.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    no_clamp: bool,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    trajectory: usize,
    #[arg(long, default_value_t = 0.4)]
    mask_ratio: f64,
    #[arg(long)]
    k_hop: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    trajectory: usize,
    #[arg(long, default_value_t = 4)]
    parts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory holding one generated dataset per name.
    #[arg(long)]
    data_root: PathBuf,
    /// Shared run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid axis `key=v1,v2,...`; repeat for a product.
    #[arg(long)]
    grid: Vec<String>,
    /// Pretraining datasets joined by `+`, or `none`.
    #[arg(long, default_value = "advection")]
    pretrain: String,
    #[arg(long, default_value = "advection")]
    finetune: String,
    /// Transfer table over two datasets `A,B` instead of a grid.
    #[arg(long)]
    transfer: Option<String>,
    #[arg(long, default_value_t = 0.4)]
    mask_ratio: f64,
    /// Seeds for the transfer table.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 5000)]
    pretrain_steps: u64,
    #[arg(long, default_value_t = 5000)]
    finetune_steps: u64,
    #[arg(long, env = "MESHMAE_OUT")]
    out: PathBuf,
}

fn parse_task(s: &str) -> Result<TargetMode> {
    match s {
        "next_step" => Ok(TargetMode::NextStep),
        "reconstruction" => Ok(TargetMode::Reconstruction),
        _ => Err(Error::InvalidArgument(format!("task {s:?} (next_step, reconstruction)"))),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::InvalidArgument(format!("no dataset manifest in {}", dir.display())));
    }
    Dataset::load(dir)
}

fn load_datasets(dirs: &[PathBuf]) -> Result<Vec<Arc<Dataset>>> {
    dirs.iter().map(|d| load_dataset(d).map(Arc::new)).collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = SyntheticSpec::preset(&a.preset)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.steps {
        spec.n_steps = s;
    }
    if let Some(r) = a.resolution {
        spec.resolution = r;
    }
    let m = generate_dataset(&spec, a.n_train, a.n_test, &a.out)?;
    println!("{}", serde_json::json!({"dataset": m.name, "train": m.train.len(), "test": m.test.len(), "out": a.out}));
    Ok(())
}

impl TrainArgs {
    fn apply(&self, run: &mut RunConfig, phase: Phase) -> Result<()> {
        let t = &mut run.train;
        t.phase = phase;
        if let Some(v) = self.steps {
            if self.decay_start.is_none() && t.decay_start > v {
                t.decay_start = v / 2;
            }
            t.total_steps = v;
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { t.$f = v; })*};
        }
        set!(decay_start, lr_max, lr_min, batch_size, seed, mask_ratio, checkpoint_every);
        if self.k_hop.is_some() {
            t.k_hop = self.k_hop;
        }
        if let Some(s) = &self.task {
            t.task = parse_task(s)?;
        }
        run.validate()
    }
}

fn train(a: TrainArgs, phase: Phase) -> Result<()> {
    let datasets = load_datasets(&a.data)?;
    let mut trainer = if a.resume {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--resume needs --checkpoint".into()))?;
        Trainer::resume(&Checkpoint::read(path)?, datasets)?
    } else {
        let mut run = match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let init = match &a.checkpoint {
            Some(p) => {
                let ck = Checkpoint::read(p)?;
                if a.config.is_none() {
                    run = checkpoint_run_config(&ck)?;
                }
                Some(ck)
            }
            None => None,
        };
        run.train.datasets = datasets.iter().map(|d| d.manifest.name.clone()).collect();
        a.apply(&mut run, phase)?;
        match init {
            Some(ck) => {
                let (_, store, ..) = meshmae::train::load_for_inference(&ck)?;
                Trainer::from_params(run, datasets, &store)?
            }
            None => Trainer::new(run, datasets)?,
        }
    };
    trainer.run(Some(&a.out))?;
    std::fs::write(a.out.join("config.toml"), trainer.run.to_toml()?)?;
    let last = trainer.log.last().map(|r| r.loss);
    println!("{}", serde_json::json!({"phase": phase.as_str(), "steps": trainer.step, "final_loss": last, "out": a.out}));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let sim = EncoderSimulator::from_checkpoint(&Checkpoint::read(&a.checkpoint)?)?;
    let ds = load_dataset(&a.dataset)?;
    let trajs = match a.split.as_str() {
        "test" => &ds.test,
        "train" => &ds.train,
        s => return Err(Error::InvalidArgument(format!("split {s:?} (train, test)"))),
    };
    let opts = RolloutOptions {
        clamp_inflow: !a.no_clamp,
        horizon: None,
    };
    let results = evaluate(&sim, trajs, opts)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("eval.csv"), meshmae::eval::eval_csv(&results))?;
    let summary = summarize_rollouts(&results);
    write_json(&a.out.join("summary.json"), &summary)?;
    let q = ds.manifest.field_names.len();
    for (k, (t, r)) in trajs.iter().zip(&results).enumerate() {
        let n = t.n_nodes();
        let last = r.n_steps - 1;
        let step = r.start + r.n_steps;
        let channel = |v: &[f32]| -> Vec<f32> { (0..n).map(|i| v[i * q]).collect() };
        let pred = channel(&r.predicted[last * n * q..(last + 1) * n * q]);
        let truth = channel(t.state(step));
        let err: Vec<f32> = pred.iter().zip(&truth).map(|(a, b)| a - b).collect();
        let panels = vec![
            (format!("truth t={step}"), truth),
            (format!("rollout t={step}"), pred),
            ("error".to_string(), err),
        ];
        let title = format!("trajectory {k}: {}", ds.manifest.field_names[0]);
        std::fs::write(a.out.join(format!("traj_{k:03}.svg")), svg::field_panels(&t.graph, &panels, &title))?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn trajectory_of(dataset: &Path, index: usize) -> Result<meshmae::mesh::Trajectory> {
    let ds = load_dataset(dataset)?;
    ds.train
        .into_iter()
        .chain(ds.test)
        .nth(index)
        .ok_or_else(|| Error::InvalidArgument(format!("no trajectory {index}")))
}

fn with_svg_ext(out: &Path, default_name: &str) -> PathBuf {
    if out.extension().is_some_and(|e| e == "svg") {
        out.to_path_buf()
    } else {
        out.join(default_name)
    }
}

fn preview_mask(a: PreviewArgs) -> Result<()> {
    let t = trajectory_of(&a.dataset, a.trajectory)?;
    let g = &t.graph;
    let k = a.k_hop.unwrap_or_else(|| meshmae::masking::default_k(a.mask_ratio));
    let plan = khop_augment(g, &sample_mask(g, a.mask_ratio, a.seed)?, k);
    let colors: Vec<String> = plan
        .masked
        .iter()
        .map(|&m| if m { "#bbbbbb".into() } else { svg::palette(0).into() })
        .collect();
    let shortcuts: Vec<(usize, usize)> = plan.khop_edges.iter().copied().filter(|(s, r)| s < r).collect();
    let title = format!(
        "mask ratio {} (k={}): {} masked, {} visible, {} shortcut edges",
        a.mask_ratio,
        k,
        plan.n_masked(),
        plan.n_visible(),
        shortcuts.len()
    );
    let path = with_svg_ext(&a.out, "mask.svg");
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(&path, svg::mesh_plot(g, &colors, &shortcuts, &title))?;
    println!(
        "{}",
        serde_json::json!({"masked": plan.n_masked(), "visible": plan.n_visible(), "khop_edges": plan.khop_edges.len(), "svg": path})
    );
    Ok(())
}

fn partition(a: PartitionArgs) -> Result<()> {
    let t = trajectory_of(&a.dataset, a.trajectory)?;
    let g = &t.graph;
    let p = metis_like_partition(g, a.parts, a.seed)?;
    let assign = p.assignment(g.n_nodes());
    let colors: Vec<String> = assign.iter().map(|x| svg::palette(x.unwrap_or(9)).to_string()).collect();
    let sizes: Vec<usize> = p.parts.iter().map(Vec::len).collect();
    let mean = g.n_nodes() as f64 / sizes.len().max(1) as f64;
    let imbalance = sizes.iter().map(|&s| (s as f64 / mean - 1.0).abs()).fold(0.0, f64::max);
    let cut = g.undirected_edges().iter().filter(|(u, v)| assign[*u] != assign[*v]).count();
    let title = format!("{} parts, sizes {:?}, cut {}", sizes.len(), sizes, cut);
    let path = with_svg_ext(&a.out, "partition.svg");
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(&path, svg::mesh_plot(g, &colors, &[], &title))?;
    println!(
        "{}",
        serde_json::json!({"sizes": sizes, "max_imbalance": imbalance, "edge_cut": cut, "exact_cover": p.is_exact_cover(g.n_nodes()), "svg": path})
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let budget = Budget {
        pretrain_steps: a.pretrain_steps,
        finetune_steps: a.finetune_steps,
    };
    let matrix = match &a.transfer {
        Some(pair) => {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument("--transfer expects A,B".into()))?;
            ExperimentMatrix::transfer(base, budget, x, y, a.mask_ratio, &a.seeds)
        }
        None => {
            let axes = a.grid.iter().map(|g| parse_grid(g)).collect::<Result<Vec<_>>>()?;
            let template = Cell {
                pretrain: if a.pretrain == "none" {
                    Vec::new()
                } else {
                    a.pretrain.split('+').map(str::to_string).collect()
                },
                finetune: a.finetune.clone(),
                mask_ratio: a.mask_ratio,
                task: base.train.task,
                seed: base.train.seed,
            };
            ExperimentMatrix::grid(base, budget, template, &axes)?
        }
    };
    let mut names: Vec<String> = Vec::new();
    for c in &matrix.cells {
        for n in c.pretrain.iter().chain(std::iter::once(&c.finetune)) {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let mut datasets = HashMap::new();
    for n in names {
        let ds = load_dataset(&a.data_root.join(&n))?;
        datasets.insert(n, Arc::new(ds));
    }
    let total = matrix.cells.len();
    eprintln!("{total} cells");
    let report = run_ablation(&matrix, &datasets, Some(&a.out), &mut |i, r| {
        let status = r.error.clone().unwrap_or_else(|| "ok".into());
        let rmse = r.summary.map(|s| format!("{:.4e}", s.rmse_all)).unwrap_or_default();
        eprintln!("[{}/{total}] {} -> {} ratio {} seed {}: {status} {rmse}", i + 1, r.cell.pretrain_label(), r.cell.finetune, r.cell.mask_ratio, r.cell.seed);
    })?;
    println!("{}", serde_json::json!({"cells": report.cells.len(), "failed": report.cells.iter().filter(|c| c.error.is_some()).count(), "out": a.out}));
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    let out = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pretrain(a) => train(a, Phase::Pretrain),
        Command::Finetune(a) => train(a, Phase::Finetune),
        Command::Eval(a) => eval(a),
        Command::PreviewMask(a) => preview_mask(a),
        Command::Partition(a) => partition(a),
        Command::Ablate(a) => ablate(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
