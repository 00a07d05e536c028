//! Autoregressive rollout, RMSE metrics, the ablation harness and SVG output.

mod ablation;
pub mod svg;

pub use ablation::{
    config_hash, parse_grid, percent_difference, run_ablation, summarize, AblationReport, Budget, Cell,
    CellResult, ExperimentMatrix, SummaryRow, REPORT_HEADER, SUMMARY_HEADER,
};

use crate::diffcore::{Checkpoint, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::mesh::{node_features_from_state, FeatureLayout, MeshGraph, NodeType, Normalizer, Trajectory};
use crate::model::MaskedAutoencoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Maps raw node features to a raw (denormalized) field increment.
pub type StepFn<'a> = Box<dyn FnMut(&[f32]) -> Result<Vec<f32>> + 'a>;

/// Anything that can advance a trajectory one step.
pub trait Simulator: Sync {
    fn layout(&self) -> FeatureLayout;
    /// Prepares a step function for `graph`.
    fn bind<'a>(&'a self, graph: &MeshGraph) -> Result<StepFn<'a>>;
}

/// A trained encoder with its normalizers.
pub struct EncoderSimulator {
    pub model: MaskedAutoencoder,
    pub store: ParamStore<f32>,
    pub layout: FeatureLayout,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
}

impl EncoderSimulator {
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let (model, store, layout, input_norm, target_norm) = crate::train::load_for_inference(ck)?;
        Ok(Self {
            model,
            store,
            layout,
            input_norm,
            target_norm,
        })
    }

    pub fn from_trainer(t: &crate::train::Trainer) -> Self {
        Self {
            model: t.model.clone(),
            store: t.store.clone(),
            layout: t.layout,
            input_norm: t.input_norm.clone(),
            target_norm: t.target_norm.clone(),
        }
    }
}

impl Simulator for EncoderSimulator {
    fn layout(&self) -> FeatureLayout {
        self.layout
    }

    fn bind<'a>(&'a self, graph: &MeshGraph) -> Result<StepFn<'a>> {
        let ctx = self.model.full_context(graph)?;
        Ok(Box::new(move |features: &[f32]| {
            let mut x = features.to_vec();
            self.input_norm.normalize(&mut x)?;
            let mut tape = Tape::with_params(&self.store);
            let (pred, _) = self.model.encoder_forward(&mut tape, &x, &ctx)?;
            let mut out = tape.value(pred).values.clone();
            self.target_norm.denormalize(&mut out)?;
            Ok(out)
        }))
    }
}

/// Predicts no change. Reference point for the metrics.
pub struct ZeroSimulator(pub FeatureLayout);

impl Simulator for ZeroSimulator {
    fn layout(&self) -> FeatureLayout {
        self.0
    }

    fn bind<'a>(&'a self, graph: &MeshGraph) -> Result<StepFn<'a>> {
        let len = graph.n_nodes() * self.0.n_fields;
        Ok(Box::new(move |_| Ok(vec![0.0; len])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Overwrite inflow nodes with ground truth after every step.
    pub clamp_inflow: bool,
    /// Steps to roll out; `None` runs to the end of the trajectory.
    pub horizon: Option<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            clamp_inflow: true,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub start: usize,
    /// Row-major `[steps, N, q]`; entry `s` estimates state `start + s + 1`.
    pub predicted: Vec<f32>,
    pub n_steps: usize,
    /// Teacher-forced: every step predicted from the true state.
    pub rmse_1step: f64,
    /// Root of the squared error averaged over all rollout steps.
    pub rmse_all: f64,
    /// Mean of `per_step`.
    pub rmse_all_step_mean: f64,
    pub per_step: Vec<f64>,
}

/// Root mean squared difference over all entries.
pub fn rmse(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("rmse", format!("{} vs {} values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::shape("rmse", "empty input"));
    }
    Ok((sq_err(pred, truth) / pred.len() as f64).sqrt())
}

fn sq_err(pred: &[f32], truth: &[f32]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = f64::from(*p) - f64::from(*t);
            d * d
        })
        .sum()
}

/// Index of the first step with a full feature vector.
pub fn first_valid_step(layout: &FeatureLayout) -> usize {
    usize::from(layout.config.history)
}

fn features_at(
    traj: &Trajectory,
    layout: &FeatureLayout,
    t: usize,
    state: &[f32],
    prev: Option<&[f32]>,
) -> Result<Vec<f32>> {
    let inflow = traj.inflow_series.as_ref().map(|s| s[t + 1]);
    Ok(node_features_from_state(&traj.graph, layout, state, prev, &traj.globals, inflow)?.values)
}

/// Autoregressive rollout from the first valid step, with per-step and
/// teacher-forced metrics in raw units.
pub fn rollout(sim: &dyn Simulator, traj: &Trajectory, opts: RolloutOptions) -> Result<RolloutResult> {
    traj.validate()?;
    let layout = sim.layout();
    if FeatureLayout::for_trajectory(traj, layout.config) != layout {
        return Err(Error::Incompatible("trajectory does not match the model's feature layout".into()));
    }
    let start = first_valid_step(&layout);
    let available = traj.n_steps - 1 - start;
    let steps = opts.horizon.map_or(available, |h| h.min(available));
    if steps == 0 {
        return Err(Error::InvalidArgument("trajectory too short to roll out".into()));
    }
    let q = layout.n_fields;
    let clamp: Vec<usize> = if opts.clamp_inflow {
        (0..traj.n_nodes())
            .filter(|&i| traj.graph.node_type[i] == NodeType::Inflow)
            .collect()
    } else {
        Vec::new()
    };
    let apply_clamp = |state: &mut [f32], truth: &[f32]| {
        for &i in &clamp {
            state[i * q..(i + 1) * q].copy_from_slice(&truth[i * q..(i + 1) * q]);
        }
    };
    let mut step = sim.bind(&traj.graph)?;
    let mut state = traj.state(start).to_vec();
    let mut prev: Option<Vec<f32>> = layout.config.history.then(|| traj.state(start - 1).to_vec());
    let mut predicted = Vec::with_capacity(steps * state.len());
    let mut per_step = Vec::with_capacity(steps);
    let (mut sq_all, mut sq_one) = (0.0, 0.0);
    for s in 0..steps {
        let t = start + s;
        let truth = traj.state(t + 1);
        let delta = if s == 0 {
            step(&features_at(traj, &layout, t, &state, prev.as_deref())?)?
        } else {
            let d = step(&features_at(traj, &layout, t, &state, prev.as_deref())?)?;
            let tf_prev = layout.config.history.then(|| traj.state(t - 1));
            let tf = step(&features_at(traj, &layout, t, traj.state(t), tf_prev)?)?;
            let mut one: Vec<f32> = traj.state(t).iter().zip(&tf).map(|(a, b)| a + b).collect();
            apply_clamp(&mut one, truth);
            sq_one += sq_err(&one, truth);
            d
        };
        let mut next: Vec<f32> = state.iter().zip(&delta).map(|(a, b)| a + b).collect();
        apply_clamp(&mut next, truth);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t + 1 });
        }
        let e = sq_err(&next, truth);
        if s == 0 {
            sq_one += e;
        }
        sq_all += e;
        per_step.push((e / next.len() as f64).sqrt());
        predicted.extend_from_slice(&next);
        let old = std::mem::replace(&mut state, next);
        if layout.config.history {
            prev = Some(old);
        }
    }
    let per_step_len = (traj.n_nodes() * q * steps) as f64;
    Ok(RolloutResult {
        start,
        predicted,
        n_steps: steps,
        rmse_1step: (sq_one / per_step_len).sqrt(),
        rmse_all: (sq_all / per_step_len).sqrt(),
        rmse_all_step_mean: per_step.iter().sum::<f64>() / steps as f64,
        per_step,
    })
}

/// Mean metrics over a set of trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_trajectories: usize,
    pub rmse_1step: f64,
    pub rmse_all: f64,
    pub rmse_all_step_mean: f64,
}

/// Rolls out every trajectory in parallel.
pub fn evaluate(sim: &dyn Simulator, trajectories: &[Trajectory], opts: RolloutOptions) -> Result<Vec<RolloutResult>> {
    trajectories.par_iter().map(|t| rollout(sim, t, opts)).collect()
}

pub fn summarize_rollouts(results: &[RolloutResult]) -> EvalSummary {
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&RolloutResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    EvalSummary {
        n_trajectories: results.len(),
        rmse_1step: mean(|r| r.rmse_1step),
        rmse_all: mean(|r| r.rmse_all),
        rmse_all_step_mean: mean(|r| r.rmse_all_step_mean),
    }
}

pub const EVAL_HEADER: &str = "trajectory,steps,rmse_1step,rmse_all,rmse_all_step_mean";

pub fn eval_csv(results: &[RolloutResult]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{:.9e},{:.9e},{:.9e}\n",
            r.n_steps, r.rmse_1step, r.rmse_all, r.rmse_all_step_mean
        ));
    }
    out
}
