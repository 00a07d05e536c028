use super::graph::{MeshGraph, NODE_TYPE_COUNT};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Time sequence of dynamic node fields on a fixed mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub graph: MeshGraph,
    /// Row-major `[S, N, q]`.
    pub fields: Vec<f32>,
    pub n_steps: usize,
    pub field_names: Vec<String>,
    pub globals: Vec<f32>,
    pub global_names: Vec<String>,
    pub dt: f64,
    /// Inflow driver value per step, if the dataset has one.
    pub inflow_series: Option<Vec<f32>>,
}

impl Trajectory {
    pub fn n_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Fields at step `t`, `[N, q]`.
    pub fn state(&self, t: usize) -> &[f32] {
        let w = self.n_nodes() * self.n_fields();
        &self.fields[t * w..(t + 1) * w]
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        if self.n_steps < 2 {
            return Err(Error::InvalidArgument("trajectory needs at least 2 steps".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.fields.len() != self.n_steps * self.n_nodes() * self.n_fields() {
            return Err(Error::InvalidArgument("fields length != S * N * q".into()));
        }
        if self.globals.len() != self.global_names.len() {
            return Err(Error::InvalidArgument("globals/global_names length differ".into()));
        }
        if let Some(s) = &self.inflow_series {
            if s.len() != self.n_steps {
                return Err(Error::InvalidArgument("inflow_series length != S".into()));
            }
        }
        if self.fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory fields".into()));
        }
        Ok(())
    }

    /// Relabels nodes; new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let q = self.n_fields();
        let mut fields = vec![0.0; self.fields.len()];
        for t in 0..self.n_steps {
            for (new, &old) in perm.iter().enumerate() {
                let src = (t * n + old) * q;
                let dst = (t * n + new) * q;
                fields[dst..dst + q].copy_from_slice(&self.fields[src..src + q]);
            }
        }
        Self {
            graph: self.graph.permuted(perm),
            fields,
            ..self.clone()
        }
    }
}

/// Which optional blocks enter the node feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// First-order backward difference of the fields.
    pub history: bool,
    pub positions: bool,
    /// Next-step inflow driver value.
    pub inflow: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            history: false,
            positions: false,
            inflow: false,
        }
    }
}

/// Column layout of the node feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_fields: usize,
    pub n_globals: usize,
    pub dim: usize,
    pub config: FeatureConfig,
}

impl FeatureLayout {
    pub fn for_trajectory(traj: &Trajectory, config: FeatureConfig) -> Self {
        Self {
            n_fields: traj.n_fields(),
            n_globals: traj.globals.len(),
            dim: traj.graph.dim,
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.dynamic_width()
            + NODE_TYPE_COUNT
            + self.n_globals
            + if self.config.positions { self.dim } else { 0 }
            + usize::from(self.config.inflow)
    }

    /// Leading columns holding the dynamic fields (and history differences).
    pub fn dynamic_width(&self) -> usize {
        self.n_fields * if self.config.history { 2 } else { 1 }
    }

    pub fn one_hot_offset(&self) -> usize {
        self.dynamic_width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub width: usize,
    /// Row-major `[N, width]`.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    pub width: usize,
    /// Row-major `[E, dim + 1]`: receiver-minus-sender displacement, then its norm.
    pub values: Vec<f32>,
}

/// Edge features for arbitrary directed pairs over `positions`.
pub fn edge_features_for(
    positions: &[f32],
    dim: usize,
    senders: &[usize],
    receivers: &[usize],
) -> EdgeFeatures {
    let width = dim + 1;
    let mut values = Vec::with_capacity(senders.len() * width);
    for (&s, &r) in senders.iter().zip(receivers) {
        let mut sq = 0.0f64;
        for c in 0..dim {
            let d = positions[r * dim + c] - positions[s * dim + c];
            values.push(d);
            sq += f64::from(d) * f64::from(d);
        }
        values.push(sq.sqrt() as f32);
    }
    EdgeFeatures { width, values }
}

pub fn build_edge_features(graph: &MeshGraph) -> EdgeFeatures {
    edge_features_for(&graph.positions, graph.dim, &graph.senders, &graph.receivers)
}

/// Node features from an explicit state rather than a stored step. Used by
/// both training (ground-truth states) and rollout (predicted states).
pub fn node_features_from_state(
    graph: &MeshGraph,
    layout: &FeatureLayout,
    state: &[f32],
    previous: Option<&[f32]>,
    globals: &[f32],
    inflow_next: Option<f32>,
) -> Result<NodeFeatures> {
    let n = graph.n_nodes();
    let q = layout.n_fields;
    if state.len() != n * q {
        return Err(Error::shape("node_features", "state length != N * q"));
    }
    if globals.len() != layout.n_globals {
        return Err(Error::shape("node_features", "globals length mismatch"));
    }
    let cfg = layout.config;
    let prev = if cfg.history {
        let p = previous.ok_or_else(|| {
            Error::InvalidArgument("history features need the previous state".into())
        })?;
        if p.len() != n * q {
            return Err(Error::shape("node_features", "previous state length != N * q"));
        }
        Some(p)
    } else {
        None
    };
    let inflow = if cfg.inflow {
        Some(inflow_next.ok_or_else(|| {
            Error::InvalidArgument("inflow feature requested but no inflow series".into())
        })?)
    } else {
        None
    };
    let width = layout.width();
    let mut values = Vec::with_capacity(n * width);
    for i in 0..n {
        let row = &state[i * q..(i + 1) * q];
        values.extend_from_slice(row);
        if let Some(p) = prev {
            values.extend(row.iter().zip(&p[i * q..(i + 1) * q]).map(|(a, b)| a - b));
        }
        let mut one_hot = [0.0f32; NODE_TYPE_COUNT];
        one_hot[graph.node_type[i].index()] = 1.0;
        values.extend_from_slice(&one_hot);
        values.extend_from_slice(globals);
        if cfg.positions {
            values.extend_from_slice(graph.position(i));
        }
        if let Some(v) = inflow {
            values.push(v);
        }
    }
    debug_assert_eq!(values.len(), n * width);
    Ok(NodeFeatures { width, values })
}

/// Input features at step `t`:
/// `[fields | fields[t]-fields[t-1] | one-hot type | globals | positions | inflow[t+1]]`.
pub fn build_node_features(traj: &Trajectory, t: usize, cfg: FeatureConfig) -> Result<NodeFeatures> {
    if t + 1 >= traj.n_steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} out of range for {} steps",
            traj.n_steps
        )));
    }
    if cfg.history && t == 0 {
        return Err(Error::InvalidArgument("history features requested at t = 0".into()));
    }
    let layout = FeatureLayout::for_trajectory(traj, cfg);
    let prev = if cfg.history { Some(traj.state(t - 1)) } else { None };
    let inflow = traj.inflow_series.as_ref().map(|s| s[t + 1]);
    node_features_from_state(&traj.graph, &layout, traj.state(t), prev, &traj.globals, inflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    NextStep,
    Reconstruction,
}

/// `NextStep`: `fields[t+1] - fields[t]`; `Reconstruction`: `fields[t]`.
pub fn make_target(traj: &Trajectory, t: usize, mode: TargetMode) -> Result<Vec<f32>> {
    match mode {
        TargetMode::NextStep => {
            if t + 1 >= traj.n_steps {
                return Err(Error::InvalidArgument(format!(
                    "next-step target needs step {} of {}",
                    t + 1,
                    traj.n_steps
                )));
            }
            Ok(traj
                .state(t + 1)
                .iter()
                .zip(traj.state(t))
                .map(|(a, b)| a - b)
                .collect())
        }
        TargetMode::Reconstruction => {
            if t >= traj.n_steps {
                return Err(Error::InvalidArgument(format!("step {t} out of range")));
            }
            Ok(traj.state(t).to_vec())
        }
    }
}
