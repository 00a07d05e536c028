//! Synthetic trajectory generators written in the trajectory container format.

mod advection;
mod meshing;
mod pulsatile;
mod vortex;

pub use advection::{simulate_advection_diffusion, Boundary, FvOperator};
pub use meshing::{square_grid, Obstacle};
pub use pulsatile::PulsatileParams;
pub use vortex::VortexParams;

use crate::error::{Error, Result};
use crate::mesh::{read_trajectory, write_trajectory, NodeType, Trajectory};
use meshing::{channel_f64, square_grid_f64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    AdvectionDiffusion,
    VortexStreetSurrogate,
    PulsatileChannel,
}

const CHANNEL_LENGTH: f64 = 1.6;
const CHANNEL_HEIGHT: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub kind: DatasetKind,
    /// Nodes per side for the square, nodes across for channels.
    pub resolution: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub jitter: f64,
    #[serde(default)]
    pub n_obstacles: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticSpec {
    /// Built-in presets: `advection`, `vortex`, `vortex_multi`, `pulsatile`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |kind, resolution, dt| Self {
            name: name.to_string(),
            kind,
            resolution,
            n_steps: 40,
            dt,
            jitter: 0.2,
            n_obstacles: 0,
            amplitude: 1.0,
            seed: 0,
        };
        Ok(match name {
            "advection" => base(DatasetKind::AdvectionDiffusion, 22, 0.025),
            "vortex" => Self {
                n_obstacles: 1,
                ..base(DatasetKind::VortexStreetSurrogate, 11, 0.02)
            },
            "vortex_multi" => Self {
                n_obstacles: 2,
                ..base(DatasetKind::VortexStreetSurrogate, 11, 0.02)
            },
            "pulsatile" => Self {
                jitter: 0.0,
                ..base(DatasetKind::PulsatileChannel, 11, 0.02)
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown dataset preset {name:?} (advection, vortex, vortex_multi, pulsatile)"
                )))
            }
        })
    }

    pub fn field_names(&self) -> Vec<String> {
        match self.kind {
            DatasetKind::AdvectionDiffusion => vec!["c".into()],
            _ => vec!["vx".into(), "vy".into()],
        }
    }

    /// Default per-channel input noise.
    pub fn noise_sigma(&self) -> Vec<f64> {
        match self.kind {
            DatasetKind::AdvectionDiffusion => vec![0.01],
            DatasetKind::VortexStreetSurrogate => vec![0.02, 0.02],
            DatasetKind::PulsatileChannel => vec![0.01, 0.01],
        }
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Trajectory `index` of the dataset; indices past the training split
    /// give unseen parameter draws.
    pub fn trajectory(&self, index: usize) -> Result<Trajectory> {
        if self.n_steps < 2 {
            return Err(Error::InvalidArgument("a trajectory needs at least 2 steps".into()));
        }
        let mut rng = self.rng_for(index);
        match self.kind {
            DatasetKind::AdvectionDiffusion => self.advection(&mut rng),
            DatasetKind::VortexStreetSurrogate => self.vortex(&mut rng),
            DatasetKind::PulsatileChannel => self.pulsatile(&mut rng),
        }
    }

    fn advection(&self, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let (graph, pos) = square_grid_f64(self.resolution, self.jitter, rng.random())?;
        let op = FvOperator::new(&pos, &graph.cells, None)?;
        let theta = rng.random_range(0.0..2.0 * PI);
        let speed = rng.random_range(0.3..0.7);
        let velocity = [speed * theta.cos(), speed * theta.sin()];
        let nu = 10f64.powf(rng.random_range(-3.0..-2.3));
        let n_blobs = rng.random_range(2..=3);
        let blobs: Vec<[f64; 4]> = (0..n_blobs)
            .map(|_| {
                [
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.06..0.12),
                    rng.random_range(0.5..1.0),
                ]
            })
            .collect();
        let fixed: Vec<bool> = graph.node_type.iter().map(|t| *t != NodeType::Fluid).collect();
        let c0: Vec<f64> = pos
            .iter()
            .zip(&fixed)
            .map(|(p, &f)| {
                if f {
                    return 0.0;
                }
                blobs
                    .iter()
                    .map(|b| b[3] * (-((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2)) / (2.0 * b[2] * b[2])).exp())
                    .sum()
            })
            .collect();
        let limit = op.cfl_limit(velocity, nu);
        let substeps = (self.dt / (0.9 * limit)).ceil().max(1.0) as usize;
        let frames = simulate_advection_diffusion(
            &op,
            &c0,
            velocity,
            nu,
            self.dt,
            substeps,
            self.n_steps,
            Boundary::Dirichlet,
            &fixed,
        )?;
        Ok(Trajectory {
            graph,
            fields: frames.iter().flatten().map(|&x| x as f32).collect(),
            n_steps: self.n_steps,
            field_names: self.field_names(),
            globals: vec![velocity[0] as f32, velocity[1] as f32, (nu * 100.0) as f32],
            global_names: vec!["ax".into(), "ay".into(), "nu_x100".into()],
            dt: self.dt,
            inflow_series: None,
        })
    }

    fn channel_dims(&self) -> (usize, usize) {
        let ny = self.resolution;
        ((ny - 1) * 4 + 1, ny)
    }

    fn vortex(&self, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let obstacles: Vec<Obstacle> = match self.n_obstacles {
            0 | 1 => vec![Obstacle {
                cx: rng.random_range(0.3..0.5),
                cy: rng.random_range(0.15..0.25),
                r: rng.random_range(0.045..0.07),
            }],
            _ => {
                let mut obs = vec![Obstacle {
                    cx: rng.random_range(0.25..0.4),
                    cy: rng.random_range(0.12..0.18),
                    r: rng.random_range(0.04..0.06),
                }];
                for k in 1..self.n_obstacles {
                    obs.push(Obstacle {
                        cx: 0.35 + 0.45 * k as f64 + rng.random_range(0.0..0.15),
                        cy: rng.random_range(0.2..0.28),
                        r: rng.random_range(0.04..0.06),
                    });
                }
                obs
            }
        };
        let params = VortexParams {
            length: CHANNEL_LENGTH,
            height: CHANNEL_HEIGHT,
            u_max: rng.random_range(0.8..1.2),
            obstacles: obstacles.clone(),
            phase: rng.random_range(0.0..1.0),
            strength: rng.random_range(2.5..3.5),
        };
        let (nx, ny) = self.channel_dims();
        let (graph, pos) = channel_f64(nx, ny, CHANNEL_LENGTH, CHANNEL_HEIGHT, &obstacles, self.jitter, rng)?;
        let t0 = 1.0;
        let mut fields = Vec::with_capacity(self.n_steps * pos.len() * 2);
        for s in 0..self.n_steps {
            let t = t0 + s as f64 * self.dt;
            for (p, ty) in pos.iter().zip(&graph.node_type) {
                let v = match ty {
                    NodeType::Wall => [0.0, 0.0],
                    NodeType::Inflow => [params.u_max * 4.0 * (p[1] / CHANNEL_HEIGHT) * (1.0 - p[1] / CHANNEL_HEIGHT), 0.0],
                    _ => params.velocity(p[0], p[1], t),
                };
                fields.push(v[0] as f32);
                fields.push(v[1] as f32);
            }
        }
        Ok(Trajectory {
            graph,
            fields,
            n_steps: self.n_steps,
            field_names: self.field_names(),
            globals: vec![params.u_max as f32],
            global_names: vec!["u_max".into()],
            dt: self.dt,
            inflow_series: None,
        })
    }

    fn pulsatile(&self, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let period_steps = rng.random_range(16..=24);
        let params = PulsatileParams {
            height: CHANNEL_HEIGHT,
            amplitude: self.amplitude * rng.random_range(0.8..1.2),
            period: period_steps as f64 * self.dt,
            phase: rng.random_range(0.0..2.0 * PI),
            wave_speed: rng.random_range(1.0..2.0),
            decay: rng.random_range(0.2..0.5),
        };
        params.check(self.dt)?;
        let (nx, ny) = self.channel_dims();
        let (graph, pos) = channel_f64(nx, ny, CHANNEL_LENGTH, CHANNEL_HEIGHT, &[], 0.0, rng)?;
        let mut fields = Vec::with_capacity(self.n_steps * pos.len() * 2);
        let mut inflow = Vec::with_capacity(self.n_steps);
        for s in 0..self.n_steps {
            let t = s as f64 * self.dt;
            inflow.push(params.waveform(t) as f32);
            for (k, p) in pos.iter().enumerate() {
                let eta = (k / nx) as f64 / (ny - 1) as f64;
                let v = params.velocity(p[0], eta, t);
                fields.push(v[0] as f32);
                fields.push(v[1] as f32);
            }
        }
        Ok(Trajectory {
            graph,
            fields,
            n_steps: self.n_steps,
            field_names: self.field_names(),
            globals: Vec::new(),
            global_names: Vec::new(),
            dt: self.dt,
            inflow_series: Some(inflow),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub spec: SyntheticSpec,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub field_names: Vec<String>,
    pub global_names: Vec<String>,
    pub dim: usize,
    pub has_inflow: bool,
    pub noise_sigma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    /// Generates the splits without touching disk.
    pub fn in_memory(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<Self> {
        let all: Vec<Trajectory> = (0..n_train + n_test)
            .into_par_iter()
            .map(|i| spec.trajectory(i))
            .collect::<Result<_>>()?;
        let manifest = manifest_for(spec, n_train, n_test, &all[0]);
        let mut all = all;
        let test = all.split_off(n_train);
        Ok(Self {
            manifest,
            train: all,
            test,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let read = |names: &[String]| -> Result<Vec<Trajectory>> {
            names.iter().map(|n| read_trajectory(&dir.join(n))).collect()
        };
        let train = read(&manifest.train)?;
        let test = read(&manifest.test)?;
        Ok(Self {
            manifest,
            train,
            test,
        })
    }
}

fn manifest_for(spec: &SyntheticSpec, n_train: usize, n_test: usize, sample: &Trajectory) -> DatasetManifest {
    DatasetManifest {
        name: spec.name.clone(),
        spec: spec.clone(),
        train: (0..n_train).map(|i| format!("train_{i:03}.mmtj")).collect(),
        test: (0..n_test).map(|i| format!("test_{i:03}.mmtj")).collect(),
        field_names: spec.field_names(),
        global_names: sample.global_names.clone(),
        dim: sample.graph.dim,
        has_inflow: sample.inflow_series.is_some(),
        noise_sigma: spec.noise_sigma(),
    }
}

/// Writes every trajectory plus `manifest.json` into `out_dir`.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ds = Dataset::in_memory(spec, n_train, n_test)?;
    let m = &ds.manifest;
    for (name, traj) in m.train.iter().zip(&ds.train).chain(m.test.iter().zip(&ds.test)) {
        write_trajectory(&out_dir.join(name), traj)?;
    }
    crate::diffcore::write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(m)?)?;
    Ok(ds.manifest)
}
