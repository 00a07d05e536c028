//! Masked pretraining, encoder finetuning, noise injection, checkpoints.

mod config;

pub use config::{lr_at, Phase, RunConfig, TrainConfig};

use crate::datasets::Dataset;
use crate::diffcore::{adam_step, AdamState, Checkpoint, Grads, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::masking::{khop_augment, sample_mask, MaskPlan};
use crate::mesh::{build_node_features, make_target, FeatureLayout, MeshGraph, Normalizer, TargetMode, Trajectory};
use crate::model::{GraphContext, MaskedAutoencoder, ModelDims};
use crate::partition::{induced_subgraph, Partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Adds `N(0, sigma_c)` to the field columns (and the history columns by the
/// same draw) of row-major `[N, layout.width()]` features. Returns the draw
/// as `[N, q]`, for correcting next-step targets.
pub fn inject_noise<R: Rng>(
    features: &mut [f32],
    layout: &FeatureLayout,
    sigma: &[f64],
    rng: &mut R,
) -> Result<Vec<f32>> {
    let q = layout.n_fields;
    let w = layout.width();
    if sigma.len() != q {
        return Err(Error::shape("inject_noise", format!("{} sigmas for {q} fields", sigma.len())));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {s}")));
    }
    if w == 0 || features.len() % w != 0 {
        return Err(Error::shape("inject_noise", "feature length is not a multiple of the width"));
    }
    let n = features.len() / w;
    let dists: Vec<Option<Normal<f64>>> = sigma
        .iter()
        .map(|&s| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma")))
        .collect();
    let mut eps = vec![0.0f32; n * q];
    for i in 0..n {
        for (c, d) in dists.iter().enumerate() {
            let Some(d) = d else { continue };
            let e = d.sample(rng) as f32;
            eps[i * q + c] = e;
            features[i * w + c] += e;
            if layout.config.history {
                features[i * w + q + c] += e;
            }
        }
    }
    Ok(eps)
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,phase,lr,loss,wall_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:e},{:.9e},{}\n", r.step, r.phase.as_str(), r.lr, r.loss, r.wall_ms));
    }
    out
}

/// Address of one training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub dataset: usize,
    pub trajectory: usize,
    pub step: usize,
}

/// Normalized model inputs and targets for one example.
#[derive(Debug, Clone)]
pub struct Example {
    pub graph: Arc<MeshGraph>,
    pub features: Vec<f32>,
    pub target: Vec<f32>,
}

/// Everything a checkpoint carries besides tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunExtra {
    run: RunConfig,
    dims: ModelDims,
    layout: FeatureLayout,
    input_norm: Normalizer,
    target_norm: Normalizer,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: String,
    log: Vec<MetricRow>,
}

/// Shared feature layout of `datasets`, or an error if they differ.
pub fn common_layout(datasets: &[Arc<Dataset>], cfg: &TrainConfig) -> Result<FeatureLayout> {
    let first = datasets
        .first()
        .and_then(|d| d.train.first())
        .ok_or_else(|| Error::InvalidArgument("no training trajectories".into()))?;
    let layout = FeatureLayout::for_trajectory(first, cfg.features);
    for d in datasets {
        for t in &d.train {
            let l = FeatureLayout::for_trajectory(t, cfg.features);
            if l != layout {
                return Err(Error::Incompatible(format!(
                    "{}: {} fields / {} globals / dim {} vs {} / {} / {}",
                    d.manifest.name, l.n_fields, l.n_globals, l.dim, layout.n_fields, layout.n_globals, layout.dim
                )));
            }
            if cfg.features.inflow && t.inflow_series.is_none() {
                return Err(Error::Incompatible(format!("{} has no inflow series", d.manifest.name)));
            }
        }
    }
    Ok(layout)
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: MaskedAutoencoder,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub layout: FeatureLayout,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub log: Vec<MetricRow>,
    datasets: Vec<Arc<Dataset>>,
    graphs: HashMap<(usize, usize), Arc<MeshGraph>>,
    contexts: Mutex<HashMap<(usize, usize), Arc<GraphContext>>>,
    started: Instant,
    wall_offset: u64,
}

impl Trainer {
    /// Fresh parameters, normalizers fitted on the training splits.
    pub fn new(run: RunConfig, datasets: Vec<Arc<Dataset>>) -> Result<Self> {
        run.validate()?;
        let layout = common_layout(&datasets, &run.train)?;
        let dims = ModelDims {
            node_in: layout.width(),
            edge_in: layout.dim + 1,
            out: layout.n_fields,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let mut store = ParamStore::new();
        let model = MaskedAutoencoder::new(run.model, dims, &mut store, &mut rng)?;
        let mut t = Self::assemble(run, model, store, layout, datasets, rng)?;
        t.fit_normalizers()?;
        Ok(t)
    }

    /// Starts a phase from existing parameters (e.g. finetuning a
    /// pretrained model). Normalizers are refitted on `datasets`.
    pub fn from_params(run: RunConfig, datasets: Vec<Arc<Dataset>>, params: &ParamStore<f32>) -> Result<Self> {
        let mut t = Self::new(run, datasets)?;
        t.store.copy_from(params)?;
        Ok(t)
    }

    fn assemble(
        run: RunConfig,
        model: MaskedAutoencoder,
        store: ParamStore<f32>,
        layout: FeatureLayout,
        datasets: Vec<Arc<Dataset>>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let ids = match run.train.phase {
            Phase::Pretrain => store.ids().collect(),
            Phase::Finetune => MaskedAutoencoder::encoder_ids(&store),
        };
        let adam = AdamState::new(&store, ids);
        let mut graphs = HashMap::new();
        for (d, ds) in datasets.iter().enumerate() {
            for (k, t) in ds.train.iter().enumerate() {
                graphs.insert((d, k), Arc::new(t.graph.clone()));
            }
        }
        Ok(Self {
            input_norm: Normalizer::new(layout.width()),
            target_norm: Normalizer::new(layout.n_fields),
            run,
            model,
            store,
            adam,
            layout,
            rng,
            step: 0,
            log: Vec::new(),
            datasets,
            graphs,
            contexts: Mutex::new(HashMap::new()),
            started: Instant::now(),
            wall_offset: 0,
        })
    }

    pub fn datasets(&self) -> &[Arc<Dataset>] {
        &self.datasets
    }

    pub fn target_mode(&self) -> TargetMode {
        match self.run.train.phase {
            Phase::Pretrain => self.run.train.task,
            Phase::Finetune => TargetMode::NextStep,
        }
    }

    fn first_step(&self) -> usize {
        usize::from(self.layout.config.history)
    }

    fn fit_normalizers(&mut self) -> Result<()> {
        let mode = self.target_mode();
        let t0 = self.first_step();
        for ds in &self.datasets {
            for traj in &ds.train {
                for t in t0..traj.n_steps.saturating_sub(1) {
                    let f = build_node_features(traj, t, self.layout.config)?;
                    self.input_norm.update(&f.values)?;
                    self.target_norm.update(&make_target(traj, t, mode)?)?;
                }
            }
        }
        if self.input_norm.count == 0 {
            return Err(Error::InvalidArgument("trajectories too short to train on".into()));
        }
        self.input_norm.freeze();
        self.target_norm.freeze();
        Ok(())
    }

    /// Uniform dataset, then uniform trajectory and step within it.
    pub fn sample_ref(&mut self) -> SampleRef {
        let dataset = self.rng.random_range(0..self.datasets.len());
        let ds = &self.datasets[dataset];
        let trajectory = self.rng.random_range(0..ds.train.len());
        let traj = &ds.train[trajectory];
        let step = self.rng.random_range(self.first_step()..traj.n_steps - 1);
        SampleRef {
            dataset,
            trajectory,
            step,
        }
    }

    fn trajectory(&self, r: SampleRef) -> &Trajectory {
        &self.datasets[r.dataset].train[r.trajectory]
    }

    fn sigma(&self, r: SampleRef) -> Vec<f64> {
        self.run
            .train
            .noise_sigma
            .clone()
            .unwrap_or_else(|| self.datasets[r.dataset].manifest.noise_sigma.clone())
    }

    /// Builds the (optionally noised) normalized example.
    pub fn example<R: Rng>(&self, r: SampleRef, noise: bool, rng: &mut R) -> Result<Example> {
        let traj = self.trajectory(r);
        let mut features = build_node_features(traj, r.step, self.layout.config)?.values;
        let mode = self.target_mode();
        let mut target = make_target(traj, r.step, mode)?;
        if noise {
            let eps = inject_noise(&mut features, &self.layout, &self.sigma(r), rng)?;
            // Pretraining scores only hidden nodes, which never see their noise.
            if mode == TargetMode::NextStep && self.run.train.phase == Phase::Finetune {
                target.iter_mut().zip(&eps).for_each(|(t, e)| *t -= e);
            }
        }
        self.input_norm.normalize(&mut features)?;
        self.target_norm.normalize(&mut target)?;
        Ok(Example {
            graph: self.graphs[&(r.dataset, r.trajectory)].clone(),
            features,
            target,
        })
    }

    fn context(&self, key: (usize, usize)) -> Result<Arc<GraphContext>> {
        if let Some(c) = self.contexts.lock().unwrap().get(&key) {
            return Ok(c.clone());
        }
        let ctx = Arc::new(self.model.full_context(&self.graphs[&key])?);
        self.contexts.lock().unwrap().insert(key, ctx.clone());
        Ok(ctx)
    }

    /// Hides nodes per the configured ratio and K.
    pub fn mask_plan(&self, graph: &MeshGraph, seed: u64) -> Result<MaskPlan> {
        let cfg = &self.run.train;
        let plan = sample_mask(graph, cfg.mask_ratio, seed)?;
        Ok(khop_augment(graph, &plan, cfg.k()))
    }

    /// Masked-node loss and parameter gradients for one example.
    pub fn pretrain_grads(&self, ex: &Example, full: &GraphContext, plan: MaskPlan) -> Result<(f64, Grads<f32>)> {
        if plan.n_masked() == 0 {
            return Err(Error::DegenerateMask);
        }
        let masked: Arc<[usize]> = Arc::from(plan.masked_index.as_slice());
        let sample = self.model.mask_sample(&ex.graph, &ex.features, plan)?;
        let mut tape = Tape::with_params(&self.store);
        let (pred, _) = self.model.autoencoder_forward(&mut tape, &sample, full)?;
        let loss = tape.mse_rows(pred, ex.target.clone(), Some(masked))?;
        Self::finish(&self.store, &tape, loss)
    }

    /// All-node next-step loss of the encoder on the unmasked mesh.
    pub fn finetune_grads(&self, ex: &Example, ctx: &GraphContext) -> Result<(f64, Grads<f32>)> {
        let mut tape = Tape::with_params(&self.store);
        let (pred, _) = self.model.encoder_forward(&mut tape, &ex.features, ctx)?;
        let loss = tape.mse_rows(pred, ex.target.clone(), None)?;
        Self::finish(&self.store, &tape, loss)
    }

    fn finish(store: &ParamStore<f32>, tape: &Tape<'_, f32>, loss: crate::diffcore::Var) -> Result<(f64, Grads<f32>)> {
        let value = f64::from(tape.scalar(loss));
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let g = tape.backward(loss)?;
        let mut grads = Grads::zeros_like(store);
        tape.accumulate_param_grads(&g, &mut grads);
        Ok((value, grads))
    }

    /// Mean of per-example results, reduced in input order.
    fn reduce(&self, results: Vec<Result<(f64, Grads<f32>)>>) -> Result<(f64, Grads<f32>)> {
        let n = results.len() as f32;
        let mut total = Grads::zeros_like(&self.store);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        total.scale(1.0 / n);
        Ok((loss / f64::from(n), total))
    }

    fn apply(&mut self, grads: &Grads<f32>, loss: f64) -> Result<()> {
        let lr = lr_at(self.step, &self.run.train);
        adam_step(&mut self.store, grads, &mut self.adam, lr)?;
        self.log.push(MetricRow {
            step: self.step,
            phase: self.run.train.phase,
            lr,
            loss,
            wall_ms: self.wall_offset + self.started.elapsed().as_millis() as u64,
        });
        self.step += 1;
        Ok(())
    }

    /// One optimizer update on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<f64> {
        let noise = self.run.train.noise_enabled();
        let jobs: Vec<(SampleRef, u64)> = (0..self.run.train.batch_size)
            .map(|_| {
                let r = self.sample_ref();
                (r, self.rng.random())
            })
            .collect();
        let phase = self.run.train.phase;
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(r, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ex = self.example(r, noise, &mut rng)?;
                let ctx = self.context((r.dataset, r.trajectory))?;
                match phase {
                    Phase::Pretrain => {
                        let plan = self.mask_plan(&ex.graph, rng.random())?;
                        self.pretrain_grads(&ex, &ctx, plan)
                    }
                    Phase::Finetune => self.finetune_grads(&ex, &ctx),
                }
            })
            .collect();
        let (loss, grads) = self.reduce(results)?;
        self.apply(&grads, loss)?;
        Ok(loss)
    }

    /// Runs until `total_steps`, checkpointing into `dir` if given.
    pub fn run(&mut self, dir: Option<&Path>) -> Result<()> {
        let every = self.run.train.checkpoint_every;
        while self.step < self.run.train.total_steps {
            self.train_step()?;
            if let (Some(d), true) = (dir, every > 0 && self.step % every == 0) {
                self.save(&d.join("checkpoint.mmck"))?;
            }
        }
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
            self.save(&d.join("checkpoint.mmck"))?;
            self.write_metrics(&d.join("metrics.csv"))?;
        }
        Ok(())
    }

    /// One optimizer update per part of `partition` over the mesh of `r`.
    pub fn submesh_steps(&mut self, r: SampleRef, partition: &Partition) -> Result<Vec<f64>> {
        let parts: Vec<&Vec<usize>> = partition.parts.iter().filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty partition".into()));
        }
        let noise = self.run.train.noise_enabled();
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        let full = self.example(r, noise, &mut rng)?;
        let (w, q) = (self.layout.width(), self.layout.n_fields);
        let mut losses = Vec::with_capacity(parts.len());
        for nodes in parts {
            let mut nodes = nodes.clone();
            nodes.sort_unstable();
            let graph = Arc::new(induced_subgraph(&full.graph, &nodes));
            let ex = Example {
                features: nodes.iter().flat_map(|&i| full.features[i * w..(i + 1) * w].to_vec()).collect(),
                target: nodes.iter().flat_map(|&i| full.target[i * q..(i + 1) * q].to_vec()).collect(),
                graph: graph.clone(),
            };
            let ctx = self.model.full_context(&graph)?;
            let (loss, grads) = match self.run.train.phase {
                Phase::Pretrain => {
                    let plan = self.mask_plan(&graph, rng.random())?;
                    self.pretrain_grads(&ex, &ctx, plan)?
                }
                Phase::Finetune => self.finetune_grads(&ex, &ctx)?,
            };
            self.apply(&grads, loss)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(metrics_csv(&self.log).as_bytes())?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let extra = RunExtra {
            run: self.run.clone(),
            dims: self.model.dims,
            layout: self.layout,
            input_norm: self.input_norm.clone(),
            target_norm: self.target_norm.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            log: self.log.clone(),
        };
        Ok(Checkpoint::pack(&self.store, &[&self.adam], self.step, serde_json::to_value(extra)?))
    }

    /// Atomic write (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        self.checkpoint()?.write(path)
    }

    /// Continues a run from `checkpoint` with the same datasets.
    pub fn resume(checkpoint: &Checkpoint<f32>, datasets: Vec<Arc<Dataset>>) -> Result<Self> {
        let extra: RunExtra = serde_json::from_value(checkpoint.manifest.extra.clone())?;
        let layout = common_layout(&datasets, &extra.run.train)?;
        if layout != extra.layout {
            return Err(Error::Incompatible("datasets differ from the checkpointed run".into()));
        }
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(extra.run.train.seed);
        let model = MaskedAutoencoder::new(extra.run.model, extra.dims, &mut store, &mut init_rng)?;
        checkpoint.restore_params(&mut store)?;
        let mut rng = ChaCha8Rng::from_seed(extra.rng_seed);
        rng.set_stream(extra.rng_stream);
        rng.set_word_pos(
            extra
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Corrupt("bad rng position".into()))?,
        );
        let mut t = Self::assemble(extra.run, model, store, layout, datasets, rng)?;
        t.adam = checkpoint.restore_adam(&t.store, 0)?;
        t.input_norm = extra.input_norm;
        t.target_norm = extra.target_norm;
        t.step = checkpoint.manifest.step;
        t.wall_offset = extra.log.last().map_or(0, |r| r.wall_ms);
        t.log = extra.log;
        Ok(t)
    }
}

/// Loads model, parameters and normalizers from a checkpoint for inference.
pub fn load_for_inference(
    checkpoint: &Checkpoint<f32>,
) -> Result<(MaskedAutoencoder, ParamStore<f32>, FeatureLayout, Normalizer, Normalizer)> {
    let extra: RunExtra = serde_json::from_value(checkpoint.manifest.extra.clone())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = MaskedAutoencoder::new(extra.run.model, extra.dims, &mut store, &mut rng)?;
    checkpoint.restore_params(&mut store)?;
    Ok((model, store, extra.layout, extra.input_norm, extra.target_norm))
}

/// Run configuration stored in a checkpoint.
pub fn checkpoint_run_config(checkpoint: &Checkpoint<f32>) -> Result<RunConfig> {
    let extra: RunExtra = serde_json::from_value(checkpoint.manifest.extra.clone())?;
    Ok(extra.run)
}

/// Pretrains one parameter set on all `datasets` (uniform dataset choice per sample).
pub fn multi_dataset_pretrain(run: RunConfig, datasets: Vec<Arc<Dataset>>, dir: Option<&Path>) -> Result<Trainer> {
    if run.train.phase != Phase::Pretrain {
        return Err(Error::Config("multi-dataset pretraining needs phase = pretrain".into()));
    }
    let mut t = Trainer::new(run, datasets)?;
    t.run(dir)?;
    Ok(t)
}

#[cfg(test)]
mod tests;
