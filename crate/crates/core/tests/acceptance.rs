//! Acceptance criteria, one PASS/FAIL line each. The training criteria (5-8)
//! run the desk-scale ablations and take the bulk of the runtime.
//!
//! `MESHMAE_ACCEPTANCE_OUT=<dir>` keeps the ablation reports.
//! `MESHMAE_ACCEPTANCE_ONLY=1,2,9` runs a subset.

use meshmae::datasets::{square_grid, Dataset, SyntheticSpec};
use meshmae::diffcore::gradcheck::{max_rel_error, max_rel_error_with, project, random};
use meshmae::diffcore::{DiffArray, ParamStore, Tape, Var};
use meshmae::eval::{percent_difference, run_ablation, AblationReport, Budget, Cell, ExperimentMatrix};
use meshmae::masking::{compact_subgraph, khop_augment, masked_count, plan_from_mask, sample_mask};
use meshmae::mesh::{build_edge_features, MeshGraph, NodeType, TargetMode};
use meshmae::model::{
    GatedMlp, MaskedAutoencoder, ModelConfig, ModelDims, ProcessorKind, ReinsertMode, UpdateKind,
};
use meshmae::partition::metis_like_partition;
use meshmae::train::{Phase, RunConfig, SampleRef, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Connected graph: random spanning tree plus `extra` random chords.
fn random_graph(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> MeshGraph {
    let mut pairs = Vec::new();
    for i in 1..n {
        pairs.push((rng.random_range(0..i), i));
    }
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.push((a, b));
        }
    }
    let positions = (0..2 * n).map(|_| rng.random_range(0.0..1.0f32)).collect();
    MeshGraph::from_undirected(2, positions, vec![NodeType::Fluid; n], &pairs).unwrap()
}

fn all_pairs_hops(g: &MeshGraph) -> Vec<Vec<usize>> {
    let n = g.n_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (&s, &r) in g.senders.iter().zip(&g.receivers) {
        d[s][r] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent: 8,
        expansion: 2,
        encoder_depth: 7,
        decoder_depth: 2,
        zero_init_updates: false,
        ..ModelConfig::default()
    }
}

fn c1_gradients() -> Check {
    let tol = 1e-4;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let idx: Arc<[usize]> = Arc::from(vec![3, 0, 4, 4, 1, 2]);
    let scales: Arc<[f64]> = Arc::from(vec![0.5, -2.0, 1.5, 0.25, 3.0]);
    type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;
    let ops: Vec<(&str, Vec<DiffArray<f64>>, OpFn)> = vec![
        ("matmul", vec![random([5, 3], 1), random([3, 4], 2)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![random([5, 3], 3), random([5, 3], 4)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![random([5, 3], 5), random([5, 3], 6)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![random([5, 3], 7), random([5, 3], 8)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![random([5, 3], 9), random([1, 3], 10)], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![random([5, 3], 11)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("scale_rows", vec![random([5, 3], 12)], {
            let s = scales.clone();
            Box::new(move |t, v| t.scale_rows(v[0], s.clone()).unwrap())
        }),
        ("relu", vec![random([5, 3], 13)], Box::new(|t, v| t.relu(v[0]))),
        ("gelu", vec![random([5, 3], 14)], Box::new(|t, v| t.gelu(v[0]))),
        ("layer_norm", vec![random([5, 4], 15), random([1, 4], 16), random([1, 4], 17)], Box::new(|t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        })),
        ("gather_rows", vec![random([5, 3], 18)], {
            let i = idx.clone();
            Box::new(move |t, v| t.gather_rows(v[0], i.clone()).unwrap())
        }),
        ("scatter_add", vec![random([6, 3], 19)], {
            let i = idx.clone();
            Box::new(move |t, v| t.scatter_add(v[0], i.clone(), 5).unwrap())
        }),
        ("concat_cols", vec![random([5, 2], 20), random([5, 3], 21)], Box::new(|t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        })),
        ("slice_rows", vec![random([6, 3], 22)], Box::new(|t, v| t.slice_rows(v[0], 1, 4).unwrap())),
    ];
    for (name, inputs, f) in &ops {
        let err = max_rel_error(inputs, h, |t, v| {
            let y = f(t, v);
            project(t, y, 99)
        });
        ensure(err < tol, || format!("{name}: relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    let target = random([5, 3], 30).values;
    for rows in [None, Some(Arc::from(vec![0usize, 2, 3]))] {
        let (t2, r2) = (target.clone(), rows.clone());
        let err = max_rel_error(&[random([5, 3], 31)], h, move |t, v| {
            t.mse_rows(v[0], t2.clone(), r2.clone()).unwrap()
        });
        ensure(err < tol, || format!("mse_rows: relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    let err = max_rel_error(&[random([5, 3], 32)], h, |t, v| t.sum(v[0]));
    ensure(err < tol, || format!("sum: relative error {err:.2e}"))?;
    worst = worst.max(err);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for reinsert in [ReinsertMode::Latent, ReinsertMode::Prediction] {
        let cfg = ModelConfig {
            reinsert,
            ..tiny_config()
        };
        let dims = ModelDims {
            node_in: 5,
            edge_in: 3,
            out: 2,
        };
        let mut store = ParamStore::<f64>::new();
        let model = MaskedAutoencoder::new(cfg, dims, &mut store, &mut rng).unwrap();
        // Zero biases put dead ReLU rows exactly on the kink; check at a generic point.
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).values.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let g = square_grid(5, 0.2, 1).unwrap();
        let x: Vec<f32> = (0..25 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plan = khop_augment(&g, &sample_mask(&g, 0.4, 2).unwrap(), 2);
        let sample = model.mask_sample(&g, &x, plan.clone()).unwrap();
        let full = model.full_context(&g).unwrap();
        let target: Vec<f64> = (0..25 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let masked: Arc<[usize]> = Arc::from(plan.masked_index.clone());
        let (_, err) = max_rel_error_with(&store, &[], h, |t, _| {
            let (out, _) = model.autoencoder_forward(t, &sample, &full)?;
            t.mse_rows(out, target.clone(), Some(masked.clone()))
        });
        ensure(err < tol, || format!("autoencoder ({reinsert:?}): relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("{} ops + autoencoder, worst relative error {worst:.1e}", ops.len() + 3))
}

fn c2_masking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rejected = 0;
    for case in 0..1000 {
        let n = rng.random_range(4..40);
        let g = random_graph(n, rng.random_range(0..2 * n), &mut rng);
        let ratio: f64 = rng.random_range(0.0..0.95);
        let seed: u64 = rng.random();
        let k = rng.random_range(1..=3);
        let want = (ratio * n as f64).round() as usize;
        let plan = match sample_mask(&g, ratio, seed) {
            Ok(p) => p,
            Err(_) if want >= n => {
                rejected += 1;
                continue;
            }
            Err(e) => return Err(format!("case {case}: {e}")),
        };
        ensure(want < n, || format!("case {case}: masking every node was accepted"))?;
        ensure(plan.n_masked() == want && masked_count(n, ratio) == want, || {
            format!("case {case}: {} masked, want {want}", plan.n_masked())
        })?;
        ensure(plan.masked.iter().filter(|&&m| m).count() == want, || format!("case {case}: flags disagree"))?;
        let plan = khop_augment(&g, &plan, k);
        for &(s, r) in &plan.surviving_edges {
            ensure(!plan.masked[s] && !plan.masked[r], || format!("case {case}: edge {s}-{r} touches a hidden node"))?;
        }
        let kept = (0..g.n_edges())
            .filter(|&e| !plan.masked[g.senders[e]] && !plan.masked[g.receivers[e]])
            .count();
        ensure(kept == plan.surviving_edges.len(), || format!("case {case}: surviving edge count"))?;

        let d = all_pairs_hops(&g);
        let mut oracle = BTreeSet::new();
        if k >= 2 {
            for u in 0..n {
                for v in 0..n {
                    if u != v && !plan.masked[u] && !plan.masked[v] && (2..=k).contains(&d[u][v]) {
                        oracle.insert((u, v));
                    }
                }
            }
        }
        let got: BTreeSet<(usize, usize)> = plan.khop_edges.iter().copied().collect();
        ensure(got.len() == plan.khop_edges.len(), || format!("case {case}: duplicate shortcut edges"))?;
        ensure(got == oracle, || format!("case {case}: K-hop set differs from the BFS oracle"))?;

        let width = 2;
        let feats: Vec<f32> = (0..n * width).map(|i| i as f32).collect();
        let sub = compact_subgraph(&g, &plan, &feats, width, &build_edge_features(&g), true)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure(sub.mapping == plan.visible_index, || format!("case {case}: compacted node set"))?;
        for (&s, &r) in sub.graph.senders.iter().zip(&sub.graph.receivers) {
            let (s, r) = (sub.mapping[s], sub.mapping[r]);
            ensure(!plan.masked[s] && !plan.masked[r], || format!("case {case}: compacted edge touches hidden node"))?;
        }

        let again = khop_augment(&g, &sample_mask(&g, ratio, seed).unwrap(), k);
        ensure(again == plan, || format!("case {case}: not deterministic in the seed"))?;
    }
    Ok(format!("1000 cases ({rejected} all-masked requests rejected)"))
}

fn pretrain_run(task: TargetMode, ratio: f64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = tiny_config();
    run.train.phase = Phase::Pretrain;
    run.train.total_steps = 10;
    run.train.decay_start = 5;
    run.train.mask_ratio = ratio;
    run.train.task = task;
    run
}

fn small(name: &str, n_train: usize) -> Arc<Dataset> {
    let mut spec = SyntheticSpec::preset(name).unwrap();
    spec.resolution = if name == "advection" { 8 } else { 5 };
    spec.n_steps = 6;
    Arc::new(Dataset::in_memory(&spec, n_train, 1).unwrap())
}

fn c3_loss_support() -> Check {
    let ds = small("vortex", 2);
    let mut cases = 0;
    for task in [TargetMode::NextStep, TargetMode::Reconstruction] {
        for ratio in [0.25, 0.5, 0.85] {
            let mut t = Trainer::new(pretrain_run(task, ratio), vec![ds.clone()]).unwrap();
            for seed in 0..4u64 {
                let r = t.sample_ref();
                let ex = t.example(r, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let full = t.model.full_context(&ex.graph).unwrap();
                let plan = t.mask_plan(&ex.graph, seed).unwrap();
                let (base, g0) = t.pretrain_grads(&ex, &full, plan.clone()).unwrap();
                let q = ex.target.len() / ex.graph.n_nodes();
                let mut moved = ex.clone();
                let mut noise = ChaCha8Rng::seed_from_u64(seed + 100);
                for &i in &plan.visible_index {
                    for c in 0..q {
                        moved.target[i * q + c] += noise.random_range(-50.0..50.0);
                    }
                }
                let (after, g1) = t.pretrain_grads(&moved, &full, plan.clone()).unwrap();
                ensure(base.to_bits() == after.to_bits(), || {
                    format!("{task:?} ratio {ratio}: loss moved {base} -> {after}")
                })?;
                ensure(g0 == g1, || format!("{task:?} ratio {ratio}: gradients moved"))?;
                let mut hidden = ex.clone();
                hidden.target[plan.masked_index[0] * q] += 1.0;
                let (changed, _) = t.pretrain_grads(&hidden, &full, plan).unwrap();
                ensure(changed != base, || "a hidden-node target does not reach the loss".into())?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, loss and gradients bitwise unchanged"))
}

fn permute_rows(x: &[f32], w: usize, perm: &[usize]) -> Vec<f32> {
    perm.iter().flat_map(|&o| x[o * w..(o + 1) * w].to_vec()).collect()
}

fn c4_equivariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = ModelDims {
        node_in: 5,
        edge_in: 3,
        out: 2,
    };
    let mut store = ParamStore::<f32>::new();
    let model = MaskedAutoencoder::new(tiny_config(), dims, &mut store, &mut rng).unwrap();
    let g = square_grid(7, 0.3, 8).unwrap();
    let n = g.n_nodes();
    let p = model.config.latent;
    let x: Vec<f32> = (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: Vec<f32> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let plan = khop_augment(&g, &sample_mask(&g, 0.4, 5).unwrap(), 2);

    let run = |g: &MeshGraph, x: &[f32], z: &[f32], masked: Vec<bool>| -> [Vec<f32>; 3] {
        let full = model.full_context(g).unwrap();
        let plan = khop_augment(g, &plan_from_mask(g, masked, 0.4, 5), 2);
        let sample = model.mask_sample(g, x, plan).unwrap();
        let mut tape = Tape::with_params(&store);
        let (enc, _) = model.encoder_forward(&mut tape, x, &full).unwrap();
        let zv = tape.constant([g.n_nodes(), p], z.to_vec()).unwrap();
        let (dec, _) = model.decoder.forward(&mut tape, zv, &full).unwrap();
        let (ae, _) = model.autoencoder_forward(&mut tape, &sample, &full).unwrap();
        [enc, dec, ae].map(|v| tape.value(v).values.clone())
    };
    let reference = run(&g, &x, &z, plan.masked.clone());
    let mut worst = 0.0f32;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..20 {
        order.shuffle(&mut rng);
        let gp = g.permuted(&order);
        let masked: Vec<bool> = order.iter().map(|&o| plan.masked[o]).collect();
        let got = run(&gp, &permute_rows(&x, 5, &order), &permute_rows(&z, p, &order), masked);
        for (name, (a, b)) in ["encoder", "decoder", "autoencoder"].iter().zip(got.iter().zip(&reference)) {
            let want = permute_rows(b, 2, &order);
            for (u, v) in a.iter().zip(&want) {
                let d = (u - v).abs();
                worst = worst.max(d);
                ensure(d <= 1e-5, || format!("{name}: {u} vs {v}"))?;
            }
        }
    }
    Ok(format!("20 relabelings of a {n}-node mesh, max deviation {worst:.1e}"))
}

fn c9_partitioning() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(40..400);
        let g = random_graph(n, rng.random_range(n..3 * n), &mut rng);
        let k = rng.random_range(2..=8);
        let p = metis_like_partition(&g, k, rng.random()).map_err(|e| format!("case {case}: {e}"))?;
        ensure(p.parts.len() == k, || format!("case {case}: {} parts, want {k}", p.parts.len()))?;
        let mut seen = vec![0u8; n];
        for part in &p.parts {
            for &v in part {
                seen[v] += 1;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || format!("case {case}: parts are not a disjoint cover"))?;
        let ideal = n as f64 / k as f64;
        for part in &p.parts {
            let dev = (part.len() as f64 - ideal).abs() / ideal;
            worst = worst.max(dev);
            ensure(dev <= 0.2, || format!("case {case}: part of {} nodes, ideal {ideal:.1}", part.len()))?;
        }
    }

    let mut run = pretrain_run(TargetMode::NextStep, 0.4);
    run.train.phase = Phase::Finetune;
    let ds = small("advection", 1);
    let graph = ds.train[0].graph.clone();
    for phase in [Phase::Pretrain, Phase::Finetune] {
        run.train.phase = phase;
        let mut t = Trainer::new(run.clone(), vec![ds.clone()]).unwrap();
        for k in [1, 2, 3, 5] {
            let part = metis_like_partition(&graph, k, 7).unwrap();
            let (before, adam) = (t.step, t.adam.step_count);
            let r = SampleRef {
                dataset: 0,
                trajectory: 0,
                step: 2,
            };
            let losses = t.submesh_steps(r, &part).map_err(|e| e.to_string())?;
            ensure(losses.len() == k && t.step == before + k as u64 && t.adam.step_count == adam + k as u64, || {
                format!("{phase:?}: {k} parts advanced {} steps", t.step - before)
            })?;
        }
    }
    Ok(format!("200 graphs, worst imbalance {:.1}%, k parts = k updates", 100.0 * worst))
}

fn c10_params() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f32>::new();
    GatedMlp::new(&mut store, "g", 2, 2, 3, false, &mut rng);
    let hand = 2 * (2 * 6 + 6) + (6 * 2 + 2);
    ensure(store.count() == 50 && hand == 50 && GatedMlp::param_count(2, 2, 3) == 50, || {
        format!("gated MLP p=2 e=3 has {} parameters", store.count())
    })?;
    let mut configs = 0;
    for latent in [2, 5, 16] {
        for expansion in [1, 3] {
            for update in [UpdateKind::Gated, UpdateKind::Mlp] {
                for (processor, depth) in [(ProcessorKind::Flat, 1), (ProcessorKind::Flat, 4), (ProcessorKind::Wcycle, 7), (ProcessorKind::Wcycle, 15)] {
                    for reinsert in [ReinsertMode::Latent, ReinsertMode::Prediction] {
                        for khop_flag in [false, true] {
                            let cfg = ModelConfig {
                                latent,
                                expansion,
                                update,
                                encoder_depth: depth,
                                encoder_processor: processor,
                                decoder_depth: 2,
                                reinsert,
                                khop_flag,
                                ..ModelConfig::default()
                            };
                            let dims = ModelDims {
                                node_in: 1 + latent % 4 + 4,
                                edge_in: 3,
                                out: 1 + expansion % 2,
                            };
                            let mut store = ParamStore::<f32>::new();
                            MaskedAutoencoder::new(cfg, dims, &mut store, &mut rng).unwrap();
                            let closed = MaskedAutoencoder::param_count(&cfg, &dims);
                            let enc = store.count_ids(&MaskedAutoencoder::encoder_ids(&store));
                            let oracle = hand_count(&cfg, &dims);
                            ensure(store.count() == closed && closed == oracle, || {
                                format!("{cfg:?}: runtime {} closed form {closed} hand {oracle}", store.count())
                            })?;
                            ensure(enc == MaskedAutoencoder::encoder_param_count(&cfg, &dims), || {
                                format!("{cfg:?}: encoder count")
                            })?;
                            configs += 1;
                        }
                    }
                }
            }
        }
    }
    let paper = ModelConfig::default();
    let dims = ModelDims {
        node_in: 6,
        edge_in: 3,
        out: 2,
    };
    Ok(format!(
        "{configs} configs; default 128-wide model has {} parameters",
        MaskedAutoencoder::param_count(&paper, &dims)
    ))
}

/// Parameter count written out layer by layer.
fn hand_count(cfg: &ModelConfig, dims: &ModelDims) -> usize {
    let p = cfg.latent;
    let lin = |i: usize, o: usize| i * o + o;
    let mlp = |i: usize, o: usize, ln: bool| lin(i, p) + lin(p, p) + lin(p, o) + if ln { 2 * o } else { 0 };
    let update = |i: usize| match cfg.update {
        UpdateKind::Gated => 2 * lin(i, cfg.expansion * p) + lin(cfg.expansion * p, p) + 2 * p,
        UpdateKind::Mlp => mlp(i, p, true),
    };
    let edge_in = dims.edge_in + usize::from(cfg.khop_flag);
    let gnn = |node_in: usize, depth: usize, processor: ProcessorKind| {
        let levels = if processor == ProcessorKind::Wcycle { 3 } else { 1 };
        mlp(node_in, p, true) + levels * mlp(edge_in, p, true) + depth * (update(3 * p) + update(2 * p)) + mlp(p, dims.out, false)
    };
    let dec_in = match cfg.reinsert {
        ReinsertMode::Latent => p,
        ReinsertMode::Prediction => dims.out,
    };
    gnn(dims.node_in, cfg.encoder_depth, cfg.encoder_processor) + gnn(dec_in, cfg.decoder_depth, cfg.decoder_processor) + p
}

// Desk-scale ablations.

fn desk_base() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).expect("configs/desk.toml")
}

fn dataset(name: &str, n_train: usize, n_test: usize) -> Arc<Dataset> {
    Arc::new(Dataset::in_memory(&SyntheticSpec::preset(name).unwrap(), n_train, n_test).unwrap())
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn run_matrix(label: &str, matrix: ExperimentMatrix, data: &HashMap<String, Arc<Dataset>>) -> AblationReport {
    let out = std::env::var_os("MESHMAE_ACCEPTANCE_OUT").map(|d| PathBuf::from(d).join(label));
    let n = matrix.cells.len();
    let report = run_ablation(&matrix, data, out.as_deref(), &mut |i, r| {
        let status = match (&r.summary, &r.error) {
            (Some(s), _) => format!("rmse_all {:.4e}", s.rmse_all),
            (None, Some(e)) => format!("failed: {e}"),
            _ => "failed".into(),
        };
        eprintln!(
            "  [{label} {}/{n}] {} -> {} ratio {} {} seed {}: {status} ({:.0}s)",
            i + 1,
            r.cell.pretrain_label(),
            r.cell.finetune,
            r.cell.mask_ratio,
            format!("{:?}", r.cell.task),
            r.cell.seed,
            (r.pretrain_ms + r.finetune_ms) as f64 / 1e3
        );
    })
    .expect("ablation run");
    eprint!("{}", report.summary_csv());
    report
}

fn median_rmse(report: &AblationReport, pretrain: &str, ratio: f64, task: TargetMode) -> Result<f64, String> {
    let row = report
        .summary
        .iter()
        .find(|r| r.pretrain == pretrain && (r.mask_ratio - ratio).abs() < 1e-12 && r.task == task)
        .ok_or_else(|| format!("no summary row for {pretrain} ratio {ratio} {task:?}"))?;
    ensure(row.n_ok == row.n_cells && row.rmse_all.is_finite(), || {
        format!("{pretrain} ratio {ratio} {task:?}: {}/{} cells finished", row.n_ok, row.n_cells)
    })?;
    Ok(row.rmse_all)
}

fn advection_report() -> AblationReport {
    let base = desk_base();
    let budget = Budget {
        pretrain_steps: 5000,
        finetune_steps: 5000,
    };
    let mut cells = Vec::new();
    for seed in SEEDS {
        for (ratio, task) in [
            (0.0, TargetMode::NextStep),
            (0.4, TargetMode::NextStep),
            (0.4, TargetMode::Reconstruction),
            (0.85, TargetMode::NextStep),
        ] {
            cells.push(Cell {
                pretrain: if ratio > 0.0 { vec!["advection".into()] } else { vec![] },
                finetune: "advection".into(),
                mask_ratio: ratio,
                task,
                seed,
            });
        }
    }
    let data = HashMap::from([("advection".to_string(), dataset("advection", 20, 5))]);
    run_matrix("advection", ExperimentMatrix::from_cells(base, budget, cells), &data)
}

fn c5_task(report: &AblationReport) -> Check {
    let next = median_rmse(report, "advection", 0.4, TargetMode::NextStep)?;
    let recon = median_rmse(report, "advection", 0.4, TargetMode::Reconstruction)?;
    ensure(next <= recon, || format!("next-step {next:.4e} > reconstruction {recon:.4e}"))?;
    Ok(format!("median rmse_all next-step {next:.4e} <= reconstruction {recon:.4e}"))
}

fn c6_ratio(report: &AblationReport) -> Check {
    let base = median_rmse(report, "none", 0.0, TargetMode::NextStep)?;
    let mid = median_rmse(report, "advection", 0.4, TargetMode::NextStep)?;
    let high = median_rmse(report, "advection", 0.85, TargetMode::NextStep)?;
    let msg = format!("median rmse_all ratio 0.4 {mid:.4e}, 0.85 {high:.4e}, 0.0 {base:.4e}");
    ensure(mid < high && mid < base, || msg.clone())?;
    Ok(msg)
}

fn c7_benefit() -> Check {
    let base = desk_base();
    let budget = Budget {
        pretrain_steps: 5000,
        finetune_steps: 5000,
    };
    let template = Cell {
        pretrain: vec!["vortex".into()],
        finetune: "vortex".into(),
        mask_ratio: 0.4,
        task: TargetMode::NextStep,
        seed: 0,
    };
    let axes = [
        ("mask_ratio".to_string(), vec!["0".to_string(), "0.4".to_string()]),
        ("seed".to_string(), SEEDS.iter().map(u64::to_string).collect()),
    ];
    let matrix = ExperimentMatrix::grid(base, budget, template, &axes).map_err(|e| e.to_string())?;
    let data = HashMap::from([("vortex".to_string(), dataset("vortex", 20, 5))]);
    let report = run_matrix("vortex", matrix, &data);
    let none = median_rmse(&report, "none", 0.0, TargetMode::NextStep)?;
    let pre = median_rmse(&report, "vortex", 0.4, TargetMode::NextStep)?;
    let pct = percent_difference(none, pre);
    let msg = format!("median rmse_all {pre:.4e} vs baseline {none:.4e} ({pct:+.1}%)");
    ensure(pct <= -10.0, || msg.clone())?;
    Ok(msg)
}

fn c8_transfer() -> Check {
    let pct = percent_difference(56.9, 29.0);
    ensure(format!("{pct:.1}") == "-49.0" && pct == 100.0 * (29.0 - 56.9) / 56.9, || {
        format!("percent difference 56.9 -> 29 gave {pct}")
    })?;
    let base = desk_base();
    let budget = Budget {
        pretrain_steps: 400,
        finetune_steps: 400,
    };
    let matrix = ExperimentMatrix::transfer(base, budget, "vortex", "vortex_multi", 0.4, &[0]);
    let data = HashMap::from([
        ("vortex".to_string(), dataset("vortex", 4, 2)),
        ("vortex_multi".to_string(), dataset("vortex_multi", 4, 2)),
    ]);
    let report = run_matrix("transfer", matrix, &data);
    let table = report.transfer_csv();
    let lines: Vec<&str> = table.lines().collect();
    ensure(lines.len() == 5, || format!("transfer table has {} rows:\n{table}", lines.len() - 1))?;
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    ensure(labels == ["none", "vortex", "vortex_multi", "vortex+vortex_multi"], || format!("rows {labels:?}"))?;
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        ensure(fields.len() == 5, || format!("row {line:?}"))?;
        let numeric = if fields[0] == "none" { vec![1, 3] } else { vec![1, 2, 3, 4] };
        for i in numeric {
            ensure(fields[i].parse::<f64>().is_ok_and(f64::is_finite), || format!("row {line:?} has a blank or non-finite entry"))?;
        }
    }
    let mixed = lines[4];
    Ok(format!("4x2 table complete, mixed row {mixed}; 56.9 -> 29 = {pct:.1}%"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MESHMAE_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut record = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !wanted(i) {
            return;
        }
        let t0 = Instant::now();
        let r = f();
        let secs = t0.elapsed().as_secs_f64();
        let line = match &r {
            Ok(m) => format!("PASS  C{i:<2} {name}: {m} [{secs:.1}s]"),
            Err(m) => format!("FAIL  C{i:<2} {name}: {m} [{secs:.1}s]"),
        };
        println!("{line}");
        results.push((i, name, r, secs));
    };
    record(1, "gradient integrity", &mut c1_gradients);
    record(2, "masking structure", &mut c2_masking);
    record(3, "loss support", &mut c3_loss_support);
    record(4, "permutation equivariance", &mut c4_equivariance);
    record(9, "partitioning", &mut c9_partitioning);
    record(10, "parameter accounting", &mut c10_params);
    if wanted(5) || wanted(6) {
        let report = advection_report();
        record(5, "pretext task direction", &mut || c5_task(&report));
        record(6, "masking ratio shape", &mut || c6_ratio(&report));
    }
    record(7, "pretraining benefit", &mut c7_benefit);
    record(8, "transfer table", &mut c8_transfer);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (i, name, r, secs) in &results {
        let tag = if r.is_ok() { "PASS" } else { "FAIL" };
        println!("  {tag}  C{i:<2} {name} [{secs:.0}s]");
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
