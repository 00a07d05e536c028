use super::*;
use crate::datasets::SyntheticSpec;
use crate::mesh::{FeatureConfig, NodeType};
use crate::model::ModelConfig;

fn small_dataset(name: &str, n_train: usize) -> Arc<Dataset> {
    let spec = SyntheticSpec {
        resolution: if name == "advection" { 8 } else { 5 },
        n_steps: 6,
        ..SyntheticSpec::preset(name).unwrap()
    };
    Arc::new(Dataset::in_memory(&spec, n_train, 1).unwrap())
}

fn tiny_run(phase: Phase) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            latent: 8,
            expansion: 2,
            encoder_depth: 7,
            decoder_depth: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            phase,
            total_steps: 20,
            decay_start: 10,
            lr_max: 1e-3,
            lr_min: 1e-5,
            ..TrainConfig::default()
        },
    }
}

fn layout(history: bool) -> FeatureLayout {
    FeatureLayout {
        n_fields: 2,
        n_globals: 1,
        dim: 2,
        config: FeatureConfig {
            history,
            positions: true,
            inflow: false,
        },
    }
}

#[test]
fn zero_sigma_leaves_features() {
    let l = layout(true);
    let orig: Vec<f32> = (0..10 * l.width()).map(|i| i as f32 * 0.1).collect();
    let mut x = orig.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = inject_noise(&mut x, &l, &[0.0, 0.0], &mut rng).unwrap();
    assert_eq!(x, orig);
    assert!(eps.iter().all(|e| *e == 0.0));
    assert!(inject_noise(&mut x, &l, &[0.1, -0.1], &mut rng).is_err());
    assert!(inject_noise(&mut x, &l, &[0.1], &mut rng).is_err());
}

#[test]
fn noise_touches_dynamic_columns_only() {
    let l = layout(true);
    let w = l.width();
    let orig = vec![0.5f32; 50 * w];
    let mut x = orig.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = inject_noise(&mut x, &l, &[10.0, 0.5], &mut rng).unwrap();
    for i in 0..50 {
        for c in 0..2 {
            assert_eq!(x[i * w + c], orig[i * w + c] + eps[i * 2 + c]);
            assert_eq!(x[i * w + 2 + c], orig[i * w + 2 + c] + eps[i * 2 + c]);
        }
        assert_eq!(&x[i * w + 4..(i + 1) * w], &orig[i * w + 4..(i + 1) * w]);
    }
}

#[test]
fn noise_std_matches_sigma() {
    let l = layout(false);
    let w = l.width();
    let n = 100_000;
    let mut x = vec![0.0f32; n * w];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma = [10.0, 0.5];
    let eps = inject_noise(&mut x, &l, &sigma, &mut rng).unwrap();
    for (c, s) in sigma.iter().enumerate() {
        let vals: Vec<f64> = (0..n).map(|i| f64::from(eps[i * 2 + c])).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std / s - 1.0).abs() < 0.02, "channel {c}: {std} vs {s}");
    }
}

#[test]
fn visible_targets_do_not_enter_loss() {
    let t = Trainer::new(tiny_run(Phase::Pretrain), vec![small_dataset("advection", 2)]).unwrap();
    let r = SampleRef {
        dataset: 0,
        trajectory: 0,
        step: 2,
    };
    let ex = t.example(r, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ctx = t.context((0, 0)).unwrap();
    let plan = t.mask_plan(&ex.graph, 5).unwrap();
    let (base, g1) = t.pretrain_grads(&ex, &ctx, plan.clone()).unwrap();
    let mut ex2 = ex.clone();
    for &i in &plan.visible_index {
        ex2.target[i] += 123.0;
    }
    let (moved, g2) = t.pretrain_grads(&ex2, &ctx, plan).unwrap();
    assert_eq!(base.to_bits(), moved.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn noise_corrects_targets_in_finetune_only() {
    let ds = vec![small_dataset("advection", 2)];
    let r = SampleRef {
        dataset: 0,
        trajectory: 0,
        step: 2,
    };
    for (phase, corrected) in [(Phase::Pretrain, false), (Phase::Finetune, true)] {
        let t = Trainer::new(tiny_run(phase), ds.clone()).unwrap();
        let clean = t.example(r, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let noisy = t.example(r, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_ne!(clean.features, noisy.features);
        assert_eq!(clean.target != noisy.target, corrected, "{phase:?}");
    }
}

#[test]
fn zero_ratio_is_degenerate() {
    let mut run = tiny_run(Phase::Pretrain);
    run.train.mask_ratio = 0.0;
    let mut t = Trainer::new(run, vec![small_dataset("advection", 1)]).unwrap();
    assert!(matches!(t.train_step(), Err(Error::DegenerateMask)));
}

#[test]
fn one_step_descends() {
    let mut run = tiny_run(Phase::Pretrain);
    run.train.lr_max = 1e-4;
    run.train.lr_min = 1e-4;
    let mut t = Trainer::new(run, vec![small_dataset("advection", 1)]).unwrap();
    let r = SampleRef {
        dataset: 0,
        trajectory: 0,
        step: 1,
    };
    let ex = t.example(r, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ctx = t.context((0, 0)).unwrap();
    let plan = t.mask_plan(&ex.graph, 11).unwrap();
    let (before, g) = t.pretrain_grads(&ex, &ctx, plan.clone()).unwrap();
    t.apply(&g, before).unwrap();
    let (after, _) = t.pretrain_grads(&ex, &ctx, plan).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn finetune_freezes_decoder() {
    let mut t = Trainer::new(tiny_run(Phase::Finetune), vec![small_dataset("advection", 2)]).unwrap();
    let dec = MaskedAutoencoder::decoder_ids(&t.store);
    let snapshot: Vec<Vec<f32>> = dec.iter().map(|&id| t.store.get(id).values.clone()).collect();
    let enc0 = t.store.get(MaskedAutoencoder::encoder_ids(&t.store)[0]).values.clone();
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    for (id, v) in dec.iter().zip(&snapshot) {
        assert_eq!(&t.store.get(*id).values, v);
    }
    assert_ne!(t.store.get(MaskedAutoencoder::encoder_ids(&t.store)[0]).values, enc0);
}

/// Fields decay linearly towards zero: `c_{t+1} = 0.8 c_t`.
fn linear_dataset() -> Arc<Dataset> {
    let base = small_dataset("advection", 3);
    let decay = |t: &Trajectory| {
        let mut t = t.clone();
        let n = t.n_nodes();
        for s in 1..t.n_steps {
            for i in 0..n {
                t.fields[s * n + i] = 0.8 * t.fields[(s - 1) * n + i];
            }
        }
        t
    };
    Arc::new(Dataset {
        manifest: base.manifest.clone(),
        train: base.train.iter().map(decay).collect(),
        test: base.test.iter().map(decay).collect(),
    })
}

#[test]
fn finetune_fits_linear_toy() {
    let mut run = tiny_run(Phase::Finetune);
    run.train.total_steps = 2000;
    run.train.decay_start = 1500;
    run.train.noise_finetune = false;
    let mut t = Trainer::new(run, vec![linear_dataset()]).unwrap();
    t.run(None).unwrap();
    let head: f64 = t.log[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let tail: f64 = t.log[t.log.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(tail < 0.1 * head, "{tail} vs {head}");
}

#[test]
fn dataset_choice_uniform() {
    let mut t = Trainer::new(
        tiny_run(Phase::Pretrain),
        vec![small_dataset("vortex", 1), small_dataset("vortex_multi", 1)],
    )
    .unwrap();
    let n = 10_000;
    let first = (0..n).filter(|_| t.sample_ref().dataset == 0).count();
    assert!((first as f64 / n as f64 - 0.5).abs() < 0.02, "{first}");
}

#[test]
fn incompatible_widths_rejected() {
    let r = Trainer::new(
        tiny_run(Phase::Pretrain),
        vec![small_dataset("advection", 1), small_dataset("vortex", 1)],
    );
    assert!(matches!(r, Err(Error::Incompatible(_))));
}

#[test]
fn same_seed_same_log() {
    let losses = || {
        let mut t = Trainer::new(tiny_run(Phase::Pretrain), vec![small_dataset("advection", 2)]).unwrap();
        for _ in 0..4 {
            t.train_step().unwrap();
        }
        t.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(losses(), losses());
}

#[test]
fn resume_continues_bitwise() {
    let ds = vec![small_dataset("advection", 2)];
    let mut run = tiny_run(Phase::Pretrain);
    run.train.batch_size = 2;
    let mut a = Trainer::new(run.clone(), ds.clone()).unwrap();
    for _ in 0..3 {
        a.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mmck");
    a.save(&path).unwrap();
    for _ in 0..3 {
        a.train_step().unwrap();
    }
    let mut b = Trainer::resume(&Checkpoint::read(&path).unwrap(), ds).unwrap();
    assert_eq!(b.step, 3);
    for _ in 0..3 {
        b.train_step().unwrap();
    }
    let bits = |t: &Trainer| t.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.store, b.store);
}

#[test]
fn submesh_counts_and_single_part() {
    let ds = vec![small_dataset("advection", 1)];
    let r = SampleRef {
        dataset: 0,
        trajectory: 0,
        step: 2,
    };
    let mut t = Trainer::new(tiny_run(Phase::Finetune), ds.clone()).unwrap();
    let g = ds[0].train[0].graph.clone();
    let p = crate::partition::metis_like_partition(&g, 3, 0).unwrap();
    assert!(p.is_exact_cover(g.n_nodes()));
    t.submesh_steps(r, &p).unwrap();
    assert_eq!(t.step, 3);
    assert_eq!(t.adam.step_count, 3);
    assert!(t.submesh_steps(r, &Partition { parts: vec![], ..p.clone() }).is_err());

    let whole = Partition {
        parts: vec![(0..g.n_nodes()).collect()],
        ..p
    };
    let mut a = Trainer::new(tiny_run(Phase::Finetune), ds.clone()).unwrap();
    a.submesh_steps(r, &whole).unwrap();
    let mut b = Trainer::new(tiny_run(Phase::Finetune), ds).unwrap();
    let seed: u64 = b.rng.random();
    let ex = b.example(r, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let ctx = b.context((0, 0)).unwrap();
    let (loss, grads) = b.finetune_grads(&ex, &ctx).unwrap();
    b.apply(&grads, loss).unwrap();
    assert_eq!(a.store, b.store);
}

#[test]
fn inflow_feature_requires_series() {
    let mut run = tiny_run(Phase::Pretrain);
    run.train.features.inflow = true;
    assert!(Trainer::new(run.clone(), vec![small_dataset("advection", 1)]).is_err());
    let t = Trainer::new(run, vec![small_dataset("pulsatile", 1)]).unwrap();
    assert!(t.datasets()[0].train[0].graph.node_type.contains(&NodeType::Inflow));
}
