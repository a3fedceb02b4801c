use super::*;
use crate::volume_io::{load_manifest, write_multiview_dataset, write_volume_dataset, PhantomSpec, PhantomViews};

fn phantom_dataset(dir: &Path, dims: usize, period: usize) -> Dataset {
    let spec = PhantomSpec::new([dims; 3], period, 0.2, 1);
    let seq = spec.generate().unwrap();
    let path = write_volume_dataset(dir, &seq, &[], Some(&spec), None).unwrap();
    load_manifest(&path).unwrap()
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_points: 64,
        threads: 1,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 1000, 1e-4), 1e-4);
    assert!((cosine_lr(500, 1000, 1e-4) - 5e-5).abs() < 1e-20);
    assert_eq!(cosine_lr(1000, 1000, 1e-4), 0.0);
    let mut prev = f64::INFINITY;
    for i in 0..=1000 {
        let lr = cosine_lr(i, 1000, 1e-4);
        assert!(lr <= prev && lr >= 0.0);
        prev = lr;
    }
}

#[test]
fn adam_matches_scalar_trace() {
    let grads = [0.5, -1.25, 0.3, 2.0, 0.0, -0.7, 0.05, 1.1, -2.2, 0.9];
    let lr = 1e-3;
    let mut p = [0.25f64];
    let mut state = AdamState::new(1);
    let mut trace = Vec::new();
    for g in grads {
        adam_step(&mut p, &[g], &mut state, lr).unwrap();
        trace.push(p[0]);
    }
    // scalar recurrence written out longhand
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut x, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
    let (mut b1t, mut b2t) = (1.0f64, 1.0f64);
    for (k, g) in grads.iter().enumerate() {
        b1t *= b1;
        b2t *= b2;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + eps);
        assert!((x - trace[k]).abs() <= 1e-12, "step {k}: {x} vs {}", trace[k]);
    }
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut p = [1.0f64, -2.0];
    let mut s = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
    assert_eq!(p, [1.0, -2.0]);
    let mut p = [0.0f64];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[3.0], &mut s, 1e-3).unwrap();
    assert!((p[0] + 1e-3).abs() < 1e-11);
    assert!(adam_step(&mut p, &[f64::NAN], &mut s, 1e-3).is_err());
}

#[test]
fn sampler_ranges_determinism_and_uniformity() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let (a, _) = sample_batch(&mut iteration_rng(3, 7), &ds, &[], 500, 8).unwrap();
    let (b, _) = sample_batch(&mut iteration_rng(3, 7), &ds, &[], 500, 8).unwrap();
    assert_eq!(a, b);
    let (c, _) = sample_batch(&mut iteration_rng(3, 8), &ds, &[], 500, 8).unwrap();
    assert_ne!(a, c);
    assert!(a.positions.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.frames.iter().all(|t| (0..4).contains(t)));
    assert_eq!(a.cycle_len(), 63);

    let (big, _) = sample_batch(&mut iteration_rng(1, 0), &ds, &[], 1_000_000, 8).unwrap();
    for axis in 0..3 {
        let mean = big.positions.iter().map(|p| p[axis]).sum::<f64>() / big.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "axis {axis}: {mean}");
    }
}

#[test]
fn one_iteration_smoke_and_config_checks() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let ck = train::<f32>(&small_config(1), &ds, None, None).unwrap();
    assert_eq!(ck.iteration, 1);
    assert!(ck.history[0].1.total.is_finite());
    for bad in [
        TrainConfig { iterations: 0, ..small_config(1) },
        TrainConfig { batch_points: 0, ..small_config(1) },
        TrainConfig { lr0: 0.0, ..small_config(1) },
    ] {
        assert!(matches!(train::<f32>(&bad, &ds, None, None), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let ck = train::<f32>(&small_config(3), &ds, None, None).unwrap();
    let path = dir.path().join("c.bin");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);
    assert!(Checkpoint::<f64>::load(&path).is_err());
    match AnyCheckpoint::load(&path).unwrap() {
        AnyCheckpoint::F32(c) => assert_eq!(c, ck),
        AnyCheckpoint::F64(_) => panic!("wrong precision"),
    }
    let bytes = ck.to_bytes();
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let a = train::<f32>(&small_config(4), &ds, None, None).unwrap();
    let b = train::<f32>(&small_config(4), &ds, None, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = train::<f32>(&TrainConfig { seed: 6, ..small_config(4) }, &ds, None, None).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn resume_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..small_config(6)
    };
    let ckdir = dir.path().join("ck");
    let full = train::<f32>(&cfg, &ds, None, Some(&ckdir)).unwrap();
    let mid = Checkpoint::<f32>::load(&ckdir.join("ckpt_000003.bin")).unwrap();
    assert_eq!(mid.iteration, 3);
    let resumed = run(Trainer::resume(cfg.clone(), &ds, mid).unwrap(), None, None).unwrap();
    assert_eq!(resumed.to_bytes(), full.to_bytes());

    let other = TrainConfig { lr0: 2e-4, ..cfg };
    let mid = Checkpoint::<f32>::load(&ckdir.join("ckpt_000003.bin")).unwrap();
    assert!(Trainer::resume(other, &ds, mid).is_err());
}

#[test]
fn training_log_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(dir.path(), 8, 4);
    let log_path = dir.path().join("log.csv");
    let mut log = TrainingLog::create(&log_path).unwrap();
    train::<f32>(&small_config(5), &ds, Some(&mut log), None).unwrap();
    drop(log);
    let text = std::fs::read_to_string(&log_path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], TrainingLog::HEADER);
    assert_eq!(lines.len(), 6);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0] as usize, i);
        assert_eq!(cols[1], cosine_lr(i, 5, 1e-4));
    }
}

#[test]
fn pose_gradient_matches_finite_differences() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::new([8; 3], 4, 0.2, 1);
    let poses = spec.view_poses(&PhantomViews { count: 2, width: 6, height: 6, tilt_deg: 15.0, short_axis: 1 });
    let mv = spec.slice_views(&poses, 6, 6).unwrap();
    let path = write_multiview_dataset(dir.path(), &mv, [1.0; 3], Some(&spec), Some(&poses)).unwrap();
    let ds = load_manifest(&path).unwrap();

    let mut params = FieldParams::<f64>::init(2);
    params.randomize_heads(&mut iteration_rng(9, 0), 0.05);
    let cfg = LossConfig {
        weights: LossWeights::default(),
        terms: LossTerms::default(),
        period: 4,
    };
    let (_, planes) = sample_batch(&mut iteration_rng(4, 0), &ds, &poses, 12, 3).unwrap();
    let planes = planes.unwrap();
    let loss_at = |poses: &[ViewPose]| {
        let (b, _) = sample_batch(&mut iteration_rng(4, 0), &ds, poses, 12, 3).unwrap();
        evaluate(&params, &b, &cfg, Want::ALL, Exec::Sequential).unwrap()
    };
    let base = loss_at(&poses);
    let g = pose_gradients(&poses, &planes, base.d_positions.as_ref().unwrap());
    let h = 1e-6;
    for v in 0..2 {
        for i in 0..6 {
            let mut p = poses.clone();
            let bump = |p: &mut Vec<ViewPose>, d: f64| {
                if i < 3 {
                    p[v].rotation[i] += d;
                } else {
                    p[v].translation[i - 3] += d;
                }
            };
            bump(&mut p, h);
            let lp = loss_at(&p).breakdown.total;
            bump(&mut p, -2.0 * h);
            let lm = loss_at(&p).breakdown.total;
            let fd = (lp - lm) / (2.0 * h);
            let a = g[6 * v + i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-3), "view {v} param {i}: {a} vs {fd}");
        }
    }
}
