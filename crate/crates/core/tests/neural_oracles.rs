use hybrid_planner::geometry::{EgoState, Pose2D, Trajectory, Vec2};
use hybrid_planner::neural::mlp::{dropout_mask, MlpDims, MlpModel, OUTPUT_WAYPOINTS};
use hybrid_planner::neural::train::{evaluate, read_dataset, train_step, write_dataset, Adam};
use hybrid_planner::neural::{encode_features, l2_loss, train, FeatureVector, NeuralError, TrainerConfig, TrainingSample};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn straight_path(x0: f64, len: f64) -> Trajectory {
    let pos: Vec<Vec2> = (0..=(len as usize)).map(|i| Vec2::new(x0 + i as f64, 0.0)).collect();
    Trajectory::from_positions(&pos, 0.0, 0.1, 0.0).unwrap()
}

fn random_history(rng: &mut ChaCha8Rng) -> Vec<EgoState> {
    let (mut x, mut y, mut h) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
    let v: f64 = rng.gen_range(0.0..8.0);
    let w: f64 = rng.gen_range(-0.2..0.2);
    (0..25)
        .map(|k| {
            let s = EgoState {
                pose: Pose2D::new(x, y, h),
                vel_lon: v,
                vel_lat: rng.gen_range(-0.1..0.1),
                vel_ang: w,
                acc_lon: rng.gen_range(-1.0..1.0),
                acc_lat: v * w,
                acc_ang: 0.0,
                timestamp: 0.1 * k as f64,
            };
            x += v * h.cos() * 0.1;
            y += v * h.sin() * 0.1;
            h += w * 0.1;
            s
        })
        .collect()
}

fn random_path(rng: &mut ChaCha8Rng, start: &EgoState) -> Trajectory {
    let k: f64 = rng.gen_range(-0.05..0.05);
    let mut p = start.pose;
    let mut pos = Vec::new();
    for _ in 0..60 {
        pos.push(p.position());
        p.x += p.heading.cos();
        p.y += p.heading.sin();
        p.heading += k;
    }
    Trajectory::from_positions(&pos, start.timestamp, 0.1, start.pose.heading).unwrap()
}

fn rotate_state(s: &EgoState, ang: f64, off: Vec2) -> EgoState {
    let (c, sn) = (ang.cos(), ang.sin());
    let p = s.pose;
    EgoState { pose: Pose2D::new(c * p.x - sn * p.y + off.x, sn * p.x + c * p.y + off.y, p.heading + ang), ..*s }
}

#[test]
fn stationary_straight_features() {
    let hist: Vec<EgoState> = (0..21).map(|k| EgoState::at_rest(Pose2D::new(0.0, 0.0, 0.0), 0.1 * k as f64)).collect();
    let f = encode_features(&hist, &straight_path(0.0, 60.0)).unwrap();
    assert_eq!(f.len(), 170);
    assert!(f.history.iter().all(|&v| v == 0.0));
    for j in 0..40 {
        assert!((f.path[2 * j] - (j + 1) as f64).abs() < 1e-12);
        assert!(f.path[2 * j + 1].abs() < 1e-12);
    }
}

#[test]
fn short_history_is_cold_start() {
    let hist: Vec<EgoState> = (0..10).map(|k| EgoState::at_rest(Pose2D::new(0.0, 0.0, 0.0), 0.1 * k as f64)).collect();
    assert_eq!(encode_features(&hist, &straight_path(0.0, 60.0)), Err(NeuralError::ColdStart));
}

#[test]
fn features_are_invariant_to_world_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let hist = random_history(&mut rng);
        let path = random_path(&mut rng, hist.last().unwrap());
        let f = encode_features(&hist, &path).unwrap();
        assert_eq!(f.len(), 170);
        for ang in [std::f64::consts::FRAC_PI_2, rng.gen_range(-3.0..3.0)] {
            let off = Vec2::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
            let h2: Vec<EgoState> = hist.iter().map(|s| rotate_state(s, ang, off)).collect();
            let pts: Vec<Vec2> = path
                .positions()
                .iter()
                .map(|p| Vec2::new(ang.cos() * p.x - ang.sin() * p.y + off.x, ang.sin() * p.x + ang.cos() * p.y + off.y))
                .collect();
            let p2 = Trajectory::from_positions(&pts, path.points()[0].t, 0.1, path.points()[0].pose.heading + ang).unwrap();
            let g = encode_features(&h2, &p2).unwrap();
            for (a, b) in f.history.iter().chain(&f.path).zip(g.history.iter().chain(&g.path)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

fn random_features(rng: &mut ChaCha8Rng, dims: &MlpDims) -> FeatureVector {
    FeatureVector {
        history: (0..dims.history_in).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        path: (0..dims.path_in).map(|_| rng.gen_range(-10.0..10.0)).collect(),
    }
}

fn random_sample(rng: &mut ChaCha8Rng, dims: &MlpDims) -> TrainingSample {
    TrainingSample {
        features: random_features(rng, dims),
        target: (0..dims.output / 2).map(|_| Vec2::new(rng.gen_range(0.0..40.0), rng.gen_range(-3.0..3.0))).collect(),
        planner: Vec::new(),
    }
}

#[test]
fn eval_forward_is_deterministic_and_zero_model_is_zero() {
    let dims = MlpDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_features(&mut rng, &dims);
    let m = MlpModel::new(dims, 0.1, 7).unwrap();
    let a = m.forward(&f, None).unwrap();
    let b = m.forward(&f, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), OUTPUT_WAYPOINTS);
    let z = MlpModel::zeros(dims, 0.1);
    assert!(z.forward(&f, None).unwrap().iter().all(|p| p.x == 0.0 && p.y == 0.0));
    let bad = FeatureVector { history: vec![0.0; 89], path: vec![0.0; 80] };
    assert!(matches!(m.forward(&bad, None), Err(NeuralError::Shape(_))));
    // training mode draws masks from the supplied rng
    let mut r1 = ChaCha8Rng::seed_from_u64(2);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(m.forward(&f, Some(&mut r1)).unwrap(), m.forward(&f, Some(&mut r2)).unwrap());
    assert_ne!(m.forward(&f, Some(&mut r1)).unwrap(), a);
}

fn batch_loss(m: &MlpModel, batch: &[TrainingSample]) -> f64 {
    let refs: Vec<&TrainingSample> = batch.iter().collect();
    evaluate(m, &refs).unwrap()
}

fn analytic_grad(m: &MlpModel, batch: &[TrainingSample]) -> Vec<f64> {
    let feats: Vec<&FeatureVector> = batch.iter().map(|s| &s.features).collect();
    let (xh, xp) = m.batch_inputs(&feats).unwrap();
    let t = DMatrix::from_fn(m.dims.output, batch.len(), |r, c| batch[c].target[r / 2][r % 2]);
    let (_, g) = m.loss_and_grad(&m.forward_batch(xh, xp, None), &t);
    (0..g.len()).map(|i| g.get(i)).collect()
}

fn relu_pattern(m: &MlpModel, batch: &[TrainingSample]) -> Vec<bool> {
    let feats: Vec<&FeatureVector> = batch.iter().map(|s| &s.features).collect();
    let (xh, xp) = m.batch_inputs(&feats).unwrap();
    m.forward_batch(xh, xp, None).relu_pattern()
}

/// Checks the listed parameters; returns (checked, skipped). A parameter is
/// skipped when the +-eps probes straddle a ReLU kink, where the central
/// difference does not estimate a derivative.
fn check_params(m: &mut MlpModel, batch: &[TrainingSample], idx: impl Iterator<Item = usize>) -> (usize, usize) {
    let g = analytic_grad(m, batch);
    let eps = 1e-4;
    let (mut n, mut skipped) = (0, 0);
    for i in idx {
        let p = m.param(i);
        m.set_param(i, p + eps);
        let up = batch_loss(m, batch);
        let pat_up = relu_pattern(m, batch);
        m.set_param(i, p - eps);
        let dn = batch_loss(m, batch);
        let pat_dn = relu_pattern(m, batch);
        m.set_param(i, p);
        if pat_up != pat_dn {
            skipped += 1;
            continue;
        }
        let fd = (up - dn) / (2.0 * eps);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel < 1e-4, "param {i}: analytic {} fd {fd} rel {rel}", g[i]);
        n += 1;
    }
    (n, skipped)
}

#[test]
fn gradient_matches_finite_differences_every_parameter_small_net() {
    let dims = MlpDims { history_in: 90, path_in: 80, embed: 12, hidden: 10, output: 160 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = MlpModel::new(dims, 0.1, 5).unwrap();
    let batch: Vec<TrainingSample> = (0..4).map(|_| random_sample(&mut rng, &dims)).collect();
    let total = m.param_count();
    let (n, skipped) = check_params(&mut m, &batch, 0..total);
    assert_eq!(n + skipped, total);
    assert!(skipped * 100 <= total, "{skipped} kink straddles");
}

#[test]
fn gradient_matches_finite_differences_full_net_sampled() {
    let dims = MlpDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = MlpModel::new(dims, 0.1, 6).unwrap();
    // targets near the initial output keep the loss O(1) so central
    // differences are not swamped by round-off
    let batch: Vec<TrainingSample> = (0..3)
        .map(|_| TrainingSample {
            target: (0..80).map(|_| Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
            ..random_sample(&mut rng, &dims)
        })
        .collect();
    // every bias plus a random draw of weights from each layer
    let mut idx = Vec::new();
    let mut base = 0;
    for l in &m.layers {
        let nw = l.w.len();
        idx.extend((0..60).map(|_| base + rng.gen_range(0..nw)));
        idx.extend(base + nw..base + nw + l.b.len());
        base += nw + l.b.len();
    }
    let total = idx.len();
    let (n, skipped) = check_params(&mut m, &batch, idx.into_iter());
    assert!(skipped * 100 <= total && n + skipped == total, "{skipped} kink straddles");
}

#[test]
fn l2_loss_examples() {
    let a: Vec<Vec2> = (0..80).map(|k| Vec2::new(k as f64, 0.5)).collect();
    assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
    let b: Vec<Vec2> = a.iter().map(|p| p + Vec2::new(1.0, 0.0)).collect();
    assert!((l2_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c: Vec<Vec2> = (0..80).map(|_| Vec2::new(rng.gen(), rng.gen())).collect();
    let mut acc = 0.0;
    for k in 0..80 {
        let dx = a[k].x - c[k].x;
        let dy = a[k].y - c[k].y;
        acc += dx * dx + dy * dy;
    }
    assert!((l2_loss(&a, &c).unwrap() - acc / 80.0).abs() < 1e-12);
    assert!(l2_loss(&a, &c[..79]).is_err());
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = DMatrix::from_fn(512, 1, |_, _| rng.gen_range(0.1..2.0));
    let mut acc = DMatrix::zeros(512, 1);
    let n = 20_000;
    for _ in 0..n {
        acc += x.component_mul(&dropout_mask(512, 1, 0.1, Some(&mut rng)));
    }
    acc /= n as f64;
    for i in 0..512 {
        assert!((acc[i] - x[i]).abs() <= 0.02 * x[i]);
    }
    assert_eq!(dropout_mask(4, 2, 0.1, None), DMatrix::from_element(4, 2, 1.0));
}

#[test]
fn overfits_ten_samples() {
    let dims = MlpDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<TrainingSample> = (0..10).map(|_| random_sample(&mut rng, &dims)).collect();
    let cfg = TrainerConfig { epochs: 600, batch_size: 10, validation_fraction: 0.0, ..TrainerConfig::default() };
    // memorization capacity of the full-width network, dropout off
    let (_, hist) = train(MlpModel::new(dims, 0.0, 3).unwrap(), &data, &cfg).unwrap();
    let last = *hist.train.last().unwrap();
    assert!(last < 0.01, "final train loss {last}");
    assert!(hist.validation.is_empty());
}

#[test]
fn small_steps_descend_on_fixed_batch() {
    let dims = MlpDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let data: Vec<TrainingSample> = (0..16).map(|_| random_sample(&mut rng, &dims)).collect();
    let refs: Vec<&TrainingSample> = data.iter().collect();
    let mut m = MlpModel::new(dims, 0.1, 4).unwrap();
    let cfg = TrainerConfig { learning_rate: 1e-4, ..TrainerConfig::default() };
    let mut adam = Adam::new(&m, &cfg);
    let mut prev = evaluate(&m, &refs).unwrap();
    for _ in 0..5 {
        train_step(&mut m, &mut adam, &refs, &mut rng).unwrap();
        let l = evaluate(&m, &refs).unwrap();
        assert!(l < prev, "{l} !< {prev}");
        prev = l;
    }
}

#[test]
fn training_is_deterministic_and_detects_divergence() {
    let dims = MlpDims { embed: 32, hidden: 32, ..MlpDims::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let data: Vec<TrainingSample> = (0..40).map(|_| random_sample(&mut rng, &dims)).collect();
    let cfg = TrainerConfig { epochs: 5, batch_size: 8, ..TrainerConfig::default() };
    let (m1, h1) = train(MlpModel::new(dims, 0.1, 9).unwrap(), &data, &cfg).unwrap();
    let (m2, h2) = train(MlpModel::new(dims, 0.1, 9).unwrap(), &data, &cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&h1.train), bits(&h2.train));
    assert_eq!(bits(&h1.validation), bits(&h2.validation));
    assert_eq!(m1.to_bytes(), m2.to_bytes());
    assert_eq!(h1.validation.len(), 5);

    let mut bad = data.clone();
    bad[0].target[0].x = f64::INFINITY;
    let cfg = TrainerConfig { validation_fraction: 0.0, ..cfg };
    assert_eq!(train(MlpModel::new(dims, 0.1, 9).unwrap(), &bad, &cfg).unwrap_err(), NeuralError::Diverged);
    assert_eq!(train(MlpModel::new(dims, 0.1, 9).unwrap(), &[], &cfg).unwrap_err(), NeuralError::EmptyDataset);
}

#[test]
fn model_and_dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = MlpModel::new(MlpDims::default(), 0.1, 17).unwrap();
    let p = dir.path().join("m.bin");
    m.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 8 + 4 + 20 + 8 + 8 + 8 * m.param_count());
    // header then row-major little-endian weights
    assert_eq!(&bytes[48..56], &m.layers[0].w[(0, 0)].to_le_bytes());
    assert_eq!(&bytes[56..64], &m.layers[0].w[(0, 1)].to_le_bytes());
    assert_eq!(MlpModel::load(&p).unwrap(), m);
    std::fs::write(&p, &bytes[..100]).unwrap();
    assert!(matches!(MlpModel::load(&p), Err(NeuralError::Format(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<TrainingSample> = (0..3).map(|_| random_sample(&mut rng, &MlpDims::default())).collect();
    let d = dir.path().join("d.jsonl");
    write_dataset(&d, &data).unwrap();
    assert_eq!(std::fs::read_to_string(&d).unwrap().lines().count(), 3);
    assert_eq!(read_dataset(&d).unwrap(), data);
}
