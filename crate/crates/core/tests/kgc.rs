use handgcat_core::gradcheck::{check_inputs, check_params, Tolerance};
use handgcat_core::hand_graph::{build_hand_skeleton, NUM_JOINTS};
use handgcat_core::kgc::*;
use handgcat_core::{Error, Params, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng) -> Pose2D {
    let mut j = [[0.0; 2]; NUM_JOINTS];
    for uv in j.iter_mut() {
        *uv = [rng.random_range(20.0..236.0), rng.random_range(20.0..236.0)];
    }
    Pose2D::new(j).unwrap()
}

fn small_config(depth: usize) -> KgcConfig {
    KgcConfig { depth, grid: 4, ..KgcConfig::default() }
}

#[test]
fn default_widths_ramp_to_the_grid() {
    assert_eq!(default_widths(4, 1024).unwrap(), vec![64, 256, 512, 1024]);
    assert_eq!(default_widths(1, 1024).unwrap(), vec![1024]);
    assert_eq!(default_widths(2, 1024).unwrap(), vec![512, 1024]);
    assert_eq!(default_widths(5, 1024).unwrap(), vec![64, 128, 256, 512, 1024]);
    assert!(default_widths(0, 1024).is_err());
    assert_eq!(KgcConfig::default().depth, 4);
    assert_eq!(KgcConfig::default().resolved_widths().unwrap(), vec![64, 256, 512, 1024]);
    let bad = KgcConfig { widths: vec![8, 16], ..KgcConfig::default() };
    assert!(bad.resolved_widths().is_err());
}

#[test]
fn output_shape_for_every_depth() {
    let g = build_hand_skeleton();
    let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(0));
    for depth in 1..=5 {
        let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
        let mut params = Params::<f32>::new();
        let cfg = KgcConfig { depth, ..KgcConfig::default() };
        let stack = KgcStack::new(&mut params, "kgc", &cfg, &mut rng).unwrap();
        assert_eq!(stack.depth(), depth);
        assert_eq!(stack.layers()[0].f_in(), 2);
        assert_eq!(stack.layers()[depth - 1].f_out(), 1024);
        let mut tape = Tape::new();
        let l = g.scaled_constant(&mut tape);
        let out = kgc_forward(&mut tape, &stack, &params, l, &pose).unwrap();
        assert_eq!(tape.shape(out), &[21, 32, 32]);
        assert!(tape.tensor(out).is_finite());
    }
}

#[test]
fn wrong_joint_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = Params::<f64>::new();
    let stack = KgcStack::new(&mut params, "kgc", &small_config(2), &mut rng).unwrap();
    let mut tape = Tape::new();
    let l = build_hand_skeleton().scaled_constant(&mut tape);
    let p = tape.constant(Tensor::zeros(&[20, 2]));
    assert!(matches!(stack.forward(&mut tape, &params, l, p), Err(Error::Shape { .. })));
    assert!(Pose2D::from_flat(&[0.0; 40]).is_err());
    let mut j = [[1.0; 2]; NUM_JOINTS];
    j[3][1] = f64::NAN;
    assert!(Pose2D::new(j).is_err());
}

#[test]
fn permuting_joints_with_the_graph_permutes_output() {
    let g = build_hand_skeleton();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<f64>::new();
        let stack = KgcStack::new(&mut params, "kgc", &small_config(1 + (seed as usize % 5)), &mut rng).unwrap();
        let pose = random_pose(&mut rng);
        let mut perm: Vec<usize> = (0..NUM_JOINTS).collect();
        perm.shuffle(&mut rng);
        let gp = g.permuted(&perm).unwrap();
        let mut moved = [[0.0; 2]; NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            moved[perm[i]] = pose.joints[i];
        }
        let run = |graph: &handgcat_core::hand_graph::SkeletonGraph, p: &Pose2D| {
            let mut tape = Tape::with_checks(true);
            let l = graph.scaled_constant(&mut tape);
            let out = kgc_forward(&mut tape, &stack, &params, l, p).unwrap();
            tape.tensor(out)
        };
        let a = run(&g, &pose);
        let b = run(&gp, &Pose2D::new(moved).unwrap());
        let per = 16;
        for i in 0..NUM_JOINTS {
            for k in 0..per {
                let (x, y) = (a.data()[i * per + k], b.data()[perm[i] * per + k]);
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "seed {seed}");
            }
        }
    }
}

#[test]
fn single_first_order_layer_is_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = Params::<f64>::new();
    let cfg = KgcConfig { depth: 1, order: 1, grid: 4, ..KgcConfig::default() };
    let stack = KgcStack::new(&mut params, "kgc", &cfg, &mut rng).unwrap();
    let theta = params.get(stack.layers()[0].thetas()[0]).clone();
    let pose = random_pose(&mut rng);
    let mut tape = Tape::with_checks(true);
    let l = build_hand_skeleton().scaled_constant(&mut tape);
    let out = kgc_forward(&mut tape, &stack, &params, l, &pose).unwrap();
    let x = pose.normalized();
    for j in 0..NUM_JOINTS {
        for o in 0..16 {
            let expect = x[j][0] * theta.data()[o] + x[j][1] * theta.data()[16 + o];
            assert!((tape.value(out)[j * 16 + o] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn normalization_maps_crop_to_unit_square() {
    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[1] = [256.0, 128.0];
    let n = Pose2D::new(j).unwrap().normalized();
    assert_eq!(n[0], [-1.0, -1.0]);
    assert_eq!(n[1], [1.0, 0.0]);
}

#[test]
fn noise_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pose = random_pose(&mut rng);
    assert_eq!(add_pose_noise(&pose, 0.0, &mut rng).unwrap(), pose);
    assert!(add_pose_noise(&pose, -1.0, &mut rng).is_err());
    assert!(add_pose_noise(&pose, f64::NAN, &mut rng).is_err());
    let noisy = add_pose_noise(&pose, 2.0, &mut rng).unwrap();
    assert_eq!(noisy.joints.len(), NUM_JOINTS);
    assert_ne!(noisy, pose);
}

#[test]
fn noise_has_the_requested_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pose = Pose2D::new([[100.0, 50.0]; NUM_JOINTS]).unwrap();
    let mut diffs = Vec::with_capacity(100_002);
    while diffs.len() < 100_000 {
        let n = add_pose_noise(&pose, 2.0, &mut rng).unwrap();
        for (a, b) in n.joints.iter().flatten().zip(pose.joints.iter().flatten()) {
            diffs.push(a - b);
        }
    }
    diffs.truncate(100_000);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    assert!((1.96..=2.04).contains(&std), "std {std}");
}

#[test]
fn kgc_gradients_reach_pose_and_parameters() {
    let g = build_hand_skeleton();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<f64>::new();
        let stack = KgcStack::new(&mut params, "kgc", &small_config(1 + (seed as usize % 4)), &mut rng).unwrap();
        let pose = random_pose(&mut rng);
        let probe: Vec<f64> = (0..NUM_JOINTS * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |tape: &mut Tape<f64>, params: &Params<f64>, p| {
            let l = g.scaled_constant(tape);
            let out = stack.forward(tape, params, l, p)?;
            let w = tape.constant(Tensor::new(&[NUM_JOINTS, 4, 4], probe.clone())?);
            let m = tape.mul(out, w)?;
            tape.sum(m)
        };
        let r = check_inputs(&[pose.to_tensor()], Tolerance::default(), |tape, v| loss(tape, &params, v[0])).unwrap();
        assert!(r.passed(), "seed {seed} pose: {r:?}");
        let r = check_params(&params, Tolerance::default(), 200, &mut rng, |tape, p| {
            let pv = tape.constant(pose.to_tensor());
            loss(tape, p, pv)
        })
        .unwrap();
        assert!(r.passed(), "seed {seed} params: {r:?}");
    }
}

#[test]
fn mlp_baseline_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = Params::<f64>::new();
    let mlp = MlpBaseline::new(&mut params, "mlp", &KgcConfig::default(), &mut rng).unwrap();
    let pose = random_pose(&mut rng);
    let mut tape = Tape::with_checks(true);
    let out = mlp_baseline_forward(&mut tape, &mlp, &params, &pose).unwrap();
    assert_eq!(tape.shape(out), &[21, 32, 32]);

    // Joints never mix: moving one joint changes only its own slice.
    let mut moved = pose;
    moved.joints[7] = [10.0, 240.0];
    let mut tape2 = Tape::with_checks(true);
    let out2 = mlp_baseline_forward(&mut tape2, &mlp, &params, &moved).unwrap();
    for j in 0..NUM_JOINTS {
        let same = tape.value(out)[j * 1024..(j + 1) * 1024] == tape2.value(out2)[j * 1024..(j + 1) * 1024];
        assert_eq!(same, j != 7, "joint {j}");
    }

    let mut zero = params.clone();
    for id in zero.ids().collect::<Vec<_>>() {
        let n = zero.get(id).len();
        zero.set_value(id, &vec![0.0; n]);
    }
    let mut tape = Tape::with_checks(true);
    let out = mlp_baseline_forward(&mut tape, &mlp, &zero, &pose).unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn mlp_baseline_gradcheck() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<f64>::new();
        let mlp = MlpBaseline::new(&mut params, "mlp", &small_config(3), &mut rng).unwrap();
        // Nonzero biases so the check also covers them.
        for l in mlp.layers() {
            let b = l.b.unwrap();
            let n = params.get(b).len();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            params.set_value(b, &v);
        }
        let pose = random_pose(&mut rng);
        let probe: Vec<f64> = (0..NUM_JOINTS * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |tape: &mut Tape<f64>, params: &Params<f64>, p| {
            let out = mlp.forward(tape, params, p)?;
            let w = tape.constant(Tensor::new(&[NUM_JOINTS, 4, 4], probe.clone())?);
            let m = tape.mul(out, w)?;
            tape.sum(m)
        };
        let r = check_inputs(&[pose.to_tensor()], Tolerance::default(), |tape, v| loss(tape, &params, v[0])).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
        let r = check_params(&params, Tolerance::default(), 200, &mut rng, |tape, p| {
            let pv = tape.constant(pose.to_tensor());
            loss(tape, p, pv)
        })
        .unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}
