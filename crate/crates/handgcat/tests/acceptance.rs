//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run one criterion with `cargo test -p handgcat --test acceptance -- 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use handgcat::ablate::{self, Table};
use handgcat::config::{Profile, RunConfig};
use handgcat::dataset::{self, Dataset};
use handgcat::gradcheck::check_all;
use handgcat::train::train;
use handgcat_core::cat::{multi_head_attention, positional_encode, CatBlock, CatConfig, CatStack, CatVariant};
use handgcat_core::geometry::{self, Mat3, Vec3};
use handgcat_core::gradcheck::{check_inputs, check_params, GradCheckReport, Tolerance};
use handgcat_core::hand_graph::{build_hand_skeleton, cheb_graph_conv, SkeletonGraph};
use handgcat_core::hand_model::{
    lbs_forward, rodrigues, rodrigues_tape, HandModel, ManoParams, NUM_SHAPE, NUM_VERTICES, POSE_DIM,
};
use handgcat_core::metrics::*;
use handgcat_core::model::PriorKind;
use handgcat_core::synth::SynthConfig;
use handgcat_core::{ConvSpec, Params, Tape, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/support/mod.rs"]
mod support;

use support::attention::*;
use support::spectral::{dense_chebyshev, dmat, eigenvalues, N};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> handgcat_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> handgcat_core::Result<Var>>;

fn op(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> handgcat_core::Result<Var> + 'static) -> (&'static str, Vec<Vec<usize>>, OpFn) {
    (name, shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
}

fn skew_eye(tape: &mut Tape<f64>) -> (Var, Var) {
    let mut s = Tensor::zeros(&[9, 3]);
    for (row, col, v) in [(1, 2, -1.0), (2, 1, 1.0), (3, 2, 1.0), (5, 0, -1.0), (6, 1, -1.0), (7, 0, 1.0)] {
        s.data_mut()[row * 3 + col] = v;
    }
    (tape.constant(s), tape.constant(Tensor::eye(3)))
}

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let hand = HandModel::canonical();
    vec![
        op("matmul", &[&[5, 7], &[7, 3]], |t, v| t.matmul(v[0], v[1])),
        op("add", &[&[4, 3], &[4, 3]], |t, v| t.add(v[0], v[1])),
        op("sub", &[&[4, 3], &[4, 3]], |t, v| t.sub(v[0], v[1])),
        op("mul", &[&[4, 3], &[4, 3]], |t, v| t.mul(v[0], v[1])),
        op("scale", &[&[6]], |t, v| t.scale(v[0], -0.37)),
        op("scale_by", &[&[6], &[1]], |t, v| t.scale_by(v[0], v[1])),
        op("add_bias", &[&[3, 2, 2], &[3]], |t, v| t.add_bias(v[0], v[1], 0)),
        op("relu", &[&[4, 5]], |t, v| t.relu(v[0])),
        op("map", &[&[5]], |t, v| t.map(v[0], |x| x.sin(), |x| x.cos())),
        op("softmax/0", &[&[4, 3]], |t, v| t.softmax(v[0], 0)),
        op("softmax/1", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        op("transpose", &[&[3, 4]], |t, v| t.transpose(v[0])),
        op("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        op("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        op("slice", &[&[3, 5, 2]], |t, v| t.slice(v[0], 1, 1, 3)),
        op("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], ConvSpec::same(3))),
        op("conv2d/s2", &[&[2, 6, 6], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], ConvSpec { stride: 2, pad: 1 })),
        op("avg_pool", &[&[2, 4, 4]], |t, v| t.avg_pool(v[0], 2)),
        op("upsample", &[&[2, 2, 3]], |t, v| t.upsample(v[0], 2)),
        op("global_avg_pool", &[&[3, 2, 4]], |t, v| t.global_avg_pool(v[0])),
        op("batched_affine", &[&[5, 12], &[5, 3]], |t, v| t.batched_affine(v[0], v[1])),
        op("sum", &[&[2, 5]], |t, v| t.sum(v[0])),
        op("mean", &[&[2, 5]], |t, v| t.mean(v[0])),
        op("mse_loss", &[&[5], &[5]], |t, v| t.mse_loss(v[0], v[1])),
        op("cheb_graph_conv", &[&[N, 3], &[3, 2], &[3, 2], &[3, 2]], |t, v| {
            let l = build_hand_skeleton().scaled_constant(t);
            cheb_graph_conv(t, l, v[0], &v[1..])
        }),
        op("multi_head_attention", &[&[8, 6], &[8, 5], &[8, 5]], |t, v| Ok(multi_head_attention(t, v[0], v[1], v[2], 2)?.0)),
        op("positional_encode", &[&[8, 6]], |t, v| positional_encode(t, v[0], 2, 3)),
        op("rodrigues", &[&[3]], |t, v| {
            let (sk, eye) = skew_eye(t);
            rodrigues_tape(t, sk, eye, v[0])
        }),
        op("lbs", &[&[POSE_DIM], &[NUM_SHAPE]], move |t, v| {
            let c = hand.constants(t);
            let (verts, joints) = lbs_forward(t, &c, v[0], v[1], None)?;
            let j = t.reshape(joints, &[63])?;
            let vs = t.reshape(verts, &[NUM_VERTICES * 3])?;
            let vs = t.slice(vs, 0, 0, 300)?;
            t.concat(&[j, vs], 0)
        }),
    ]
}

fn criterion_1() -> Outcome {
    Ok("benchmark tables are not reproduced; criteria 2 to 9 are the substitute property suites".into())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for (name, shapes, f) in op_suite() {
        // Vertex coordinates are ~100 mm; a wider step keeps round-off out of the quotient.
        let tol = if name == "lbs" { Tolerance { step: 1e-5, ..Tolerance::default() } } else { Tolerance::default() };
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = check_inputs(&inputs, tol, |t, v| {
                let y = f(t, v)?;
                probe(t, y, seed)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            ensure!(r.passed(), "{name} seed {seed}: worst ratio {:.3e}", r.worst_ratio);
        }
        checked += 1;
    }
    for variant in [CatVariant::Cat, CatVariant::PlainTransformer] {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = CatConfig { blocks: 1 + seed as usize % 3, heads: 2, d_model: 8, variant, out_channels: 4 };
            let mut params = Params::<f64>::new();
            let stack = CatStack::new(&mut params, "cat", 6, 21, &cfg, &mut rng).map_err(|e| e.to_string())?;
            randomize_biases(&mut params, &mut rng);
            let fi = rand_tensor(&mut rng, &[6, 2, 2]);
            let fp = rand_tensor(&mut rng, &[21, 2, 2]);
            let loss = |t: &mut Tape<f64>, p: &Params<f64>, a: Var, b: Var| {
                let y = stack.forward(t, p, a, b)?.fused;
                probe(t, y, seed)
            };
            let ri = check_inputs(&[fi.clone(), fp.clone()], Tolerance::default(), |t, v| loss(t, &params, v[0], v[1]))
                .map_err(|e| e.to_string())?;
            let rp = check_params(&params, Tolerance::default(), 100, &mut rng, |t, p| {
                let (a, b) = (t.constant(fi.clone()), t.constant(fp.clone()));
                loss(t, p, a, b)
            })
            .map_err(|e| e.to_string())?;
            ensure!(ri.passed() && rp.passed(), "cat stack {variant:?} seed {seed}: {:.3e} / {:.3e}", ri.worst_ratio, rp.worst_ratio);
        }
        checked += 1;
    }
    let pipes = check_all(SEEDS, 80).map_err(|e| e.to_string())?;
    let worst = |f: fn(&handgcat::gradcheck::PipelineCheck) -> &GradCheckReport| {
        pipes.iter().map(|c| f(c).worst_ratio).fold(0.0, f64::max)
    };
    if let Some(bad) = pipes.iter().find(|c| !c.passed()) {
        return Err(format!("pipeline {} seed {}: inputs {:.3e}, params {:.3e}", bad.label, bad.seed, bad.inputs.worst_ratio, bad.params.worst_ratio));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:.1?}, budget 5 min");
    Ok(format!(
        "{checked} operations x {SEEDS} seeds and {} pipeline checks at rel 1e-4 (worst pipeline ratio inputs {:.2e}, params {:.2e}) in {elapsed:.1?}",
        pipes.len(),
        worst(|c| &c.inputs),
        worst(|c| &c.params)
    ))
}

fn criterion_3() -> Outcome {
    let g = build_hand_skeleton();
    let l = g.laplacian();
    for i in 0..N {
        for j in 0..N {
            ensure!(l[i * N + j] == l[j * N + i], "L not symmetric at ({i}, {j})");
        }
    }
    let ev = eigenvalues(l, N);
    ensure!(ev.iter().all(|&e| (-1e-9..=2.0 + 1e-9).contains(&e)), "L spectrum {ev:?}");
    let evs = eigenvalues(g.scaled_laplacian(), N);
    ensure!(evs.iter().all(|&e| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&e)), "scaled spectrum {evs:?}");
    ensure!((g.lambda_max() - ev[N - 1]).abs() < 1e-6, "power iteration {} vs dense {}", g.lambda_max(), ev[N - 1]);

    let lm = dmat(g.scaled_laplacian(), N);
    let t = dense_chebyshev(&lm, 8);
    let eig = SymmetricEigen::new(lm.clone());
    for (k, tk) in t.iter().enumerate() {
        let spectral = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| (k as f64 * x.clamp(-1.0, 1.0).acos()).cos()))
            * eig.eigenvectors.transpose();
        ensure!((tk - spectral).abs().max() < 1e-9, "T_{k} differs from cos(k arccos L)");
    }

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fi, fo, k) = (3, 5, 4);
        let f = rand_tensor(&mut rng, &[N, fi]);
        let thetas: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(&mut rng, &[fi, fo])).collect();
        let fm = DMatrix::from_row_slice(N, fi, f.data());
        let mut expect = DMatrix::zeros(N, fo);
        for (tk, th) in dense_chebyshev(&lm, k).iter().zip(&thetas) {
            expect += tk * &fm * DMatrix::from_row_slice(fi, fo, th.data());
        }
        let out = run_cheb(&g, &f, &thetas);
        for i in 0..N {
            for c in 0..fo {
                ensure!((out[i * fo + c] - expect[(i, c)]).abs() < 1e-9, "cheb conv vs oracle, seed {seed}");
            }
        }

        let mut perm: Vec<usize> = (0..N).collect();
        perm.shuffle(&mut rng);
        let gp = g.permuted(&perm).map_err(|e| e.to_string())?;
        let mut fp = Tensor::zeros(&[N, fi]);
        for i in 0..N {
            fp.data_mut()[perm[i] * fi..perm[i] * fi + fi].copy_from_slice(&f.data()[i * fi..i * fi + fi]);
        }
        let moved = run_cheb(&gp, &fp, &thetas);
        for i in 0..N {
            for c in 0..fo {
                ensure!((moved[perm[i] * fo + c] - out[i * fo + c]).abs() < 1e-12, "permutation equivariance, seed {seed}");
            }
        }
    }
    Ok(format!("lambda_max {:.12}, L in [{:.2e}, {:.6}], recurrence and {SEEDS}-seed oracle and permutation checks hold", g.lambda_max(), ev[0], ev[N - 1]))
}

fn run_cheb(g: &SkeletonGraph, f: &Tensor<f64>, thetas: &[Tensor<f64>]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let l = g.scaled_constant(&mut tape);
    let x = tape.constant(f.clone());
    let th: Vec<_> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
    let out = cheb_graph_conv(&mut tape, l, x, &th).unwrap();
    tape.value(out).to_vec()
}

fn criterion_4() -> Outcome {
    let mut worst_row = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, heads) = ([4, 8][seed as usize % 2], 2);
        let (h, w) = [(4, 4), (2, 3), (1, 1), (3, 4)][seed as usize % 4];
        let n = h * w;
        let mut params = Params::<f64>::new();
        let block = CatBlock::new(&mut params, "blk", d, heads, &mut rng).map_err(|e| e.to_string())?;
        randomize_biases(&mut params, &mut rng);
        let fi = random_tokens(&mut rng, n, d);
        let fp = random_tokens(&mut rng, n, d);
        let mut tape = Tape::with_checks(true);
        let (iv, pv) = (tape.constant(to_tensor(&fi)), tape.constant(to_tensor(&fp)));
        let trace = block.forward(&mut tape, &params, iv, pv, (h, w)).map_err(|e| e.to_string())?;
        let (ei, ep) = oracle_block(&block, &params, &fi, &fp, &oracle_pe(d, h, w));
        for (got, want, what) in [(tape.value(trace.image), &ei, "image"), (tape.value(trace.prior), &ep, "prior")] {
            for c in 0..d {
                for t in 0..n {
                    ensure!((got[c * n + t] - want[t][c]).abs() <= 1e-9, "{what} stream, seed {seed}, token {t}");
                }
            }
        }
        for a in trace.prior_to_image.iter().chain(&trace.image_to_prior) {
            for row in tape.value(*a).chunks(n) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_row <= 1e-6, "attention row sum off by {worst_row:.3e}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for heads in [1, 2, 4] {
        let (q, k, v) = (random_tokens(&mut rng, 1, 8), random_tokens(&mut rng, 1, 8), random_tokens(&mut rng, 1, 8));
        let mut tape = Tape::<f64>::with_checks(true);
        let (qv, kv, vv) = (tape.constant(to_tensor(&q)), tape.constant(to_tensor(&k)), tape.constant(to_tensor(&v)));
        let (att, _) = multi_head_attention(&mut tape, qv, kv, vv, heads).map_err(|e| e.to_string())?;
        let fused = tape.add(qv, att).map_err(|e| e.to_string())?;
        let expect: Vec<f64> = (0..8).map(|c| q[0][c] + v[0][c]).collect();
        ensure!(tape.value(fused) == expect.as_slice(), "single token with {heads} heads is not exactly Q + V");
    }
    Ok(format!("{SEEDS} blocks match the loop oracle at 1e-9, worst row-sum error {worst_row:.1e}, single token gives Q + V exactly"))
}

fn random_axis_angle(rng: &mut ChaCha8Rng, max_angle: f64) -> Vec3 {
    let d = geometry::normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    geometry::scale(d, rng.random_range(0.0..max_angle))
}

fn frob_diff(a: &Mat3, b: &Mat3) -> f64 {
    (0..9).map(|k| (a[k / 3][k % 3] - b[k / 3][k % 3]).powi(2)).sum::<f64>().sqrt()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vec3> {
    (0..n).map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)]).collect()
}

fn criterion_5() -> Outcome {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = [1e-12, 1e-6, 1e-3, 1.0, 10.0][(seed % 5) as usize];
        let r = [0; 3].map(|_| rng.random_range(-1.0..1.0) * scale);
        let m = rodrigues(r);
        let rtr = geometry::mat_mul(&geometry::transpose(&m), &m);
        ensure!(frob_diff(&rtr, &geometry::IDENTITY) < 1e-9, "R^T R != I, seed {seed}");
        ensure!((geometry::det(&m) - 1.0).abs() < 1e-9, "det R != 1, seed {seed}");
    }

    let hand = HandModel::canonical();
    let rest = hand.forward(&ManoParams::default()).map_err(|e| e.to_string())?;
    for (v, p) in rest.vertices.iter().enumerate() {
        for c in 0..3 {
            ensure!((p[c] - hand.template()[3 * v + c]).abs() <= 1e-12, "zero pose moved vertex {v}");
        }
    }

    let mut worst_rigid = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ManoParams::default();
        p.theta.iter_mut().for_each(|t| *t = rng.random_range(-0.6..0.6));
        p.beta.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        p.set_root([0.0; 3]);
        let base = hand.forward(&p).map_err(|e| e.to_string())?;
        let r = random_axis_angle(&mut rng, std::f64::consts::PI);
        p.set_root(r);
        let moved = hand.forward(&p).map_err(|e| e.to_string())?;
        let rot = rodrigues(r);
        for (a, b) in base.vertices.iter().zip(&moved.vertices).chain(base.joints.iter().zip(&moved.joints)) {
            worst_rigid = worst_rigid.max(geometry::dist(geometry::mat_vec(&rot, *a), *b));
        }
    }
    ensure!(worst_rigid < 1e-9, "root rotation is not rigid: {worst_rigid:.3e} mm");

    let mut worst_pa = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = cloud(&mut rng, 21, 80.0);
        let r = rodrigues(random_axis_angle(&mut rng, std::f64::consts::PI));
        let s = rng.random_range(0.2..5.0);
        let t = [0; 3].map(|_| rng.random_range(-500.0..500.0));
        let pred: Vec<Vec3> = gt.iter().map(|p| geometry::add(geometry::scale(geometry::mat_vec(&r, *p), s), t)).collect();
        let aligned = procrustes_align(&pred, &gt).map_err(|e| e.to_string())?;
        worst_pa = worst_pa.max(mpjpe(&aligned, &gt).map_err(|e| e.to_string())?);
    }
    ensure!(worst_pa < 1e-9, "Procrustes recovery left {worst_pa:.3e} mm");
    Ok(format!("rotation error, rigidity {worst_rigid:.1e} mm and Procrustes residual {worst_pa:.1e} mm within bounds"))
}

fn criterion_6() -> Outcome {
    let err = |e: handgcat_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = cloud(&mut rng, 21, 80.0);
    ensure!(mpjpe(&gt, &gt).map_err(err)? == 0.0, "mpjpe(x, x) != 0");
    let shifted: Vec<Vec3> = gt.iter().map(|p| geometry::add(*p, [3.0, 0.0, 0.0])).collect();
    ensure!((mpjpe(&shifted, &gt).map_err(err)? - 3.0).abs() < 1e-12, "3 mm shift is not 3 mm");
    ensure!(mpjpe(&gt[..20], &gt).is_err() && mpjpe(&[], &[]).is_err(), "bad inputs accepted");

    ensure!(auc_pck(&[0.0; 10]).map_err(err)? == 1.0, "perfect AUC != 1");
    ensure!(auc_pck(&[50.1, 70.0, 1e6]).map_err(err)? == 0.0, "hopeless AUC != 0");
    ensure!((auc_pck(&[25.0; 7]).map_err(err)? - 0.5).abs() <= 1.0 / PCK_STEPS as f64, "AUC at half range != 0.5");

    let mesh = cloud(&mut rng, 778, 60.0);
    for tau in [5.0, 15.0] {
        ensure!(f_score(&mesh, &mesh, tau).map_err(err)? == 1.0, "F@{tau} of identical meshes != 1");
    }
    let far: Vec<Vec3> = mesh.iter().map(|p| geometry::add(*p, [0.0, 0.0, 1000.0])).collect();
    ensure!(f_score(&far, &mesh, 5.0).map_err(err)? == 0.0, "F of displaced mesh != 0");
    let spaced: Vec<Vec3> = (0..778).map(|i| [i as f64 * 20.0, 0.0, 0.0]).collect();
    let half: Vec<Vec3> = spaced.iter().enumerate().map(|(i, p)| if i % 2 == 0 { *p } else { geometry::add(*p, [0.0, 100.0, 0.0]) }).collect();
    ensure!((f_score(&half, &spaced, 5.0).map_err(err)? - 0.5).abs() < 1e-12, "half-displaced F != 0.5");

    let per: Vec<SampleMetrics> = (0..4)
        .map(|_| {
            let (j, v) = (cloud(&mut rng, 21, 60.0), cloud(&mut rng, 778, 60.0));
            sample_metrics(&j, &j, &v, &v, FScoreMode::NearestNeighbour)
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let r = aggregate(&per.iter().collect::<Vec<_>>()).map_err(err)?;
    r.validate().map_err(err)?;
    ensure!(r.mpjpe_mm == 0.0 && r.mpvpe_mm == 0.0 && r.pa_mpjpe_mm < 1e-9 && r.pa_mpvpe_mm < 1e-9, "ground truth has nonzero error");
    ensure!((r.auc_pck, r.auc_pcv, r.f_at_5, r.f_at_15) == (1.0, 1.0, 1.0, 1.0), "ground truth AUC/F != 1");

    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = cloud(&mut rng, 21, 60.0);
        let pred: Vec<Vec3> = if seed % 2 == 0 {
            let r = rodrigues(random_axis_angle(&mut rng, std::f64::consts::PI));
            gt.iter().map(|p| geometry::add(geometry::mat_vec(&r, *p), [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 40.0])).collect()
        } else {
            cloud(&mut rng, 21, 60.0)
        };
        let (plain, aligned) = (mpjpe(&pred, &gt).map_err(err)?, pa_mpjpe(&pred, &gt).map_err(err)?);
        ensure!(aligned <= plain + 1e-9, "PA-MPJPE {aligned} > MPJPE {plain}, pair {seed}");

        let errs: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0.0..80.0)).collect();
        let worse: Vec<f64> = errs.iter().map(|e| e + rng.random_range(0.0..20.0)).collect();
        let (a, b) = (auc_pck(&errs).map_err(err)?, auc_pck(&worse).map_err(err)?);
        ensure!(b <= a && (0.0..=1.0).contains(&a), "AUC not monotone, trial {seed}");
    }
    Ok("examples hold; PA <= unaligned on 1000 pairs; AUC monotone on 1000 trials".into())
}

fn desk() -> RunConfig {
    RunConfig::profile(Profile::Desk)
}

fn data(seed: u64, train: usize, test: usize) -> Result<Dataset, String> {
    let synth = SynthConfig { seed, occlusion_level: 0.5, ..SynthConfig::default() };
    dataset::generate(&synth, train, test).map_err(|e| e.to_string())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let ds = data(0, 16, 0)?;
    let mut cfg = desk();
    cfg.train.subset = 16;
    cfg.train.max_steps = 500;
    cfg.optimizer.batch = 16;
    cfg.optimizer.decay_every = 0;
    let run = || train::<f32>(&cfg, &ds.train, None, &mut |_| {}).map(|t| t.report).map_err(|e| e.to_string());
    let a = run()?;
    let ratio = a.final_loss / a.initial_loss;
    ensure!(a.steps == 500, "ran {} steps", a.steps);
    ensure!(ratio < 0.1, "loss {:.1} -> {:.1} is {:.1}% of initial", a.initial_loss, a.final_loss, 100.0 * ratio);
    let b = run()?;
    ensure!(a == b, "repeat run produced a different loss curve");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:.1?}, budget 10 min");
    Ok(format!("loss {:.1} -> {:.1} ({:.2}%) in 500 steps, repeat identical, {elapsed:.1?} for both runs", a.initial_loss, a.final_loss, 100.0 * ratio))
}

fn criterion_8() -> Outcome {
    let ds = data(0, 512, 128)?;
    let mut cfg = desk();
    cfg.optimizer.epochs = 8;
    cfg.optimizer.lr = 1e-3;
    cfg.optimizer.batch = 32;
    let seeds: Vec<u64> = (0..5).collect();
    let rows = ablate::run(&[Table::Prior], &cfg, &seeds, &ds, &mut |_| {}).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut detail = Vec::new();
    for pair in rows.chunks(2) {
        let (full, bare) = (&pair[0], &pair[1]);
        ensure!(full.prior == PriorKind::Graph.name() && bare.prior == PriorKind::None.name(), "unexpected row order");
        wins += usize::from(full.mpjpe_mm < bare.mpjpe_mm);
        detail.push(format!("{:.1}/{:.1}", full.mpjpe_mm, bare.mpjpe_mm));
    }
    let summary = format!("full beats image-only in {wins}/5 seeds (MPJPE mm full/image-only: {})", detail.join(", "));
    ensure!(wins >= 4, "{summary}");
    Ok(summary)
}

fn criterion_9() -> Outcome {
    let ds = data(1, 16, 8)?;
    let mut cfg = desk();
    cfg.train.max_steps = 2;
    cfg.optimizer.batch = 8;
    let rows = ablate::run(&[Table::Depth, Table::Blocks], &cfg, &[0], &ds, &mut |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ablation.csv");
    ablate::write_csv(&rows, &path).map_err(|e| e.to_string())?;

    let mut rd = csv::Reader::from_path(&path).map_err(|e| e.to_string())?;
    let header = rd.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or(format!("missing column {name}"));
    let (table, prior, depth, variant, blocks) = (col("table")?, col("prior")?, col("gcn_depth")?, col("cat_variant")?, col("cat_blocks")?);
    let metrics: Vec<usize> = ["mpjpe_mm", "pa_mpjpe_mm", "mpvpe_mm", "pa_mpvpe_mm", "auc_pck", "auc_pcv", "f_at_5", "f_at_15"]
        .iter()
        .map(|m| col(m))
        .collect::<Result<_, _>>()?;
    let records: Vec<csv::StringRecord> = rd.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure!(records.len() == 10, "{} rows, expected 6 + 4", records.len());
    for r in &records {
        ensure!(r.iter().all(|f| !f.is_empty()), "empty field in {r:?}");
        for &m in &metrics {
            let v: f64 = r[m].parse().map_err(|_| format!("non-numeric {}", &r[m]))?;
            ensure!(v.is_finite(), "non-finite metric in {r:?}");
        }
    }
    let depth_rows: Vec<(String, String)> =
        records.iter().filter(|r| &r[table] == "gcn_depth").map(|r| (r[prior].to_string(), r[depth].to_string())).collect();
    let want_depth: Vec<(String, String)> =
        (1..=5).map(|d| ("graph".to_string(), d.to_string())).chain([("mlp".to_string(), "0".to_string())]).collect();
    ensure!(depth_rows == want_depth, "depth table rows {depth_rows:?}");
    let block_rows: Vec<(String, String)> =
        records.iter().filter(|r| &r[table] == "cat_blocks").map(|r| (r[variant].to_string(), r[blocks].to_string())).collect();
    ensure!(block_rows.len() == 4, "block table rows {block_rows:?}");
    ensure!(block_rows[..3].iter().enumerate().all(|(i, (v, b))| v == CatVariant::Cat.name() && *b == (i + 1).to_string()), "block rows {block_rows:?}");
    ensure!(block_rows[3].0 == CatVariant::PlainTransformer.name(), "missing plain transformer row");
    Ok(format!("{} columns, depth 1-5 + MLP and blocks 1-3 + plain transformer, all populated", header.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "benchmark substitution", criterion_1),
        (2, "gradient suite", criterion_2),
        (3, "spectral suite", criterion_3),
        (4, "attention suite", criterion_4),
        (5, "geometry suite", criterion_5),
        (6, "metric suite", criterion_6),
        (7, "training smoke", criterion_7),
        (8, "occlusion ablation", criterion_8),
        (9, "ablation tables", criterion_9),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in &criteria {
            println!("criterion_{n}_{}: test", name.replace(' ', "_"));
        }
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
