use handgcat_core::gradcheck::{check_inputs, Tolerance};
use handgcat_core::hand_graph::{
    build_hand_skeleton, cheb_graph_conv, finger_joint, normalized_laplacian, scaled_laplacian, SkeletonGraph,
};
use handgcat_core::{Tape, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::spectral::*;

#[test]
fn skeleton_topology() {
    let g = build_hand_skeleton();
    assert_eq!(g.joints(), 21);
    assert_eq!(g.edges().len(), 20);
    assert_eq!(g.degree()[0], 5.0);
    for f in 0..5 {
        assert_eq!(g.degree()[finger_joint(f, 3)], 1.0);
    }
    // BFS connectivity
    let mut seen = [false; N];
    let mut queue = vec![0];
    seen[0] = true;
    while let Some(i) = queue.pop() {
        for j in 0..N {
            if g.adjacency()[i * N + j] != 0.0 && !seen[j] {
                seen[j] = true;
                queue.push(j);
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
    let w = g.adjacency();
    for i in 0..N {
        assert_eq!(w[i * N + i], 0.0);
        for j in 0..N {
            assert_eq!(w[i * N + j], w[j * N + i]);
            assert!(w[i * N + j] == 0.0 || w[i * N + j] == 1.0);
        }
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn laplacian_closed_forms() {
    let l = normalized_laplacian(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
    assert_eq!(l, vec![1.0, -1.0, -1.0, 1.0]);
    let ls = scaled_laplacian(&l, 2, 2.0).unwrap();
    assert_eq!(ls, vec![0.0, -1.0, -1.0, 0.0]);

    let path = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let l = normalized_laplacian(&path, 3).unwrap();
    for i in 0..3 {
        assert!((l[i * 3 + i] - 1.0).abs() < 1e-15);
    }
    assert!((l[1] + 1.0 / 2f64.sqrt()).abs() < 1e-12);
    assert!((l[1] + 0.70711).abs() < 1e-5);
}

#[test]
fn lambda_max_two_substitution() {
    let g = build_hand_skeleton();
    let l = g.laplacian();
    let ls = scaled_laplacian(l, N, 2.0).unwrap();
    for k in 0..N * N {
        let expect = l[k] - if k / N == k % N { 1.0 } else { 0.0 };
        assert!((ls[k] - expect).abs() < 1e-15);
    }
}

#[test]
fn skeleton_spectrum() {
    let g = build_hand_skeleton();
    let l = g.laplacian();
    for i in 0..N {
        for j in 0..N {
            assert!((l[i * N + j] - l[j * N + i]).abs() < 1e-15);
        }
    }
    let ev = eigenvalues(l, N);
    assert!(ev.iter().all(|&e| (-1e-9..=2.0 + 1e-9).contains(&e)), "{ev:?}");
    let dense_max = *ev.last().unwrap();
    assert!((g.lambda_max() - dense_max).abs() < 1e-6, "power {} vs dense {}", g.lambda_max(), dense_max);

    let evs = eigenvalues(g.scaled_laplacian(), N);
    assert!(evs.iter().all(|&e| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&e)), "{evs:?}");
}

#[test]
fn null_vector_identity() {
    let g = build_hand_skeleton();
    let v: Vec<f64> = g.degree().iter().map(|d| d.sqrt()).collect();
    let l = g.laplacian();
    for i in 0..N {
        let s: f64 = (0..N).map(|j| l[i * N + j] * v[j]).sum();
        assert!(s.abs() < 1e-9);
    }
}

#[test]
fn chebyshev_recurrence_identity() {
    let g = build_hand_skeleton();
    let l = dmat(g.scaled_laplacian(), N);
    let t = dense_chebyshev(&l, 8);
    // T_k(x) = cos(k arccos x) on the spectrum
    let eig = SymmetricEigen::new(l.clone());
    for (k, tk) in t.iter().enumerate() {
        let via_spectrum = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| (k as f64 * x.clamp(-1.0, 1.0).acos()).cos()))
            * eig.eigenvectors.transpose();
        assert!((tk - via_spectrum).abs().max() < 1e-9, "k = {k}");
        if k >= 2 {
            let rec = 2.0 * &l * &t[k - 1] - &t[k - 2];
            assert!((tk - rec).abs().max() < 1e-9);
        }
    }
}

#[test]
fn cheb_conv_trivial_orders() {
    let g = build_hand_skeleton();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::<f64>::from_fn(&[N, 4], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let l = g.scaled_constant(&mut tape);
    let x = tape.constant(f.clone());
    let eye = tape.constant(Tensor::eye(4));
    let zero = tape.constant(Tensor::zeros(&[4, 4]));

    let out = cheb_graph_conv(&mut tape, l, x, &[eye]).unwrap();
    assert_eq!(tape.value(out), f.data());

    let out = cheb_graph_conv(&mut tape, l, x, &[zero, eye]).unwrap();
    let expect = dmat(g.scaled_laplacian(), N) * DMatrix::from_row_slice(N, 4, f.data());
    for i in 0..N {
        for c in 0..4 {
            assert!((tape.value(out)[i * 4 + c] - expect[(i, c)]).abs() < 1e-15);
        }
    }
    assert!(cheb_graph_conv(&mut tape, l, x, &[]).is_err());
}

#[test]
fn cheb_conv_matches_dense_recurrence_oracle() {
    let g = build_hand_skeleton();
    let lm = dmat(g.scaled_laplacian(), N);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fi, fo, k) = (3, 5, 4);
        let f: Vec<f64> = (0..N * fi).map(|_| rng.random_range(-1.0..1.0)).collect();
        let thetas: Vec<Vec<f64>> = (0..k).map(|_| (0..fi * fo).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

        let t = dense_chebyshev(&lm, k);
        let fm = DMatrix::from_row_slice(N, fi, &f);
        let mut expect = DMatrix::zeros(N, fo);
        for (tk, th) in t.iter().zip(&thetas) {
            expect += tk * &fm * DMatrix::from_row_slice(fi, fo, th);
        }

        let mut tape = Tape::<f64>::new();
        let l = g.scaled_constant(&mut tape);
        let x = tape.constant(Tensor::new(&[N, fi], f).unwrap());
        let th: Vec<_> = thetas.into_iter().map(|t| tape.constant(Tensor::new(&[fi, fo], t).unwrap())).collect();
        let out = cheb_graph_conv(&mut tape, l, x, &th).unwrap();
        for i in 0..N {
            for c in 0..fo {
                assert!((tape.value(out)[i * fo + c] - expect[(i, c)]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn cheb_conv_permutation_equivariance() {
    let g = build_hand_skeleton();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut perm: Vec<usize> = (0..N).collect();
        perm.shuffle(&mut rng);
        let gp = g.permuted(&perm).unwrap();
        assert!((gp.lambda_max() - g.lambda_max()).abs() < 1e-9);
        let (fi, fo) = (2, 3);
        let f: Vec<f64> = (0..N * fi).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fp = vec![0.0; N * fi];
        for i in 0..N {
            fp[perm[i] * fi..perm[i] * fi + fi].copy_from_slice(&f[i * fi..i * fi + fi]);
        }
        let th: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[fi, fo], |_| rng.random_range(-1.0..1.0))).collect();

        let run = |graph: &SkeletonGraph, feat: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let l = graph.scaled_constant(&mut tape);
            let x = tape.constant(Tensor::new(&[N, fi], feat).unwrap());
            let thv: Vec<_> = th.iter().map(|t| tape.constant(t.clone())).collect();
            let out = cheb_graph_conv(&mut tape, l, x, &thv).unwrap();
            tape.value(out).to_vec()
        };
        let base = run(&g, f);
        let permuted = run(&gp, fp);
        for i in 0..N {
            for c in 0..fo {
                assert!((permuted[perm[i] * fo + c] - base[i * fo + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cheb_conv_gradient() {
    let g = build_hand_skeleton();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || Tensor::from_fn(&[N, 3], |_| rng.random_range(-1.0..1.0));
        let f = r();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let thetas: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.0..1.0))).collect();
        let probe = Tensor::from_fn(&[N, 2], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let mut inputs = vec![f];
        inputs.extend(thetas);
        let report = check_inputs(&inputs, Tolerance::default(), |t, v| {
            let l = g.scaled_constant(t);
            let y = cheb_graph_conv(t, l, v[0], &v[1..])?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
