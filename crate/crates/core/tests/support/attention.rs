//! Brute-force attention oracles on token-major matrices.

use handgcat_core::cat::{CatBlock, TokenMlp};
use handgcat_core::nn::Proj;
use handgcat_core::{Params, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Token-major matrix: `m[token][channel]`.
pub type Tokens = Vec<Vec<f64>>;

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tokens {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Channel-first tensor `[d, n]` from token-major rows.
pub fn to_tensor(t: &Tokens) -> Tensor<f64> {
    let (n, d) = (t.len(), t[0].len());
    Tensor::from_fn(&[d, n], |i| t[i % n][i / n])
}

pub fn from_values(v: &[f64], d: usize, n: usize) -> Tokens {
    (0..n).map(|t| (0..d).map(|c| v[c * n + t]).collect()).collect()
}

pub fn oracle_proj(x: &Tokens, p: &Proj, params: &Params<f64>) -> Tokens {
    let w = params.get(p.w).data();
    let b = params.get(p.b.unwrap()).data();
    x.iter()
        .map(|tok| {
            (0..p.fan_out)
                .map(|o| {
                    let mut acc = b[o];
                    for i in 0..p.fan_in {
                        acc += w[o * p.fan_in + i] * tok[i];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Direct closed-form 2-D sinusoidal encoding.
pub fn oracle_pe(d: usize, h: usize, w: usize) -> Tokens {
    let half = d / 2;
    (0..h * w)
        .map(|t| {
            let (r, c) = ((t / w) as f64, (t % w) as f64);
            (0..d)
                .map(|ch| {
                    let (pos, k) = if ch < half { (r, ch) } else { (c, ch - half) };
                    let i = (k / 2) as f64;
                    let freq = 10_000f64.powf(-2.0 * i / half as f64);
                    if k % 2 == 0 {
                        (pos * freq).sin()
                    } else {
                        (pos * freq).cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &Tokens, b: &Tokens) -> Tokens {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Triple loop: for every head, query, key pair.
pub fn oracle_attention(q: &Tokens, k: &Tokens, v: &Tokens, heads: usize) -> (Tokens, Vec<Tokens>) {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut all = Vec::new();
    for h in 0..heads {
        let mut weights = vec![vec![0.0; k.len()]; q.len()];
        for t in 0..q.len() {
            let mut logits = vec![0.0; k.len()];
            for s in 0..k.len() {
                let mut dot = 0.0;
                for c in h * dh..(h + 1) * dh {
                    dot += q[t][c] * k[s][c];
                }
                logits[s] = dot / (dh as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for s in 0..k.len() {
                weights[t][s] = (logits[s] - mx).exp() / z;
            }
            for c in h * dh..(h + 1) * dh {
                let mut acc = 0.0;
                for s in 0..k.len() {
                    acc += weights[t][s] * v[s][c];
                }
                out[t][c] = acc;
            }
        }
        all.push(weights);
    }
    (out, all)
}

pub fn oracle_mlp(z: &Tokens, m: &TokenMlp, params: &Params<f64>) -> Tokens {
    let h: Tokens = oracle_proj(z, &m.fc1, params).into_iter().map(|r| r.into_iter().map(|x| x.max(0.0)).collect()).collect();
    add(z, &oracle_proj(&h, &m.fc2, params))
}

pub fn oracle_block(b: &CatBlock, params: &Params<f64>, fi: &Tokens, fp: &Tokens, pe: &Tokens) -> (Tokens, Tokens) {
    let qi = add(&oracle_proj(fi, &b.image.q, params), pe);
    let ki = add(&oracle_proj(fi, &b.image.k, params), pe);
    let vi = oracle_proj(fi, &b.image.v, params);
    let qp = add(&oracle_proj(fp, &b.prior.q, params), pe);
    let kp = add(&oracle_proj(fp, &b.prior.k, params), pe);
    let vp = oracle_proj(fp, &b.prior.v, params);
    let (ap, _) = oracle_attention(&qp, &ki, &vi, b.heads);
    let (ai, _) = oracle_attention(&qi, &kp, &vp, b.heads);
    let zp = add(fp, &add(&qp, &ap));
    let zi = add(fi, &add(&qi, &ai));
    (oracle_mlp(&zi, &b.image_mlp, params), oracle_mlp(&zp, &b.prior_mlp, params))
}

pub fn randomize_biases(params: &mut Params<f64>, rng: &mut ChaCha8Rng) {
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".b") {
            let n = params.get(id).len();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
            params.set_value(id, &v);
        }
    }
}

pub fn assert_close(a: &[f64], b: &Tokens, d: usize, n: usize, tol: f64, what: &str) {
    let b = to_tensor(b);
    assert_eq!(b.shape(), &[d, n]);
    for (x, y) in a.iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{what}: {x} vs {y}");
    }
}
