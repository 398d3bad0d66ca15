//! Hand-skeleton graph, Laplacian spectra and Chebyshev spectral graph
//! convolution.
//!
//! Joint order: wrist, then four joints per finger (thumb, index, middle,
//! ring, little), each finger listed base to tip. Adjacency is binary with no
//! self-loops; self-information enters through the identity in the Laplacian.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{he_normal, ParamId, Params};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of hand joints.
pub const NUM_JOINTS: usize = 21;
/// Version tag of [`HAND_EDGES`]; bump when the table changes.
pub const SKELETON_VERSION: u32 = 1;
pub const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "little"];

/// Joint index of finger `finger` (0 = thumb), segment `seg` (0 = base, 3 = tip).
pub const fn finger_joint(finger: usize, seg: usize) -> usize {
    1 + 4 * finger + seg
}

/// Parent of every joint in the kinematic tree (`None` for the wrist).
pub const PARENTS: [Option<usize>; NUM_JOINTS] = {
    let mut p = [None; NUM_JOINTS];
    let mut f = 0;
    while f < 5 {
        let mut s = 0;
        while s < 4 {
            p[finger_joint(f, s)] = Some(if s == 0 { 0 } else { finger_joint(f, s - 1) });
            s += 1;
        }
        f += 1;
    }
    p
};

/// The 20 skeleton edges `(parent, child)`.
pub const HAND_EDGES: [(usize, usize); NUM_JOINTS - 1] = {
    let mut e = [(0, 0); NUM_JOINTS - 1];
    let mut j = 1;
    while j < NUM_JOINTS {
        e[j - 1] = match PARENTS[j] {
            Some(p) => (p, j),
            None => (0, 0),
        };
        j += 1;
    }
    e
};

/// Dense `n x n` row-major matrix helpers on `f64` buffers.
fn matvec(m: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        out[i] = (0..n).map(|j| m[i * n + j] * x[j]).sum();
    }
}

/// `L = I - D^{-1/2} W D^{-1/2}` for a symmetric adjacency `w` (`n x n`).
pub fn normalized_laplacian(w: &[f64], n: usize) -> Result<Vec<f64>> {
    if w.len() != n * n {
        return Err(Error::Shape { op: "normalized_laplacian", detail: format!("{} entries for n = {}", w.len(), n) });
    }
    let deg: Vec<f64> = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::DegenerateGraph(i));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / libm::sqrt(*d)).collect();
    Ok((0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let id = if i == j { 1.0 } else { 0.0 };
            id - inv_sqrt[i] * w[k] * inv_sqrt[j]
        })
        .collect())
}

/// `L~ = 2 L / lambda_max - I`.
pub fn scaled_laplacian(l: &[f64], n: usize, lambda_max: f64) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda_max must be positive, got {lambda_max}")));
    }
    if l.len() != n * n {
        return Err(Error::Shape { op: "scaled_laplacian", detail: format!("{} entries for n = {}", l.len(), n) });
    }
    Ok((0..n * n).map(|k| 2.0 * l[k] / lambda_max - if k / n == k % n { 1.0 } else { 0.0 }).collect())
}

/// Iteration budget of [`largest_eigenvalue`].
pub const POWER_ITERATION_MAX: usize = 10_000;
/// Relative change of the Rayleigh quotient that stops [`largest_eigenvalue`].
pub const POWER_ITERATION_RTOL: f64 = 1e-14;

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration with a Rayleigh-quotient estimate.
pub fn largest_eigenvalue(m: &[f64], n: usize) -> f64 {
    // Deterministic start vector with no symmetric structure.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * libm::sin(1.0 + 7.3 * i as f64)).collect();
    let mut y = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        matvec(m, n, &x, &mut y);
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let next = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / xx;
        let norm = libm::sqrt(y.iter().map(|v| v * v).sum::<f64>());
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&y).for_each(|(x, y)| *x = y / norm);
        let converged = (next - lambda).abs() <= POWER_ITERATION_RTOL * next.abs();
        lambda = next;
        if converged {
            break;
        }
    }
    lambda
}

/// Undirected joint graph with its Laplacian machinery.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    joints: usize,
    adjacency: Vec<f64>,
    degree: Vec<f64>,
    laplacian: Vec<f64>,
    scaled_laplacian: Vec<f64>,
    lambda_max: f64,
}

impl SkeletonGraph {
    /// Builds the graph from an undirected edge list on `joints` nodes.
    pub fn from_edges(joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut w = vec![0.0; joints * joints];
        for &(a, b) in edges {
            if a >= joints || b >= joints || a == b {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) invalid for {joints} joints")));
            }
            w[a * joints + b] = 1.0;
            w[b * joints + a] = 1.0;
        }
        Self::from_adjacency(joints, w)
    }

    /// Builds the graph from a symmetric 0/1 adjacency matrix.
    pub fn from_adjacency(joints: usize, adjacency: Vec<f64>) -> Result<Self> {
        let n = joints;
        if adjacency.len() != n * n {
            return Err(Error::Shape { op: "skeleton_graph", detail: format!("{} entries for n = {}", adjacency.len(), n) });
        }
        for i in 0..n {
            for j in 0..n {
                let w = adjacency[i * n + j];
                if (i == j && w != 0.0) || (w != 0.0 && w != 1.0) || w != adjacency[j * n + i] {
                    return Err(Error::InvalidArgument(format!("adjacency must be symmetric 0/1 without self-loops at ({i}, {j})")));
                }
            }
        }
        let laplacian = normalized_laplacian(&adjacency, joints)?;
        let degree = (0..joints).map(|i| adjacency[i * joints..(i + 1) * joints].iter().sum()).collect();
        let lambda_max = largest_eigenvalue(&laplacian, joints);
        let scaled_laplacian = scaled_laplacian(&laplacian, joints, lambda_max)?;
        Ok(Self { joints, adjacency, degree, laplacian, scaled_laplacian, lambda_max })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// Diagonal of the degree matrix.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn laplacian(&self) -> &[f64] {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &[f64] {
        &self.scaled_laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.joints;
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| self.adjacency[i * n + j] != 0.0).collect()
    }

    /// Graph with nodes relabelled so that old node `i` becomes `perm[i]`
    /// (adjacency `P W P^T`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.joints;
        if perm.len() != n {
            return Err(Error::InvalidArgument(format!("permutation of length {} for {} joints", perm.len(), n)));
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[perm[i] * n + perm[j]] = self.adjacency[i * n + j];
            }
        }
        Self::from_adjacency(n, w)
    }

    /// The scaled Laplacian as a constant tape node.
    pub fn scaled_constant<S: Scalar>(&self, tape: &mut Tape<S>) -> Var {
        let n = self.joints;
        tape.constant(Tensor::from_fn(&[n, n], |k| S::from_f64(self.scaled_laplacian[k])))
    }

    /// One `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (i, j) in self.edges() {
            let _ = writeln!(s, "{i} {j}");
        }
        s
    }
}

/// The 21-joint hand skeleton (a tree with 20 edges).
pub fn build_hand_skeleton() -> SkeletonGraph {
    SkeletonGraph::from_edges(NUM_JOINTS, &HAND_EDGES).expect("hand skeleton is a valid tree")
}

/// Parses an edge list with one `i j` pair per line; blank lines and lines
/// starting with `#` are ignored.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
            _ => return Err(Error::InvalidArgument(format!("edge list line {}: {:?}", lineno + 1, line))),
        }
    }
    Ok(edges)
}

/// `F_out = sum_{k<K} T_k(L~) F_in Theta_k` using the three-term recurrence on
/// features: `X_0 = F`, `X_1 = L~ F`, `X_k = 2 L~ X_{k-1} - X_{k-2}`.
pub fn cheb_graph_conv<S: Scalar>(tape: &mut Tape<S>, l_scaled: Var, x: Var, thetas: &[Var]) -> Result<Var> {
    let Some(&theta0) = thetas.first() else {
        return Err(Error::InvalidArgument("Chebyshev order must be at least 1".into()));
    };
    let mut out = tape.matmul(x, theta0)?;
    let mut prev2 = x;
    let mut prev1 = x;
    for (k, &theta) in thetas.iter().enumerate().skip(1) {
        let lx = tape.matmul(l_scaled, prev1)?;
        let xk = if k == 1 {
            lx
        } else {
            let twice = tape.scale(lx, S::from_f64(2.0))?;
            tape.sub(twice, prev2)?
        };
        let term = tape.matmul(xk, theta)?;
        out = tape.add(out, term)?;
        prev2 = prev1;
        prev1 = xk;
    }
    Ok(out)
}

/// One Chebyshev graph-convolution layer with `K` weight matrices `f_in x f_out`.
#[derive(Clone, Debug)]
pub struct ChebGraphConvLayer {
    thetas: Vec<ParamId>,
    f_in: usize,
    f_out: usize,
}

impl ChebGraphConvLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        order: usize,
        f_in: usize,
        f_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("Chebyshev order must be at least 1".into()));
        }
        let thetas = (0..order)
            .map(|k| params.add(format!("{name}.theta{k}"), he_normal(rng, &[f_in, f_out], f_in * order)))
            .collect();
        Ok(Self { thetas, f_in, f_out })
    }

    pub fn order(&self) -> usize {
        self.thetas.len()
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    pub fn f_out(&self) -> usize {
        self.f_out
    }

    pub fn thetas(&self) -> &[ParamId] {
        &self.thetas
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, l_scaled: Var, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.f_in || shape[0] != tape.shape(l_scaled)[0] {
            return Err(Error::Shape {
                op: "cheb_graph_conv",
                detail: format!("input {:?} for layer {} -> {}", shape, self.f_in, self.f_out),
            });
        }
        let thetas: Vec<Var> = self.thetas.iter().map(|&id| tape.param(params, id)).collect();
        cheb_graph_conv(tape, l_scaled, x, &thetas)
    }
}
