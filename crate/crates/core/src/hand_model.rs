//! Seeded synthetic parametric hand and its linear-blend-skinning layer.
//!
//! The model has the interface shapes of the usual 778-vertex parametric hand:
//! a template mesh, a 10-component shape basis, a 21x778 joint regressor and
//! 778x21 skinning weights over the [`PARENTS`] tree. Units are millimetres,
//! the wrist sits at the origin, the palm lies in the x-y plane and the fingers
//! point along +y.
//!
//! Pose is 16 axis-angle triples: slot 0 rotates the whole hand about the
//! model origin, slot `1 + 3f + s` rotates segment `s` (base, middle, distal)
//! of finger `f`. Fingertips carry no rotation of their own.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::hand_graph::{finger_joint, NUM_JOINTS, PARENTS};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_VERTICES: usize = 778;
pub const NUM_SHAPE: usize = 10;
pub const NUM_POSE_JOINTS: usize = 16;
pub const POSE_DIM: usize = 3 * NUM_POSE_JOINTS;
/// Seed of the canonical model used by datasets and checkpoints.
pub const HAND_MODEL_SEED: u64 = 0x4841_4e44;
/// Bump whenever generation below changes its output.
pub const HAND_MODEL_VERSION: u32 = 1;

const RINGS_PER_SEGMENT: usize = 4;
const RING_VERTICES: usize = 8;
const FINGER_VERTICES: usize = 3 * RINGS_PER_SEGMENT * RING_VERTICES + 1;
const PALM_VERTICES: usize = NUM_VERTICES - 5 * FINGER_VERTICES;
const SKIN_SIGMA_MM: f64 = 5.0;
const REGRESSOR_NEIGHBOURS: usize = 8;
/// Below this rotation angle the Rodrigues coefficients use their Taylor series.
const SERIES_ANGLE: f64 = 1e-3;

/// Rest joint positions of the canonical hand (mm).
pub const REST_JOINTS_MM: [Vec3; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [25.0, 20.0, 0.0],
    [45.0, 45.0, 0.0],
    [60.0, 65.0, 0.0],
    [72.0, 85.0, 0.0],
    [22.0, 90.0, 0.0],
    [24.0, 130.0, 0.0],
    [25.0, 155.0, 0.0],
    [26.0, 175.0, 0.0],
    [0.0, 95.0, 0.0],
    [0.0, 140.0, 0.0],
    [0.0, 168.0, 0.0],
    [0.0, 190.0, 0.0],
    [-20.0, 90.0, 0.0],
    [-22.0, 130.0, 0.0],
    [-23.0, 155.0, 0.0],
    [-24.0, 173.0, 0.0],
    [-38.0, 80.0, 0.0],
    [-42.0, 110.0, 0.0],
    [-44.0, 128.0, 0.0],
    [-46.0, 145.0, 0.0],
];

const FINGER_RADIUS_MM: [f64; 5] = [9.5, 8.5, 8.5, 8.0, 7.0];

/// Joint driven by each pose slot.
pub const POSE_JOINTS: [usize; NUM_POSE_JOINTS] = {
    let mut out = [0; NUM_POSE_JOINTS];
    let mut f = 0;
    while f < 5 {
        let mut s = 0;
        while s < 3 {
            out[1 + 3 * f + s] = finger_joint(f, s);
            s += 1;
        }
        f += 1;
    }
    out
};

/// Pose slot of `joint`, or `None` for fingertips.
pub fn pose_slot(joint: usize) -> Option<usize> {
    POSE_JOINTS.iter().position(|&j| j == joint)
}

/// Pose and shape coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManoParams {
    pub theta: [f64; POSE_DIM],
    pub beta: [f64; NUM_SHAPE],
}

impl Default for ManoParams {
    fn default() -> Self {
        Self { theta: [0.0; POSE_DIM], beta: [0.0; NUM_SHAPE] }
    }
}

impl ManoParams {
    pub fn from_slices(theta: &[f64], beta: &[f64]) -> Result<Self> {
        if theta.len() != POSE_DIM || beta.len() != NUM_SHAPE {
            return Err(Error::Shape {
                op: "mano_params",
                detail: alloc::format!("theta {} / beta {}, expected {POSE_DIM} / {NUM_SHAPE}", theta.len(), beta.len()),
            });
        }
        let mut p = Self::default();
        p.theta.copy_from_slice(theta);
        p.beta.copy_from_slice(beta);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    /// Root axis-angle triple.
    pub fn root(&self) -> Vec3 {
        [self.theta[0], self.theta[1], self.theta[2]]
    }

    pub fn set_root(&mut self, r: Vec3) {
        self.theta[..3].copy_from_slice(&r);
    }

    /// Concatenated `[theta; beta]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.beta).copied().collect()
    }
}

/// `sin(t)/t` as a function of `s = t^2`.
pub fn rot_coeff_a<S: Scalar>(s: S) -> S {
    let v = s.as_f64();
    let out = if v < SERIES_ANGLE * SERIES_ANGLE {
        1.0 - v / 6.0 + v * v / 120.0 - v * v * v / 5040.0
    } else {
        let t = libm::sqrt(v);
        libm::sin(t) / t
    };
    S::from_f64(out)
}

pub fn rot_coeff_a_ds<S: Scalar>(s: S) -> S {
    let v = s.as_f64();
    let out = if v < SERIES_ANGLE * SERIES_ANGLE {
        -1.0 / 6.0 + v / 60.0 - v * v / 1680.0
    } else {
        let t = libm::sqrt(v);
        (t * libm::cos(t) - libm::sin(t)) / (2.0 * t * v)
    };
    S::from_f64(out)
}

/// `(1 - cos t)/t^2` as a function of `s = t^2`.
pub fn rot_coeff_b<S: Scalar>(s: S) -> S {
    S::from_f64(coeff_b(s.as_f64()))
}

fn coeff_b(v: f64) -> f64 {
    if v < SERIES_ANGLE * SERIES_ANGLE {
        0.5 - v / 24.0 + v * v / 720.0 - v * v * v / 40320.0
    } else {
        let h = libm::sin(0.5 * libm::sqrt(v));
        2.0 * h * h / v
    }
}

pub fn rot_coeff_b_ds<S: Scalar>(s: S) -> S {
    let v = s.as_f64();
    let out = if v < SERIES_ANGLE * SERIES_ANGLE {
        -1.0 / 24.0 + v / 360.0 - v * v / 13440.0
    } else {
        let t = libm::sqrt(v);
        (libm::sin(t) / t - 2.0 * coeff_b(v)) / (2.0 * v)
    };
    S::from_f64(out)
}

/// Axis-angle to rotation matrix, `R = I + a K + b K^2` with `K = [r]_x`.
pub fn rodrigues(r: Vec3) -> Mat3 {
    let s = geometry::dot(r, r);
    let (a, b) = (rot_coeff_a(s), rot_coeff_b(s));
    let k = geometry::skew(r);
    let k2 = geometry::mat_mul(&k, &k);
    let mut out = geometry::IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Maps `r` to the 9 entries of `[r]_x` (row-major) as a `[9, 3]` matrix.
fn skew_basis<S: Scalar>() -> Tensor<S> {
    let mut t = Tensor::zeros(&[9, 3]);
    for (row, col, sign) in [(1, 2, -1.0), (2, 1, 1.0), (3, 2, 1.0), (5, 0, -1.0), (6, 1, -1.0), (7, 0, 1.0)] {
        t.data_mut()[row * 3 + col] = S::from_f64(sign);
    }
    t
}

/// Differentiable Rodrigues map of a `[3]` axis-angle variable to `[3, 3]`.
pub fn rodrigues_tape<S: Scalar>(tape: &mut Tape<S>, skew: Var, eye: Var, r: Var) -> Result<Var> {
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq)?;
    let a = tape.map(s, rot_coeff_a::<S>, rot_coeff_a_ds::<S>)?;
    let b = tape.map(s, rot_coeff_b::<S>, rot_coeff_b_ds::<S>)?;
    let col = tape.reshape(r, &[3, 1])?;
    let k = tape.matmul(skew, col)?;
    let k = tape.reshape(k, &[3, 3])?;
    let k2 = tape.matmul(k, k)?;
    let ak = tape.scale_by(k, a)?;
    let bk2 = tape.scale_by(k2, b)?;
    let sum = tape.add(ak, bk2)?;
    tape.add(eye, sum)
}

/// Model arrays placed on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct LbsConstants {
    template: Var,
    shape_basis: Var,
    joint_regressor: Var,
    skinning_weights: Var,
    skew: Var,
    eye: Var,
}

/// Posed mesh and joints (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
}

/// Synthetic parametric hand.
#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    seed: u64,
    /// `[778 * 3]`
    template: Vec<f64>,
    /// `[10, 778 * 3]`
    shape_basis: Vec<f64>,
    /// `[21, 778]`
    joint_regressor: Vec<f64>,
    /// `[778, 21]`
    skinning_weights: Vec<f64>,
}

impl HandModel {
    /// The model every dataset and checkpoint refers to.
    pub fn canonical() -> Self {
        Self::synthetic(HAND_MODEL_SEED)
    }

    /// Generates the model deterministically from `seed`.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verts = template_vertices(&mut rng);
        let template: Vec<f64> = verts.iter().flatten().copied().collect();
        let shape_basis = shape_basis(&verts, &mut rng);
        let joint_regressor = joint_regressor(&verts);
        let skinning_weights = skinning_weights(&verts);
        Self { seed, template, shape_basis, joint_regressor, skinning_weights }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn version(&self) -> u32 {
        HAND_MODEL_VERSION
    }

    pub fn parents(&self) -> &'static [Option<usize>; NUM_JOINTS] {
        &PARENTS
    }

    pub fn template(&self) -> &[f64] {
        &self.template
    }

    pub fn shape_basis(&self) -> &[f64] {
        &self.shape_basis
    }

    pub fn joint_regressor(&self) -> &[f64] {
        &self.joint_regressor
    }

    pub fn skinning_weights(&self) -> &[f64] {
        &self.skinning_weights
    }

    /// Rest-pose joints of the shaped template.
    pub fn rest_joints(&self, beta: &[f64; NUM_SHAPE]) -> Vec<Vec3> {
        let shaped: Vec<f64> = (0..3 * NUM_VERTICES)
            .map(|i| self.template[i] + (0..NUM_SHAPE).map(|b| beta[b] * self.shape_basis[b * 3 * NUM_VERTICES + i]).sum::<f64>())
            .collect();
        (0..NUM_JOINTS)
            .map(|j| {
                let mut p = [0.0; 3];
                for v in 0..NUM_VERTICES {
                    let w = self.joint_regressor[j * NUM_VERTICES + v];
                    for (c, pc) in p.iter_mut().enumerate() {
                        *pc += w * shaped[3 * v + c];
                    }
                }
                p
            })
            .collect()
    }

    pub fn constants<S: Scalar>(&self, tape: &mut Tape<S>) -> LbsConstants {
        let cast = |shape: &[usize], data: &[f64]| Tensor::from_fn(shape, |i| S::from_f64(data[i]));
        LbsConstants {
            template: tape.constant(cast(&[1, 3 * NUM_VERTICES], &self.template)),
            shape_basis: tape.constant(cast(&[NUM_SHAPE, 3 * NUM_VERTICES], &self.shape_basis)),
            joint_regressor: tape.constant(cast(&[NUM_JOINTS, NUM_VERTICES], &self.joint_regressor)),
            skinning_weights: tape.constant(cast(&[NUM_VERTICES, NUM_JOINTS], &self.skinning_weights)),
            skew: tape.constant(skew_basis()),
            eye: tape.constant(Tensor::eye(3)),
        }
    }

    /// Plain evaluation of [`lbs_forward`] in 64-bit.
    pub fn forward(&self, params: &ManoParams) -> Result<HandPose> {
        self.forward_translated(params, [0.0; 3])
    }

    /// [`HandModel::forward`] followed by a global translation.
    pub fn forward_translated(&self, params: &ManoParams, translation: Vec3) -> Result<HandPose> {
        if !params.is_finite() || translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "lbs_forward" });
        }
        let mut tape = Tape::<f64>::with_checks(true);
        let consts = self.constants(&mut tape);
        let theta = tape.constant(Tensor::new(&[POSE_DIM], params.theta.to_vec())?);
        let beta = tape.constant(Tensor::new(&[NUM_SHAPE], params.beta.to_vec())?);
        let transl = tape.constant(Tensor::new(&[3], translation.to_vec())?);
        let (v, j) = lbs_forward(&mut tape, &consts, theta, beta, Some(transl))?;
        let rows = |x: &[f64]| x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Vec3>>();
        Ok(HandPose { vertices: rows(tape.value(v)), joints: rows(tape.value(j)) })
    }
}

/// Linear blend skinning on the tape.
///
/// `theta: [48]`, `beta: [10]`, optional `translation: [3]`. Returns vertices
/// `[778, 3]` and joints `[21, 3]` regressed from the posed vertices.
pub fn lbs_forward<S: Scalar>(
    tape: &mut Tape<S>,
    c: &LbsConstants,
    theta: Var,
    beta: Var,
    translation: Option<Var>,
) -> Result<(Var, Var)> {
    if tape.shape(theta) != [POSE_DIM] || tape.shape(beta) != [NUM_SHAPE] {
        return Err(Error::Shape {
            op: "lbs_forward",
            detail: alloc::format!("theta {:?}, beta {:?}", tape.shape(theta), tape.shape(beta)),
        });
    }
    let b = tape.reshape(beta, &[1, NUM_SHAPE])?;
    let offsets = tape.matmul(b, c.shape_basis)?;
    let shaped = tape.add(c.template, offsets)?;
    let shaped = tape.reshape(shaped, &[NUM_VERTICES, 3])?;
    let rest = tape.matmul(c.joint_regressor, shaped)?;

    let mut joint_col = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let row = tape.slice(rest, 0, j, 1)?;
        joint_col.push(tape.reshape(row, &[3, 1])?);
    }

    let mut global: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut posed: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut affine = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let local = match pose_slot(j) {
            Some(slot) => {
                let r = tape.slice(theta, 0, 3 * slot, 3)?;
                Some(rodrigues_tape(tape, c.skew, c.eye, r)?)
            }
            None => None,
        };
        let (g, t) = match PARENTS[j] {
            None => {
                let g = local.unwrap_or(c.eye);
                let t = tape.matmul(g, joint_col[j])?;
                (g, t)
            }
            Some(p) => {
                let g = match local {
                    Some(l) => tape.matmul(global[p], l)?,
                    None => global[p],
                };
                let bone = tape.sub(joint_col[j], joint_col[p])?;
                let moved = tape.matmul(global[p], bone)?;
                let t = tape.add(posed[p], moved)?;
                (g, t)
            }
        };
        let gj = tape.matmul(g, joint_col[j])?;
        let offset = tape.sub(t, gj)?;
        let a = tape.concat(&[g, offset], 1)?;
        affine.push(tape.reshape(a, &[1, 12])?);
        global.push(g);
        posed.push(t);
    }
    let stacked = tape.concat(&affine, 0)?;
    let blend = tape.matmul(c.skinning_weights, stacked)?;
    let mut verts = tape.batched_affine(blend, shaped)?;
    if let Some(tr) = translation {
        verts = tape.add_bias(verts, tr, 1)?;
    }
    let joints = tape.matmul(c.joint_regressor, verts)?;
    Ok((verts, joints))
}

fn ring_frame(d: Vec3) -> (Vec3, Vec3) {
    let u = geometry::normalize(geometry::cross(d, [0.0, 0.0, 1.0]));
    let u = if geometry::norm(u) < 0.5 { geometry::normalize(geometry::cross(d, [1.0, 0.0, 0.0])) } else { u };
    (u, geometry::cross(d, u))
}

fn template_vertices(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(NUM_VERTICES);
    let jitter = |p: Vec3, rng: &mut ChaCha8Rng| -> Vec3 {
        [p[0] + rng.random_range(-0.3..0.3), p[1] + rng.random_range(-0.3..0.3), p[2] + rng.random_range(-0.3..0.3)]
    };
    for f in 0..5 {
        let radius = FINGER_RADIUS_MM[f];
        for s in 0..3 {
            let a = REST_JOINTS_MM[finger_joint(f, s)];
            let b = REST_JOINTS_MM[finger_joint(f, s + 1)];
            let d = geometry::normalize(geometry::sub(b, a));
            let (u, w) = ring_frame(d);
            for ring in 0..RINGS_PER_SEGMENT {
                let frac = (ring as f64 + 0.5) / RINGS_PER_SEGMENT as f64;
                let centre = geometry::add(a, geometry::scale(geometry::sub(b, a), frac));
                let r = radius * (1.0 - 0.08 * (s as f64 + frac));
                for k in 0..RING_VERTICES {
                    let phi = core::f64::consts::TAU * k as f64 / RING_VERTICES as f64;
                    let off = geometry::add(geometry::scale(u, r * libm::cos(phi)), geometry::scale(w, r * libm::sin(phi)));
                    out.push(jitter(geometry::add(centre, off), rng));
                }
            }
        }
        let base = REST_JOINTS_MM[finger_joint(f, 2)];
        let tip = REST_JOINTS_MM[finger_joint(f, 3)];
        let d = geometry::normalize(geometry::sub(tip, base));
        out.push(jitter(geometry::add(tip, geometry::scale(d, 0.5 * radius)), rng));
    }
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    for i in 0..PALM_VERTICES {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / PALM_VERTICES as f64;
        let r = libm::sqrt(1.0 - y * y);
        let phi = golden * i as f64;
        let p = [45.0 * r * libm::cos(phi), 42.0 - 52.0 * y, 15.0 * r * libm::sin(phi)];
        out.push(jitter(p, rng));
    }
    out
}

fn shape_basis(verts: &[Vec3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n3 = 3 * NUM_VERTICES;
    let mut basis = vec![0.0; NUM_SHAPE * n3];
    let smooth = |x: f64, lo: f64, hi: f64| -> f64 {
        let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    for (v, p) in verts.iter().enumerate() {
        let fixed: [Vec3; 4] = [
            geometry::scale(*p, 0.08),
            [0.0, 0.12 * (p[1] - 80.0).max(0.0), 0.0],
            [0.1 * p[0] * (1.0 - smooth(p[1], 80.0, 120.0)), 0.0, 0.0],
            [0.0, 0.0, 0.2 * p[2]],
        ];
        for (b, d) in fixed.iter().enumerate() {
            basis[b * n3 + 3 * v..b * n3 + 3 * v + 3].copy_from_slice(d);
        }
    }
    for b in 4..NUM_SHAPE {
        for _ in 0..3 {
            let dir = geometry::normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let freq = geometry::scale(
                geometry::normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                1.0 / 40.0,
            );
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            for (v, p) in verts.iter().enumerate() {
                let amp = 2.0 * libm::sin(geometry::dot(freq, *p) + phase);
                for c in 0..3 {
                    basis[b * n3 + 3 * v + c] += amp * dir[c];
                }
            }
        }
    }
    basis
}

fn joint_regressor(verts: &[Vec3]) -> Vec<f64> {
    let mut reg = vec![0.0; NUM_JOINTS * NUM_VERTICES];
    for (j, joint) in REST_JOINTS_MM.iter().enumerate() {
        let mut by_dist: Vec<(f64, usize)> = verts.iter().enumerate().map(|(v, p)| (geometry::dist(*p, *joint), v)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &by_dist[..REGRESSOR_NEIGHBOURS];
        let total: f64 = near.iter().map(|(d, _)| 1.0 / (d + 1.0)).sum();
        for &(d, v) in near {
            reg[j * NUM_VERTICES + v] = 1.0 / (d + 1.0) / total;
        }
    }
    reg
}

fn skinning_weights(verts: &[Vec3]) -> Vec<f64> {
    let mut w = vec![0.0f64; NUM_VERTICES * NUM_JOINTS];
    for (v, p) in verts.iter().enumerate() {
        let row = &mut w[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            let parent = PARENTS[j].unwrap_or(0);
            let d = geometry::point_segment_distance(*p, REST_JOINTS_MM[parent], REST_JOINTS_MM[j]);
            let k = libm::exp(-d * d / (2.0 * SKIN_SIGMA_MM * SKIN_SIGMA_MM));
            row[parent] = row[parent].max(k);
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            // Unreachable for the generated template, kept as a safe fallback.
            row[0] = 1.0;
            continue;
        }
        for x in row.iter_mut() {
            if *x < 1e-3 * peak {
                *x = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    w
}
