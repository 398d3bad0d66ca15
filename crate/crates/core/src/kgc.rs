//! Lifting a 2D hand pose to a per-joint spatial prior with stacked Chebyshev
//! graph convolutions over the hand skeleton.
//!
//! The output of the last layer has `grid * grid` features per joint and is
//! reshaped row-major to `[21, grid, grid]`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hand_graph::{ChebGraphConvLayer, NUM_JOINTS};
use crate::nn::{Dense, Init};
use crate::param::Params;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Side of the square crop the pixel coordinates refer to.
pub const CROP_SIZE: f64 = 256.0;
pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_NOISE_SIGMA: f64 = 2.0;

/// 21 pixel coordinates `(u, v)` in the crop frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2D {
    pub joints: [[f64; 2]; NUM_JOINTS],
}

impl Pose2D {
    pub fn new(joints: [[f64; 2]; NUM_JOINTS]) -> Result<Self> {
        let p = Self { joints };
        if !p.is_finite() {
            return Err(Error::NonFinite { op: "pose2d" });
        }
        Ok(p)
    }

    /// Builds a pose from a flat `[u0, v0, u1, v1, ...]` slice.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * NUM_JOINTS {
            return Err(Error::Shape { op: "pose2d", detail: format!("{} coordinates, expected {}", flat.len(), 2 * NUM_JOINTS) });
        }
        let mut joints = [[0.0; 2]; NUM_JOINTS];
        for (j, uv) in joints.iter_mut().enumerate() {
            *uv = [flat[2 * j], flat[2 * j + 1]];
        }
        Self::new(joints)
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    /// Coordinates mapped from `[0, CROP_SIZE]` to `[-1, 1]`.
    pub fn normalized(&self) -> [[f64; 2]; NUM_JOINTS] {
        let mut out = self.joints;
        for v in out.iter_mut().flatten() {
            *v = *v * (2.0 / CROP_SIZE) - 1.0;
        }
        out
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[NUM_JOINTS, 2], |i| S::from_f64(self.joints[i / 2][i % 2]))
    }

    /// Whether every joint lies inside the crop.
    pub fn in_frame(&self) -> bool {
        self.joints.iter().flatten().all(|&v| (0.0..CROP_SIZE).contains(&v))
    }
}

/// Adds isotropic Gaussian noise with standard deviation `sigma` pixels.
pub fn add_pose_noise<R: Rng + ?Sized>(pose: &Pose2D, sigma: f64, rng: &mut R) -> Result<Pose2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(*pose);
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let mut out = *pose;
    for v in out.joints.iter_mut().flatten() {
        *v += dist.sample(rng);
    }
    Ok(out)
}

/// Hidden and output widths for a stack of `depth` layers ending at `out`.
///
/// Depth 4 with `out = 1024` gives `64, 256, 512, 1024`. Hidden widths follow a
/// geometric ramp from `out / 16` to `out / 2`, rounded to powers of two.
pub fn default_widths(depth: usize, out: usize) -> Result<Vec<usize>> {
    if depth == 0 {
        return Err(Error::InvalidArgument("graph convolution depth must be at least 1".into()));
    }
    let lo = libm::log2((out as f64 / 16.0).max(1.0));
    let hi = libm::log2((out as f64 / 2.0).max(1.0));
    let hidden = depth - 1;
    let mut w: Vec<usize> = (0..hidden)
        .map(|i| {
            let e = if hidden == 1 { hi } else { lo + (hi - lo) * i as f64 / (hidden - 1) as f64 };
            libm::exp2(libm::round(e)) as usize
        })
        .collect();
    w.push(out);
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgcConfig {
    pub depth: usize,
    /// Output widths of every layer; empty means [`default_widths`].
    pub widths: Vec<usize>,
    /// Chebyshev order `K` (number of polynomial terms).
    pub order: usize,
    /// Side of the per-joint output map.
    pub grid: usize,
    /// Map pixel coordinates to `[-1, 1]` before the first layer.
    pub normalize: bool,
}

impl Default for KgcConfig {
    fn default() -> Self {
        Self { depth: DEFAULT_DEPTH, widths: Vec::new(), order: DEFAULT_ORDER, grid: 32, normalize: true }
    }
}

impl KgcConfig {
    pub fn resolved_widths(&self) -> Result<Vec<usize>> {
        let out = self.grid * self.grid;
        if self.widths.is_empty() {
            return default_widths(self.depth, out);
        }
        if self.widths.len() != self.depth || self.widths.last() != Some(&out) || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "kgc widths {:?} must have {} entries ending at {}",
                self.widths, self.depth, out
            )));
        }
        Ok(self.widths.clone())
    }
}

/// Maps the raw pose variable `[21, 2]` to the network input.
fn pose_input<S: Scalar>(tape: &mut Tape<S>, pose: Var, normalize: bool) -> Result<Var> {
    if tape.shape(pose) != [NUM_JOINTS, 2] {
        return Err(Error::Shape { op: "pose input", detail: format!("pose {:?}, expected [21, 2]", tape.shape(pose)) });
    }
    if !normalize {
        return Ok(pose);
    }
    let scaled = tape.scale(pose, S::from_f64(2.0 / CROP_SIZE))?;
    let shift = tape.constant(Tensor::full(&[NUM_JOINTS, 2], S::from_f64(-1.0)));
    tape.add(scaled, shift)
}

/// Stack of Chebyshev graph convolutions with ReLU between layers.
#[derive(Clone, Debug)]
pub struct KgcStack {
    layers: Vec<ChebGraphConvLayer>,
    grid: usize,
    normalize: bool,
}

impl KgcStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, cfg: &KgcConfig, rng: &mut R) -> Result<Self> {
        let widths = cfg.resolved_widths()?;
        let mut layers = Vec::with_capacity(widths.len());
        let mut f_in = 2;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(ChebGraphConvLayer::new(params, &format!("{name}.layer{i}"), cfg.order, f_in, w, rng)?);
            f_in = w;
        }
        Ok(Self { layers, grid: cfg.grid, normalize: cfg.normalize })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[ChebGraphConvLayer] {
        &self.layers
    }

    /// `pose: [21, 2]` pixels -> `[21, grid, grid]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, l_scaled: Var, pose: Var) -> Result<Var> {
        let mut x = pose_input(tape, pose, self.normalize)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, params, l_scaled, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        tape.reshape(x, &[NUM_JOINTS, self.grid, self.grid])
    }
}

/// Joint-independent 3-layer perceptron with the same interface as
/// [`KgcStack`]: every joint's `(u, v)` goes through the same dense maps and
/// joints never exchange information.
#[derive(Clone, Debug)]
pub struct MlpBaseline {
    layers: [Dense; 3],
    grid: usize,
    normalize: bool,
}

impl MlpBaseline {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, cfg: &KgcConfig, rng: &mut R) -> Result<Self> {
        let out = cfg.grid * cfg.grid;
        let (h1, h2) = ((out / 16).max(1), (out / 4).max(1));
        let layers = [
            Dense::new(params, &format!("{name}.fc0"), 2, h1, true, Init::He, rng),
            Dense::new(params, &format!("{name}.fc1"), h1, h2, true, Init::He, rng),
            Dense::new(params, &format!("{name}.fc2"), h2, out, true, Init::He, rng),
        ];
        Ok(Self { layers, grid: cfg.grid, normalize: cfg.normalize })
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, pose: Var) -> Result<Var> {
        let mut x = pose_input(tape, pose, self.normalize)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, params, x)?;
            if i < 2 {
                x = tape.relu(x)?;
            }
        }
        tape.reshape(x, &[NUM_JOINTS, self.grid, self.grid])
    }
}

/// Pose prior used by the model.
#[derive(Clone, Debug)]
pub enum PosePrior {
    Graph(KgcStack),
    Mlp(MlpBaseline),
}

impl PosePrior {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, l_scaled: Var, pose: Var) -> Result<Var> {
        match self {
            PosePrior::Graph(g) => g.forward(tape, params, l_scaled, pose),
            PosePrior::Mlp(m) => m.forward(tape, params, pose),
        }
    }
}

/// Convenience wrapper: `F_P` for a concrete pose.
pub fn kgc_forward<S: Scalar>(
    tape: &mut Tape<S>,
    stack: &KgcStack,
    params: &Params<S>,
    l_scaled: Var,
    pose: &Pose2D,
) -> Result<Var> {
    let p = tape.constant(pose.to_tensor());
    stack.forward(tape, params, l_scaled, p)
}

/// Convenience wrapper: MLP prior for a concrete pose.
pub fn mlp_baseline_forward<S: Scalar>(
    tape: &mut Tape<S>,
    mlp: &MlpBaseline,
    params: &Params<S>,
    pose: &Pose2D,
) -> Result<Var> {
    let p = tape.constant(pose.to_tensor());
    mlp.forward(tape, params, p)
}
