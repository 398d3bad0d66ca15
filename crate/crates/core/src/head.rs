//! Image encoder, hourglass heatmap network, parameter regressor and the
//! five-term training loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hand_graph::NUM_JOINTS;
use crate::hand_model::{NUM_SHAPE, POSE_DIM};
use crate::kgc::{Pose2D, CROP_SIZE};
use crate::nn::{Conv, Dense, Init};
use crate::param::Params;
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const FEATURE_CHANNELS: usize = 256;
pub const HEATMAP_CHANNELS: usize = 256;
pub const HEATMAP_SIGMA: f64 = 1.5;
/// `POSE_DIM + NUM_SHAPE`.
pub const REGRESSION_DIM: usize = POSE_DIM + NUM_SHAPE;

const STRIDE2: ConvSpec = ConvSpec { stride: 2, pad: 1 };

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Average-pooling factor applied to the image before the first conv.
    pub input_pool: usize,
    pub channels: [usize; 3],
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { input_pool: 1, channels: [32, 64, 128], out_channels: FEATURE_CHANNELS }
    }
}

impl BackboneConfig {
    /// Feature grid side for a square image of side `image`.
    pub fn grid(&self, image: usize) -> Result<usize> {
        let f = self.input_pool * 8;
        if self.input_pool == 0 || image == 0 || !image.is_multiple_of(f) {
            return Err(Error::InvalidArgument(format!("image side {image} not divisible by {f}")));
        }
        Ok(image / f)
    }
}

/// Three stride-2 3x3 convolutions with ReLU and a 1x1 output projection.
#[derive(Clone, Debug)]
pub struct Backbone {
    pool: usize,
    stages: [Conv; 3],
    out: Conv,
}

impl Backbone {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        if cfg.input_pool == 0 || cfg.channels.contains(&0) || cfg.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid backbone config {cfg:?}")));
        }
        let [a, b, c] = cfg.channels;
        let stages = [
            Conv::new(params, &format!("{name}.conv0"), IMAGE_CHANNELS, a, 3, STRIDE2, true, Init::He, rng),
            Conv::new(params, &format!("{name}.conv1"), a, b, 3, STRIDE2, true, Init::He, rng),
            Conv::new(params, &format!("{name}.conv2"), b, c, 3, STRIDE2, true, Init::He, rng),
        ];
        let out = Conv::new(params, &format!("{name}.out"), c, cfg.out_channels, 1, ConvSpec::same(1), true, Init::Lecun, rng);
        Ok(Self { pool: cfg.input_pool, stages, out })
    }

    pub fn out_channels(&self) -> usize {
        self.out.fan_out
    }

    /// `[3, S, S]` in `[0, 1]` -> `[C, S / (8 pool), S / (8 pool)]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        let f = 8 * self.pool;
        if s.len() != 3 || s[0] != IMAGE_CHANNELS || s[1] != s[2] || s[1] == 0 || !s[1].is_multiple_of(f) {
            return Err(Error::Shape { op: "backbone", detail: format!("image {:?}, expected [3, S, S] with S divisible by {f}", s) });
        }
        let mut x = if self.pool > 1 { tape.avg_pool(image, self.pool)? } else { image };
        for c in &self.stages {
            x = c.forward(tape, params, x)?;
            x = tape.relu(x)?;
        }
        self.out.forward(tape, params, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HourglassConfig {
    pub width: usize,
    pub out_channels: usize,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self { width: 256, out_channels: HEATMAP_CHANNELS }
    }
}

/// Two-level encoder-decoder: `g -> g/2 -> g/4 -> g/2 -> g` with skips.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub skip1: Conv,
    pub down1: Conv,
    pub skip2: Conv,
    pub down2: Conv,
    pub bottom: Conv,
    pub up2: Conv,
    pub up1: Conv,
}

impl Hourglass {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        in_channels: usize,
        cfg: &HourglassConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (w, o) = (cfg.width, cfg.out_channels);
        if w == 0 || o == 0 || in_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid hourglass config {cfg:?}")));
        }
        let c3 = |params: &mut Params<S>, rng: &mut R, n: &str, i, o, init| {
            Conv::new(params, &format!("{name}.{n}"), i, o, 3, ConvSpec::same(3), true, init, rng)
        };
        let c1 = |params: &mut Params<S>, rng: &mut R, n: &str, i, o| {
            Conv::new(params, &format!("{name}.{n}"), i, o, 1, ConvSpec::same(1), true, Init::Lecun, rng)
        };
        Ok(Self {
            skip1: c1(params, rng, "skip1", in_channels, o),
            down1: c3(params, rng, "down1", in_channels, w, Init::He),
            skip2: c1(params, rng, "skip2", w, w),
            down2: c3(params, rng, "down2", w, w, Init::He),
            bottom: c3(params, rng, "bottom", w, w, Init::He),
            up2: c3(params, rng, "up2", w, w, Init::He),
            up1: c3(params, rng, "up1", w, o, Init::Lecun),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.skip1.fan_out
    }

    /// `[C, g, g] -> [H_ch, g, g]`, `g` divisible by 4.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[0] != self.skip1.fan_in || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape {
                op: "hourglass",
                detail: format!("input {:?}, expected [{}, g, g] with g divisible by 4", s, self.skip1.fan_in),
            });
        }
        let s1 = self.skip1.forward(tape, params, x)?;
        let p1 = tape.avg_pool(x, 2)?;
        let d1 = self.down1.forward(tape, params, p1)?;
        let d1 = tape.relu(d1)?;
        let s2 = self.skip2.forward(tape, params, d1)?;
        let p2 = tape.avg_pool(d1, 2)?;
        let d2 = self.down2.forward(tape, params, p2)?;
        let d2 = tape.relu(d2)?;
        let b = self.bottom.forward(tape, params, d2)?;
        let b = tape.relu(b)?;
        let u = tape.upsample(b, 2)?;
        let u = tape.add(u, s2)?;
        let u2 = self.up2.forward(tape, params, u)?;
        let u2 = tape.relu(u2)?;
        let u1 = self.up1.forward(tape, params, u2)?;
        let u1 = tape.upsample(u1, 2)?;
        tape.add(s1, u1)
    }
}

/// Global average pooling of `concat(F_IP, H)` followed by two dense layers.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub hidden: Dense,
    pub out: Dense,
}

/// Predicted `theta: [48]` and `beta: [10]`.
#[derive(Clone, Copy, Debug)]
pub struct Regressed {
    pub theta: Var,
    pub beta: Var,
}

impl Regressor {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::new(params, &format!("{name}.fc0"), in_channels, hidden, true, Init::He, rng),
            out: Dense::new(params, &format!("{name}.fc1"), hidden, REGRESSION_DIM, true, Init::Small, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, f_ip: Var, heat: Var) -> Result<Regressed> {
        let (a, b) = (tape.shape(f_ip), tape.shape(heat));
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] || a[0] + b[0] != self.hidden.fan_in {
            return Err(Error::Shape {
                op: "regress_params",
                detail: format!("features {:?}, heatmaps {:?}, expected {} channels in total", a, b, self.hidden.fan_in),
            });
        }
        let x = tape.concat(&[f_ip, heat], 0)?;
        let g = tape.global_avg_pool(x)?;
        let g = tape.reshape(g, &[1, self.hidden.fan_in])?;
        let h = self.hidden.forward(tape, params, g)?;
        let h = tape.relu(h)?;
        let y = self.out.forward(tape, params, h)?;
        let y = tape.reshape(y, &[REGRESSION_DIM])?;
        Ok(Regressed { theta: tape.slice(y, 0, 0, POSE_DIM)?, beta: tape.slice(y, 0, POSE_DIM, NUM_SHAPE)? })
    }
}

/// Ground-truth heatmaps: one Gaussian per joint in the first 21 channels,
/// zeros elsewhere. `sigma` is in grid cells; pixel `u` sits at cell
/// coordinate `u * grid / 256 - 0.5`.
pub fn render_heatmaps(pose: &Pose2D, channels: usize, grid: usize, sigma: f64) -> Result<Tensor<f64>> {
    if channels < NUM_JOINTS || grid == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("heatmaps need >= 21 channels, grid > 0, sigma > 0 (got {channels}, {grid}, {sigma})")));
    }
    let cell = grid as f64 / CROP_SIZE;
    let mut t = Tensor::zeros(&[channels, grid, grid]);
    let data = t.data_mut();
    for (j, uv) in pose.joints.iter().enumerate() {
        let (cx, cy) = (uv[0] * cell - 0.5, uv[1] * cell - 0.5);
        for r in 0..grid {
            for c in 0..grid {
                let d2 = (c as f64 - cx) * (c as f64 - cx) + (r as f64 - cy) * (r as f64 - cy);
                data[(j * grid + r) * grid + c] = libm::exp(-d2 / (2.0 * sigma * sigma));
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub heatmap: f64,
    pub theta: f64,
    pub beta: f64,
    pub joints: f64,
    pub vertices: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { heatmap: 1.0, theta: 1.0, beta: 1.0, joints: 1.0, vertices: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.heatmap, self.theta, self.beta, self.joints, self.vertices]
    }
}

/// Heatmaps, `theta [48]`, `beta [10]`, joints `[21, 3]` and vertices `[778, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub heatmaps: Var,
    pub theta: Var,
    pub beta: Var,
    pub joints: Var,
    pub vertices: Var,
}

impl Terms {
    fn as_array(&self) -> [Var; 5] {
        [self.heatmaps, self.theta, self.beta, self.joints, self.vertices]
    }
}

pub const TERM_NAMES: [&str; 5] = ["heatmap", "theta", "beta", "joints", "vertices"];

/// Total loss and the five unweighted MSE terms in [`TERM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub terms: [Var; 5],
}

/// `sum_k w_k * mean((pred_k - gt_k)^2)`.
pub fn compute_training_loss<S: Scalar>(tape: &mut Tape<S>, pred: &Terms, gt: &Terms, w: &LossWeights) -> Result<Loss> {
    let weights = w.as_array();
    if weights.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {w:?}")));
    }
    let mut terms = Vec::with_capacity(5);
    let mut total: Option<Var> = None;
    for ((p, g), wk) in pred.as_array().into_iter().zip(gt.as_array()).zip(weights) {
        let t = tape.mse_loss(p, g)?;
        terms.push(t);
        let wt = tape.scale(t, S::from_f64(wk))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, wt)?,
            None => wt,
        });
    }
    Ok(Loss { total: total.unwrap(), terms: [terms[0], terms[1], terms[2], terms[3], terms[4]] })
}
