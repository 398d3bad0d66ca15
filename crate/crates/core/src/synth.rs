//! Seeded synthetic occluded-hand dataset: random pose and shape, pinhole
//! projection, a simple skeleton rendering and gray rectangular occluders.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize, scale, Vec3};
use crate::hand_graph::{NUM_JOINTS, PARENTS};
use crate::hand_model::{HandModel, ManoParams, NUM_SHAPE, POSE_JOINTS};
use crate::kgc::{Pose2D, CROP_SIZE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = CROP_SIZE as usize;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const ARTICULATION_RANGE: f64 = 0.6;
pub const ROOT_MAX_ANGLE: f64 = core::f64::consts::FRAC_PI_2;
pub const SHAPE_RANGE: f64 = 1.0;
pub const HAND_DEPTH_MM: f64 = 600.0;
/// Half-width of the per-sample spread of the occlusion target.
pub const OCCLUSION_JITTER: f64 = 0.25;
const MAX_ATTEMPTS: usize = 1000;
const BONE_RADIUS_PX: f64 = 4.0;
const JOINT_SIGMA_PX: f64 = 3.0;

const FINGER_COLORS: [[f64; 3]; 5] = [
    [1.0, 0.25, 0.25],
    [1.0, 0.85, 0.2],
    [0.3, 1.0, 0.3],
    [0.25, 0.6, 1.0],
    [0.85, 0.3, 1.0],
];
const PALM_COLOR: [f64; 3] = [0.95, 0.75, 0.6];

/// Pinhole camera in crop pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self { focal: 540.0, cu: CROP_SIZE / 2.0, cv: CROP_SIZE / 2.0 }
    }
}

impl Camera {
    /// `(u, v) = (f x / z + c_u, f y / z + c_v)`.
    pub fn project_point(&self, p: Vec3) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::BehindCamera(p[2]));
        }
        Ok([self.focal * p[0] / p[2] + self.cu, self.focal * p[1] / p[2] + self.cv])
    }

    /// Unit ray direction through pixel `(u, v)`.
    pub fn ray(&self, uv: [f64; 2]) -> Vec3 {
        normalize([(uv[0] - self.cu) / self.focal, (uv[1] - self.cv) / self.focal, 1.0])
    }
}

pub fn project(joints3d: &[Vec3], camera: &Camera) -> Result<Pose2D> {
    if joints3d.len() != NUM_JOINTS {
        return Err(Error::Shape { op: "project", detail: format!("{} joints, expected {}", joints3d.len(), NUM_JOINTS) });
    }
    let mut j = [[0.0; 2]; NUM_JOINTS];
    for (uv, p) in j.iter_mut().zip(joints3d) {
        *uv = camera.project_point(*p)?;
    }
    Pose2D::new(j)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub occlusion_level: f64,
    pub camera: Camera,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, occlusion_level: 0.5, camera: Camera::default() }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_level) {
            return Err(Error::InvalidArgument(format!("occlusion level {} outside [0, 1]", self.occlusion_level)));
        }
        if !(self.camera.focal > 0.0) {
            return Err(Error::InvalidArgument("camera focal length must be positive".into()));
        }
        Ok(())
    }

    /// Independent random stream for one sample.
    pub fn sample_rng(&self, split: Split, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((split.stream() << 48) | index);
        rng
    }
}

/// `IMAGE_SIDE x IMAGE_SIDE` bit mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<u64>,
}

impl Default for Mask {
    fn default() -> Self {
        Self { bits: vec![0; IMAGE_PIXELS / 64] }
    }
}

impl Mask {
    pub fn from_words(bits: Vec<u64>) -> Result<Self> {
        if bits.len() != IMAGE_PIXELS / 64 {
            return Err(Error::Shape { op: "mask", detail: format!("{} words", bits.len()) });
        }
        Ok(Self { bits })
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }
}

/// One training example. 3D quantities are in camera coordinates (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    /// `[3, 256, 256]` channel-first.
    pub image: Vec<u8>,
    /// Projection of `joints3d`, noise free.
    pub pose2d: Pose2D,
    pub params: ManoParams,
    /// Camera-frame position of the model origin.
    pub translation: Vec3,
    pub joints3d: Vec<Vec3>,
    pub mesh: Vec<Vec3>,
    pub hand_mask: Mask,
    pub occlusion_mask: Mask,
    pub occlusion_ratio: f64,
}

impl Sample {
    /// Image scaled to `[0, 1]`.
    pub fn image_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[3, IMAGE_SIDE, IMAGE_SIDE], |i| S::from_f64(self.image[i] as f64 / 255.0))
    }

    /// Joints relative to the model origin.
    pub fn joints_local(&self) -> Vec<Vec3> {
        self.joints3d.iter().map(|p| crate::geometry::sub(*p, self.translation)).collect()
    }

    pub fn mesh_local(&self) -> Vec<Vec3> {
        self.mesh.iter().map(|p| crate::geometry::sub(*p, self.translation)).collect()
    }
}

/// Uniform direction times an angle in `[0, ROOT_MAX_ANGLE]`.
fn random_root<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-6 && n2 <= 1.0 {
            return scale(normalize(v), rng.random_range(0.0..ROOT_MAX_ANGLE));
        }
    }
}

pub fn random_params<R: Rng + ?Sized>(rng: &mut R) -> ManoParams {
    let mut p = ManoParams::default();
    let root = random_root(rng);
    p.set_root(root);
    for t in p.theta[3..].iter_mut() {
        *t = rng.random_range(-ARTICULATION_RANGE..ARTICULATION_RANGE);
    }
    for b in p.beta.iter_mut() {
        *b = rng.random_range(-SHAPE_RANGE..SHAPE_RANGE);
    }
    debug_assert_eq!(POSE_JOINTS.len() * 3, p.theta.len());
    debug_assert_eq!(p.beta.len(), NUM_SHAPE);
    p
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    libm::hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy)
}

fn finger_of(joint: usize) -> Option<usize> {
    (joint > 0).then(|| (joint - 1) / 4)
}

/// Skeleton rendering: coloured bones plus bright joint blobs on black.
/// Returns the `[3, S, S]` float image and the hand pixel mask.
pub fn render_hand(pose: &Pose2D) -> (Vec<f64>, Mask) {
    let mut img = vec![0.0; 3 * IMAGE_PIXELS];
    let mut mask = Mask::default();
    let mut paint = |x: usize, y: usize, color: [f64; 3], a: f64| {
        let i = y * IMAGE_SIDE + x;
        for c in 0..3 {
            let v = &mut img[c * IMAGE_PIXELS + i];
            *v = *v * (1.0 - a) + color[c] * a;
        }
        if a >= 0.5 {
            mask.set(i);
        }
    };
    let clip = |v: f64| v.clamp(0.0, (IMAGE_SIDE - 1) as f64) as usize;
    for (j, parent) in PARENTS.iter().enumerate() {
        let Some(p) = *parent else { continue };
        let (a, b) = (pose.joints[p], pose.joints[j]);
        let color = if p == 0 { PALM_COLOR } else { FINGER_COLORS[finger_of(j).unwrap()] };
        let r = BONE_RADIUS_PX + 1.0;
        let (x0, x1) = (clip(a[0].min(b[0]) - r), clip(a[0].max(b[0]) + r));
        let (y0, y1) = (clip(a[1].min(b[1]) - r), clip(a[1].max(b[1]) + r));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance([x as f64 + 0.5, y as f64 + 0.5], a, b);
                let alpha = 1.0 - smoothstep(BONE_RADIUS_PX - 1.0, BONE_RADIUS_PX + 1.0, d);
                if alpha > 0.0 {
                    paint(x, y, color, alpha);
                }
            }
        }
    }
    let r = 3.0 * JOINT_SIGMA_PX;
    for uv in &pose.joints {
        for y in clip(uv[1] - r)..=clip(uv[1] + r) {
            for x in clip(uv[0] - r)..=clip(uv[0] + r) {
                let (dx, dy) = (x as f64 + 0.5 - uv[0], y as f64 + 0.5 - uv[1]);
                let d2 = dx * dx + dy * dy;
                let alpha = libm::exp(-d2 / (2.0 * JOINT_SIGMA_PX * JOINT_SIGMA_PX));
                if alpha > 0.05 {
                    paint(x, y, [1.0, 1.0, 1.0], alpha);
                }
            }
        }
    }
    (img, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    gray: f64,
}

impl Rect {
    fn contains(&self, s: f64, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.hw * s && (y - self.cy).abs() <= self.hh * s
    }
}

fn pixel_center(i: usize) -> (f64, f64) {
    ((i % IMAGE_SIDE) as f64 + 0.5, (i / IMAGE_SIDE) as f64 + 0.5)
}

/// Places 1 to 3 rectangles centred on hand pixels and scales them jointly
/// so they cover about `target` of the hand.
fn place_occluders<R: Rng + ?Sized>(rng: &mut R, hand: &[usize], target: f64) -> (Vec<Rect>, f64) {
    let n = rng.random_range(1..=3usize);
    let rects: Vec<Rect> = (0..n)
        .map(|_| {
            let (cx, cy) = pixel_center(hand[rng.random_range(0..hand.len())]);
            Rect { cx, cy, hw: rng.random_range(0.5..1.5), hh: rng.random_range(0.5..1.5), gray: rng.random_range(0.4..0.6) }
        })
        .collect();
    let covered = |s: f64| {
        hand.iter()
            .filter(|&&i| {
                let (x, y) = pixel_center(i);
                rects.iter().any(|r| r.contains(s, x, y))
            })
            .count() as f64
            / hand.len() as f64
    };
    // Coverage is nondecreasing in the common scale.
    let (mut lo, mut hi) = (0.0, 2.0 * IMAGE_SIDE as f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if covered(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let s = if (covered(lo) - target).abs() < (covered(hi) - target).abs() { lo } else { hi };
    (rects.into_iter().map(|r| Rect { hw: r.hw * s, hh: r.hh * s, ..r }).collect(), s)
}

/// Generates sample `index` of `split`; a pure function of its arguments.
pub fn generate_sample(model: &HandModel, cfg: &SynthConfig, split: Split, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = cfg.sample_rng(split, index);
    for _ in 0..MAX_ATTEMPTS {
        let params = random_params(&mut rng);
        let local = model.forward(&params)?;
        let mut centroid = [0.0; 3];
        for p in &local.joints {
            for k in 0..3 {
                centroid[k] += p[k] / NUM_JOINTS as f64;
            }
        }
        let depth = HAND_DEPTH_MM + rng.random_range(-50.0..50.0);
        let translation = [
            -centroid[0] + rng.random_range(-20.0..20.0),
            -centroid[1] + rng.random_range(-20.0..20.0),
            depth - centroid[2],
        ];
        let shift = |v: &Vec<Vec3>| v.iter().map(|p| crate::geometry::add(*p, translation)).collect::<Vec<Vec3>>();
        let (joints3d, mesh) = (shift(&local.joints), shift(&local.vertices));
        let pose2d = match project(&joints3d, &cfg.camera) {
            Ok(p) if p.in_frame() => p,
            _ => continue,
        };
        let (mut img, hand_mask) = render_hand(&pose2d);
        let hand: Vec<usize> = (0..IMAGE_PIXELS).filter(|&i| hand_mask.get(i)).collect();
        if hand.is_empty() {
            continue;
        }
        let level = cfg.occlusion_level;
        let mut occlusion_mask = Mask::default();
        if level > 0.0 {
            let spread = OCCLUSION_JITTER.min(level).min(1.0 - level);
            let target = level + rng.random_range(-1.0..=1.0) * spread;
            let (rects, _) = place_occluders(&mut rng, &hand, target);
            for i in 0..IMAGE_PIXELS {
                let (x, y) = pixel_center(i);
                if let Some(r) = rects.iter().find(|r| r.contains(1.0, x, y)) {
                    occlusion_mask.set(i);
                    for c in 0..3 {
                        img[c * IMAGE_PIXELS + i] = r.gray;
                    }
                }
            }
        }
        let occlusion_ratio = occlusion_mask.intersection_count(&hand_mask) as f64 / hand.len() as f64;
        let image = img.iter().map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        return Ok(Sample { index, image, pose2d, params, translation, joints3d, mesh, hand_mask, occlusion_mask, occlusion_ratio });
    }
    Err(Error::InvalidArgument(format!("no in-frame pose after {MAX_ATTEMPTS} attempts for sample {index}")))
}

/// Sequential generation of samples `0..n`.
pub fn generate_dataset(model: &HandModel, cfg: &SynthConfig, split: Split, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    (0..n as u64).map(|i| generate_sample(model, cfg, split, i)).collect()
}
