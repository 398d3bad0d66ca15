//! End-to-end finite-difference check of the reduced-width pipeline.

use anyhow::Result;
use handgcat_core::cat::CatVariant;
use handgcat_core::gradcheck::{check_inputs_sampled, check_params, GradCheckReport, Tolerance};
use handgcat_core::hand_model::{HandModel, ManoParams, NUM_SHAPE, POSE_DIM};
use handgcat_core::head::{render_heatmaps, LossWeights, Terms};
use handgcat_core::kgc::Pose2D;
use handgcat_core::model::{ModelConfig, Pipeline, PriorKind};
use handgcat_core::{Params, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const VARIANTS: [(PriorKind, CatVariant); 4] = [
    (PriorKind::Graph, CatVariant::Cat),
    (PriorKind::Mlp, CatVariant::Cat),
    (PriorKind::Graph, CatVariant::PlainTransformer),
    (PriorKind::None, CatVariant::Cat),
];

#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub label: String,
    pub seed: u64,
    pub inputs: GradCheckReport,
    pub params: GradCheckReport,
}

impl PipelineCheck {
    pub fn passed(&self) -> bool {
        self.inputs.passed() && self.params.passed()
    }
}

/// Checks input and parameter gradients of the training loss of
/// [`ModelConfig::tiny`] with the given prior and fusion variant.
pub fn check_pipeline(prior: PriorKind, variant: CatVariant, seed: u64, coords: usize) -> Result<PipelineCheck> {
    let hand = HandModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny();
    cfg.prior = prior;
    cfg.cat.variant = variant;
    let mut params = Params::<f64>::new();
    let net = Pipeline::new(&mut params, &cfg, &mut rng)?;
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".b") {
            let v: Vec<f64> = (0..params.get(id).len()).map(|_| rng.random_range(-0.05..0.05)).collect();
            params.set_value(id, &v);
        }
    }
    let side = cfg.image_size;
    let image = Tensor::from_fn(&[3, side, side], |_| rng.random_range(0.0..1.0));
    let mut j = [[0.0; 2]; 21];
    for uv in j.iter_mut() {
        *uv = [rng.random_range(30.0..226.0), rng.random_range(30.0..226.0)];
    }
    let pose = Pose2D::new(j)?;
    let theta: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(-0.3..0.3)).collect();
    let beta: Vec<f64> = (0..NUM_SHAPE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let truth = hand.forward(&ManoParams::from_slices(&theta, &beta)?)?;
    let flat = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let gt = [
        render_heatmaps(&pose, net.heatmap_channels(), net.grid(), cfg.heatmap_sigma)?,
        Tensor::new(&[POSE_DIM], theta)?,
        Tensor::new(&[NUM_SHAPE], beta)?,
        Tensor::new(&[21, 3], flat(&truth.joints))?,
        Tensor::new(&[truth.vertices.len(), 3], flat(&truth.vertices))?,
    ];
    // Millimetre terms scaled down so finite-difference round-off stays small.
    let w = LossWeights { joints: 1e-3, vertices: 1e-3, ..LossWeights::default() };
    let loss = |tape: &mut Tape<f64>, p: &Params<f64>, img: Var, q: Var| {
        let lbs = hand.constants(tape);
        let c = |tape: &mut Tape<f64>, t: &Tensor<f64>| tape.constant(t.clone());
        let t = Terms {
            heatmaps: c(tape, &gt[0]),
            theta: c(tape, &gt[1]),
            beta: c(tape, &gt[2]),
            joints: c(tape, &gt[3]),
            vertices: c(tape, &gt[4]),
        };
        Ok(net.loss(tape, p, &lbs, img, q, &t, &w)?.1.total)
    };
    let tol = Tolerance::default();
    let inputs = check_inputs_sampled(&[image.clone(), pose.to_tensor()], tol, coords, &mut rng, |tape, v| loss(tape, &params, v[0], v[1]))?;
    let by_params = check_params(&params, tol, coords, &mut rng, |tape, p| {
        let (i, q) = (tape.constant(image.clone()), tape.constant(pose.to_tensor()));
        loss(tape, p, i, q)
    })?;
    Ok(PipelineCheck { label: cfg.label(), seed, inputs, params: by_params })
}

/// Every variant over seeds `0..seeds`, in parallel.
pub fn check_all(seeds: u64, coords: usize) -> Result<Vec<PipelineCheck>> {
    let jobs: Vec<_> = VARIANTS.iter().flat_map(|&(p, v)| (0..seeds).map(move |s| (p, v, s))).collect();
    jobs.into_par_iter().map(|(p, v, s)| check_pipeline(p, v, s, coords)).collect()
}
