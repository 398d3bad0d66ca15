//! The full pipeline: image features, pose prior, fusion, hourglass,
//! regression and skinning.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::cat::{CatConfig, CatStack, CatVariant};
use crate::error::{Error, Result};
use crate::hand_graph::{build_hand_skeleton, SkeletonGraph, NUM_JOINTS};
use crate::hand_model::{lbs_forward, LbsConstants};
use crate::head::{
    compute_training_loss, Backbone, BackboneConfig, Hourglass, HourglassConfig, Loss, LossWeights, Regressor, Terms,
    HEATMAP_SIGMA,
};
use crate::kgc::{KgcConfig, KgcStack, MlpBaseline, PosePrior};
use crate::param::Params;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const IMAGE_SIZE: usize = 256;

/// Source of the spatial hand prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorKind {
    #[default]
    Graph,
    Mlp,
    /// No prior and no fusion: the hourglass sees the image features.
    None,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Graph => "graph",
            PriorKind::Mlp => "mlp",
            PriorKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "graph" | "kgc" => Ok(PriorKind::Graph),
            "mlp" => Ok(PriorKind::Mlp),
            "none" | "image_only" => Ok(PriorKind::None),
            other => Err(Error::InvalidArgument(format!("unknown prior {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub prior: PriorKind,
    /// `grid` is overwritten by the backbone feature grid.
    pub kgc: KgcConfig,
    /// `out_channels` is overwritten by the backbone channel count.
    pub cat: CatConfig,
    pub hourglass: HourglassConfig,
    pub regressor_hidden: usize,
    pub heatmap_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            backbone: BackboneConfig::default(),
            prior: PriorKind::Graph,
            kgc: KgcConfig::default(),
            cat: CatConfig::default(),
            hourglass: HourglassConfig::default(),
            regressor_hidden: 512,
            heatmap_sigma: HEATMAP_SIGMA,
        }
    }
}

impl ModelConfig {
    /// Width-reduced profile that trains on one CPU core: 64 px input,
    /// 8x8 feature grid, 64 channels throughout.
    pub fn desk() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            backbone: BackboneConfig { input_pool: 4, channels: [16, 32, 64], out_channels: 64 },
            prior: PriorKind::Graph,
            kgc: KgcConfig { grid: 8, ..KgcConfig::default() },
            cat: CatConfig { d_model: 64, out_channels: 64, ..CatConfig::default() },
            hourglass: HourglassConfig { width: 64, out_channels: 64 },
            regressor_hidden: 128,
            heatmap_sigma: HEATMAP_SIGMA,
        }
    }

    /// Smallest configuration for finite-difference checks: 32 px input,
    /// 4x4 grid, 8 channels.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            backbone: BackboneConfig { input_pool: 1, channels: [4, 4, 8], out_channels: 8 },
            prior: PriorKind::Graph,
            kgc: KgcConfig { depth: 2, grid: 4, ..KgcConfig::default() },
            cat: CatConfig { blocks: 1, heads: 2, d_model: 8, variant: CatVariant::Cat, out_channels: 8 },
            hourglass: HourglassConfig { width: 8, out_channels: 21 },
            regressor_hidden: 8,
            heatmap_sigma: HEATMAP_SIGMA,
        }
    }

    pub fn grid(&self) -> Result<usize> {
        self.backbone.grid(self.image_size)
    }

    /// Copy with the derived sizes filled in.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.kgc.grid = self.grid()?;
        c.cat.out_channels = self.backbone.out_channels;
        c.kgc.resolved_widths()?;
        if !(c.heatmap_sigma > 0.0) || c.regressor_hidden == 0 {
            return Err(Error::InvalidArgument(format!("invalid head config: sigma {}, hidden {}", c.heatmap_sigma, c.regressor_hidden)));
        }
        Ok(c)
    }

    /// Short label for logs and ablation tables.
    pub fn label(&self) -> String {
        match self.prior {
            PriorKind::None => "image_only".into(),
            PriorKind::Mlp => format!("mlp+{}x{}", self.cat.variant.name(), self.cat.blocks),
            PriorKind::Graph => format!("kgc{}+{}x{}", self.kgc.depth, self.cat.variant.name(), self.cat.blocks),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub f_i: Var,
    pub f_p: Option<Var>,
    pub f_ip: Var,
    pub heatmaps: Var,
    pub theta: Var,
    pub beta: Var,
    pub vertices: Var,
    pub joints: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: ModelConfig,
    graph: SkeletonGraph,
    backbone: Backbone,
    prior: Option<PosePrior>,
    fusion: Option<CatStack>,
    hourglass: Hourglass,
    regressor: Regressor,
}

impl Pipeline {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let backbone = Backbone::new(params, "backbone", &cfg.backbone, rng)?;
        let c = backbone.out_channels();
        let prior = match cfg.prior {
            PriorKind::Graph => Some(PosePrior::Graph(KgcStack::new(params, "kgc", &cfg.kgc, rng)?)),
            PriorKind::Mlp => Some(PosePrior::Mlp(MlpBaseline::new(params, "mlp", &cfg.kgc, rng)?)),
            PriorKind::None => None,
        };
        let fusion = match prior {
            Some(_) => Some(CatStack::new(params, "cat", c, NUM_JOINTS, &cfg.cat, rng)?),
            None => None,
        };
        let hourglass = Hourglass::new(params, "hourglass", c, &cfg.hourglass, rng)?;
        let regressor = Regressor::new(params, "regressor", c + hourglass.out_channels(), cfg.regressor_hidden, rng);
        Ok(Self { cfg, graph: build_hand_skeleton(), backbone, prior, fusion, hourglass, regressor })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> usize {
        self.cfg.kgc.grid
    }

    pub fn heatmap_channels(&self) -> usize {
        self.hourglass.out_channels()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn hourglass(&self) -> &Hourglass {
        &self.hourglass
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    pub fn fusion(&self) -> Option<&CatStack> {
        self.fusion.as_ref()
    }

    /// `image: [3, S, S]`, `pose: [21, 2]` crop pixels.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, lbs: &LbsConstants, image: Var, pose: Var) -> Result<Forward> {
        let f_i = self.backbone.forward(tape, params, image)?;
        let (f_p, f_ip, attention) = match (&self.prior, &self.fusion) {
            (Some(prior), Some(fusion)) => {
                let l = self.graph.scaled_constant(tape);
                let f_p = prior.forward(tape, params, l, pose)?;
                let t = fusion.forward(tape, params, f_i, f_p)?;
                (Some(f_p), t.fused, t.attention)
            }
            _ => (None, f_i, Vec::new()),
        };
        let heatmaps = self.hourglass.forward(tape, params, f_ip)?;
        let r = self.regressor.forward(tape, params, f_ip, heatmaps)?;
        let (vertices, joints) = lbs_forward(tape, lbs, r.theta, r.beta, None)?;
        Ok(Forward { f_i, f_p, f_ip, heatmaps, theta: r.theta, beta: r.beta, vertices, joints, attention })
    }

    /// Forward pass plus the training loss against `gt`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Params<S>,
        lbs: &LbsConstants,
        image: Var,
        pose: Var,
        gt: &Terms,
        weights: &LossWeights,
    ) -> Result<(Forward, Loss)> {
        let f = self.forward(tape, params, lbs, image, pose)?;
        let pred = Terms { heatmaps: f.heatmaps, theta: f.theta, beta: f.beta, joints: f.joints, vertices: f.vertices };
        let loss = compute_training_loss(tape, &pred, gt, weights)?;
        Ok((f, loss))
    }
}
