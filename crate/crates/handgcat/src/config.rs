//! Run configuration as plain `key = value` lines with dotted section keys.
//!
//! ```text
//! # comments start with '#'
//! profile = desk
//! seed = 3
//! kgc.depth = 4
//! cat.variant = plain_transformer
//! ```
//!
//! `profile` selects the base architecture and is applied before every other
//! key regardless of its position.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use handgcat_core::cat::CatVariant;
use handgcat_core::head::{BackboneConfig, HourglassConfig, LossWeights};
use handgcat_core::kgc::DEFAULT_NOISE_SIGMA;
use handgcat_core::model::{ModelConfig, PriorKind};
use handgcat_core::optim::StepDecay;
use handgcat_core::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Width-reduced network and 2000/500 samples for a single CPU core.
    Desk,
    /// Full-width network: 256-channel features on a 32x32 grid.
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => bail!("unknown profile {other:?} (expected desk or full)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub occlusion_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays; 0 keeps the rate constant.
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 32, epochs: 70, decay_factor: 0.7, decay_every: 10 }
    }
}

impl OptimizerConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay { base: self.lr, factor: self.decay_factor, every: self.decay_every }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Train on the first `subset` samples only; 0 uses all of them.
    pub subset: usize,
    /// Run exactly this many optimizer steps, ignoring `optimizer.epochs`;
    /// 0 runs every epoch.
    pub max_steps: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub precision: DType,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Std of the Gaussian noise added to the input 2D pose (pixels).
    pub noise_sigma: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow::anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, data) = match profile {
            Profile::Desk => (ModelConfig::desk(), DataConfig { seed: 0, train: 2000, test: 500, occlusion_level: 0.5 }),
            Profile::Full => (ModelConfig::default(), DataConfig { seed: 0, train: 2000, test: 500, occlusion_level: 0.5 }),
        };
        let optimizer = match profile {
            Profile::Desk => OptimizerConfig { epochs: 10, ..OptimizerConfig::default() },
            Profile::Full => OptimizerConfig::default(),
        };
        Self {
            profile,
            seed: 0,
            precision: DType::F32,
            data,
            model,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            optimizer,
            loss: LossWeights::default(),
            train: TrainOptions { subset: 0, max_steps: 0, checkpoint_every: 0 },
        }
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "profile" => {
                if Profile::parse(v)? != self.profile {
                    bail!("profile can only be chosen when parsing a whole config");
                }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => bail!("precision: expected f32 or f64, got {v:?}"),
                }
            }
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "data.train" => self.data.train = parse_num(key, v)?,
            "data.test" => self.data.test = parse_num(key, v)?,
            "data.occlusion_level" => self.data.occlusion_level = parse_num(key, v)?,
            "model.image_size" => m.image_size = parse_num(key, v)?,
            "model.image_pool" => m.backbone.input_pool = parse_num(key, v)?,
            "model.backbone_channels" => {
                let c = parse_list(key, v)?;
                m.backbone.channels = c.try_into().map_err(|_| anyhow::anyhow!("{key}: expected three widths"))?;
            }
            "model.feature_channels" => m.backbone.out_channels = parse_num(key, v)?,
            "model.hourglass_width" => m.hourglass.width = parse_num(key, v)?,
            "model.heatmap_channels" => m.hourglass.out_channels = parse_num(key, v)?,
            "model.regressor_hidden" => m.regressor_hidden = parse_num(key, v)?,
            "model.heatmap_sigma" => m.heatmap_sigma = parse_num(key, v)?,
            "model.prior" => m.prior = PriorKind::parse(v)?,
            "kgc.depth" => m.kgc.depth = parse_num(key, v)?,
            "kgc.widths" => m.kgc.widths = parse_list(key, v)?,
            "kgc.order" => m.kgc.order = parse_num(key, v)?,
            "kgc.normalize" => m.kgc.normalize = parse_bool(key, v)?,
            "kgc.noise_sigma" => self.noise_sigma = parse_num(key, v)?,
            "cat.blocks" => m.cat.blocks = parse_num(key, v)?,
            "cat.heads" => m.cat.heads = parse_num(key, v)?,
            "cat.d_model" => m.cat.d_model = parse_num(key, v)?,
            "cat.variant" => m.cat.variant = CatVariant::parse(v)?,
            "optimizer.lr" => self.optimizer.lr = parse_num(key, v)?,
            "optimizer.batch" => self.optimizer.batch = parse_num(key, v)?,
            "optimizer.epochs" => self.optimizer.epochs = parse_num(key, v)?,
            "optimizer.decay_factor" => self.optimizer.decay_factor = parse_num(key, v)?,
            "optimizer.decay_every" => self.optimizer.decay_every = parse_num(key, v)?,
            "loss.heatmap" => self.loss.heatmap = parse_num(key, v)?,
            "loss.theta" => self.loss.theta = parse_num(key, v)?,
            "loss.beta" => self.loss.beta = parse_num(key, v)?,
            "loss.joints" => self.loss.joints = parse_num(key, v)?,
            "loss.vertices" => self.loss.vertices = parse_num(key, v)?,
            "train.subset" => self.train.subset = parse_num(key, v)?,
            "train.max_steps" => self.train.max_steps = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Parses `key = value` lines; see the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected key = value", n + 1))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs.iter().map(|(n, k, v)| (*n, k.as_str(), v.as_str())))
    }

    /// Builds a config from `(line, key, value)` triples.
    pub fn from_pairs<'a>(pairs: impl Iterator<Item = (usize, &'a str, &'a str)> + Clone) -> Result<Self> {
        let profile = match pairs.clone().filter(|(_, k, _)| *k == "profile").last() {
            Some((_, _, v)) => Profile::parse(v)?,
            None => Profile::Desk,
        };
        let mut cfg = Self::profile(profile);
        for (n, k, v) in pairs {
            cfg.set(k, v).with_context(|| format!("line {n}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut text = self.to_text();
        for o in overrides {
            match o.split_once('=') {
                None => bail!("override {o:?} is not key=value"),
                Some((k, _)) if k.trim() == "profile" => bail!("profile cannot be overridden; start from a config file instead"),
                _ => {}
            }
            text.push_str(o);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.batch == 0 || !(o.decay_factor > 0.0) {
            bail!("invalid optimizer settings {o:?}");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!("kgc.noise_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.data.occlusion_level) {
            bail!("data.occlusion_level must lie in [0, 1]");
        }
        if self.model.image_size != handgcat_core::synth::IMAGE_SIDE {
            bail!("model.image_size must be {} for generated data", handgcat_core::synth::IMAGE_SIDE);
        }
        self.model.resolved().context("model configuration")?;
        Ok(())
    }

    /// Every key, one per line, in a stable order. `parse(to_text())` is the
    /// identity.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let BackboneConfig { input_pool, channels, out_channels } = &m.backbone;
        let HourglassConfig { width, out_channels: heat } = &m.hourglass;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("profile", self.profile.name().into());
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.name().into());
        kv("data.seed", self.data.seed.to_string());
        kv("data.train", self.data.train.to_string());
        kv("data.test", self.data.test.to_string());
        kv("data.occlusion_level", self.data.occlusion_level.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.image_pool", input_pool.to_string());
        kv("model.backbone_channels", join(channels));
        kv("model.feature_channels", out_channels.to_string());
        kv("model.hourglass_width", width.to_string());
        kv("model.heatmap_channels", heat.to_string());
        kv("model.regressor_hidden", m.regressor_hidden.to_string());
        kv("model.heatmap_sigma", m.heatmap_sigma.to_string());
        kv("model.prior", m.prior.name().into());
        kv("kgc.depth", m.kgc.depth.to_string());
        kv("kgc.widths", join(&m.kgc.widths));
        kv("kgc.order", m.kgc.order.to_string());
        kv("kgc.normalize", m.kgc.normalize.to_string());
        kv("kgc.noise_sigma", self.noise_sigma.to_string());
        kv("cat.blocks", m.cat.blocks.to_string());
        kv("cat.heads", m.cat.heads.to_string());
        kv("cat.d_model", m.cat.d_model.to_string());
        kv("cat.variant", m.cat.variant.name().into());
        kv("optimizer.lr", self.optimizer.lr.to_string());
        kv("optimizer.batch", self.optimizer.batch.to_string());
        kv("optimizer.epochs", self.optimizer.epochs.to_string());
        kv("optimizer.decay_factor", self.optimizer.decay_factor.to_string());
        kv("optimizer.decay_every", self.optimizer.decay_every.to_string());
        kv("loss.heatmap", self.loss.heatmap.to_string());
        kv("loss.theta", self.loss.theta.to_string());
        kv("loss.beta", self.loss.beta.to_string());
        kv("loss.joints", self.loss.joints.to_string());
        kv("loss.vertices", self.loss.vertices.to_string());
        kv("train.subset", self.train.subset.to_string());
        kv("train.max_steps", self.train.max_steps.to_string());
        kv("train.checkpoint_every", self.train.checkpoint_every.to_string());
        s
    }
}
