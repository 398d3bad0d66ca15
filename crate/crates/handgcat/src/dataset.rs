//! Generated datasets on disk: `manifest.json` plus one buffer per split.

use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use handgcat_core::hand_model::{HandModel, ManoParams, HAND_MODEL_SEED, HAND_MODEL_VERSION, NUM_SHAPE, NUM_VERTICES, POSE_DIM};
use handgcat_core::kgc::Pose2D;
use handgcat_core::synth::{self, Camera, Mask, Sample, Split, SynthConfig, IMAGE_PIXELS, IMAGE_SIDE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::{BlobReader, BlobWriter, Entry};

pub const DATASET_FORMAT: &str = "handgcat-dataset";
pub const DATASET_VERSION: u32 = 1;
const J: usize = handgcat_core::hand_graph::NUM_JOINTS;
const MASK_WORDS: usize = IMAGE_PIXELS / 64;

/// Every parameter that influenced generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub occlusion_level: f64,
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
    pub hand_model_seed: u64,
    pub hand_model_version: u32,
    /// One model unit is one millimetre.
    pub units: String,
    pub image_shape: [usize; 3],
    pub articulation_range: f64,
    pub root_max_angle: f64,
    pub shape_range: f64,
    pub depth_mm: f64,
    pub occlusion_jitter: f64,
}

impl GeneratorParams {
    pub fn new(cfg: &SynthConfig) -> Self {
        Self {
            seed: cfg.seed,
            occlusion_level: cfg.occlusion_level,
            focal: cfg.camera.focal,
            cu: cfg.camera.cu,
            cv: cfg.camera.cv,
            hand_model_seed: HAND_MODEL_SEED,
            hand_model_version: HAND_MODEL_VERSION,
            units: "mm".into(),
            image_shape: [3, IMAGE_SIDE, IMAGE_SIDE],
            articulation_range: synth::ARTICULATION_RANGE,
            root_max_angle: synth::ROOT_MAX_ANGLE,
            shape_range: synth::SHAPE_RANGE,
            depth_mm: synth::HAND_DEPTH_MM,
            occlusion_jitter: synth::OCCLUSION_JITTER,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, occlusion_level: self.occlusion_level, camera: Camera { focal: self.focal, cu: self.cu, cv: self.cv } }
    }

    /// Fails when this build would not regenerate the same data.
    pub fn check_compatible(&self) -> Result<()> {
        let here = Self::new(&self.synth_config());
        if *self != here {
            bail!("dataset was generated with different constants: {self:?} vs this build {here:?}");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub count: usize,
    pub blob: String,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub generator: GeneratorParams,
    pub splits: Vec<SplitManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub generator: GeneratorParams,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Generates samples `0..n` of one split in parallel.
pub fn generate_split(model: &HandModel, cfg: &SynthConfig, split: Split, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| synth::generate_sample(model, cfg, split, i).map_err(anyhow::Error::from))
        .collect()
}

pub fn generate(cfg: &SynthConfig, n_train: usize, n_test: usize) -> Result<Dataset> {
    if n_train == 0 && n_test == 0 {
        bail!("dataset needs at least one sample");
    }
    let model = HandModel::canonical();
    Ok(Dataset {
        generator: GeneratorParams::new(cfg),
        train: generate_split(&model, cfg, Split::Train, n_train)?,
        test: generate_split(&model, cfg, Split::Test, n_test)?,
    })
}

fn flat3(v: &[[f64; 3]]) -> impl Iterator<Item = f64> + '_ {
    v.iter().flatten().copied()
}

fn write_split(samples: &[Sample], split: Split, dir: &Path) -> Result<SplitManifest> {
    let n = samples.len();
    let mut w = BlobWriter::new();
    let cat_u8: Vec<u8> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    w.push("image", &[n, 3, IMAGE_SIDE, IMAGE_SIDE], &cat_u8)?;
    let idx: Vec<u64> = samples.iter().map(|s| s.index).collect();
    w.push("index", &[n], &idx)?;
    let pose: Vec<f64> = samples.iter().flat_map(|s| s.pose2d.flat()).collect();
    w.push("pose2d", &[n, J, 2], &pose)?;
    let theta: Vec<f64> = samples.iter().flat_map(|s| s.params.theta).collect();
    w.push("theta", &[n, POSE_DIM], &theta)?;
    let beta: Vec<f64> = samples.iter().flat_map(|s| s.params.beta).collect();
    w.push("beta", &[n, NUM_SHAPE], &beta)?;
    let tr: Vec<f64> = samples.iter().flat_map(|s| s.translation).collect();
    w.push("translation", &[n, 3], &tr)?;
    let joints: Vec<f64> = samples.iter().flat_map(|s| flat3(&s.joints3d).collect::<Vec<_>>()).collect();
    w.push("joints3d", &[n, J, 3], &joints)?;
    let mesh: Vec<f64> = samples.iter().flat_map(|s| flat3(&s.mesh).collect::<Vec<_>>()).collect();
    w.push("mesh", &[n, NUM_VERTICES, 3], &mesh)?;
    let hand: Vec<u64> = samples.iter().flat_map(|s| s.hand_mask.words().to_vec()).collect();
    w.push("hand_mask", &[n, MASK_WORDS], &hand)?;
    let occ: Vec<u64> = samples.iter().flat_map(|s| s.occlusion_mask.words().to_vec()).collect();
    w.push("occlusion_mask", &[n, MASK_WORDS], &occ)?;
    let ratio: Vec<f64> = samples.iter().map(|s| s.occlusion_ratio).collect();
    w.push("occlusion_ratio", &[n], &ratio)?;
    let blob = format!("{}.bin", split.name());
    let entries = w.finish(&dir.join(&blob))?;
    Ok(SplitManifest { split: split.name().into(), count: n, blob, entries })
}

fn rows3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn read_split(m: &SplitManifest, dir: &Path) -> Result<Vec<Sample>> {
    let r = BlobReader::open(&dir.join(&m.blob), m.entries.clone())?;
    let n = m.count;
    let image: Vec<u8> = r.read_shaped("image", &[n, 3, IMAGE_SIDE, IMAGE_SIDE])?;
    let index: Vec<u64> = r.read_shaped("index", &[n])?;
    let pose: Vec<f64> = r.read_shaped("pose2d", &[n, J, 2])?;
    let theta: Vec<f64> = r.read_shaped("theta", &[n, POSE_DIM])?;
    let beta: Vec<f64> = r.read_shaped("beta", &[n, NUM_SHAPE])?;
    let tr: Vec<f64> = r.read_shaped("translation", &[n, 3])?;
    let joints: Vec<f64> = r.read_shaped("joints3d", &[n, J, 3])?;
    let mesh: Vec<f64> = r.read_shaped("mesh", &[n, NUM_VERTICES, 3])?;
    let hand: Vec<u64> = r.read_shaped("hand_mask", &[n, MASK_WORDS])?;
    let occ: Vec<u64> = r.read_shaped("occlusion_mask", &[n, MASK_WORDS])?;
    let ratio: Vec<f64> = r.read_shaped("occlusion_ratio", &[n])?;
    let px = 3 * IMAGE_PIXELS;
    (0..n)
        .map(|i| {
            Ok(Sample {
                index: index[i],
                image: image[i * px..(i + 1) * px].to_vec(),
                pose2d: Pose2D::from_flat(&pose[i * 2 * J..(i + 1) * 2 * J])?,
                params: ManoParams::from_slices(&theta[i * POSE_DIM..(i + 1) * POSE_DIM], &beta[i * NUM_SHAPE..(i + 1) * NUM_SHAPE])?,
                translation: [tr[3 * i], tr[3 * i + 1], tr[3 * i + 2]],
                joints3d: rows3(&joints[i * 3 * J..(i + 1) * 3 * J]),
                mesh: rows3(&mesh[i * 3 * NUM_VERTICES..(i + 1) * 3 * NUM_VERTICES]),
                hand_mask: Mask::from_words(hand[i * MASK_WORDS..(i + 1) * MASK_WORDS].to_vec())?,
                occlusion_mask: Mask::from_words(occ[i * MASK_WORDS..(i + 1) * MASK_WORDS].to_vec())?,
                occlusion_ratio: ratio[i],
            })
        })
        .collect()
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let splits = vec![write_split(&ds.train, Split::Train, dir)?, write_split(&ds.test, Split::Test, dir)?];
    let manifest = DatasetManifest { format: DATASET_FORMAT.into(), version: DATASET_VERSION, generator: ds.generator.clone(), splits };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("dataset manifest {} not found", path.display()))?;
    let m: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        bail!("{} is not a version {DATASET_VERSION} {DATASET_FORMAT} manifest", path.display());
    }
    m.generator.check_compatible()?;
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let m = load_manifest(dir)?;
    let mut ds = Dataset { generator: m.generator.clone(), train: Vec::new(), test: Vec::new() };
    for s in &m.splits {
        let samples = read_split(s, dir).with_context(|| format!("split {}", s.split))?;
        match Split::parse(&s.split)? {
            Split::Train => ds.train = samples,
            Split::Test => ds.test = samples,
        }
    }
    Ok(ds)
}

/// Regenerates the dataset described by a manifest.
pub fn regenerate(m: &DatasetManifest) -> Result<Dataset> {
    let count = |name: &str| m.splits.iter().find(|s| s.split == name).map_or(0, |s| s.count);
    generate(&m.generator.synth_config(), count("train"), count("test"))
}

/// Binary PPM of a sample image.
pub fn export_ppm(sample: &Sample, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write!(f, "P6\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n")?;
    let mut px = Vec::with_capacity(3 * IMAGE_PIXELS);
    for i in 0..IMAGE_PIXELS {
        for c in 0..3 {
            px.push(sample.image[c * IMAGE_PIXELS + i]);
        }
    }
    f.write_all(&px)?;
    Ok(())
}
