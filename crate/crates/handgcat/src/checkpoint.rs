//! Model checkpoints: `manifest.json` plus `params.bin`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use handgcat_core::hand_model::{HAND_MODEL_SEED, HAND_MODEL_VERSION};
use handgcat_core::model::Pipeline;
use handgcat_core::{Params, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{BlobReader, BlobWriter, Dtype, Element, Entry};
use crate::config::RunConfig;

pub const CHECKPOINT_FORMAT: &str = "handgcat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Full run configuration in `key = value` form.
    pub config: String,
    pub hand_model_seed: u64,
    pub hand_model_version: u32,
    pub dtype: Dtype,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<Entry>,
}

/// A trained model ready for inference.
pub struct Checkpoint<S: Scalar> {
    pub config: RunConfig,
    pub model: Pipeline,
    pub params: Params<S>,
    pub epoch: usize,
    pub step: usize,
}

pub fn save<S: Scalar + Element>(dir: &Path, config: &RunConfig, params: &Params<S>, epoch: usize, step: usize) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = BlobWriter::new();
    for (name, t) in params.iter() {
        w.push(name, t.shape(), t.data())?;
    }
    let entries = w.finish(&dir.join("params.bin"))?;
    let m = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.to_text(),
        hand_model_seed: HAND_MODEL_SEED,
        hand_model_version: HAND_MODEL_VERSION,
        dtype: <S as Element>::DTYPE,
        epoch,
        step,
        params: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("checkpoint manifest {} not found", path.display()))?;
    let m: CheckpointManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        bail!("{} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} manifest", path.display());
    }
    if m.hand_model_seed != HAND_MODEL_SEED || m.hand_model_version != HAND_MODEL_VERSION {
        bail!(
            "checkpoint refers to hand model {}/v{}, this build has {}/v{}",
            m.hand_model_seed,
            m.hand_model_version,
            HAND_MODEL_SEED,
            HAND_MODEL_VERSION
        );
    }
    Ok(m)
}

fn read_into<S: Scalar, T: Scalar + Element>(r: &BlobReader, params: &mut Params<S>) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    if r.entries().len() != ids.len() {
        bail!("checkpoint holds {} arrays, model has {}", r.entries().len(), ids.len());
    }
    for id in ids {
        let name = params.name(id).to_string();
        let (shape, v) = r.read::<T>(&name).with_context(|| format!("parameter {name}"))?;
        if shape != params.get(id).shape() {
            bail!("parameter {name}: checkpoint shape {shape:?}, model shape {:?}", params.get(id).shape());
        }
        let v: Vec<S> = v.into_iter().map(|x| S::from_f64(x.as_f64())).collect();
        params.set_value(id, &v);
    }
    Ok(())
}

/// Loads a checkpoint, converting the stored values to `S` when needed.
pub fn load<S: Scalar>(dir: &Path) -> Result<Checkpoint<S>> {
    let m = load_manifest(dir)?;
    let config = RunConfig::parse(&m.config).context("checkpoint configuration")?;
    let mut params = Params::<S>::new();
    let model = Pipeline::new(&mut params, &config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let r = BlobReader::open(&dir.join("params.bin"), m.params.clone())?;
    match m.dtype {
        Dtype::F32 => read_into::<S, f32>(&r, &mut params)?,
        Dtype::F64 => read_into::<S, f64>(&r, &mut params)?,
        other => bail!("checkpoint parameters stored as {other:?}"),
    }
    if let Some(name) = params.first_non_finite() {
        bail!("checkpoint parameter {name} is not finite");
    }
    Ok(Checkpoint { config, model, params, epoch: m.epoch, step: m.step })
}
