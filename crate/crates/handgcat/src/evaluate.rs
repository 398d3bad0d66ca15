//! Test-set evaluation, overall and per occlusion bin.

use std::path::Path;

use anyhow::{Context, Result};
use handgcat_core::geometry::Vec3;
use handgcat_core::hand_model::HandModel;
use handgcat_core::metrics::{aggregate, sample_metrics, FScoreMode, MetricsReport, SampleMetrics};
use handgcat_core::model::Pipeline;
use handgcat_core::synth::Sample;
use handgcat_core::{Params, Scalar, Tape};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::train::{noisy_pose, EVAL_EPOCH};

/// Occlusion-ratio bins `[lo, hi)`; the last one includes 1.
pub const OCCLUSION_BINS: [(f64, f64); 3] = [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0)];

/// Joints and mesh in the model frame (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub joints: Vec<Vec3>,
    pub mesh: Vec<Vec3>,
}

impl Prediction {
    /// The ground truth of a sample, as a perfect prediction.
    pub fn ground_truth(sample: &Sample) -> Self {
        Self { joints: sample.joints_local(), mesh: sample.mesh_local() }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().chain(&self.mesh).flatten().all(|v| v.is_finite())
    }
}

fn rows3<S: Scalar>(v: &[S]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect()
}

/// Runs the model on every sample with the fixed evaluation noise draw.
pub fn predict<S: Scalar>(cfg: &RunConfig, model: &Pipeline, params: &Params<S>, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let hand = HandModel::canonical();
    samples
        .par_iter()
        .map(|s| {
            let pose = noisy_pose(&s.pose2d, cfg.noise_sigma, cfg.seed, EVAL_EPOCH, s.index)?;
            let mut tape = Tape::new();
            let lbs = hand.constants(&mut tape);
            let image = tape.constant(s.image_tensor());
            let pose = tape.constant(pose.to_tensor());
            let f = model.forward(&mut tape, params, &lbs, image, pose)?;
            let p = Prediction { joints: rows3(tape.value(f.joints)), mesh: rows3(tape.value(f.vertices)) };
            if !p.is_finite() {
                anyhow::bail!("non-finite prediction for test sample {}", s.index);
            }
            Ok(p)
        })
        .collect()
}

/// Serializable copy of a [`MetricsReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpvpe_mm: f64,
    pub pa_mpvpe_mm: f64,
    pub auc_pck: f64,
    pub auc_pcv: f64,
    pub f_at_5: f64,
    pub f_at_15: f64,
    pub sample_count: usize,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(m: &MetricsReport) -> Self {
        Self {
            mpjpe_mm: m.mpjpe_mm,
            pa_mpjpe_mm: m.pa_mpjpe_mm,
            mpvpe_mm: m.mpvpe_mm,
            pa_mpvpe_mm: m.pa_mpvpe_mm,
            auc_pck: m.auc_pck,
            auc_pcv: m.auc_pcv,
            f_at_5: m.f_at_5,
            f_at_15: m.f_at_15,
            sample_count: m.sample_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    /// `None` when no test sample falls in the bin.
    pub metrics: Option<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: MetricsRow,
    pub bins: Vec<BinReport>,
    pub mean_occlusion: f64,
}

fn in_bin(r: f64, (lo, hi): (f64, f64)) -> bool {
    r >= lo && (r < hi || (hi >= 1.0 && r <= hi))
}

/// Per-sample metrics for predictions against their samples.
pub fn score(samples: &[Sample], preds: &[Prediction], mode: FScoreMode) -> Result<Vec<SampleMetrics>> {
    anyhow::ensure!(samples.len() == preds.len(), "{} samples but {} predictions", samples.len(), preds.len());
    samples
        .par_iter()
        .zip(preds)
        .map(|(s, p)| Ok(sample_metrics(&p.joints, &s.joints_local(), &p.mesh, &s.mesh_local(), mode)?))
        .collect()
}

pub fn report(samples: &[Sample], per_sample: &[SampleMetrics]) -> Result<EvalReport> {
    let all: Vec<&SampleMetrics> = per_sample.iter().collect();
    let overall = aggregate(&all)?;
    overall.validate().context("overall metrics")?;
    let mut bins = Vec::new();
    for bin in OCCLUSION_BINS {
        let members: Vec<&SampleMetrics> =
            samples.iter().zip(per_sample).filter(|(s, _)| in_bin(s.occlusion_ratio, bin)).map(|(_, m)| m).collect();
        let metrics = if members.is_empty() {
            None
        } else {
            let m = aggregate(&members)?;
            m.validate().with_context(|| format!("metrics of bin {bin:?}"))?;
            Some(MetricsRow::from(&m))
        };
        bins.push(BinReport { lo: bin.0, hi: bin.1, metrics });
    }
    let mean_occlusion = samples.iter().map(|s| s.occlusion_ratio).sum::<f64>() / samples.len() as f64;
    Ok(EvalReport { overall: MetricsRow::from(&overall), bins, mean_occlusion })
}

pub fn evaluate<S: Scalar>(cfg: &RunConfig, model: &Pipeline, params: &Params<S>, samples: &[Sample]) -> Result<EvalReport> {
    let preds = predict(cfg, model, params, samples)?;
    let per_sample = score(samples, &preds, FScoreMode::default())?;
    report(samples, &per_sample)
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn write_report(r: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(r)?)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["subset", "mpjpe_mm", "pa_mpjpe_mm", "mpvpe_mm", "pa_mpvpe_mm", "auc_pck", "auc_pcv", "f_at_5", "f_at_15", "sample_count"])?;
    let mut row = |name: &str, m: &MetricsRow| -> Result<()> {
        w.write_record([
            name.to_string(),
            m.mpjpe_mm.to_string(),
            m.pa_mpjpe_mm.to_string(),
            m.mpvpe_mm.to_string(),
            m.pa_mpvpe_mm.to_string(),
            m.auc_pck.to_string(),
            m.auc_pcv.to_string(),
            m.f_at_5.to_string(),
            m.f_at_15.to_string(),
            m.sample_count.to_string(),
        ])?;
        Ok(())
    };
    row("all", &r.overall)?;
    for b in &r.bins {
        if let Some(m) = &b.metrics {
            row(&format!("occlusion_{}_{}", b.lo, b.hi), m)?;
        }
    }
    w.flush()?;
    Ok(())
}
