//! Mini-batch Adam training of a [`Pipeline`].
//!
//! Samples in a batch are processed in parallel, each on its own tape. Their
//! gradients are summed in batch order, so a run is bit-identical for a given
//! seed regardless of the thread count.

use std::path::Path;

use anyhow::{bail, Context, Result};
use handgcat_core::hand_model::HandModel;
use handgcat_core::head::{render_heatmaps, Terms, TERM_NAMES};
use handgcat_core::kgc::{add_pose_noise, Pose2D};
use handgcat_core::metrics::mpjpe;
use handgcat_core::model::Pipeline;
use handgcat_core::optim::{Adam, AdamConfig};
use handgcat_core::synth::Sample;
use handgcat_core::{Gradients, Params, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blob::Element;
use crate::checkpoint;
use crate::config::RunConfig;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 62;
const NOISE_STREAM: u64 = 1 << 63;
/// Epoch tag of the fixed noise draw used for before/after loss evaluation.
pub const EVAL_EPOCH: u64 = u32::MAX as u64;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub heatmap: f64,
    pub theta: f64,
    pub beta: f64,
    pub joints: f64,
    pub vertices: f64,
    pub train_mpjpe_mm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Mean batch loss of every step, before its update.
    pub step_losses: Vec<f64>,
    /// Mean loss over the training samples with a fixed noise draw, before
    /// and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

pub struct Trained<S: Scalar> {
    pub model: Pipeline,
    pub params: Params<S>,
    pub report: TrainReport,
}

/// Supervision for one sample, all in the model frame.
#[derive(Clone, Debug)]
pub struct Targets {
    pub heatmaps: Tensor<f64>,
    pub theta: Tensor<f64>,
    pub beta: Tensor<f64>,
    pub joints: Tensor<f64>,
    pub vertices: Tensor<f64>,
}

fn flat3(v: &[[f64; 3]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

impl Targets {
    pub fn new(model: &Pipeline, sample: &Sample) -> Result<Self> {
        let sigma = model.config().heatmap_sigma;
        let joints = sample.joints_local();
        let mesh = sample.mesh_local();
        Ok(Self {
            heatmaps: render_heatmaps(&sample.pose2d, model.heatmap_channels(), model.grid(), sigma)?,
            theta: Tensor::new(&[sample.params.theta.len()], sample.params.theta.to_vec())?,
            beta: Tensor::new(&[sample.params.beta.len()], sample.params.beta.to_vec())?,
            joints: Tensor::new(&[joints.len(), 3], flat3(&joints))?,
            vertices: Tensor::new(&[mesh.len(), 3], flat3(&mesh))?,
        })
    }

    fn on_tape<S: Scalar>(&self, tape: &mut Tape<S>) -> Terms {
        Terms {
            heatmaps: tape.constant(self.heatmaps.cast()),
            theta: tape.constant(self.theta.cast()),
            beta: tape.constant(self.beta.cast()),
            joints: tape.constant(self.joints.cast()),
            vertices: tape.constant(self.vertices.cast()),
        }
    }
}

/// Noisy input pose for `(seed, epoch, index)`.
pub fn noisy_pose(pose: &Pose2D, sigma: f64, seed: u64, epoch: u64, index: u64) -> Result<Pose2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM | (epoch << 32) | (index & 0xffff_ffff));
    Ok(add_pose_noise(pose, sigma, &mut rng)?)
}

/// Builds a freshly initialised model from the run seed.
pub fn init_model<S: Scalar>(cfg: &RunConfig) -> Result<(Pipeline, Params<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = Params::new();
    let model = Pipeline::new(&mut params, &cfg.model, &mut rng)?;
    Ok((model, params))
}

struct StepOut<S: Scalar> {
    grads: Option<Gradients<S>>,
    loss: f64,
    terms: [f64; 5],
    mpjpe: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_sample<S: Scalar>(
    hand: &HandModel,
    model: &Pipeline,
    params: &Params<S>,
    cfg: &RunConfig,
    sample: &Sample,
    targets: &Targets,
    pose: &Pose2D,
    backward: bool,
) -> Result<StepOut<S>> {
    let mut tape = Tape::new();
    let lbs = hand.constants(&mut tape);
    let image = tape.constant(sample.image_tensor());
    let pose = tape.constant(pose.to_tensor());
    let gt = targets.on_tape(&mut tape);
    let (f, loss) = model.loss(&mut tape, params, &lbs, image, pose, &gt, &cfg.loss)?;
    let joints: Vec<[f64; 3]> = tape.value(f.joints).chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect();
    let err = mpjpe(&joints, &sample.joints_local())?;
    let terms = loss.terms.map(|t| tape.scalar(t).as_f64());
    let total = tape.scalar(loss.total).as_f64();
    let grads = if backward && total.is_finite() { Some(tape.backward(loss.total)?) } else { None };
    Ok(StepOut { grads, loss: total, terms, mpjpe: err })
}

/// Mean loss over `samples` with the fixed evaluation noise draw.
pub fn mean_loss<S: Scalar>(
    cfg: &RunConfig,
    model: &Pipeline,
    params: &Params<S>,
    samples: &[Sample],
    targets: &[Targets],
) -> Result<f64> {
    let hand = HandModel::canonical();
    let losses: Vec<f64> = samples
        .par_iter()
        .zip(targets)
        .map(|(s, t)| {
            let pose = noisy_pose(&s.pose2d, cfg.noise_sigma, cfg.seed, EVAL_EPOCH, s.index)?;
            Ok(run_sample(&hand, model, params, cfg, s, t, &pose, false)?.loss)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn non_finite_diagnostic(epoch: usize, step: usize, outs: &[(usize, f64, [f64; 5])]) -> String {
    let mut msg = format!("non-finite loss at epoch {epoch}, step {step}:");
    for (idx, loss, terms) in outs.iter().filter(|o| !o.1.is_finite()) {
        let parts: Vec<String> = TERM_NAMES.iter().zip(terms).map(|(n, v)| format!("{n}={v}")).collect();
        msg.push_str(&format!("\n  sample {idx}: loss={loss} {}", parts.join(" ")));
    }
    msg
}

/// Trains a freshly initialised model on `samples`. With `out` set, writes
/// `train_log.csv` and checkpoints there.
pub fn train<S: Scalar + Element>(
    cfg: &RunConfig,
    samples: &[Sample],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Trained<S>> {
    let (model, params) = init_model::<S>(cfg)?;
    train_from(cfg, model, params, samples, out, log)
}

/// [`train`] starting from given parameters.
pub fn train_from<S: Scalar + Element>(
    cfg: &RunConfig,
    model: Pipeline,
    mut params: Params<S>,
    samples: &[Sample],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Trained<S>> {
    cfg.validate()?;
    let samples = match cfg.train.subset {
        0 => samples,
        n if n <= samples.len() => &samples[..n],
        n => bail!("train.subset = {n} but only {} training samples exist", samples.len()),
    };
    if samples.is_empty() {
        bail!("no training samples");
    }
    let hand = HandModel::canonical();
    let targets: Vec<Targets> = samples.par_iter().map(|s| Targets::new(&model, s)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&params, AdamConfig::default());
    let schedule = cfg.optimizer.schedule();
    let batch = cfg.optimizer.batch.min(samples.len());
    let max_steps = cfg.train.max_steps;
    let epochs = if max_steps > 0 { usize::MAX } else { cfg.optimizer.epochs };

    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            Some(csv::Writer::from_path(dir.join("train_log.csv"))?)
        }
        None => None,
    };

    let mut report = TrainReport { initial_loss: mean_loss(cfg, &model, &params, samples, &targets)?, ..Default::default() };
    log(&format!("{} parameters, {} samples, batch {batch}, initial loss {:.6}", params.numel(), samples.len(), report.initial_loss));

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while epoch < epochs && !(max_steps > 0 && step >= max_steps) {
        let lr = schedule.lr(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM | epoch as u64);
        order.shuffle(&mut rng);

        let (mut sum_loss, mut sum_terms, mut sum_err, mut seen) = (0.0, [0.0; 5], 0.0, 0usize);
        for chunk in order.chunks(batch) {
            if max_steps > 0 && step >= max_steps {
                break;
            }
            let outs: Vec<StepOut<S>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let pose = noisy_pose(&s.pose2d, cfg.noise_sigma, cfg.seed, epoch as u64, s.index)?;
                    run_sample(&hand, &model, &params, cfg, s, &targets[i], &pose, true)
                })
                .collect::<Result<_>>()?;
            if outs.iter().any(|o| !o.loss.is_finite()) {
                let d: Vec<_> = chunk.iter().zip(&outs).map(|(&i, o)| (samples[i].index as usize, o.loss, o.terms)).collect();
                bail!(non_finite_diagnostic(epoch, step, &d));
            }
            params.zero_grad();
            let scale = S::from_f64(1.0 / chunk.len() as f64);
            for o in &outs {
                params.accumulate(o.grads.as_ref().expect("finite loss has gradients"), scale);
            }
            adam.step(&mut params, lr)?;
            if let Some(name) = params.first_non_finite() {
                bail!("parameter {name} became non-finite at epoch {epoch}, step {step}");
            }
            let batch_loss = outs.iter().map(|o| o.loss).sum::<f64>() / outs.len() as f64;
            report.step_losses.push(batch_loss);
            for o in &outs {
                sum_loss += o.loss;
                sum_err += o.mpjpe;
                sum_terms.iter_mut().zip(o.terms).for_each(|(a, t)| *a += t);
            }
            seen += outs.len();
            step += 1;
        }
        if seen == 0 {
            break;
        }
        let n = seen as f64;
        let row = EpochRow {
            epoch,
            step,
            lr,
            loss: sum_loss / n,
            heatmap: sum_terms[0] / n,
            theta: sum_terms[1] / n,
            beta: sum_terms[2] / n,
            joints: sum_terms[3] / n,
            vertices: sum_terms[4] / n,
            train_mpjpe_mm: sum_err / n,
        };
        if max_steps == 0 || epoch % 50 == 0 || step >= max_steps {
            log(&format!("epoch {epoch:>3} step {step:>5} lr {lr:.2e} loss {:.6} mpjpe {:.2} mm", row.loss, row.train_mpjpe_mm));
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        report.rows.push(row);
        epoch += 1;
        if let (Some(dir), k) = (out, cfg.train.checkpoint_every) {
            if k > 0 && epoch % k == 0 {
                checkpoint::save(&dir.join(format!("checkpoint-epoch{epoch}")), cfg, &params, epoch, step)?;
            }
        }
    }
    report.steps = step;
    report.final_loss = mean_loss(cfg, &model, &params, samples, &targets)?;
    log(&format!("finished after {step} steps, loss {:.6} -> {:.6}", report.initial_loss, report.final_loss));
    if let Some(dir) = out {
        checkpoint::save(&dir.join("checkpoint"), cfg, &params, epoch, step)?;
    }
    Ok(Trained { model, params, report })
}
