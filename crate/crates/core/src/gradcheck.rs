//! Central finite-difference checks of reverse-mode gradients (64-bit).
//!
//! The numeric side only ever evaluates the forward pass, so it is independent
//! of every backward rule it checks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::param::Params;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Acceptance band `|analytic - numeric| <= rel * max(|analytic|, |numeric|) + abs`.
///
/// The small absolute floor only matters for entries that are zero
/// analytically, where central differences return round-off noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    /// Finite-difference step.
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7, step: 1e-6 }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.rel * analytic.abs().max(numeric.abs()) + self.abs
    }

    fn excess(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs());
        (analytic - numeric).abs() / (scale + self.abs / self.rel)
    }
}

/// Worst disagreement found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a - n| / (max(|a|, |n|) + abs/rel)`; below `rel` means pass.
    pub worst_ratio: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { checked: 0, failures: 0, worst_ratio: 0.0, worst: None }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, tol: &Tolerance, what: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !tol.accepts(analytic, numeric) {
            self.failures += 1;
        }
        let r = tol.excess(analytic, numeric);
        if r > self.worst_ratio || self.worst.is_none() {
            self.worst_ratio = self.worst_ratio.max(r);
            self.worst = Some(Mismatch { what: what.to_string(), index, analytic, numeric });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.worst_ratio >= self.worst_ratio && other.worst.is_some() {
            self.worst_ratio = other.worst_ratio;
            self.worst = other.worst;
        }
    }
}

/// Checks the gradient of a scalar function with respect to every coordinate
/// of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], tol: Tolerance, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::with_checks(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::with_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + tol.step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - tol.step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * tol.step);
            report.record(&tol, "input", k * 1_000_000 + i, analytic[i], numeric);
        }
    }
    Ok(report)
}

/// [`check_inputs`] on at most `max_coords` randomly chosen coordinates across
/// all inputs, plus one directional derivative over every coordinate.
pub fn check_inputs_sampled<F, R>(inputs: &[Tensor<f64>], tol: Tolerance, max_coords: usize, rng: &mut R, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::with_checks(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::with_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0usize, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let chosen: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for flat in chosen {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[k];
        let x0 = inputs[k].data()[i];
        work[k].data_mut()[i] = x0 + tol.step;
        let fp = eval(&work)?;
        work[k].data_mut()[i] = x0 - tol.step;
        let fm = eval(&work)?;
        work[k].data_mut()[i] = x0;
        report.record(&tol, "input", k * 1_000_000 + i, analytic[k][i], (fp - fm) / (2.0 * tol.step));
    }

    let dirs: Vec<Vec<f64>> = inputs.iter().map(|t| (0..t.len()).map(|_| StandardNormal.sample(rng)).collect()).collect();
    let norm = libm::sqrt(dirs.iter().flatten().map(|d| d * d).sum::<f64>()).max(1e-300);
    let along: f64 = dirs.iter().zip(&analytic).flat_map(|(d, g)| d.iter().zip(g)).map(|(d, g)| d * g / norm).sum();
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut t = t.clone();
                t.data_mut().iter_mut().zip(d).for_each(|(x, d)| *x += sign * tol.step * d / norm);
                t
            })
            .collect()
    };
    let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * tol.step);
    report.record(&tol, "direction", 0, along, numeric);
    Ok(report)
}

/// Checks parameter gradients of `f`.
///
/// Up to `max_coords` individual coordinates are checked (all of them when the
/// store is smaller), chosen uniformly at random, plus one directional
/// derivative along a random Gaussian direction spanning every parameter.
pub fn check_params<F, R>(
    params: &Params<f64>,
    tol: Tolerance,
    max_coords: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut tape = Tape::with_checks(true);
        let out = f(&mut tape, p)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::with_checks(true);
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out)?;
    let ids: Vec<_> = params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads.param(id).unwrap_or_else(|| alloc::vec![0.0; params.get(id).len()]))
        .collect();

    let offsets: Vec<usize> = ids
        .iter()
        .scan(0usize, |acc, &id| {
            let o = *acc;
            *acc += params.get(id).len();
            Some(o)
        })
        .collect();
    let total = params.numel();
    let chosen: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport::new();
    let mut work = params.clone();
    for flat in chosen {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, i) = (ids[p], flat - offsets[p]);
        let x0 = params.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = x0 + tol.step;
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[i] = x0 - tol.step;
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[i] = x0;
        report.record(&tol, params.name(id), i, analytic[p][i], (fp - fm) / (2.0 * tol.step));
    }

    // Directional derivative over the full gradient vector.
    let dirs: Vec<Vec<f64>> =
        ids.iter().map(|&id| (0..params.get(id).len()).map(|_| StandardNormal.sample(rng)).collect()).collect();
    let norm = libm::sqrt(dirs.iter().flatten().map(|d| d * d).sum::<f64>()).max(1e-300);
    let along: f64 = dirs.iter().zip(&analytic).flat_map(|(d, g)| d.iter().zip(g)).map(|(d, g)| d * g / norm).sum();
    let shifted = |sign: f64| -> Params<f64> {
        let mut w = params.clone();
        for (k, &id) in ids.iter().enumerate() {
            let v: Vec<f64> = params.get(id).data().iter().zip(&dirs[k]).map(|(x, d)| x + sign * tol.step * d / norm).collect();
            w.set_value(id, &v);
        }
        w
    };
    let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * tol.step);
    report.record(&tol, "direction", 0, along, numeric);
    Ok(report)
}
