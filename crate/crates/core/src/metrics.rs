//! Joint and mesh error metrics in millimetres.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};

/// Upper end of the PCK threshold grid (mm).
pub const PCK_MAX_MM: f64 = 50.0;
/// Number of intervals in the PCK threshold grid.
pub const PCK_STEPS: usize = 100;
/// Slack when comparing an error to a threshold, so that round-off from
/// alignment does not push an exact match past the zero threshold.
pub const PCK_SLACK_MM: f64 = 1e-9;
pub const F_TAUS_MM: [f64; 2] = [5.0, 15.0];

fn check_pair(op: &'static str, a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape { op, detail: format!("{} vs {} points", a.len(), b.len()) });
    }
    if a.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Per-point Euclidean distances.
pub fn point_errors(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    check_pair("point_errors", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| geometry::dist(*p, *g)).collect())
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let e = point_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Mean per-vertex position error; same computation as [`mpjpe`].
pub fn mpvpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mpjpe(pred, gt)
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::scale(geometry::mat_vec(&self.rotation, p), self.scale), self.translation)
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    let s = pts.iter().fold([0.0; 3], |acc, p| geometry::add(acc, *p));
    geometry::scale(s, 1.0 / pts.len() as f64)
}

/// Least-squares similarity transform taking `pred` onto `gt`.
pub fn procrustes_transform(pred: &[Vec3], gt: &[Vec3]) -> Result<Similarity> {
    check_pair("procrustes_align", pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::DegenerateAlignment("fewer than 3 points"));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = [[0.0; 3]; 3];
    let mut gt_cov = [[0.0; 3]; 3];
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let x = geometry::sub(*p, mp);
        let y = geometry::sub(*g, mg);
        var_p += geometry::dot(x, x);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += y[i] * x[j];
                gt_cov[i][j] += y[i] * y[j];
            }
        }
    }
    let (_, gs, _) = geometry::svd3(&gt_cov);
    if gs[1] <= 1e-12 * gs[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateAlignment("ground truth is collinear or coincident"));
    }
    if var_p <= 0.0 {
        return Err(Error::DegenerateAlignment("prediction collapses to a point"));
    }
    let (u, s, v) = geometry::svd3(&cov);
    let vt = geometry::transpose(&v);
    let sign = if geometry::det(&geometry::mat_mul(&u, &vt)) < 0.0 { -1.0 } else { 1.0 };
    let d = [1.0, 1.0, sign];
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = (0..3).map(|k| u[i][k] * d[k] * vt[k][j]).sum();
        }
    }
    let scale = (s[0] * d[0] + s[1] * d[1] + s[2] * d[2]) / var_p;
    let translation = geometry::sub(mg, geometry::scale(geometry::mat_vec(&rotation, mp), scale));
    Ok(Similarity { scale, rotation, translation })
}

/// `pred` after the optimal similarity alignment onto `gt`.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<Vec3>> {
    let t = procrustes_transform(pred, gt)?;
    Ok(pred.iter().map(|p| t.apply(*p)).collect())
}

pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

/// Fraction of errors at or below each threshold of the `0..=PCK_MAX_MM` grid.
pub fn pck_curve(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::Empty("pck"));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::InvalidArgument("errors must be nonnegative".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok((0..=PCK_STEPS)
        .map(|k| {
            let tau = PCK_MAX_MM * k as f64 / PCK_STEPS as f64;
            let within = sorted.partition_point(|&e| e <= tau + PCK_SLACK_MM);
            (tau, within as f64 / n)
        })
        .collect())
}

/// Normalized trapezoidal area under the PCK curve.
pub fn auc_pck(errors: &[f64]) -> Result<f64> {
    let curve = pck_curve(errors)?;
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(area / PCK_MAX_MM)
}

/// Distance from every point of `from` to its nearest neighbour in `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            let best = to.iter().map(|q| {
                let d = geometry::sub(*p, *q);
                geometry::dot(d, d)
            });
            libm::sqrt(best.fold(f64::INFINITY, f64::min))
        })
        .collect()
}

fn f_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn fraction_within(d: &[f64], tau: f64) -> f64 {
    d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("f-score threshold must be positive, got {tau}")))
    }
}

/// Nearest-neighbour F-score at each threshold in `taus`.
pub fn f_scores(pred: &[Vec3], gt: &[Vec3], taus: &[f64]) -> Result<Vec<f64>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("f_score"));
    }
    for &t in taus {
        check_tau(t)?;
    }
    let to_gt = nearest_distances(pred, gt);
    let to_pred = nearest_distances(gt, pred);
    Ok(taus.iter().map(|&t| f_from(fraction_within(&to_gt, t), fraction_within(&to_pred, t))).collect())
}

/// Nearest-neighbour F-score at threshold `tau` (mm).
pub fn f_score(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64> {
    Ok(f_scores(pred, gt, &[tau])?[0])
}

/// F-score using the known vertex correspondence: precision and recall are
/// both the fraction of vertices within `tau` of their counterpart.
pub fn f_score_correspondence(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let e = point_errors(pred, gt)?;
    let p = fraction_within(&e, tau);
    Ok(f_from(p, p))
}

/// How mesh F-scores match vertices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FScoreMode {
    #[default]
    NearestNeighbour,
    Correspondence,
}

/// Aggregate evaluation metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
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

impl MetricsReport {
    /// Checks the range invariants of every field.
    pub fn validate(&self) -> Result<()> {
        let dist = [self.mpjpe_mm, self.pa_mpjpe_mm, self.mpvpe_mm, self.pa_mpvpe_mm];
        let unit = [self.auc_pck, self.auc_pcv, self.f_at_5, self.f_at_15];
        if self.sample_count == 0 {
            return Err(Error::Empty("metrics report"));
        }
        if dist.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || unit.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::InvalidArgument(format!("metric out of range: {self:?}")));
        }
        if self.pa_mpjpe_mm > self.mpjpe_mm + 1e-9 || self.pa_mpvpe_mm > self.mpvpe_mm + 1e-9 {
            return Err(Error::InvalidArgument(format!("aligned error exceeds unaligned error: {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample metrics, kept so reports can be binned after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub pa_mpvpe: f64,
    /// Per-joint errors after alignment.
    pub pa_joint_errors: Vec<f64>,
    /// Per-vertex errors after alignment.
    pub pa_vertex_errors: Vec<f64>,
    pub f_at_5: f64,
    pub f_at_15: f64,
}

/// Evaluates one prediction. PCK/PCV errors and F-scores use the aligned
/// prediction; each of joints and mesh gets its own alignment.
pub fn sample_metrics(
    pred_joints: &[Vec3],
    gt_joints: &[Vec3],
    pred_mesh: &[Vec3],
    gt_mesh: &[Vec3],
    mode: FScoreMode,
) -> Result<SampleMetrics> {
    let aligned_j = procrustes_align(pred_joints, gt_joints)?;
    let aligned_v = procrustes_align(pred_mesh, gt_mesh)?;
    let pa_joint_errors = point_errors(&aligned_j, gt_joints)?;
    let pa_vertex_errors = point_errors(&aligned_v, gt_mesh)?;
    let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
    let f = match mode {
        FScoreMode::NearestNeighbour => f_scores(&aligned_v, gt_mesh, &F_TAUS_MM)?,
        FScoreMode::Correspondence => alloc::vec![
            f_score_correspondence(&aligned_v, gt_mesh, F_TAUS_MM[0])?,
            f_score_correspondence(&aligned_v, gt_mesh, F_TAUS_MM[1])?,
        ],
    };
    let mpjpe_v = mpjpe(pred_joints, gt_joints)?;
    let mpvpe_v = mpvpe(pred_mesh, gt_mesh)?;
    Ok(SampleMetrics {
        mpjpe: mpjpe_v,
        pa_mpjpe: mean(&pa_joint_errors),
        mpvpe: mpvpe_v,
        pa_mpvpe: mean(&pa_vertex_errors),
        pa_joint_errors,
        pa_vertex_errors,
        f_at_5: f[0],
        f_at_15: f[1],
    })
}

/// Averages per-sample metrics into a report.
pub fn aggregate(samples: &[&SampleMetrics]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("metrics aggregate"));
    }
    let n = samples.len() as f64;
    let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
    let joints: Vec<f64> = samples.iter().flat_map(|s| s.pa_joint_errors.iter().copied()).collect();
    let verts: Vec<f64> = samples.iter().flat_map(|s| s.pa_vertex_errors.iter().copied()).collect();
    Ok(MetricsReport {
        mpjpe_mm: avg(|s| s.mpjpe),
        pa_mpjpe_mm: avg(|s| s.pa_mpjpe),
        mpvpe_mm: avg(|s| s.mpvpe),
        pa_mpvpe_mm: avg(|s| s.pa_mpvpe),
        auc_pck: auc_pck(&joints)?,
        auc_pcv: auc_pck(&verts)?,
        f_at_5: avg(|s| s.f_at_5),
        f_at_15: avg(|s| s.f_at_15),
        sample_count: samples.len(),
    })
}
