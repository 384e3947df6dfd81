//! Tracking metrics for forecasted trajectories.
//!
//! 3D metrics compare means directly. 2D metrics project both trajectories
//! through the scene cameras and follow the usual point-tracking benchmark
//! conventions: pixel thresholds {1, 2, 4, 8, 16} after rescaling the image so
//! its long side is 256 px.

use serde::{Deserialize, Serialize};

use crate::scene::{project_mean, Camera, TrajectoryTensor};
use crate::se3::Vec3;
use crate::synth::{project_all, visibility};
use crate::{Error, Result};

pub const PIXEL_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const NORMALIZED_LONG_SIDE: f64 = 256.0;

/// How δ3D thresholds are interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaNormalizer {
    /// Fraction of the ground-truth bounding-box diagonal over the evaluated window.
    #[default]
    BboxDiagonal,
    /// Thresholds are absolute scene units.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub epe: f64,
    pub delta3d_10: f64,
    pub delta3d_05: f64,
    /// `None` without occlusion ground truth.
    pub aj: Option<f64>,
    pub delta_avg_2d: f64,
    pub oa: Option<f64>,
    pub points_3d: usize,
    pub points_2d: usize,
}

/// Occlusion rule used to derive predicted visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityRule {
    /// Group label per row of the evaluated tensors.
    pub labels: Vec<usize>,
    pub splat_radius: u32,
    pub margin: f64,
}

fn check_aligned(pred: &TrajectoryTensor, gt: &TrajectoryTensor) -> Result<()> {
    if pred.gaussian_ids != gt.gaussian_ids {
        return Err(Error::TrajectoryMismatch("prediction and ground truth ids differ".into()));
    }
    if pred.start != gt.start || pred.num_timesteps() != gt.num_timesteps() {
        return Err(Error::TrajectoryMismatch(format!(
            "prediction covers frames {}..{}, ground truth {}..{}",
            pred.start,
            pred.start + pred.num_timesteps(),
            gt.start,
            gt.start + gt.num_timesteps()
        )));
    }
    Ok(())
}

fn errors(pred: &TrajectoryTensor, gt: &TrajectoryTensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(pred.len() * pred.num_timesteps());
    for i in 0..pred.len() {
        for t in 0..pred.num_timesteps() {
            out.push((pred.mean(i, t) - gt.mean(i, t)).norm());
        }
    }
    out
}

/// Mean Euclidean error over every (gaussian, frame) pair.
pub fn epe_3d(pred: &TrajectoryTensor, gt: &TrajectoryTensor) -> Result<f64> {
    check_aligned(pred, gt)?;
    let e = errors(pred, gt);
    if e.is_empty() {
        return Ok(0.0);
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// EPE per future step, averaged over gaussians.
pub fn epe_per_horizon(pred: &TrajectoryTensor, gt: &TrajectoryTensor) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    let n = pred.len().max(1) as f64;
    Ok((0..pred.num_timesteps())
        .map(|t| (0..pred.len()).map(|i| (pred.mean(i, t) - gt.mean(i, t)).norm()).sum::<f64>() / n)
        .collect())
}

/// Diagonal of the axis-aligned box around every ground-truth mean.
pub fn bbox_diagonal(gt: &TrajectoryTensor) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for i in 0..gt.len() {
        for t in 0..gt.num_timesteps() {
            let m = gt.mean(i, t);
            lo = lo.inf(&m);
            hi = hi.sup(&m);
        }
    }
    if gt.is_empty() || gt.num_timesteps() == 0 {
        return 0.0;
    }
    (hi - lo).norm()
}

/// Percent of pairs with error strictly below the threshold.
pub fn delta_3d(
    pred: &TrajectoryTensor,
    gt: &TrajectoryTensor,
    threshold: f64,
    normalizer: DeltaNormalizer,
) -> Result<f64> {
    check_aligned(pred, gt)?;
    let limit = match normalizer {
        DeltaNormalizer::Absolute => threshold,
        DeltaNormalizer::BboxDiagonal => {
            let d = bbox_diagonal(gt);
            if !(d > 0.0) {
                return Err(Error::DegenerateGeometry(
                    "ground-truth bounding box has zero diagonal".into(),
                ));
            }
            threshold * d
        }
    };
    let e = errors(pred, gt);
    if e.is_empty() {
        return Ok(100.0);
    }
    let hits = e.iter().filter(|&&x| x < limit).count();
    Ok(100.0 * hits as f64 / e.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics2d {
    pub aj: Option<f64>,
    pub delta_avg: f64,
    pub oa: Option<f64>,
    pub points: usize,
}

/// AJ, δ_avg and OA of a forecast.
///
/// `cameras` is indexed by absolute timestep. `occluded[i][t]` is indexed by
/// row and local frame of `gt`. Without it, δ_avg is taken over every pair
/// whose ground truth is in front of the camera and AJ/OA are absent.
pub fn metrics_2d(
    pred: &TrajectoryTensor,
    gt: &TrajectoryTensor,
    cameras: &[Camera],
    occluded: Option<&[Vec<bool>]>,
    rule: &VisibilityRule,
) -> Result<Metrics2d> {
    check_aligned(pred, gt)?;
    let len = gt.num_timesteps();
    if cameras.len() < gt.start + len {
        return Err(Error::Dimension(format!(
            "{} cameras for frames up to {}",
            cameras.len(),
            gt.start + len
        )));
    }
    if rule.labels.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} visibility labels for {} gaussians",
            rule.labels.len(),
            gt.len()
        )));
    }
    if let Some(occ) = occluded {
        if occ.len() != gt.len() || occ.iter().any(|r| r.len() != len) {
            return Err(Error::Dimension("occlusion flags do not match the ground truth".into()));
        }
    }

    let k = PIXEL_THRESHOLDS.len();
    let mut within = vec![0usize; k];
    let mut counted = 0usize;
    let mut agree = 0usize;
    let mut total = 0usize;
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);

    for t in 0..len {
        let cam = &cameras[gt.start + t];
        let scale = NORMALIZED_LONG_SIDE / cam.width.max(cam.height) as f64;
        let pred_means: Vec<Vec3> = (0..pred.len()).map(|i| pred.mean(i, t)).collect();
        let pred_proj = project_all(&pred_means, cam);
        let (_, pred_vis) =
            visibility(&pred_proj, &rule.labels, cam.width, cam.height, rule.splat_radius, rule.margin);

        for i in 0..gt.len() {
            let gt_proj = project_mean(&gt.mean(i, t), cam).ok();
            let dist = match (gt_proj, pred_proj[i]) {
                (Some((gu, gv, _)), Some((pu, pv, _))) => {
                    Some(scale * ((gu - pu).powi(2) + (gv - pv).powi(2)).sqrt())
                }
                _ => None,
            };
            let hit = |thr: f64| dist.is_some_and(|d| d < thr);

            match occluded {
                None => {
                    if gt_proj.is_some() {
                        counted += 1;
                        for (j, &thr) in PIXEL_THRESHOLDS.iter().enumerate() {
                            within[j] += hit(thr) as usize;
                        }
                    }
                }
                Some(occ) => {
                    let gt_visible = !occ[i][t];
                    let pred_visible = pred_vis[i];
                    total += 1;
                    agree += (gt_visible == pred_visible) as usize;
                    if gt_visible {
                        counted += 1;
                    }
                    for (j, &thr) in PIXEL_THRESHOLDS.iter().enumerate() {
                        let close = hit(thr);
                        if gt_visible {
                            within[j] += close as usize;
                        }
                        if gt_visible && pred_visible && close {
                            tp[j] += 1;
                        } else {
                            if pred_visible {
                                fp[j] += 1;
                            }
                            if gt_visible {
                                fn_[j] += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let delta_avg = if counted == 0 {
        100.0
    } else {
        100.0 * within.iter().map(|&w| w as f64 / counted as f64).sum::<f64>() / k as f64
    };
    let (aj, oa) = match occluded {
        None => (None, None),
        Some(_) => {
            let jac: f64 = (0..k)
                .map(|j| {
                    let denom = tp[j] + fp[j] + fn_[j];
                    // nothing visible and nothing predicted visible counts as perfect
                    if denom == 0 {
                        1.0
                    } else {
                        tp[j] as f64 / denom as f64
                    }
                })
                .sum();
            let oa = if total == 0 { 100.0 } else { 100.0 * agree as f64 / total as f64 };
            (Some(100.0 * jac / k as f64), Some(oa))
        }
    };
    Ok(Metrics2d {
        aj,
        delta_avg,
        oa,
        points: counted,
    })
}

/// Full report for a forecast window.
pub fn evaluate(
    pred: &TrajectoryTensor,
    gt: &TrajectoryTensor,
    cameras: &[Camera],
    occluded: Option<&[Vec<bool>]>,
    rule: &VisibilityRule,
    normalizer: DeltaNormalizer,
) -> Result<TrackingReport> {
    let epe = epe_3d(pred, gt)?;
    let delta3d_10 = delta_3d(pred, gt, 0.10, normalizer)?;
    let delta3d_05 = delta_3d(pred, gt, 0.05, normalizer)?;
    let m2 = metrics_2d(pred, gt, cameras, occluded, rule)?;
    Ok(TrackingReport {
        epe,
        delta3d_10,
        delta3d_05,
        aj: m2.aj,
        delta_avg_2d: m2.delta_avg,
        oa: m2.oa,
        points_3d: pred.len() * pred.num_timesteps(),
        points_2d: m2.points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Se3;

    fn cam() -> Camera {
        // long side 256 px so pixel errors are already normalized
        Camera::new(100.0, (128.0, 96.0), Se3::identity(), 256, 192).unwrap()
    }

    fn tensor(points: &[Vec<[f64; 3]>], start: usize) -> TrajectoryTensor {
        let values = points
            .iter()
            .map(|s| s.iter().map(|m| [m[0], m[1], m[2], 1.0, 0.0, 0.0, 0.0]).collect())
            .collect();
        TrajectoryTensor::new((0..points.len() as u32).collect(), values, start).unwrap()
    }

    fn shifted(t: &TrajectoryTensor, d: [f64; 3]) -> TrajectoryTensor {
        let mut out = t.clone();
        for s in &mut out.values {
            for x in s.iter_mut() {
                for c in 0..3 {
                    x[c] += d[c];
                }
            }
        }
        out
    }

    fn grid(n: usize, len: usize) -> TrajectoryTensor {
        let pts: Vec<Vec<[f64; 3]>> = (0..n)
            .map(|i| {
                (0..len)
                    .map(|t| [(i % 4) as f64 * 0.4 - 0.6, (i / 4) as f64 * 0.3 - 0.3, 5.0 + 0.01 * t as f64])
                    .collect()
            })
            .collect();
        tensor(&pts, 0)
    }

    fn rule(n: usize) -> VisibilityRule {
        VisibilityRule {
            labels: vec![0; n],
            splat_radius: 2,
            margin: 0.1,
        }
    }

    #[test]
    fn epe_examples() {
        let gt = grid(8, 3);
        assert_eq!(epe_3d(&gt, &gt).unwrap(), 0.0);
        let off = shifted(&gt, [0.3, 0.0, 0.0]);
        assert!((epe_3d(&off, &gt).unwrap() - 0.3).abs() < 1e-12);
        let mut late = gt.clone();
        late.start = 1;
        assert!(epe_3d(&late, &gt).is_err());
    }

    #[test]
    fn epe_matches_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut rand_t = || {
            let pts: Vec<Vec<[f64; 3]>> = (0..6)
                .map(|_| (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
                .collect();
            tensor(&pts, 2)
        };
        let (a, b) = (rand_t(), rand_t());
        let mut sum = 0.0;
        for i in 0..6 {
            for t in 0..4 {
                let (p, q) = (a.values[i][t], b.values[i][t]);
                sum += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            }
        }
        assert!((epe_3d(&a, &b).unwrap() - sum / 24.0).abs() < 1e-12);
        let curve = epe_per_horizon(&a, &b).unwrap();
        assert!((curve.iter().sum::<f64>() / 4.0 - sum / 24.0).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        // two points on a unit segment: diagonal 1
        let gt = tensor(&[vec![[0.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]], 0);
        assert_eq!(delta_3d(&gt, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap(), 100.0);
        let at = shifted(&gt, [0.0, 0.1, 0.0]);
        assert_eq!(delta_3d(&at, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap(), 0.0);
        let mut half = gt.clone();
        half.values[1][0][1] += 0.5;
        assert_eq!(delta_3d(&half, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap(), 50.0);
        assert_eq!(delta_3d(&half, &gt, 0.6, DeltaNormalizer::Absolute).unwrap(), 100.0);
        let point = tensor(&[vec![[1.0, 1.0, 1.0]]], 0);
        assert!(delta_3d(&point, &point, 0.1, DeltaNormalizer::BboxDiagonal).is_err());
    }

    #[test]
    fn two_d_examples() {
        let gt = grid(8, 2);
        let cams = vec![cam(); 2];
        let none = vec![vec![false; 2]; 8];
        let m = metrics_2d(&gt, &gt, &cams, Some(&none), &rule(8)).unwrap();
        assert_eq!((m.aj, m.delta_avg, m.oa), (Some(100.0), 100.0, Some(100.0)));

        // pushed behind the camera: every prediction invisible
        let behind = shifted(&gt, [0.0, 0.0, -20.0]);
        let m = metrics_2d(&behind, &gt, &cams, Some(&none), &rule(8)).unwrap();
        assert_eq!(m.oa, Some(0.0));
        assert_eq!(m.aj, Some(0.0));

        // 3 px shift at depth 5 with focal 100
        let one = tensor(&[vec![[0.0, 0.0, 5.0]]], 0);
        let moved = shifted(&one, [0.15, 0.0, 0.0]);
        let m = metrics_2d(&moved, &one, &cams[..1], None, &rule(1)).unwrap();
        assert!((m.delta_avg - 60.0).abs() < 1e-9);
        assert_eq!((m.aj, m.oa), (None, None));
    }

    #[test]
    fn resolution_is_normalized() {
        // same geometry at twice the resolution gives the same score
        let one = tensor(&[vec![[0.0, 0.0, 5.0]]], 0);
        let moved = shifted(&one, [0.15, 0.0, 0.0]);
        let big = Camera::new(200.0, (256.0, 192.0), Se3::identity(), 512, 384).unwrap();
        let m = metrics_2d(&moved, &one, &[big], None, &rule(1)).unwrap();
        assert!((m.delta_avg - 60.0).abs() < 1e-9);
    }

    #[test]
    fn report_composes() {
        let gt = grid(8, 3);
        let pred = shifted(&gt, [0.02, -0.01, 0.0]);
        let cams = vec![cam(); 3];
        let occ = vec![vec![false; 3]; 8];
        let r = evaluate(&pred, &gt, &cams, Some(&occ), &rule(8), DeltaNormalizer::BboxDiagonal).unwrap();
        assert_eq!(r.epe, epe_3d(&pred, &gt).unwrap());
        assert_eq!(r.delta3d_10, delta_3d(&pred, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap());
        let m = metrics_2d(&pred, &gt, &cams, Some(&occ), &rule(8)).unwrap();
        assert_eq!((r.aj, r.delta_avg_2d, r.oa), (m.aj, m.delta_avg, m.oa));
        assert_eq!(r.points_3d, 24);
        assert!(r.delta3d_05 <= r.delta3d_10);
        let perfect = evaluate(&gt, &gt, &cams, Some(&occ), &rule(8), DeltaNormalizer::BboxDiagonal).unwrap();
        assert_eq!(perfect.epe, 0.0);
        assert_eq!(perfect.delta3d_05, 100.0);
        assert_eq!(perfect.aj, Some(100.0));
    }

    #[test]
    fn offsets_leave_metrics_unchanged() {
        let gt = grid(8, 3);
        let pred = shifted(&gt, [0.05, 0.02, 0.01]);
        let d = [0.3, -0.2, 0.1];
        let (a, b) = (shifted(&pred, d), shifted(&gt, d));
        assert!((epe_3d(&a, &b).unwrap() - epe_3d(&pred, &gt).unwrap()).abs() < 1e-12);
        assert_eq!(
            delta_3d(&a, &b, 0.1, DeltaNormalizer::BboxDiagonal).unwrap(),
            delta_3d(&pred, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap()
        );
    }
}
