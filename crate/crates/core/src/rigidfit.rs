//! Least-squares rigid alignment (Procrustes) and per-frame rigid anchors.

use log::warn;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::MotionGroup;
use crate::scene::DynamicScene;
use crate::se3::{Se3, Vec3};

/// One rigid transform per timestep for group `group`, mapping canonical
/// member means to their deformed positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTrajectory {
    pub group: usize,
    pub transforms: Vec<Se3>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcrustesFit {
    pub transform: Se3,
    /// Sum of squared residuals `Σ ‖R s_i + t − d_i‖²`.
    pub residual: f64,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

pub fn residual(tf: &Se3, source: &[Vec3], target: &[Vec3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, d)| (tf.apply(s) - d).norm_squared())
        .sum()
}

/// Best rigid transform taking `source` onto `target` in the least-squares sense.
pub fn fit_procrustes(source: &[Vec3], target: &[Vec3]) -> Result<ProcrustesFit> {
    if source.len() != target.len() {
        return Err(Error::Dimension(format!(
            "procrustes: {} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "procrustes needs at least 3 points, got {}",
            source.len()
        )));
    }
    let cs = centroid(source);
    let cd = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in source.iter().zip(target) {
        let a = s - cs;
        cov += (d - cd) * a.transpose();
        spread += a * a.transpose();
    }
    let sv = spread.singular_values();
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::DegenerateGeometry("source points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let smallest = (0..3)
            .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .unwrap_or(2);
        fix[(smallest, smallest)] = -1.0;
    }
    let r = u * fix * v_t;
    let transform = Se3::from_matrix(&r, cd - r * cs);
    Ok(ProcrustesFit {
        residual: residual(&transform, source, target),
        transform,
    })
}

/// Mean-offset fit used for rigid groups too small for Procrustes.
pub fn fit_translation(source: &[Vec3], target: &[Vec3]) -> Se3 {
    if source.is_empty() {
        return Se3::identity();
    }
    Se3::from_translation(centroid(target) - centroid(source))
}

fn member_indices(scene: &DynamicScene, group: &MotionGroup) -> Result<Vec<usize>> {
    let index = scene.index_map();
    group
        .member_ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidScene(format!("group member {id} not in scene")))
        })
        .collect()
}

/// Fits `Φ_t` for every timestep from canonical to deformed member means.
pub fn init_rigid_trajectory(
    scene: &DynamicScene,
    group: &MotionGroup,
    k: usize,
) -> Result<RigidTrajectory> {
    let members = member_indices(scene, group)?;
    let source: Vec<Vec3> = members.iter().map(|&i| scene.gaussians[i].mean).collect();
    if members.len() < 3 {
        warn!(
            "rigid group {k} has {} members, using translation-only anchors",
            members.len()
        );
    }
    let transforms = (0..scene.num_timesteps())
        .map(|t| {
            let target: Vec<Vec3> = members
                .iter()
                .map(|&i| scene.deformed(i, t).map(|(m, _)| m))
                .collect::<Result<_>>()?;
            if members.len() < 3 {
                Ok(fit_translation(&source, &target))
            } else {
                fit_procrustes(&source, &target).map(|f| f.transform)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RigidTrajectory {
        group: k,
        transforms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::quat_from_axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_and_translation() {
        let src = random_points(10, 1);
        let fit = fit_procrustes(&src, &src).unwrap();
        assert!(fit.residual < 1e-24);
        let shift = Vec3::new(1.0, 2.0, 3.0);
        let dst: Vec<Vec3> = src.iter().map(|p| p + shift).collect();
        let fit = fit_procrustes(&src, &dst).unwrap();
        assert!((fit.transform.translation - shift).norm() < 1e-12);
        assert!(fit.transform.rotation().w > 1.0 - 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn recovers_rotation_about_z() {
        let src = random_points(10, 2);
        let truth = Se3::from_axis_angle(&Vec3::z(), 30f64.to_radians(), Vec3::new(0.0, 1.0, 0.0));
        // apply via an independently built matrix
        let (s, c) = 30f64.to_radians().sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let dst: Vec<Vec3> = src.iter().map(|p| rz * p + Vec3::new(0.0, 1.0, 0.0)).collect();
        let fit = fit_procrustes(&src, &dst).unwrap();
        assert!((fit.transform.rotation_matrix() - rz).abs().max() < 1e-9);
        assert!((fit.transform.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn too_few_or_collinear() {
        let two = random_points(2, 3);
        assert!(matches!(fit_procrustes(&two, &two), Err(Error::DegenerateGeometry(_))));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_procrustes(&line, &line), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn reflection_still_gives_rotation() {
        let src = random_points(12, 4);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let fit = fit_procrustes(&src, &dst).unwrap();
        assert!((fit.transform.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conjugation_by_common_rotation() {
        let src = random_points(15, 5);
        let truth = Se3::from_axis_angle(&Vec3::new(1.0, -1.0, 0.3), 0.8, Vec3::new(0.2, 0.0, -0.4));
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let q = Se3::new(quat_from_axis_angle(&Vec3::new(0.1, 0.5, 1.0), 1.3), Vec3::zeros());
        let src_q: Vec<Vec3> = src.iter().map(|p| q.apply(p)).collect();
        let dst_q: Vec<Vec3> = dst.iter().map(|p| q.apply(p)).collect();
        let a = fit_procrustes(&src, &dst).unwrap().transform;
        let b = fit_procrustes(&src_q, &dst_q).unwrap().transform;
        let qm = q.rotation_matrix();
        let expect = qm * a.rotation_matrix() * qm.transpose();
        assert!((b.rotation_matrix() - expect).abs().max() < 1e-9);
        assert!((b.translation - qm * a.translation).norm() < 1e-9);
    }

    #[test]
    fn local_optimality_probe() {
        let src = random_points(20, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let truth = Se3::from_axis_angle(&Vec3::new(0.0, 1.0, 1.0), 0.5, Vec3::new(1.0, 0.0, 0.0));
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| truth.apply(p) + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let fit = fit_procrustes(&src, &dst).unwrap();
        for _ in 0..1000 {
            let d = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let dt = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let mut p = fit.transform.with_local_rotation(&d);
            p.translation += dt;
            assert!(residual(&p, &src, &dst) >= fit.residual);
        }
    }

    #[test]
    fn generator_transforms_recovered() {
        use crate::synth::{generate_scene, Preset};
        let (scene, gt) = generate_scene(&Preset::TwoGroups.config(3)).unwrap();
        let group = MotionGroup {
            tau: 1,
            member_ids: gt.members(0).into_iter().collect(),
        };
        let traj = init_rigid_trajectory(&scene, &group, 0).unwrap();
        let truth = gt.rigid_trajectories[0].as_ref().unwrap();
        for (a, b) in traj.transforms.iter().zip(truth) {
            assert!((a.rotation_matrix() - b.rotation_matrix()).abs().max() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn static_scene_gives_identity() {
        use crate::scene::{Camera, GaussianCanonical, MotionBasisSet};
        let cam = Camera::new(100.0, (8.0, 8.0), Se3::identity(), 16, 16).unwrap();
        let gaussians = random_points(6, 7)
            .into_iter()
            .enumerate()
            .map(|(i, p)| GaussianCanonical::new(i as u32, p, crate::se3::Quat::identity(), vec![1.0]))
            .collect();
        let scene = DynamicScene::new(gaussians, MotionBasisSet::identity(1, 4).unwrap(), vec![cam; 4]).unwrap();
        let group = MotionGroup {
            tau: 1,
            member_ids: (0..6).collect(),
        };
        for tf in init_rigid_trajectory(&scene, &group, 0).unwrap().transforms {
            assert!(tf.translation.norm() < 1e-12);
            assert!(tf.rotation().w > 1.0 - 1e-12);
        }
    }

    #[test]
    fn small_group_uses_translation() {
        let src = random_points(2, 8);
        let shift = Vec3::new(0.5, -0.5, 0.0);
        let dst: Vec<Vec3> = src.iter().map(|p| p + shift).collect();
        let tf = fit_translation(&src, &dst);
        assert!((tf.translation - shift).norm() < 1e-15);
    }

    #[test]
    fn noisy_residual_rms_bounded() {
        use rand_distr::{Distribution, Normal};
        let sigma = 0.01;
        let normal = Normal::new(0.0, sigma).unwrap();
        for seed in 0..20 {
            let src = random_points(40, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Se3::from_axis_angle(&Vec3::new(0.3, 1.0, -0.2), 0.6, Vec3::new(0.5, 0.1, 0.0));
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| truth.apply(p) + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
                .collect();
            let fit = fit_procrustes(&src, &dst).unwrap();
            let rms = (fit.residual / src.len() as f64).sqrt();
            assert!(rms <= 3.0 * sigma, "seed {seed}: rms {rms}");
        }
    }
}
