//! Dynamic Gaussian scenes: canonical Gaussians deformed over time by a
//! weighted blend of shared SE(3) motion bases.

use std::collections::HashMap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{self, normalize_quat, quat_from_wxyz, quat_to_wxyz, Quat, Se3, Vec3};

pub type GaussianId = u32;

/// Tolerance on the blend-weight simplex.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Minimum camera-space depth for a projectable point.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianCanonical {
    pub id: GaussianId,
    pub mean: Vec3,
    pub rotation: Quat,
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    id: GaussianId,
    mean: [f64; 3],
    rot: [f64; 4],
    weights: Vec<f64>,
}

impl From<GaussianRepr> for GaussianCanonical {
    fn from(r: GaussianRepr) -> Self {
        Self {
            id: r.id,
            mean: Vec3::from(r.mean),
            rotation: quat_from_wxyz(r.rot),
            weights: r.weights,
        }
    }
}

impl From<GaussianCanonical> for GaussianRepr {
    fn from(g: GaussianCanonical) -> Self {
        Self {
            id: g.id,
            mean: [g.mean.x, g.mean.y, g.mean.z],
            rot: quat_to_wxyz(&g.rotation),
            weights: g.weights,
        }
    }
}

impl GaussianCanonical {
    pub fn new(id: GaussianId, mean: Vec3, rotation: Quat, weights: Vec<f64>) -> Self {
        Self {
            id,
            mean,
            rotation: normalize_quat(rotation).unwrap_or_else(Quat::identity),
            weights,
        }
    }
}

/// Checks that `w` is a valid convex combination.
pub fn validate_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidScene(format!(
            "blend weights must be finite and nonnegative: {w:?}"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidScene(format!(
            "blend weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

/// B motion bases sampled at T timesteps, stored one row per timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionBasisSet {
    num_bases: usize,
    num_timesteps: usize,
    /// `frames[t][b]`
    frames: Vec<Vec<Se3>>,
}

impl MotionBasisSet {
    pub fn new(frames: Vec<Vec<Se3>>) -> Result<Self> {
        let num_timesteps = frames.len();
        if num_timesteps < 2 {
            return Err(Error::InvalidScene(format!(
                "motion bases need at least 2 timesteps, got {num_timesteps}"
            )));
        }
        let num_bases = frames[0].len();
        if num_bases == 0 {
            return Err(Error::InvalidScene("at least one motion basis required".into()));
        }
        if let Some((t, row)) = frames.iter().enumerate().find(|(_, r)| r.len() != num_bases) {
            return Err(Error::InvalidScene(format!(
                "timestep {t} has {} bases, expected {num_bases}",
                row.len()
            )));
        }
        Ok(Self {
            num_bases,
            num_timesteps,
            frames,
        })
    }

    /// `B` copies of the identity at every timestep.
    pub fn identity(num_bases: usize, num_timesteps: usize) -> Result<Self> {
        Self::new(vec![vec![Se3::identity(); num_bases]; num_timesteps])
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    /// All bases at timestep `t`.
    pub fn at(&self, t: usize) -> Result<&[Se3]> {
        self.frames
            .get(t)
            .map(Vec::as_slice)
            .ok_or(Error::TimestepOutOfRange {
                t,
                len: self.num_timesteps,
            })
    }

    pub fn get(&self, b: usize, t: usize) -> &Se3 {
        &self.frames[t][b]
    }

    pub fn set(&mut self, b: usize, t: usize, value: Se3) {
        self.frames[t][b] = value;
    }

    pub fn frames(&self) -> &[Vec<Se3>] {
        &self.frames
    }

    /// Keeps timesteps `0..len`.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        Self::new(self.frames[..len.min(self.num_timesteps)].to_vec())
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CameraRepr", into = "CameraRepr")]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: Se3,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    k: [[f64; 3]; 3],
    extrinsics: Se3,
    width: u32,
    height: u32,
}

impl From<CameraRepr> for Camera {
    fn from(r: CameraRepr) -> Self {
        let k = r.k;
        Self {
            intrinsics: Matrix3::new(
                k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2],
            ),
            extrinsics: r.extrinsics,
            width: r.width,
            height: r.height,
        }
    }
}

impl From<Camera> for CameraRepr {
    fn from(c: Camera) -> Self {
        let m = c.intrinsics;
        Self {
            k: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            extrinsics: c.extrinsics,
            width: c.width,
            height: c.height,
        }
    }
}

impl Camera {
    pub fn new(
        focal: f64,
        principal: (f64, f64),
        extrinsics: Se3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics: Matrix3::new(focal, 0.0, principal.0, 0.0, focal, principal.1, 0.0, 0.0, 1.0),
            extrinsics,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with image-down roughly along -`up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        // rows of the world->camera rotation are the camera axes
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rot = Se3::from_matrix(&r, Vec3::zeros());
        let t = -rot.apply(&eye);
        Self::new(
            focal,
            (width as f64 / 2.0, height as f64 / 2.0),
            Se3::new(*rot.rotation(), t),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidScene("camera focal lengths must be positive".into()));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(cx >= 0.0 && cx <= self.width as f64 && cy >= 0.0 && cy <= self.height as f64) {
            return Err(Error::InvalidScene(format!(
                "principal point ({cx}, {cy}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicScene {
    pub gaussians: Vec<GaussianCanonical>,
    pub motion: MotionBasisSet,
    pub cameras: Vec<Camera>,
}

impl DynamicScene {
    pub fn new(
        gaussians: Vec<GaussianCanonical>,
        motion: MotionBasisSet,
        cameras: Vec<Camera>,
    ) -> Result<Self> {
        let scene = Self {
            gaussians,
            motion,
            cameras,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.motion.num_bases();
        let mut seen = HashMap::with_capacity(self.gaussians.len());
        for g in &self.gaussians {
            if g.weights.len() != b {
                return Err(Error::InvalidScene(format!(
                    "gaussian {} has {} weights, scene has {b} bases",
                    g.id,
                    g.weights.len()
                )));
            }
            validate_weights(&g.weights)?;
            if seen.insert(g.id, ()).is_some() {
                return Err(Error::InvalidScene(format!("duplicate gaussian id {}", g.id)));
            }
        }
        if self.cameras.len() != self.motion.num_timesteps() {
            return Err(Error::InvalidScene(format!(
                "{} cameras for {} timesteps",
                self.cameras.len(),
                self.motion.num_timesteps()
            )));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn num_timesteps(&self) -> usize {
        self.motion.num_timesteps()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn ids(&self) -> Vec<GaussianId> {
        self.gaussians.iter().map(|g| g.id).collect()
    }

    /// Map from gaussian id to its position in `gaussians`.
    pub fn index_map(&self) -> HashMap<GaussianId, usize> {
        self.gaussians.iter().enumerate().map(|(i, g)| (g.id, i)).collect()
    }

    pub fn deformed(&self, index: usize, t: usize) -> Result<(Vec3, Quat)> {
        deform_gaussian(&self.gaussians[index], &self.motion, t)
    }

    pub fn deformed_means(&self, t: usize) -> Result<Vec<Vec3>> {
        self.gaussians
            .iter()
            .map(|g| deform_gaussian(g, &self.motion, t).map(|(m, _)| m))
            .collect()
    }

    /// Keeps the first `len` timesteps (motion and cameras).
    pub fn truncated(&self, len: usize) -> Result<Self> {
        let len = len.min(self.num_timesteps());
        Self::new(
            self.gaussians.clone(),
            self.motion.truncated(len)?,
            self.cameras[..len].to_vec(),
        )
    }

    /// Rebuilds a scene that reproduces `traj` exactly: one basis per
    /// gaussian, anchored at its first frame.
    pub fn from_trajectories(traj: &TrajectoryTensor, cameras: Vec<Camera>) -> Result<Self> {
        let n = traj.len();
        let len = traj.num_timesteps();
        let mut frames = vec![Vec::with_capacity(n); len];
        let mut gaussians = Vec::with_capacity(n);
        for i in 0..n {
            let mean0 = traj.mean(i, 0);
            let q0 = traj.quat(i, 0);
            let q0_inv = q0.conjugate();
            for (t, frame) in frames.iter_mut().enumerate() {
                let rot = traj.quat(i, t) * q0_inv;
                let trans = traj.mean(i, t) - se3::rotate(&rot, &mean0);
                frame.push(Se3::new(rot, trans));
            }
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            gaussians.push(GaussianCanonical::new(traj.gaussian_ids[i], mean0, q0, w));
        }
        Self::new(gaussians, MotionBasisSet::new(frames)?, cameras)
    }
}

/// Blend SE(3) bases with convex weights.
///
/// Translations combine linearly. Rotations are averaged as quaternions after
/// aligning every basis quaternion to the hemisphere of the highest-weight
/// basis, then renormalized.
pub fn blend_transform(weights: &[f64], bases: &[Se3]) -> Result<Se3> {
    if weights.len() != bases.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} bases",
            weights.len(),
            bases.len()
        )));
    }
    let reference = dominant_index(weights);
    let q_ref = bases[reference].rotation();
    let mut q_sum = Quat::new(0.0, 0.0, 0.0, 0.0);
    let mut t_sum = Vec3::zeros();
    for (w, b) in weights.iter().zip(bases) {
        let q = b.rotation();
        let s = if q.dot(q_ref) < 0.0 { -1.0 } else { 1.0 };
        q_sum += q * (w * s);
        t_sum += b.translation * *w;
    }
    let n = q_sum.norm();
    if !(n > 1e-12) {
        return Err(Error::DegenerateBlend(n));
    }
    Ok(Se3::new(q_sum / n, t_sum))
}

/// Index of the largest weight, lowest index on ties.
pub fn dominant_index(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    best
}

/// Deformed mean and orientation of `g` at timestep `t`.
pub fn deform_gaussian(
    g: &GaussianCanonical,
    motion: &MotionBasisSet,
    t: usize,
) -> Result<(Vec3, Quat)> {
    let bases = motion.at(t)?;
    let blend = blend_transform(&g.weights, bases)?;
    let mean = blend.apply(&g.mean);
    let rot = normalize_quat(blend.rotation() * g.rotation)
        .ok_or_else(|| Error::Numerical("deformed rotation vanished".into()))?;
    Ok((mean, rot))
}

/// Pixel coordinates and camera-space depth of a world point.
pub fn project_mean(mean: &Vec3, cam: &Camera) -> Result<(f64, f64, f64)> {
    let pc = cam.extrinsics.apply(mean);
    if !(pc.z > MIN_DEPTH) {
        return Err(Error::BehindCamera(pc.z));
    }
    let p = cam.intrinsics * pc;
    Ok((p.x / p.z, p.y / p.z, pc.z))
}

/// Per-gaussian sequences of `[mx, my, mz, qw, qx, qy, qz]`.
///
/// `start` is the timestep of the first row, so future windows keep their
/// absolute frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTensor {
    pub gaussian_ids: Vec<GaussianId>,
    pub values: Vec<Vec<[f64; 7]>>,
    pub start: usize,
}

impl TrajectoryTensor {
    pub fn new(
        gaussian_ids: Vec<GaussianId>,
        values: Vec<Vec<[f64; 7]>>,
        start: usize,
    ) -> Result<Self> {
        if gaussian_ids.len() != values.len() {
            return Err(Error::TrajectoryMismatch(format!(
                "{} ids for {} sequences",
                gaussian_ids.len(),
                values.len()
            )));
        }
        let len = values.first().map_or(0, Vec::len);
        for (id, seq) in gaussian_ids.iter().zip(&values) {
            if seq.len() != len {
                return Err(Error::TrajectoryMismatch(format!(
                    "gaussian {id} has {} frames, expected {len}",
                    seq.len()
                )));
            }
            for x in seq {
                let q = Quat::new(x[3], x[4], x[5], x[6]);
                if (q.norm() - 1.0).abs() > 1e-6 || q.w < 0.0 {
                    return Err(Error::TrajectoryMismatch(format!(
                        "gaussian {id} has a non-canonical quaternion {:?}",
                        &x[3..]
                    )));
                }
            }
        }
        Ok(Self {
            gaussian_ids,
            values,
            start,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussian_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian_ids.is_empty()
    }

    pub fn num_timesteps(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Mean of gaussian row `i` at local frame `t`.
    pub fn mean(&self, i: usize, t: usize) -> Vec3 {
        let x = &self.values[i][t];
        Vec3::new(x[0], x[1], x[2])
    }

    pub fn quat(&self, i: usize, t: usize) -> Quat {
        let x = &self.values[i][t];
        Quat::new(x[3], x[4], x[5], x[6])
    }

    pub fn index_map(&self) -> HashMap<GaussianId, usize> {
        self.gaussian_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect()
    }

    /// Rows for `ids` in the given order.
    pub fn select(&self, ids: &[GaussianId]) -> Result<Self> {
        let map = self.index_map();
        let values = ids
            .iter()
            .map(|id| {
                map.get(id)
                    .map(|&i| self.values[i].clone())
                    .ok_or_else(|| Error::TrajectoryMismatch(format!("gaussian {id} missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gaussian_ids: ids.to_vec(),
            values,
            start: self.start,
        })
    }

    /// Local frames `from..to`.
    pub fn slice_time(&self, from: usize, to: usize) -> Self {
        Self {
            gaussian_ids: self.gaussian_ids.clone(),
            values: self.values.iter().map(|s| s[from..to].to_vec()).collect(),
            start: self.start + from,
        }
    }
}

pub fn pack_state(mean: &Vec3, q: &Quat) -> [f64; 7] {
    [mean.x, mean.y, mean.z, q.w, q.i, q.j, q.k]
}

/// Deformed trajectories of every gaussian over every timestep.
pub fn scene_trajectories(scene: &DynamicScene) -> Result<TrajectoryTensor> {
    let len = scene.num_timesteps();
    let mut values = Vec::with_capacity(scene.len());
    for g in &scene.gaussians {
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            let (m, q) = deform_gaussian(g, &scene.motion, t)?;
            seq.push(pack_state(&m, &q));
        }
        values.push(seq);
    }
    TrajectoryTensor::new(scene.ids(), values, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn cam(f: f64, cx: f64, cy: f64) -> Camera {
        Camera::new(f, (cx, cy), Se3::identity(), 640, 480).unwrap()
    }

    fn single_basis_scene(frames: Vec<Se3>, mean: Vec3) -> DynamicScene {
        let t = frames.len();
        DynamicScene::new(
            vec![GaussianCanonical::new(0, mean, Quat::identity(), vec![1.0])],
            MotionBasisSet::new(frames.into_iter().map(|f| vec![f]).collect()).unwrap(),
            vec![cam(100.0, 320.0, 240.0); t],
        )
        .unwrap()
    }

    #[test]
    fn blend_identity() {
        let r = blend_transform(&[1.0], &[Se3::identity()]).unwrap();
        assert_eq!(r, Se3::identity());
    }

    #[test]
    fn blend_translations_linearly() {
        let bases = [Se3::identity(), Se3::from_translation(Vec3::new(2.0, 0.0, 0.0))];
        let r = blend_transform(&[0.5, 0.5], &bases).unwrap();
        assert_eq!(r.translation, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(*r.rotation(), Quat::identity());
    }

    #[test]
    fn blend_symmetric_rotations_cancel() {
        let a = 20f64.to_radians();
        let bases = [
            Se3::from_axis_angle(&Vec3::z(), a, Vec3::zeros()),
            Se3::from_axis_angle(&Vec3::z(), -a, Vec3::zeros()),
        ];
        let r = blend_transform(&[0.5, 0.5], &bases).unwrap();
        let q = r.rotation();
        assert!((q.w - 1.0).abs() < 1e-9);
        assert!(q.imag().norm() < 1e-9);
    }

    #[test]
    fn blend_length_mismatch() {
        let err = blend_transform(&[0.5, 0.5], &[Se3::identity()]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn blend_zero_weights_is_degenerate() {
        let err = blend_transform(&[0.0, 0.0], &[Se3::identity(), Se3::identity()]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBlend(_)));
    }

    #[test]
    fn blend_one_hot_selects() {
        let b = Se3::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.8, Vec3::new(1.0, 2.0, 3.0));
        let r = blend_transform(&[0.0, 1.0, 0.0], &[Se3::identity(), b, Se3::identity()]).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn deform_identity_is_noop() {
        let q = se3::quat_from_axis_angle(&Vec3::y(), 0.3);
        let g = GaussianCanonical::new(3, Vec3::new(1.0, 2.0, 3.0), q, vec![0.25, 0.75]);
        let motion = MotionBasisSet::identity(2, 4).unwrap();
        for t in 0..4 {
            let (m, r) = deform_gaussian(&g, &motion, t).unwrap();
            assert_eq!(m, g.mean);
            assert_relative_eq!(r, q, epsilon = 1e-15);
        }
    }

    #[test]
    fn deform_pure_translation() {
        let s = single_basis_scene(
            vec![Se3::from_translation(Vec3::new(1.0, 2.0, 3.0)); 2],
            Vec3::zeros(),
        );
        let (m, _) = s.deformed(0, 1).unwrap();
        assert_eq!(m, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn deform_quarter_turn() {
        let rz = Se3::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::zeros());
        let s = single_basis_scene(vec![rz; 2], Vec3::x());
        let (m, _) = s.deformed(0, 0).unwrap();
        assert!((m - Vec3::y()).norm() < 1e-9);
    }

    #[test]
    fn deform_out_of_range() {
        let s = single_basis_scene(vec![Se3::identity(); 2], Vec3::x());
        assert!(matches!(
            s.deformed(0, 2).unwrap_err(),
            Error::TimestepOutOfRange { t: 2, len: 2 }
        ));
    }

    #[test]
    fn project_on_axis() {
        let c = cam(500.0, 320.0, 240.0);
        assert_eq!(project_mean(&Vec3::new(0.0, 0.0, 1.0), &c).unwrap(), (320.0, 240.0, 1.0));
    }

    #[test]
    fn project_off_axis() {
        let c = Camera::new(100.0, (0.0, 0.0), Se3::identity(), 10, 10).unwrap();
        let (u, v, d) = project_mean(&Vec3::new(1.0, 0.0, 2.0), &c).unwrap();
        assert_eq!((u, v, d), (50.0, 0.0, 2.0));
    }

    #[test]
    fn project_behind_camera() {
        let c = cam(100.0, 320.0, 240.0);
        assert!(matches!(
            project_mean(&Vec3::new(0.0, 0.0, -1.0), &c),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn look_at_projects_target_to_center() {
        let c = Camera::look_at(
            Vec3::new(3.0, 1.0, -4.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::y(),
            200.0,
            320,
            240,
        )
        .unwrap();
        let (u, v, d) = project_mean(&Vec3::new(0.5, 0.0, 0.0), &c).unwrap();
        assert!((u - 160.0).abs() < 1e-9 && (v - 120.0).abs() < 1e-9);
        assert!((d - Vec3::new(2.5, 1.0, -4.0).norm()).abs() < 1e-9);
    }

    #[test]
    fn static_scene_rows_constant() {
        let s = single_basis_scene(vec![Se3::identity(); 5], Vec3::new(0.1, 0.2, 0.3));
        let tr = scene_trajectories(&s).unwrap();
        assert!(tr.values[0].iter().all(|x| *x == tr.values[0][0]));
    }

    #[test]
    fn two_frame_translation_rows() {
        let s = single_basis_scene(
            vec![Se3::identity(), Se3::from_translation(Vec3::new(0.0, 1.0, 0.0))],
            Vec3::new(1.0, 0.0, 0.0),
        );
        let tr = scene_trajectories(&s).unwrap();
        let (a, b) = (tr.values[0][0], tr.values[0][1]);
        assert_eq!(&a[3..], &b[3..]);
        assert_eq!(b[1] - a[1], 1.0);
    }

    #[test]
    fn rebuild_from_trajectories_round_trips() {
        let bases: Vec<Vec<Se3>> = (0..6)
            .map(|t| {
                let t = t as f64;
                vec![
                    Se3::from_axis_angle(&Vec3::new(0.3, 1.0, 0.2), 0.1 * t, Vec3::new(t, 0.0, 0.5)),
                    Se3::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), -0.2 * t, Vec3::new(0.0, t, 0.0)),
                ]
            })
            .collect();
        let gaussians = (0..4)
            .map(|i| {
                let f = i as f64;
                GaussianCanonical::new(
                    10 + i,
                    Vec3::new(f, 1.0 - f, 0.5 * f),
                    se3::quat_from_axis_angle(&Vec3::new(1.0, f, 0.0), 0.2 * f),
                    vec![f / 3.0, 1.0 - f / 3.0],
                )
            })
            .collect();
        let scene = DynamicScene::new(
            gaussians,
            MotionBasisSet::new(bases).unwrap(),
            vec![cam(100.0, 320.0, 240.0); 6],
        )
        .unwrap();
        let tr = scene_trajectories(&scene).unwrap();
        let rebuilt = DynamicScene::from_trajectories(&tr, scene.cameras.clone()).unwrap();
        let tr2 = scene_trajectories(&rebuilt).unwrap();
        assert_eq!(tr.gaussian_ids, tr2.gaussian_ids);
        for (a, b) in tr.values.iter().flatten().zip(tr2.values.iter().flatten()) {
            for k in 0..7 {
                assert!((a[k] - b[k]).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn scene_validation_errors() {
        let motion = MotionBasisSet::identity(2, 3).unwrap();
        let cams = vec![cam(100.0, 320.0, 240.0); 3];
        let bad_len = vec![GaussianCanonical::new(0, Vec3::zeros(), Quat::identity(), vec![1.0])];
        assert!(DynamicScene::new(bad_len, motion.clone(), cams.clone()).is_err());
        let bad_sum =
            vec![GaussianCanonical::new(0, Vec3::zeros(), Quat::identity(), vec![0.6, 0.6])];
        assert!(DynamicScene::new(bad_sum, motion.clone(), cams.clone()).is_err());
        let dup = vec![
            GaussianCanonical::new(1, Vec3::zeros(), Quat::identity(), vec![0.5, 0.5]),
            GaussianCanonical::new(1, Vec3::zeros(), Quat::identity(), vec![0.5, 0.5]),
        ];
        assert!(DynamicScene::new(dup, motion.clone(), cams).is_err());
        assert!(Camera::new(-1.0, (0.0, 0.0), Se3::identity(), 10, 10).is_err());
        assert!(Camera::new(1.0, (20.0, 0.0), Se3::identity(), 10, 10).is_err());
        assert!(MotionBasisSet::identity(1, 1).is_err());
    }
}
