//! Synthetic dynamic scenes with known groups, cameras, instance masks and
//! occlusion flags. Stands in for captured video plus 2D segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    project_mean, Camera, DynamicScene, GaussianCanonical, GaussianId, MotionBasisSet,
};
use crate::se3::{quat_exp, Quat, Se3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Rigid,
    Nonrigid,
}

impl GroupKind {
    pub fn tau(self) -> u8 {
        match self {
            GroupKind::Rigid => 1,
            GroupKind::Nonrigid => 0,
        }
    }
}

/// How a group's bases move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionSpec {
    /// Constant twist with random linear and angular velocity, bounded by
    /// the config's amplitude and angular speed.
    Random,
    /// Constant twist about the group center: `linear` per frame,
    /// `angular` a rotation vector per frame.
    Twist { linear: [f64; 3], angular: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub count: usize,
    pub center: [f64; 3],
    /// Radius of the ball the canonical means are drawn from.
    pub extent: f64,
    #[serde(default = "default_motion")]
    pub motion: MotionSpec,
}

fn default_motion() -> MotionSpec {
    MotionSpec::Random
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitConfig {
    pub radius: f64,
    pub height: f64,
    /// Starting azimuth in radians; 0 puts the camera on the -z side.
    pub start_angle: f64,
    /// Azimuth change per frame in radians.
    pub angular_speed: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 6.0,
            height: 1.0,
            start_angle: 0.0,
            angular_speed: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: Vec<GroupSpec>,
    pub num_bases: usize,
    pub num_timesteps: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub orbit: OrbitConfig,
    /// Upper bound on per-frame translation of a random basis (scene units).
    pub amplitude: f64,
    /// Upper bound on per-frame rotation of a random basis (radians).
    pub max_angular_speed: f64,
    /// Std of Gaussian noise added to every basis translation (scene units).
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_splat_radius")]
    pub splat_radius: u32,
    #[serde(default = "default_occlusion_margin")]
    pub occlusion_margin: f64,
}

fn default_splat_radius() -> u32 {
    2
}

fn default_occlusion_margin() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("at least one group is required".into()));
        }
        if self.num_timesteps < 4 {
            return Err(Error::Config(format!(
                "num_timesteps must be >= 4, got {}",
                self.num_timesteps
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.groups.iter().any(|g| g.count == 0 || !(g.extent > 0.0)) {
            return Err(Error::Config("groups need count >= 1 and extent > 0".into()));
        }
        let required = self.required_bases();
        if self.num_bases < required {
            return Err(Error::Config(format!(
                "{} bases configured but the groups need {required}",
                self.num_bases
            )));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::Config("image size and focal must be positive".into()));
        }
        Ok(())
    }

    /// One basis per rigid group, two per non-rigid group.
    pub fn required_bases(&self) -> usize {
        self.groups
            .iter()
            .map(|g| match g.kind {
                GroupKind::Rigid => 1,
                GroupKind::Nonrigid => 2,
            })
            .sum()
    }

    pub fn num_gaussians(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn scene_center(&self) -> Vec3 {
        let n = self.groups.len() as f64;
        self.groups
            .iter()
            .fold(Vec3::zeros(), |acc, g| acc + Vec3::from(g.center))
            / n
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Preset::from_name(name).map(|p| p.config(seed))
    }
}

/// Named scenes shared by tests, docs and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// A rigid and a non-rigid group far apart, no noise.
    TwoGroups,
    /// Two rigid groups and one non-rigid group with basis noise, sized for
    /// end-to-end forecasting runs.
    RigidNonrigidMix,
    /// A group sweeping behind another in the camera's view.
    OcclusionStress,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::TwoGroups,
        Preset::RigidNonrigidMix,
        Preset::OcclusionStress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TwoGroups => "two-groups",
            Preset::RigidNonrigidMix => "rigid-nonrigid-mix",
            Preset::OcclusionStress => "occlusion-stress",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))
    }

    pub fn config(self, seed: u64) -> SynthConfig {
        match self {
            Preset::TwoGroups => SynthConfig {
                groups: vec![
                    GroupSpec {
                        kind: GroupKind::Rigid,
                        count: 120,
                        center: [-1.3, 0.0, 0.0],
                        extent: 0.5,
                        motion: MotionSpec::Random,
                    },
                    GroupSpec {
                        kind: GroupKind::Nonrigid,
                        count: 120,
                        center: [1.3, 0.0, 0.0],
                        extent: 0.5,
                        motion: MotionSpec::Random,
                    },
                ],
                num_bases: 3,
                num_timesteps: 12,
                width: 320,
                height: 240,
                focal: 280.0,
                orbit: OrbitConfig::default(),
                amplitude: 0.04,
                max_angular_speed: 0.04,
                noise_sigma: 0.0,
                seed,
                splat_radius: 2,
                occlusion_margin: 0.1,
            },
            Preset::RigidNonrigidMix => SynthConfig {
                groups: vec![
                    GroupSpec {
                        kind: GroupKind::Rigid,
                        count: 60,
                        center: [-1.6, 0.0, 0.0],
                        extent: 0.45,
                        motion: MotionSpec::Random,
                    },
                    GroupSpec {
                        kind: GroupKind::Nonrigid,
                        count: 60,
                        center: [0.0, 0.0, 0.4],
                        extent: 0.45,
                        motion: MotionSpec::Random,
                    },
                    GroupSpec {
                        kind: GroupKind::Rigid,
                        count: 60,
                        center: [1.6, 0.0, 0.0],
                        extent: 0.45,
                        motion: MotionSpec::Random,
                    },
                ],
                num_bases: 4,
                num_timesteps: 30,
                width: 320,
                height: 240,
                focal: 280.0,
                orbit: OrbitConfig::default(),
                amplitude: 0.04,
                max_angular_speed: 0.06,
                noise_sigma: 0.002,
                seed,
                splat_radius: 2,
                occlusion_margin: 0.1,
            },
            Preset::OcclusionStress => SynthConfig {
                groups: vec![
                    GroupSpec {
                        kind: GroupKind::Rigid,
                        count: 120,
                        center: [0.0, 0.0, 0.0],
                        extent: 0.6,
                        motion: MotionSpec::Twist {
                            linear: [0.0, 0.0, 0.0],
                            angular: [0.0, 0.03, 0.0],
                        },
                    },
                    GroupSpec {
                        kind: GroupKind::Nonrigid,
                        count: 120,
                        center: [-1.0, 0.0, 1.6],
                        extent: 0.6,
                        motion: MotionSpec::Twist {
                            linear: [0.17, 0.0, 0.0],
                            angular: [0.0, 0.0, 0.02],
                        },
                    },
                ],
                num_bases: 3,
                num_timesteps: 12,
                width: 320,
                height: 240,
                focal: 280.0,
                orbit: OrbitConfig {
                    radius: 6.0,
                    height: 0.5,
                    start_angle: 0.0,
                    angular_speed: 0.0,
                },
                amplitude: 0.04,
                max_angular_speed: 0.04,
                noise_sigma: 0.0,
                seed,
                splat_radius: 2,
                occlusion_margin: 0.1,
            },
        }
    }
}

/// Oracle labels and motion of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ids: Vec<GaussianId>,
    /// Group index per gaussian, aligned with `ids`.
    pub labels: Vec<usize>,
    /// Rigidity flag per group (1 rigid, 0 non-rigid).
    pub tau: Vec<u8>,
    /// Generating transform per timestep for every rigid group.
    pub rigid_trajectories: Vec<Option<Vec<Se3>>>,
    /// `occluded[i][t]`, aligned with `ids`.
    pub occluded: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn num_groups(&self) -> usize {
        self.tau.len()
    }

    pub fn members(&self, k: usize) -> Vec<GaussianId> {
        self.ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == k)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Keeps timesteps `0..len` of the per-frame data.
    pub fn truncated(&self, len: usize) -> Self {
        let mut gt = self.clone();
        for tr in gt.rigid_trajectories.iter_mut().flatten() {
            tr.truncate(len);
        }
        for occ in &mut gt.occluded {
            occ.truncate(len);
        }
        gt
    }
}

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Raster {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Membership of a projected point: the pixel containing `(u, v)`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        if !(u.is_finite() && v.is_finite()) {
            return false;
        }
        self.get(u.floor() as i64, v.floor() as i64)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }
}

/// Instance masks of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFrame {
    pub t: usize,
    pub masks: Vec<Raster>,
    pub tau: Vec<u8>,
}

/// Z-buffer over disk splats. Nearest depth wins, lowest index on ties.
pub struct ZBuffer {
    pub width: u32,
    pub height: u32,
    depth: Vec<f64>,
    owner: Vec<Option<usize>>,
}

impl ZBuffer {
    /// `projections[i]` is `None` for points behind the camera.
    pub fn build(
        projections: &[Option<(f64, f64, f64)>],
        width: u32,
        height: u32,
        radius: u32,
    ) -> Self {
        let n = width as usize * height as usize;
        let mut zb = Self {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            owner: vec![None; n],
        };
        let r = radius as i64;
        for (i, p) in projections.iter().enumerate() {
            let Some((u, v, d)) = *p else { continue };
            if !(u.is_finite() && v.is_finite()) {
                continue;
            }
            let (cx, cy) = (u.floor() as i64, v.floor() as i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    let idx = y as usize * width as usize + x as usize;
                    if d < zb.depth[idx] {
                        zb.depth[idx] = d;
                        zb.owner[idx] = Some(i);
                    }
                }
            }
        }
        zb
    }

    pub fn owner_at(&self, x: i64, y: i64) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        self.owner[y as usize * self.width as usize + x as usize]
    }

    pub fn depth_at(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return f64::INFINITY;
        }
        self.depth[y as usize * self.width as usize + x as usize]
    }
}

/// Per-point visibility under the z-buffer rule.
///
/// A point is hidden when it is behind the camera, projects outside the
/// image, or the pixel under it is won by a point of another group or by a
/// point nearer than `margin`.
pub fn visibility(
    projections: &[Option<(f64, f64, f64)>],
    labels: &[usize],
    width: u32,
    height: u32,
    radius: u32,
    margin: f64,
) -> (ZBuffer, Vec<bool>) {
    let zb = ZBuffer::build(projections, width, height, radius);
    let visible = projections
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let Some((u, v, d)) = *p else { return false };
            if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
                return false;
            }
            let (x, y) = (u.floor() as i64, v.floor() as i64);
            match zb.owner_at(x, y) {
                Some(o) if o == i => true,
                Some(o) => labels[o] == labels[i] && zb.depth_at(x, y) >= d - margin,
                None => false,
            }
        })
        .collect();
    (zb, visible)
}

/// Projects every mean; `None` when behind the camera.
pub fn project_all(means: &[Vec3], cam: &Camera) -> Vec<Option<(f64, f64, f64)>> {
    means.iter().map(|m| project_mean(m, cam).ok()).collect()
}

/// Masks and occlusion flags at timestep `t`.
pub fn rasterize_masks(
    scene: &DynamicScene,
    gt: &GroundTruth,
    t: usize,
    radius: u32,
    margin: f64,
) -> Result<(MaskFrame, Vec<bool>)> {
    let cam = scene
        .cameras
        .get(t)
        .ok_or(Error::TimestepOutOfRange {
            t,
            len: scene.cameras.len(),
        })?;
    let means = scene.deformed_means(t)?;
    let projections = project_all(&means, cam);
    let (zb, visible) = visibility(&projections, &gt.labels, cam.width, cam.height, radius, margin);
    let mut masks = vec![Raster::new(cam.width, cam.height); gt.num_groups()];
    for y in 0..cam.height {
        for x in 0..cam.width {
            if let Some(o) = zb.owner_at(x as i64, y as i64) {
                masks[gt.labels[o]].set(x, y, true);
            }
        }
    }
    let occluded = visible.iter().map(|v| !v).collect();
    Ok((
        MaskFrame {
            t,
            masks,
            tau: gt.tau.clone(),
        },
        occluded,
    ))
}

fn twist_trajectory(
    center: Vec3,
    linear: Vec3,
    angular: Vec3,
    len: usize,
) -> Vec<Se3> {
    (0..len)
        .map(|t| {
            let tf = t as f64;
            let q = quat_exp(&(angular * tf));
            let r = Se3::new(q, Vec3::zeros());
            // rotate about the group center, then drift
            Se3::new(q, center - r.apply(&center) + linear * tf)
        })
        .collect()
}

fn random_twist(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Vec3, Vec3) {
    let v: [f64; 3] = UnitBall.sample(rng);
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let speed = rng.random_range(0.3..1.0) * cfg.max_angular_speed;
    let lin = Vec3::from(v) * cfg.amplitude;
    (lin, Vec3::from(axis) * speed)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q = Quat::new(
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
    );
    crate::se3::normalize_quat(q).unwrap_or_else(Quat::identity)
}

fn softmax_neg_sq(p: &Vec3, anchors: &[Vec3], scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = anchors
        .iter()
        .map(|a| -(p - a).norm_squared() / (scale * scale))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Renormalizes so the weights sum to exactly one after rounding.
fn renormalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
}

/// Generates the scene, its oracle labels, and occlusion flags.
pub fn generate_scene(cfg: &SynthConfig) -> Result<(DynamicScene, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.num_timesteps;
    let num_groups = cfg.groups.len();

    // basis ownership: rigid groups get one, non-rigid groups get two plus
    // any spare bases round-robin
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    let mut next = 0;
    for (k, g) in cfg.groups.iter().enumerate() {
        let n = if g.kind == GroupKind::Rigid { 1 } else { 2 };
        owned[k].extend(next..next + n);
        next += n;
    }
    let nonrigid: Vec<usize> = (0..num_groups)
        .filter(|&k| cfg.groups[k].kind == GroupKind::Nonrigid)
        .collect();
    if !nonrigid.is_empty() {
        for (i, b) in (next..cfg.num_bases).enumerate() {
            owned[nonrigid[i % nonrigid.len()]].push(b);
        }
    }

    let mut basis_traj: Vec<Vec<Se3>> = vec![vec![Se3::identity(); len]; cfg.num_bases];
    for (k, g) in cfg.groups.iter().enumerate() {
        let center = Vec3::from(g.center);
        for (j, &b) in owned[k].iter().enumerate() {
            let (lin, ang) = match &g.motion {
                MotionSpec::Random => random_twist(&mut rng, cfg),
                MotionSpec::Twist { linear, angular } => {
                    let (lin, ang) = (Vec3::from(*linear), Vec3::from(*angular));
                    if j == 0 {
                        (lin, ang)
                    } else {
                        // secondary bases of a scripted group deviate from its twist
                        let (dl, da) = random_twist(&mut rng, cfg);
                        (lin + dl, ang + da)
                    }
                }
            };
            basis_traj[b] = twist_trajectory(center, lin, ang, len);
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
        for traj in &mut basis_traj {
            for tf in traj.iter_mut() {
                let n = Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                tf.translation += n;
            }
        }
    }

    let mut gaussians = Vec::with_capacity(cfg.num_gaussians());
    let mut labels = Vec::with_capacity(cfg.num_gaussians());
    let mut id: GaussianId = 0;
    for (k, g) in cfg.groups.iter().enumerate() {
        let center = Vec3::from(g.center);
        let means: Vec<Vec3> = (0..g.count)
            .map(|_| {
                let p: [f64; 3] = UnitBall.sample(&mut rng);
                center + Vec3::from(p) * g.extent
            })
            .collect();
        // anchors spread along a random axis through the center
        let anchors: Vec<Vec3> = if g.kind == GroupKind::Nonrigid {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let axis = Vec3::from(axis);
            let m = owned[k].len();
            (0..m)
                .map(|j| {
                    let s = if m == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (m - 1) as f64 };
                    center + axis * (s * g.extent)
                })
                .collect()
        } else {
            Vec::new()
        };
        for mean in means {
            let mut w = vec![0.0; cfg.num_bases];
            match g.kind {
                GroupKind::Rigid => w[owned[k][0]] = 1.0,
                GroupKind::Nonrigid => {
                    let local = softmax_neg_sq(&mean, &anchors, g.extent);
                    for (j, &b) in owned[k].iter().enumerate() {
                        w[b] = local[j];
                    }
                    renormalize(&mut w);
                }
            }
            gaussians.push(GaussianCanonical::new(id, mean, random_rotation(&mut rng), w));
            labels.push(k);
            id += 1;
        }
    }

    let center = cfg.scene_center();
    let cameras = (0..len)
        .map(|t| {
            let a = cfg.orbit.start_angle + cfg.orbit.angular_speed * t as f64;
            let eye = center
                + Vec3::new(
                    cfg.orbit.radius * a.sin(),
                    cfg.orbit.height,
                    -cfg.orbit.radius * a.cos(),
                );
            Camera::look_at(eye, center, Vec3::y(), cfg.focal, cfg.width, cfg.height)
        })
        .collect::<Result<Vec<_>>>()?;

    let scene = DynamicScene::new(gaussians, MotionBasisSet::new(transpose(basis_traj))?, cameras)?;

    let tau: Vec<u8> = cfg.groups.iter().map(|g| g.kind.tau()).collect();
    let rigid_trajectories = cfg
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            (g.kind == GroupKind::Rigid)
                .then(|| (0..len).map(|t| *scene.motion.get(owned[k][0], t)).collect())
        })
        .collect();
    let mut gt = GroundTruth {
        ids: scene.ids(),
        labels,
        tau,
        rigid_trajectories,
        occluded: vec![Vec::with_capacity(len); scene.len()],
    };
    for t in 0..len {
        let (_, occ) = rasterize_masks(&scene, &gt, t, cfg.splat_radius, cfg.occlusion_margin)?;
        for (i, o) in occ.into_iter().enumerate() {
            gt.occluded[i].push(o);
        }
    }
    Ok((scene, gt))
}

fn transpose(per_basis: Vec<Vec<Se3>>) -> Vec<Vec<Se3>> {
    let len = per_basis.first().map_or(0, Vec::len);
    (0..len)
        .map(|t| per_basis.iter().map(|b| b[t]).collect())
        .collect()
}

/// All mask frames of a scene.
pub fn rasterize_all(
    scene: &DynamicScene,
    gt: &GroundTruth,
    radius: u32,
    margin: f64,
) -> Result<Vec<MaskFrame>> {
    (0..scene.num_timesteps())
        .map(|t| rasterize_masks(scene, gt, t, radius, margin).map(|(m, _)| m))
        .collect()
}

/// Injects per-gaussian drift into the listed gaussians.
///
/// For every basis, `copies` jittered duplicates are appended (same rotation,
/// translation offset by per-frame noise). Each perturbed gaussian moves a
/// random share of its dominant weight onto duplicates of that basis, so its
/// deformed mean wanders while the blended rotation is untouched. Offsets are
/// scaled so the RMS displacement over perturbed gaussians and frames equals
/// `sigma`.
pub fn inject_drift(
    scene: &DynamicScene,
    ids: &[GaussianId],
    sigma: f64,
    copies: usize,
    seed: u64,
) -> Result<DynamicScene> {
    if sigma <= 0.0 || ids.is_empty() || copies == 0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let b0 = scene.motion.num_bases();
    let len = scene.num_timesteps();
    let total = b0 * (1 + copies);

    // unit offsets per extra basis and frame
    let offsets: Vec<Vec<Vec3>> = (0..b0 * copies)
        .map(|_| {
            (0..len)
                .map(|_| Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
                .collect()
        })
        .collect();

    let index = scene.index_map();
    let mut gaussians = scene.gaussians.clone();
    for g in &mut gaussians {
        g.weights.resize(total, 0.0);
    }
    let mut shifts: Vec<(usize, Vec<f64>)> = Vec::new();
    for id in ids {
        let i = *index
            .get(id)
            .ok_or_else(|| Error::InvalidScene(format!("gaussian {id} not in scene")))?;
        let w = &mut gaussians[i].weights;
        let d = crate::scene::dominant_index(&w[..b0]);
        let share = rng.random_range(0.2..0.6) * w[d];
        let mut split: Vec<f64> = (0..copies).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = split.iter().sum();
        split.iter_mut().for_each(|v| *v *= share / s);
        w[d] -= share;
        for (c, v) in split.iter().enumerate() {
            w[b0 + d * copies + c] += v;
        }
        renormalize(w);
        shifts.push((i, split));
    }

    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, split) in &shifts {
        let d = crate::scene::dominant_index(&scene.gaussians[*i].weights);
        for t in 0..len {
            let disp: Vec3 = split
                .iter()
                .enumerate()
                .map(|(c, v)| offsets[d * copies + c][t] * *v)
                .sum();
            sq += disp.norm_squared();
            count += 1;
        }
    }
    let rms = (sq / count as f64).sqrt();
    let scale = if rms > 0.0 { sigma / rms } else { 0.0 };

    let frames = (0..len)
        .map(|t| {
            let row = scene.motion.at(t)?;
            let mut out = row.to_vec();
            for b in 0..b0 {
                for c in 0..copies {
                    let mut tf = row[b];
                    tf.translation += offsets[b * copies + c][t] * scale;
                    out.push(tf);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    DynamicScene::new(gaussians, MotionBasisSet::new(frames)?, scene.cameras.clone())
}

/// Gaussian noise of std `sigma` on every mean of a trajectory tensor.
pub fn perturb_means(
    traj: &crate::scene::TrajectoryTensor,
    sigma: f64,
    seed: u64,
) -> crate::scene::TrajectoryTensor {
    let mut out = traj.clone();
    if sigma <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    for seq in &mut out.values {
        for x in seq.iter_mut() {
            for v in x.iter_mut().take(3) {
                *v += normal.sample(&mut rng);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::scene_trajectories;

    fn single_rigid(motion: MotionSpec, amplitude: f64) -> SynthConfig {
        SynthConfig {
            groups: vec![GroupSpec {
                kind: GroupKind::Rigid,
                count: 20,
                center: [0.0, 0.0, 0.0],
                extent: 0.5,
                motion,
            }],
            num_bases: 1,
            num_timesteps: 6,
            amplitude,
            max_angular_speed: amplitude,
            ..Preset::TwoGroups.config(3)
        }
    }

    #[test]
    fn zero_amplitude_is_static() {
        let cfg = single_rigid(MotionSpec::Random, 0.0);
        let (scene, _) = generate_scene(&cfg).unwrap();
        let tr = scene_trajectories(&scene).unwrap();
        for seq in &tr.values {
            for x in seq {
                for k in 0..7 {
                    assert!((x[k] - seq[0][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_ramp() {
        let cfg = single_rigid(
            MotionSpec::Twist {
                linear: [1.0, 0.0, 0.0],
                angular: [0.0; 3],
            },
            0.0,
        );
        let (scene, gt) = generate_scene(&cfg).unwrap();
        for g in &scene.gaussians {
            for t in 0..6 {
                let (m, _) = crate::scene::deform_gaussian(g, &scene.motion, t).unwrap();
                let expect = g.mean + Vec3::new(t as f64, 0.0, 0.0);
                assert!((m - expect).norm() < 1e-12);
            }
        }
        assert!(gt.rigid_trajectories[0].is_some());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = Preset::TwoGroups.config(11);
        let a = serde_json::to_string(&generate_scene(&cfg).unwrap().0).unwrap();
        let b = serde_json::to_string(&generate_scene(&cfg).unwrap().0).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate_scene(&Preset::TwoGroups.config(12)).unwrap().0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_bases() {
        let mut cfg = Preset::TwoGroups.config(1);
        cfg.num_bases = 2;
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
        cfg.num_bases = 3;
        cfg.groups.clear();
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    fn axis_camera() -> Camera {
        Camera::new(100.0, (32.0, 24.0), Se3::identity(), 64, 48).unwrap()
    }

    fn point_scene(points: &[Vec3]) -> DynamicScene {
        let gaussians = points
            .iter()
            .enumerate()
            .map(|(i, p)| GaussianCanonical::new(i as u32, *p, Quat::identity(), vec![1.0]))
            .collect();
        DynamicScene::new(
            gaussians,
            MotionBasisSet::identity(1, 2).unwrap(),
            vec![axis_camera(); 2],
        )
        .unwrap()
    }

    fn gt_for(labels: Vec<usize>, groups: usize) -> GroundTruth {
        let n = labels.len();
        GroundTruth {
            ids: (0..n as u32).collect(),
            labels,
            tau: vec![1; groups],
            rigid_trajectories: vec![None; groups],
            occluded: vec![vec![false; 2]; n],
        }
    }

    #[test]
    fn single_disk_on_axis() {
        let scene = point_scene(&[Vec3::new(0.0, 0.0, 1.0)]);
        let (frame, occ) = rasterize_masks(&scene, &gt_for(vec![0], 1), 0, 2, 0.1).unwrap();
        let m = &frame.masks[0];
        // brute-force disk: integer offsets within radius 2 of pixel (32, 24)
        let mut expected = 0;
        for y in 0..48i64 {
            for x in 0..64i64 {
                let inside = (x - 32).pow(2) + (y - 24).pow(2) <= 4;
                assert_eq!(m.get(x, y), inside, "pixel ({x},{y})");
                expected += inside as usize;
                if inside {
                    assert!((30..=34).contains(&x) && (22..=26).contains(&y));
                }
            }
        }
        assert_eq!(m.count(), expected);
        assert_eq!(expected, 13);
        assert_eq!(occ, vec![false]);
    }

    #[test]
    fn nearer_group_owns_pixel() {
        let scene = point_scene(&[Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 1.0)]);
        let (frame, occ) = rasterize_masks(&scene, &gt_for(vec![0, 1], 2), 0, 2, 0.1).unwrap();
        assert!(frame.masks[1].get(32, 24));
        assert!(frame.masks[0].is_empty());
        assert_eq!(occ, vec![true, false]);
    }

    #[test]
    fn group_behind_camera_has_empty_mask() {
        let scene = point_scene(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)]);
        let (frame, occ) = rasterize_masks(&scene, &gt_for(vec![0, 1], 2), 0, 2, 0.1).unwrap();
        assert!(frame.masks[1].is_empty());
        assert_eq!(occ, vec![false, true]);
    }

    #[test]
    fn visible_gaussians_lie_in_own_mask() {
        for preset in Preset::ALL {
            let cfg = preset.config(5);
            let (scene, gt) = generate_scene(&cfg).unwrap();
            for t in [0, cfg.num_timesteps - 1] {
                let (frame, occ) = rasterize_masks(&scene, &gt, t, 2, 0.1).unwrap();
                let means = scene.deformed_means(t).unwrap();
                for (i, m) in means.iter().enumerate() {
                    if occ[i] {
                        continue;
                    }
                    let (u, v, _) = project_mean(m, &scene.cameras[t]).unwrap();
                    assert!(frame.masks[gt.labels[i]].contains(u, v));
                }
                // masks are disjoint
                for p in 0..frame.masks[0].data.len() {
                    assert!(frame.masks.iter().filter(|m| m.data[p]).count() <= 1);
                }
            }
        }
    }

    #[test]
    fn rigid_gt_reproduces_members() {
        let (scene, gt) = generate_scene(&Preset::RigidNonrigidMix.config(2)).unwrap();
        let index = scene.index_map();
        for (k, tr) in gt.rigid_trajectories.iter().enumerate() {
            let Some(tr) = tr else { continue };
            for id in gt.members(k) {
                let g = &scene.gaussians[index[&id]];
                for (t, phi) in tr.iter().enumerate() {
                    let (m, _) = scene.deformed(index[&id], t).unwrap();
                    assert!((m - phi.apply(&g.mean)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn drift_has_requested_rms() {
        let (scene, gt) = generate_scene(&Preset::TwoGroups.config(4)).unwrap();
        let ids = gt.members(0);
        let drifted = inject_drift(&scene, &ids, 0.01, 3, 9).unwrap();
        let index = scene.index_map();
        let mut sq = 0.0;
        let mut n = 0;
        for id in &ids {
            let i = index[id];
            for t in 0..scene.num_timesteps() {
                let a = scene.deformed(i, t).unwrap().0;
                let b = drifted.deformed(i, t).unwrap().0;
                sq += (a - b).norm_squared();
                n += 1;
            }
        }
        assert!(((sq / n as f64).sqrt() - 0.01).abs() < 1e-9);
        // untouched gaussians keep their trajectories
        let other = gt.members(1)[0];
        let i = index[&other];
        assert!((scene.deformed(i, 5).unwrap().0 - drifted.deformed(i, 5).unwrap().0).norm() < 1e-12);
    }
}
