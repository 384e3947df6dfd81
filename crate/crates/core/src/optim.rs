//! Group-wise refinement of motion bases and blend weights.
//!
//! The objective is a trajectory-fit data term plus per-group motion
//! regularizers: rigid groups are pulled towards a shared per-frame rigid
//! transform (refitted by Procrustes every few steps) and non-rigid groups
//! get a smoothness penalty on neighbouring blend weights.
//!
//! Parameters are basis translations, local axis-angle increments on basis
//! rotations, and blend weights (projected back to the simplex after each
//! step). Gradients are analytic; [`check_gradients`] compares them with
//! central finite differences.

use std::time::Instant;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{MemoryBank, MotionGroup};
use crate::rigidfit::{init_rigid_trajectory, RigidTrajectory};
use crate::scene::{dominant_index, DynamicScene, TrajectoryTensor};
use crate::se3::{rotate, Quat, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    GradientDescent,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimParams {
    pub lambda_rigid: f64,
    pub lambda_nr: f64,
    pub lambda_fit: f64,
    /// Neighbours per Gaussian in the non-rigid smoothness graph.
    pub nr_neighbors: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Stop once the relative decrease of one step falls below this.
    pub tolerance: f64,
    pub refit_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for OptimParams {
    fn default() -> Self {
        Self {
            lambda_rigid: 0.1,
            lambda_nr: 0.02,
            lambda_fit: 1.0,
            nr_neighbors: 5,
            learning_rate: 1.0,
            steps: 300,
            tolerance: 1e-10,
            refit_every: 10,
            optimizer: OptimizerKind::GradientDescent,
        }
    }
}

impl OptimParams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_rigid, self.lambda_nr, self.lambda_fit];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.refit_every == 0 {
            return Err(Error::Config("refit_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fit: f64,
    /// Unweighted sum of rigid losses over rigid groups.
    pub rigid: f64,
    /// Unweighted sum of smoothness losses over non-rigid groups.
    pub nr: f64,
    pub motion: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub step_size: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub initial: LossBreakdown,
    pub steps: Vec<StepRecord>,
    pub accepted_steps: usize,
    pub rigid_trajectories: Vec<RigidTrajectory>,
    pub wall_time_s: f64,
}

impl OptimReport {
    pub fn final_loss(&self) -> LossBreakdown {
        self.steps
            .iter()
            .rev()
            .find(|s| s.accepted)
            .map_or(self.initial, |s| s.loss)
    }
}

/// Directed k-nearest-neighbour pairs (scene indices) in canonical space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborGraph {
    pub pairs: Vec<(usize, usize)>,
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

pub fn build_neighbor_graph(
    scene: &DynamicScene,
    group: &MotionGroup,
    k: usize,
) -> Result<NeighborGraph> {
    let members = member_indices(scene, group)?;
    let mut pairs = Vec::new();
    for &g in &members {
        let mut d: Vec<(f64, usize)> = members
            .iter()
            .filter(|&&h| h != g)
            .map(|&h| ((scene.gaussians[g].mean - scene.gaussians[h].mean).norm_squared(), h))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.extend(d.into_iter().take(k).map(|(_, h)| (g, h)));
    }
    Ok(NeighborGraph { pairs })
}

/// `Σ_t Σ_g ‖μ_{t,g} − Φ_t(μ_g)‖²` over the members of a rigid group.
pub fn rigid_loss(
    scene: &DynamicScene,
    group: &MotionGroup,
    rigid: &RigidTrajectory,
) -> Result<f64> {
    if rigid.transforms.len() != scene.num_timesteps() {
        return Err(Error::TrajectoryMismatch(format!(
            "rigid trajectory has {} frames, scene has {}",
            rigid.transforms.len(),
            scene.num_timesteps()
        )));
    }
    let members = member_indices(scene, group)?;
    let mut total = 0.0;
    for (t, phi) in rigid.transforms.iter().enumerate() {
        for &i in &members {
            let (mu, _) = scene.deformed(i, t)?;
            total += (mu - phi.apply(&scene.gaussians[i].mean)).norm_squared();
        }
    }
    Ok(total)
}

/// `Σ_(g, g') ‖w_g − w_g'‖²` over directed neighbour pairs.
pub fn nonrigid_loss(scene: &DynamicScene, graph: &NeighborGraph) -> f64 {
    graph
        .pairs
        .iter()
        .map(|&(a, b)| {
            scene.gaussians[a]
                .weights
                .iter()
                .zip(&scene.gaussians[b].weights)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum()
}

/// Motion regularizer of one group, by kind.
fn group_graph(scene: &DynamicScene, group: &MotionGroup, k: usize) -> Result<NeighborGraph> {
    if group.len() < 2 {
        if !group.is_empty() {
            warn!("non-rigid group with a single member has no smoothness term");
        }
        return Ok(NeighborGraph::default());
    }
    build_neighbor_graph(scene, group, k)
}

fn find_rigid(rigid: &[RigidTrajectory], k: usize) -> Result<&RigidTrajectory> {
    rigid
        .iter()
        .find(|r| r.group == k)
        .ok_or(Error::MissingRigidTrajectory(k))
}

/// `Σ_k [τ_k λ_rigid L_rigid + (1 − τ_k) λ_nr L_nr]`.
pub fn motion_loss(
    scene: &DynamicScene,
    bank: &MemoryBank,
    rigid: &[RigidTrajectory],
    params: &OptimParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (k, g) in bank.groups.iter().enumerate() {
        if g.is_rigid() {
            total += params.lambda_rigid * rigid_loss(scene, g, find_rigid(rigid, k)?)?;
        } else {
            let graph = group_graph(scene, g, params.nr_neighbors)?;
            total += params.lambda_nr * nonrigid_loss(scene, &graph);
        }
    }
    Ok(total)
}

/// Observed row for every scene gaussian.
fn observed_rows(scene: &DynamicScene, observed: &TrajectoryTensor) -> Result<Vec<usize>> {
    if observed.num_timesteps() != scene.num_timesteps() {
        return Err(Error::TrajectoryMismatch(format!(
            "observed has {} frames, scene has {}",
            observed.num_timesteps(),
            scene.num_timesteps()
        )));
    }
    let index = observed.index_map();
    scene
        .gaussians
        .iter()
        .map(|g| {
            index
                .get(&g.id)
                .copied()
                .ok_or_else(|| Error::TrajectoryMismatch(format!("gaussian {} not observed", g.id)))
        })
        .collect()
}

/// Mean squared distance between deformed and observed means over N·T.
pub fn fit_loss(scene: &DynamicScene, observed: &TrajectoryTensor) -> Result<f64> {
    let rows = observed_rows(scene, observed)?;
    let mut total = 0.0;
    for t in 0..scene.num_timesteps() {
        let means = scene.deformed_means(t)?;
        for (mu, &r) in means.iter().zip(&rows) {
            total += (mu - observed.mean(r, t)).norm_squared();
        }
    }
    Ok(total / (scene.len() * scene.num_timesteps()).max(1) as f64)
}

/// Gradient of the objective with respect to all refinable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradient {
    /// `[t][b]`
    pub translation: Vec<Vec<Vec3>>,
    /// Local axis-angle increments, `[t][b]`.
    pub rotation: Vec<Vec<Vec3>>,
    /// `[i][b]`
    pub weights: Vec<Vec<f64>>,
}

impl SceneGradient {
    fn zeros(len: usize, bases: usize, n: usize) -> Self {
        Self {
            translation: vec![vec![Vec3::zeros(); bases]; len],
            rotation: vec![vec![Vec3::zeros(); bases]; len],
            weights: vec![vec![0.0; bases]; n],
        }
    }

    /// Flattened as translations, rotations, weights.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for row in self.translation.iter().chain(&self.rotation) {
            for v in row {
                out.extend_from_slice(v.as_slice());
            }
        }
        for w in &self.weights {
            out.extend_from_slice(w);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Everything that stays fixed between parameter updates.
struct Objective<'a> {
    params: &'a OptimParams,
    rows: Vec<usize>,
    observed: &'a TrajectoryTensor,
    /// `(scene index, rigid trajectory)` for members of rigid groups.
    rigid_members: Vec<(usize, usize)>,
    rigid: Vec<RigidTrajectory>,
    graphs: Vec<NeighborGraph>,
}

impl<'a> Objective<'a> {
    fn new(
        scene: &DynamicScene,
        bank: &MemoryBank,
        observed: &'a TrajectoryTensor,
        params: &'a OptimParams,
    ) -> Result<Self> {
        let rows = observed_rows(scene, observed)?;
        let mut graphs = Vec::new();
        for g in bank.groups.iter().filter(|g| !g.is_rigid()) {
            graphs.push(group_graph(scene, g, params.nr_neighbors)?);
        }
        let mut obj = Self {
            params,
            rows,
            observed,
            rigid_members: Vec::new(),
            rigid: Vec::new(),
            graphs,
        };
        obj.refit(scene, bank)?;
        Ok(obj)
    }

    fn refit(&mut self, scene: &DynamicScene, bank: &MemoryBank) -> Result<()> {
        self.rigid.clear();
        self.rigid_members.clear();
        for (k, g) in bank.groups.iter().enumerate().filter(|(_, g)| g.is_rigid()) {
            let slot = self.rigid.len();
            self.rigid.push(init_rigid_trajectory(scene, g, k)?);
            for i in member_indices(scene, g)? {
                self.rigid_members.push((i, slot));
            }
        }
        Ok(())
    }

    fn evaluate(&self, scene: &DynamicScene, want_grad: bool) -> (LossBreakdown, Option<SceneGradient>) {
        let p = self.params;
        let n = scene.len();
        let len = scene.num_timesteps();
        let nb = scene.motion.num_bases();
        let fit_scale = 1.0 / (n * len).max(1) as f64;
        let mut rigid_slot = vec![None; n];
        for &(i, slot) in &self.rigid_members {
            rigid_slot[i] = Some(slot);
        }

        // frames are independent; partial sums are combined in frame order
        let per_frame: Vec<FrameResult> = (0..len)
            .into_par_iter()
            .map(|t| {
                let bases = scene.motion.frames()[t].as_slice();
                let mut out = FrameResult {
                    fit: 0.0,
                    rigid: 0.0,
                    grad_t: vec![Vec3::zeros(); if want_grad { nb } else { 0 }],
                    grad_q: vec![Quat::new(0.0, 0.0, 0.0, 0.0); if want_grad { nb } else { 0 }],
                    grad_w: if want_grad { vec![0.0; n * nb] } else { Vec::new() },
                };
                for (i, g) in scene.gaussians.iter().enumerate() {
                    let blend = Blend::new(&g.weights, bases);
                    let mu = rotate(&blend.q_hat, &g.mean) + blend.t;
                    let r_fit = mu - self.observed.mean(self.rows[i], t);
                    out.fit += r_fit.norm_squared();
                    let mut g_mu = r_fit * (2.0 * p.lambda_fit * fit_scale);
                    if let Some(slot) = rigid_slot[i] {
                        let r = mu - self.rigid[slot].transforms[t].apply(&g.mean);
                        out.rigid += r.norm_squared();
                        g_mu += r * (2.0 * p.lambda_rigid);
                    }
                    if want_grad {
                        blend.backward(&g.weights, bases, &g.mean, &g_mu, &mut out, i * nb);
                    }
                }
                out
            })
            .collect();

        let fit: f64 = per_frame.iter().map(|f| f.fit).sum::<f64>() * fit_scale;
        let rigid: f64 = per_frame.iter().map(|f| f.rigid).sum();
        let nr: f64 = self.graphs.iter().map(|g| nonrigid_loss(scene, g)).sum();
        let motion = p.lambda_rigid * rigid + p.lambda_nr * nr;
        let loss = LossBreakdown {
            fit,
            rigid,
            nr,
            motion,
            total: p.lambda_fit * fit + motion,
        };
        if !want_grad {
            return (loss, None);
        }

        let mut grad = SceneGradient::zeros(len, nb, n);
        for (t, f) in per_frame.iter().enumerate() {
            grad.translation[t].copy_from_slice(&f.grad_t);
            for b in 0..nb {
                // d q_b / d δ_j = ½ q_b ⊗ (0, e_j) at δ = 0
                let q = scene.motion.get(b, t).rotation();
                let gq = &f.grad_q[b];
                for j in 0..3 {
                    let mut e = Vec3::zeros();
                    e[j] = 0.5;
                    let dq = q * Quat::from_imag(e);
                    grad.rotation[t][b][j] = gq.dot(&dq);
                }
            }
            for i in 0..n {
                for b in 0..nb {
                    grad.weights[i][b] += f.grad_w[i * nb + b];
                }
            }
        }
        for graph in &self.graphs {
            for &(a, b) in &graph.pairs {
                let (wa, wb) = (&scene.gaussians[a].weights, &scene.gaussians[b].weights);
                for c in 0..nb {
                    let d = 2.0 * p.lambda_nr * (wa[c] - wb[c]);
                    grad.weights[a][c] += d;
                    grad.weights[b][c] -= d;
                }
            }
        }
        (loss, Some(grad))
    }
}

struct FrameResult {
    fit: f64,
    rigid: f64,
    grad_t: Vec<Vec3>,
    grad_q: Vec<Quat>,
    grad_w: Vec<f64>,
}

/// Forward pass of the quaternion blend, kept for the backward pass.
struct Blend {
    signs: Vec<f64>,
    q_tilde: Quat,
    q_hat: Quat,
    t: Vec3,
}

impl Blend {
    fn new(weights: &[f64], bases: &[crate::se3::Se3]) -> Self {
        let q_ref = *bases[dominant_index(weights)].rotation();
        let mut q_tilde = Quat::new(0.0, 0.0, 0.0, 0.0);
        let mut t = Vec3::zeros();
        let mut signs = Vec::with_capacity(bases.len());
        for (w, b) in weights.iter().zip(bases) {
            let s = if b.rotation().dot(&q_ref) < 0.0 { -1.0 } else { 1.0 };
            signs.push(s);
            q_tilde += b.rotation() * (w * s);
            t += b.translation * *w;
        }
        let q_hat = q_tilde / q_tilde.norm();
        Self {
            signs,
            q_tilde,
            q_hat,
            t,
        }
    }

    /// Accumulates `∂L/∂(t_b, q_b, w_b)` given `g_mu = ∂L/∂μ`.
    fn backward(
        &self,
        weights: &[f64],
        bases: &[crate::se3::Se3],
        v: &Vec3,
        g_mu: &Vec3,
        out: &mut FrameResult,
        w_offset: usize,
    ) {
        let (w, u) = (self.q_hat.w, self.q_hat.imag());
        // μ = v + 2w(u×v) + 2u×(u×v) + t
        let g_w = 2.0 * u.cross(v).dot(g_mu);
        let g_u = 2.0 * w * v.cross(g_mu) + 2.0 * u.dot(v) * g_mu + 2.0 * u.dot(g_mu) * v
            - 4.0 * v.dot(g_mu) * u;
        let g_hat = Quat::from_parts(g_w, g_u);
        let radial = self.q_hat.dot(&g_hat);
        let g_tilde = (g_hat - self.q_hat * radial) / self.q_tilde.norm();
        for (b, base) in bases.iter().enumerate() {
            out.grad_t[b] += g_mu * weights[b];
            out.grad_q[b] += g_tilde * (weights[b] * self.signs[b]);
            out.grad_w[w_offset + b] += base.translation.dot(g_mu)
                + self.signs[b] * base.rotation().dot(&g_tilde);
        }
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, x) in sorted.iter().enumerate() {
        cum += x;
        let candidate = (cum - 1.0) / (j + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let s: f64 = out.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 0.0 {
        out.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Moves parameters by `-eta * direction` (flat layout of [`SceneGradient::to_flat`]).
fn apply_step(scene: &DynamicScene, direction: &[f64], eta: f64, project: bool) -> Result<DynamicScene> {
    let len = scene.num_timesteps();
    let nb = scene.motion.num_bases();
    let mut out = scene.clone();
    let rot_offset = len * nb * 3;
    let w_offset = 2 * rot_offset;
    for t in 0..len {
        for b in 0..nb {
            let k = (t * nb + b) * 3;
            let dt = Vec3::new(direction[k], direction[k + 1], direction[k + 2]);
            let dr = Vec3::new(
                direction[rot_offset + k],
                direction[rot_offset + k + 1],
                direction[rot_offset + k + 2],
            );
            let mut tf = scene.motion.get(b, t).with_local_rotation(&(-eta * dr));
            tf.translation -= eta * dt;
            out.motion.set(b, t, tf);
        }
    }
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        let row = &direction[w_offset + i * nb..w_offset + (i + 1) * nb];
        let stepped: Vec<f64> = g.weights.iter().zip(row).map(|(w, d)| w - eta * d).collect();
        g.weights = if project { project_simplex(&stepped) } else { stepped };
    }
    if out.motion.frames().iter().flatten().any(|tf| !tf.is_finite()) {
        return Err(Error::Numerical("non-finite basis after update".into()));
    }
    Ok(out)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        g.iter()
            .enumerate()
            .map(|(j, gj)| {
                self.m[j] = B1 * self.m[j] + (1.0 - B1) * gj;
                self.v[j] = B2 * self.v[j] + (1.0 - B2) * gj * gj;
                (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + 1e-12)
            })
            .collect()
    }
}

/// Total objective (breakdown) of a scene with rigid anchors fitted to it.
pub fn total_loss(
    scene: &DynamicScene,
    bank: &MemoryBank,
    observed: &TrajectoryTensor,
    params: &OptimParams,
) -> Result<LossBreakdown> {
    let obj = Objective::new(scene, bank, observed, params)?;
    Ok(obj.evaluate(scene, false).0)
}

/// Analytic gradient of the objective with rigid anchors fitted to `scene`.
pub fn gradient(
    scene: &DynamicScene,
    bank: &MemoryBank,
    observed: &TrajectoryTensor,
    params: &OptimParams,
) -> Result<(LossBreakdown, SceneGradient)> {
    let obj = Objective::new(scene, bank, observed, params)?;
    let (loss, grad) = obj.evaluate(scene, true);
    Ok((loss, grad.expect("gradient requested")))
}

/// Decreases below this count as converged whatever the loss scale.
const ABS_DECREASE_FLOOR: f64 = 1e-14;

/// Backtracking descent on the group-wise objective.
pub fn refine(
    scene: &DynamicScene,
    bank: &MemoryBank,
    observed: &TrajectoryTensor,
    params: &OptimParams,
) -> Result<(DynamicScene, OptimReport)> {
    params.validate()?;
    let started = Instant::now();
    let mut current = scene.clone();
    let mut obj = Objective::new(&current, bank, observed, params)?;
    let (mut loss, _) = obj.evaluate(&current, false);
    let mut report = OptimReport {
        initial: loss,
        ..Default::default()
    };
    let mut adam = Adam {
        m: Vec::new(),
        v: Vec::new(),
        step: 0,
    };
    let mut last_eta = params.learning_rate / 2.0;
    for step in 0..params.steps {
        if step > 0 && step % params.refit_every == 0 {
            obj.refit(&current, bank)?;
            loss = obj.evaluate(&current, false).0;
        }
        let (_, grad) = obj.evaluate(&current, true);
        let flat = grad.expect("gradient requested").to_flat();
        let grad_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "refine step {step}: loss {} gradient norm {grad_norm}",
                loss.total
            )));
        }
        let direction = match params.optimizer {
            OptimizerKind::GradientDescent => flat,
            OptimizerKind::Adam => adam.direction(&flat),
        };
        let mut eta = (2.0 * last_eta).min(params.learning_rate);
        let mut accepted = None;
        if grad_norm > 0.0 {
            for _ in 0..=20 {
                let trial = apply_step(&current, &direction, eta, true)?;
                let trial_loss = obj.evaluate(&trial, false).0;
                if trial_loss.total.is_finite() && trial_loss.total < loss.total {
                    accepted = Some((trial, trial_loss));
                    break;
                }
                eta *= 0.5;
            }
        }
        let Some((next, next_loss)) = accepted else {
            report.steps.push(StepRecord {
                step,
                loss,
                grad_norm,
                step_size: 0.0,
                accepted: false,
            });
            debug!("refine: no descent at step {step}, stopping");
            break;
        };
        let decrease = loss.total - next_loss.total;
        let previous = loss.total;
        current = next;
        loss = next_loss;
        last_eta = eta;
        report.accepted_steps += 1;
        report.steps.push(StepRecord {
            step,
            loss,
            grad_norm,
            step_size: eta,
            accepted: true,
        });
        if decrease <= params.tolerance * previous + ABS_DECREASE_FLOOR {
            break;
        }
    }
    obj.refit(&current, bank)?;
    report.rigid_trajectories = obj.rigid.clone();
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((current, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub translation: f64,
    pub rotation: f64,
    pub weights: f64,
    pub probes: usize,
}

/// Relative error, falling back to absolute error for tiny magnitudes.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient with central differences at `probes`
/// random coordinates (translations, rotation increments and weights in turn).
pub fn check_gradients(
    scene: &DynamicScene,
    bank: &MemoryBank,
    observed: &TrajectoryTensor,
    params: &OptimParams,
    probes: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let obj = Objective::new(scene, bank, observed, params)?;
    let (_, grad) = obj.evaluate(scene, true);
    let analytic = grad.expect("gradient requested").to_flat();
    let len = scene.num_timesteps();
    let nb = scene.motion.num_bases();
    let block = len * nb * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradientCheck {
        probes,
        ..Default::default()
    };
    for p in 0..probes {
        let kind = p % 3;
        let (coord, value) = match kind {
            0 => {
                let c = rng.random_range(0..block);
                let (t, b, a) = (c / (nb * 3), (c / 3) % nb, c % 3);
                (c, scene.motion.get(b, t).translation[a])
            }
            1 => (block + rng.random_range(0..block), 0.0),
            _ => {
                let c = rng.random_range(0..scene.len() * nb);
                (2 * block + c, scene.gaussians[c / nb].weights[c % nb])
            }
        };
        let h = 1e-5 * value.abs().max(1.0);
        let mut dir = vec![0.0; analytic.len()];
        dir[coord] = 1.0;
        let plus = obj.evaluate(&apply_step(scene, &dir, -h, false)?, false).0.total;
        let minus = obj.evaluate(&apply_step(scene, &dir, h, false)?, false).0.total;
        let numeric = (plus - minus) / (2.0 * h);
        let err = gradient_error(analytic[coord], numeric);
        let slot = match kind {
            0 => &mut out.translation,
            1 => &mut out.rotation,
            _ => &mut out.weights,
        };
        *slot = slot.max(err);
        out.max_rel_error = out.max_rel_error.max(err);
    }
    Ok(out)
}

/// Largest change of any pairwise member distance relative to canonical
/// space, over all frames.
pub fn max_distance_distortion(scene: &DynamicScene, group: &MotionGroup) -> Result<f64> {
    let members = member_indices(scene, group)?;
    let mut worst: f64 = 0.0;
    for t in 0..scene.num_timesteps() {
        let means = scene.deformed_means(t)?;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let canon = (scene.gaussians[i].mean - scene.gaussians[j].mean).norm();
                worst = worst.max(((means[i] - means[j]).norm() - canon).abs());
            }
        }
    }
    Ok(worst)
}
