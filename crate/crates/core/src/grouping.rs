//! Motion-aware grouping of Gaussians into rigid / non-rigid groups.
//!
//! Three strategies share one memory-bank representation:
//! - [`group_naive4d`]: per-frame projection association gated by the
//!   shared-Gaussian overlap ratio,
//! - [`group_scene`]: keyframe seeding from front-most Gaussians alternated
//!   with feature-space region growing, then KNN-vote reassignment,
//! - the building blocks ([`region_grow`], [`knn_vote_reassign`], ...) for
//!   custom schedules.
//!
//! Group indices follow mask identities. Every operation keeps groups
//! pairwise disjoint: a Gaussian keeps its first assignment.

use std::collections::{BTreeSet, HashMap};

use log::debug;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{project_mean, DynamicScene, GaussianId};
use crate::synth::{GroundTruth, MaskFrame};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionGroup {
    pub tau: u8,
    pub member_ids: BTreeSet<GaussianId>,
}

impl MotionGroup {
    pub fn is_rigid(&self) -> bool {
        self.tau == 1
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// Disjoint motion groups indexed by mask identity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub groups: Vec<MotionGroup>,
}

impl MemoryBank {
    pub fn with_groups(tau: &[u8]) -> Self {
        Self {
            groups: tau
                .iter()
                .map(|&tau| MotionGroup {
                    tau,
                    member_ids: BTreeSet::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group of each id, if assigned.
    pub fn assignment(&self) -> HashMap<GaussianId, usize> {
        let mut map = HashMap::new();
        for (k, g) in self.groups.iter().enumerate() {
            for id in &g.member_ids {
                map.insert(*id, k);
            }
        }
        map
    }

    pub fn group_of(&self, id: GaussianId) -> Option<usize> {
        self.groups.iter().position(|g| g.member_ids.contains(&id))
    }

    pub fn num_assigned(&self) -> usize {
        self.groups.iter().map(MotionGroup::len).sum()
    }

    /// Adds the ids not yet assigned to any group. Returns how many were added.
    pub fn insert_unassigned(
        &mut self,
        k: usize,
        ids: impl IntoIterator<Item = GaussianId>,
    ) -> usize {
        let assigned = self.assignment();
        let mut added = 0;
        for id in ids {
            if !assigned.contains_key(&id) && self.groups[k].member_ids.insert(id) {
                added += 1;
            }
        }
        added
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.groups
            .iter()
            .flat_map(|g| g.member_ids.iter())
            .all(|id| seen.insert(*id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingParams {
    /// Share of in-mask Gaussians, nearest first, used as seeds.
    pub front_fraction: f64,
    pub pca_dims: usize,
    pub pca_scale: f64,
    /// Multiplier on the mean intra-group KNN distance giving the growth radius.
    pub radius_multiplier: f64,
    pub knn_k: usize,
    pub overlap_threshold: f64,
    pub vote_k: usize,
    pub reassign_fraction: f64,
    pub keyframe_stride: usize,
    /// Gate keyframe merges in [`group_scene`] on the overlap threshold too.
    pub gate_keyframe_merge: bool,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            front_fraction: 0.4,
            pca_dims: 3,
            pca_scale: 0.3,
            radius_multiplier: 1.5,
            knn_k: 4,
            overlap_threshold: 0.5,
            vote_k: 8,
            reassign_fraction: 0.5,
            keyframe_stride: 3,
            gate_keyframe_merge: false,
        }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.front_fraction) {
            return Err(Error::Config("front_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reassign_fraction) {
            return Err(Error::Config("reassign_fraction must be in [0, 1]".into()));
        }
        if !(self.radius_multiplier >= 0.0) {
            return Err(Error::Config("radius_multiplier must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::Config("overlap_threshold must be in [0, 1]".into()));
        }
        if self.knn_k == 0 || self.vote_k == 0 || self.keyframe_stride == 0 {
            return Err(Error::Config("knn_k, vote_k and keyframe_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Projections (u, v, depth) of all deformed means at `t`; `None` behind the camera.
fn projections_at(scene: &DynamicScene, t: usize) -> Result<Vec<Option<(f64, f64, f64)>>> {
    let cam = scene.cameras.get(t).ok_or(Error::TimestepOutOfRange {
        t,
        len: scene.cameras.len(),
    })?;
    Ok(scene
        .deformed_means(t)?
        .iter()
        .map(|m| project_mean(m, cam).ok())
        .collect())
}

/// Ids whose projection at `frame.t` falls inside each mask.
pub fn associate_by_projection(
    scene: &DynamicScene,
    frame: &MaskFrame,
) -> Result<Vec<BTreeSet<GaussianId>>> {
    let proj = projections_at(scene, frame.t)?;
    Ok(frame
        .masks
        .iter()
        .map(|mask| {
            scene
                .gaussians
                .iter()
                .zip(&proj)
                .filter_map(|(g, p)| p.filter(|(u, v, _)| mask.contains(*u, *v)).map(|_| g.id))
                .collect()
        })
        .collect())
}

/// In-mask Gaussians of mask `k`, keeping the nearest `ceil(n * fraction)`
/// by depth (ties by id).
pub fn select_front_gaussians(
    scene: &DynamicScene,
    frame: &MaskFrame,
    k: usize,
    front_fraction: f64,
) -> Result<BTreeSet<GaussianId>> {
    let mask = frame
        .masks
        .get(k)
        .ok_or_else(|| Error::Dimension(format!("mask {k} missing in frame {}", frame.t)))?;
    let proj = projections_at(scene, frame.t)?;
    let mut inside: Vec<(f64, GaussianId)> = scene
        .gaussians
        .iter()
        .zip(&proj)
        .filter_map(|(g, p)| match p {
            Some((u, v, d)) if mask.contains(*u, *v) => Some((*d, g.id)),
            _ => None,
        })
        .collect();
    inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = (inside.len() as f64 * front_fraction).ceil() as usize;
    Ok(inside.into_iter().take(keep).map(|(_, id)| id).collect())
}

/// `|group ∩ new| / |new|`.
pub fn shared_overlap(group: &MotionGroup, new_set: &BTreeSet<GaussianId>) -> Result<f64> {
    if new_set.is_empty() {
        return Err(Error::UndefinedOverlap);
    }
    let shared = new_set.intersection(&group.member_ids).count();
    Ok(shared as f64 / new_set.len() as f64)
}

/// Memory-bank grouping by per-frame projection with overlap-gated merges.
pub fn group_naive4d(
    scene: &DynamicScene,
    frames: &[MaskFrame],
    params: &GroupingParams,
) -> Result<MemoryBank> {
    params.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("no mask frames given".into()))?;
    let mut bank = MemoryBank::with_groups(&first.tau);
    for (k, set) in associate_by_projection(scene, first)?.into_iter().enumerate() {
        bank.insert_unassigned(k, set);
    }
    for frame in &frames[1..] {
        let sets = associate_by_projection(scene, frame)?;
        for (k, set) in sets.into_iter().enumerate() {
            if set.is_empty() || k >= bank.len() {
                continue;
            }
            if shared_overlap(&bank.groups[k], &set)? >= params.overlap_threshold {
                bank.insert_unassigned(k, set);
            }
        }
    }
    Ok(bank)
}

/// Region-growing features `[canonical mean, pca_scale * PCA(weights)]`,
/// one row per gaussian in scene order.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub ids: Vec<GaussianId>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Principal axes of the blend-weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPca {
    pub mean: Vec<f64>,
    /// Unit component vectors by descending variance; zero for dropped ranks.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl WeightPca {
    pub fn fit(weights: &[&[f64]], dims: usize) -> Self {
        let b = weights.first().map_or(0, |w| w.len());
        let n = weights.len().max(1) as f64;
        let mut mean = vec![0.0; b];
        for w in weights {
            for (m, v) in mean.iter_mut().zip(w.iter()) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(b, b);
        for w in weights {
            for r in 0..b {
                let dr = w[r] - mean[r];
                for c in 0..b {
                    cov[(r, c)] += dr * (w[c] - mean[c]) / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
        let tol = 1e-12 * top.max(1e-300).max(1.0);
        let dims = dims.min(b);
        let mut components = Vec::with_capacity(dims);
        let mut eigenvalues = Vec::with_capacity(dims);
        for &i in order.iter().take(dims) {
            let lambda = eig.eigenvalues[i];
            if lambda > tol {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                // sign rule: largest-magnitude loading is positive (first on ties)
                let mut pivot = 0;
                for (j, x) in v.iter().enumerate() {
                    if x.abs() > v[pivot].abs() {
                        pivot = j;
                    }
                }
                if v[pivot] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                components.push(v);
                eigenvalues.push(lambda);
            } else {
                components.push(vec![0.0; b]);
                eigenvalues.push(0.0);
            }
        }
        Self {
            mean,
            components,
            eigenvalues,
        }
    }

    pub fn project(&self, w: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(w).zip(&self.mean).map(|((c, w), m)| c * (w - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }
}

pub fn compute_features(scene: &DynamicScene, params: &GroupingParams) -> Features {
    let weights: Vec<&[f64]> = scene.gaussians.iter().map(|g| g.weights.as_slice()).collect();
    let pca = WeightPca::fit(&weights, params.pca_dims);
    let dim = 3 + pca.components.len();
    let mut data = Vec::with_capacity(scene.len() * dim);
    for g in &scene.gaussians {
        data.extend_from_slice(g.mean.as_slice());
        data.extend(pca.project(&g.weights).into_iter().map(|v| v * params.pca_scale));
    }
    Features {
        ids: scene.ids(),
        dim,
        data,
    }
}

/// Mean distance from `i` to its `k` nearest points among `pool` (excluding itself).
fn mean_knn_distance(features: &Features, i: usize, pool: &[usize], k: usize) -> Option<f64> {
    let mut d: Vec<f64> = pool
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| features.dist(i, j))
        .collect();
    if d.is_empty() {
        return None;
    }
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Some(d[..k].iter().sum::<f64>() / k as f64)
}

/// Growth radius `alpha * mean_g(mean distance to its knn_k nearest in-group
/// neighbours)`. Groups with fewer than two members fall back to the same
/// statistic over all Gaussians.
pub fn adaptive_radius(features: &Features, members: &[usize], knn_k: usize, alpha: f64) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    if members.len() < 2 {
        let all: Vec<usize> = (0..features.len()).collect();
        let global = global_mean_knn(features, &all, knn_k);
        debug!("singleton group, falling back to global radius {global}");
        return alpha * global;
    }
    alpha * global_mean_knn(features, members, knn_k)
}

fn global_mean_knn(features: &Features, pool: &[usize], knn_k: usize) -> f64 {
    let vals: Vec<f64> = pool
        .iter()
        .filter_map(|&i| mean_knn_distance(features, i, pool, knn_k))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn member_indices(bank: &MemoryBank, index: &HashMap<GaussianId, usize>) -> Vec<Vec<usize>> {
    bank.groups
        .iter()
        .map(|g| g.member_ids.iter().filter_map(|id| index.get(id).copied()).collect())
        .collect()
}

fn feature_index(features: &Features) -> HashMap<GaussianId, usize> {
    features.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect()
}

/// Feature-space region growing to a fixed point. Returns the number of sweeps.
///
/// Each sweep recomputes every group's radius, then lets groups in index
/// order absorb unassigned Gaussians closer than their radius to any member.
pub fn region_grow(bank: &mut MemoryBank, features: &Features, params: &GroupingParams) -> usize {
    let index = feature_index(features);
    let mut assigned = vec![false; features.len()];
    let mut members = member_indices(bank, &index);
    for m in members.iter().flatten() {
        assigned[*m] = true;
    }
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut changed = false;
        for k in 0..bank.len() {
            if members[k].is_empty() {
                continue;
            }
            let eps = adaptive_radius(features, &members[k], params.knn_k, params.radius_multiplier);
            let absorbed: Vec<usize> = (0..features.len())
                .filter(|&u| !assigned[u])
                .filter(|&u| members[k].iter().any(|&g| features.dist(u, g) < eps))
                .collect();
            for &u in &absorbed {
                assigned[u] = true;
                members[k].push(u);
                bank.groups[k].member_ids.insert(features.ids[u]);
            }
            changed |= !absorbed.is_empty();
        }
        if !changed {
            return sweeps;
        }
    }
}

/// Labels unassigned Gaussians by majority vote of their `vote_k` nearest
/// labeled neighbours, committing only the closest `reassign_fraction` of
/// them (by mean neighbour distance). Vote ties go to the group of the
/// nearest tied neighbour. Returns the number of committed Gaussians.
pub fn knn_vote_reassign(
    bank: &mut MemoryBank,
    features: &Features,
    vote_k: usize,
    reassign_fraction: f64,
) -> Result<usize> {
    let index = feature_index(features);
    let assignment = bank.assignment();
    let labeled: Vec<(usize, usize)> = features
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| assignment.get(id).map(|&k| (i, k)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::NoLabeledGaussians);
    }
    let unassigned: Vec<usize> = (0..features.len())
        .filter(|i| !assignment.contains_key(&features.ids[*i]))
        .collect();
    let mut candidates: Vec<(f64, GaussianId, usize)> = Vec::with_capacity(unassigned.len());
    for &u in &unassigned {
        let mut neigh: Vec<(f64, usize, usize)> = labeled
            .iter()
            .map(|&(j, k)| (features.dist(u, j), j, k))
            .collect();
        neigh.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neigh.truncate(vote_k.min(neigh.len()));
        let mut votes = vec![0usize; bank.len()];
        for (_, _, k) in &neigh {
            votes[*k] += 1;
        }
        let top = *votes.iter().max().unwrap_or(&0);
        let winner = neigh
            .iter()
            .find(|(_, _, k)| votes[*k] == top)
            .map(|(_, _, k)| *k)
            .unwrap_or(0);
        let mean = neigh.iter().map(|n| n.0).sum::<f64>() / neigh.len() as f64;
        candidates.push((mean, features.ids[u], winner));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let commit = (candidates.len() as f64 * reassign_fraction).ceil() as usize;
    let _ = index;
    for (_, id, k) in candidates.iter().take(commit) {
        bank.groups[*k].member_ids.insert(*id);
    }
    Ok(commit.min(candidates.len()))
}

/// Keyframes `0, stride, 2*stride, ...` among the frames given.
pub fn keyframes(frames: &[MaskFrame], stride: usize) -> Vec<usize> {
    (0..frames.len()).step_by(stride.max(1)).collect()
}

/// Full motion-aware grouping: seed at the first keyframe, alternate region
/// growing with keyframe seeding, then vote the leftovers.
pub fn group_scene(
    scene: &DynamicScene,
    frames: &[MaskFrame],
    params: &GroupingParams,
) -> Result<MemoryBank> {
    params.validate()?;
    let keys = keyframes(frames, params.keyframe_stride);
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("no mask frames given".into()))?;
    let mut bank = MemoryBank::with_groups(&first.tau);
    for k in 0..first.masks.len() {
        let seeds = select_front_gaussians(scene, first, k, params.front_fraction)?;
        bank.insert_unassigned(k, seeds);
    }
    let features = compute_features(scene, params);
    for &key in &keys {
        let sweeps = region_grow(&mut bank, &features, params);
        debug!("keyframe {}: region growing took {sweeps} sweeps", frames[key].t);
        let frame = &frames[key];
        for k in 0..frame.masks.len().min(bank.len()) {
            let seeds = select_front_gaussians(scene, frame, k, params.front_fraction)?;
            if seeds.is_empty() {
                continue;
            }
            if params.gate_keyframe_merge
                && shared_overlap(&bank.groups[k], &seeds)? < params.overlap_threshold
            {
                continue;
            }
            bank.insert_unassigned(k, seeds);
        }
    }
    if bank.num_assigned() > 0 {
        knn_vote_reassign(&mut bank, &features, params.vote_k, params.reassign_fraction)?;
    }
    Ok(bank)
}

/// Fraction of ground-truth Gaussians whose assigned group matches their
/// label; unassigned Gaussians count as wrong.
pub fn label_accuracy(bank: &MemoryBank, gt: &GroundTruth) -> f64 {
    if gt.ids.is_empty() {
        return 1.0;
    }
    let assignment = bank.assignment();
    let correct = gt
        .ids
        .iter()
        .zip(&gt.labels)
        .filter(|(id, l)| assignment.get(id) == Some(l))
        .count();
    correct as f64 / gt.ids.len() as f64
}
