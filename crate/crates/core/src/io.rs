//! File formats: scene and checkpoint JSON, trajectory and label CSV, PLY
//! point clouds and PGM masks with a JSON index.
//!
//! JSON floats use serde_json's shortest round-trip form. CSV floats use 17
//! significant digits, which also round-trips every `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::forecast::{BankModels, TrainReport};
use crate::grouping::MemoryBank;
use crate::scene::{Camera, DynamicScene, GaussianCanonical, GaussianId, MotionBasisSet, TrajectoryTensor};
use crate::se3::{Se3, Vec3};
use crate::synth::{MaskFrame, Raster};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const TRAJECTORY_HEADER: &str = "gaussian_id,t,mx,my,mz,qw,qx,qy,qz";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::parse(
            what,
            format!("unsupported format_version {found}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    gaussians: Vec<GaussianCanonical>,
    /// `bases[t][b]`
    bases: Vec<Vec<Se3>>,
    cameras: Vec<Camera>,
}

pub fn scene_to_json(scene: &DynamicScene) -> Result<String> {
    to_json(&SceneFile {
        format_version: FORMAT_VERSION,
        gaussians: scene.gaussians.clone(),
        bases: scene.motion.frames().to_vec(),
        cameras: scene.cameras.clone(),
    })
}

pub fn scene_from_json(text: &str) -> Result<DynamicScene> {
    let f: SceneFile = serde_json::from_str(text).map_err(|e| Error::parse("scene JSON", e.to_string()))?;
    check_version(f.format_version, "scene JSON")?;
    DynamicScene::new(f.gaussians, MotionBasisSet::new(f.bases)?, f.cameras)
}

pub fn save_scene(path: &Path, scene: &DynamicScene) -> Result<()> {
    write_text(path, &scene_to_json(scene)?)
}

pub fn load_scene(path: &Path) -> Result<DynamicScene> {
    scene_from_json(&read_text(path)?)
}

/// One row per (gaussian, frame), gaussians in tensor order, absolute frame index.
pub fn trajectories_to_csv(traj: &TrajectoryTensor) -> String {
    let mut s = String::with_capacity(64 + traj.len() * traj.num_timesteps() * 200);
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for (id, seq) in traj.gaussian_ids.iter().zip(&traj.values) {
        for (t, x) in seq.iter().enumerate() {
            let _ = write!(s, "{id},{}", traj.start + t);
            for v in x {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn trajectories_from_csv(text: &str) -> Result<TrajectoryTensor> {
    let ctx = "trajectory CSV";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        _ => return Err(Error::parse(ctx, format!("expected header '{TRAJECTORY_HEADER}'"))),
    }
    let mut ids: Vec<GaussianId> = Vec::new();
    let mut rows: Vec<Vec<(usize, [f64; 7])>> = Vec::new();
    let mut index: BTreeMap<GaussianId, usize> = BTreeMap::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(Error::parse(ctx, format!("line {}: expected 9 fields, got {}", n + 1, fields.len())));
        }
        let bad = |what: &str| Error::parse(ctx, format!("line {}: invalid {what}", n + 1));
        let id: GaussianId = fields[0].parse().map_err(|_| bad("gaussian_id"))?;
        let t: usize = fields[1].parse().map_err(|_| bad("t"))?;
        let mut x = [0.0; 7];
        for (c, f) in fields[2..].iter().enumerate() {
            x[c] = f.parse().map_err(|_| bad("number"))?;
        }
        let slot = *index.entry(id).or_insert_with(|| {
            ids.push(id);
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[slot].push((t, x));
    }
    let start = rows.first().and_then(|r| r.iter().map(|(t, _)| *t).min()).unwrap_or(0);
    let mut values = Vec::with_capacity(rows.len());
    for (id, mut r) in ids.iter().zip(rows) {
        r.sort_by_key(|(t, _)| *t);
        if r.iter().enumerate().any(|(k, (t, _))| *t != start + k) {
            return Err(Error::parse(
                ctx,
                format!("gaussian {id} does not cover consecutive frames from {start}"),
            ));
        }
        values.push(r.into_iter().map(|(_, x)| x).collect());
    }
    TrajectoryTensor::new(ids, values, start)
}

pub fn save_trajectories(path: &Path, traj: &TrajectoryTensor) -> Result<()> {
    write_text(path, &trajectories_to_csv(traj))
}

pub fn load_trajectories(path: &Path) -> Result<TrajectoryTensor> {
    trajectories_from_csv(&read_text(path)?)
}

/// Deterministic color for group `k`; `None` (ungrouped) is gray.
pub fn group_color(k: Option<usize>) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [228, 26, 28],
        [55, 126, 184],
        [77, 175, 74],
        [152, 78, 163],
        [255, 127, 0],
        [166, 86, 40],
        [247, 129, 191],
        [23, 190, 207],
    ];
    match k {
        None => [128, 128, 128],
        Some(k) if k < PALETTE.len() => PALETTE[k],
        Some(k) => {
            // splitmix-style hash keeps larger indices stable and distinct
            let mut z = (k as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            [z as u8, (z >> 8) as u8, (z >> 16) as u8]
        }
    }
}

/// ASCII PLY with one colored vertex per point.
pub fn ply_string(points: &[Vec3], colors: &[[u8; 3]]) -> Result<String> {
    if points.len() != colors.len() {
        return Err(Error::Dimension(format!("{} points but {} colors", points.len(), colors.len())));
    }
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for (p, c) in points.iter().zip(colors) {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
    }
    Ok(s)
}

/// Deformed means of `scene` at `t`, colored by bank group.
pub fn scene_ply(scene: &DynamicScene, bank: Option<&MemoryBank>, t: usize) -> Result<String> {
    let means = scene.deformed_means(t)?;
    let assignment = bank.map(MemoryBank::assignment).unwrap_or_default();
    let colors: Vec<[u8; 3]> = scene
        .gaussians
        .iter()
        .map(|g| group_color(assignment.get(&g.id).copied()))
        .collect();
    ply_string(&means, &colors)
}

/// Vertex count declared in a PLY header.
pub fn ply_vertex_count(text: &str) -> Option<usize> {
    text.lines()
        .take_while(|l| *l != "end_header")
        .find_map(|l| l.strip_prefix("element vertex ").and_then(|n| n.trim().parse().ok()))
}

/// Binary PGM (P5), 0 or 255.
pub fn raster_to_pgm(r: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend(r.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn raster_from_pgm(bytes: &[u8]) -> Result<Raster> {
    let ctx = "PGM mask";
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(ctx, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::parse(ctx, "expected an 8-bit P5 image"));
    }
    let width: u32 = fields[1].parse().map_err(|_| Error::parse(ctx, "bad width"))?;
    let height: u32 = fields[2].parse().map_err(|_| Error::parse(ctx, "bad height"))?;
    let n = width as usize * height as usize;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(ctx, "pixel data shorter than the header says"))?;
    Ok(Raster {
        width,
        height,
        data: data.iter().map(|&b| b > 127).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub frame: usize,
    pub group: usize,
    /// Relative to the index file.
    pub path: String,
    pub tau: u8,
}

/// Writes one PGM per group and frame plus `index.json` into `dir`.
pub fn save_masks(dir: &Path, frames: &[MaskFrame]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for f in frames {
        for (k, (mask, &tau)) in f.masks.iter().zip(&f.tau).enumerate() {
            let name = format!("mask_t{:04}_g{:02}.pgm", f.t, k);
            let path = dir.join(&name);
            fs::write(&path, raster_to_pgm(mask)).map_err(|e| Error::io(&path, e))?;
            index.push(MaskIndexEntry {
                frame: f.t,
                group: k,
                path: name,
                tau,
            });
        }
    }
    let index_path = dir.join("index.json");
    write_json(&index_path, &index)?;
    Ok(index_path)
}

pub fn load_masks(index_path: &Path) -> Result<Vec<MaskFrame>> {
    let entries: Vec<MaskIndexEntry> = read_json(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut by_frame: BTreeMap<usize, Vec<(usize, u8, Raster)>> = BTreeMap::new();
    for e in entries {
        let path = base.join(&e.path);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        by_frame.entry(e.frame).or_default().push((e.group, e.tau, raster_from_pgm(&bytes)?));
    }
    by_frame
        .into_iter()
        .map(|(t, mut items)| {
            items.sort_by_key(|(k, _, _)| *k);
            if items.iter().enumerate().any(|(i, (k, _, _))| i != *k) {
                return Err(Error::parse("mask index", format!("frame {t} has non-contiguous group ids")));
            }
            Ok(MaskFrame {
                t,
                tau: items.iter().map(|(_, tau, _)| *tau).collect(),
                masks: items.into_iter().map(|(_, _, r)| r).collect(),
            })
        })
        .collect()
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let bank: MemoryBank = read_json(path)?;
    if !bank.is_disjoint() {
        return Err(Error::parse(path.display().to_string(), "motion groups overlap"));
    }
    Ok(bank)
}

/// `gaussian_id,group,tau`; ungrouped gaussians have empty group and tau.
pub fn labels_csv(ids: &[GaussianId], bank: &MemoryBank) -> String {
    let assignment = bank.assignment();
    let mut s = String::from("gaussian_id,group,tau\n");
    for id in ids {
        match assignment.get(id) {
            Some(&k) => {
                let _ = writeln!(s, "{id},{k},{}", bank.groups[k].tau);
            }
            None => {
                let _ = writeln!(s, "{id},,");
            }
        }
    }
    s
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    models: BankModels,
}

pub fn save_models(path: &Path, models: &BankModels) -> Result<()> {
    write_json(
        path,
        &CheckpointFile {
            format_version: FORMAT_VERSION,
            models: models.clone(),
        },
    )
}

pub fn load_models(path: &Path) -> Result<BankModels> {
    let f: CheckpointFile = read_json(path)?;
    check_version(f.format_version, "model checkpoint")?;
    for m in f.models.groups.iter().flatten().chain(&f.models.global) {
        m.validate()?;
    }
    Ok(f.models)
}

/// `epoch,total,pred,acc` per training epoch.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,total,pred,acc\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "{e},{:.16e},{:.16e},{:.16e}", l.total, l.pred, l.acc);
    }
    s
}
