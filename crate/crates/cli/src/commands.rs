use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{Map, Value};

use mogaf::forecast::{forecast_bank, train_bank};
use mogaf::grouping::{group_naive4d, group_scene, MemoryBank};
use mogaf::io;
use mogaf::metrics::{epe_per_horizon, evaluate, TrackingReport, VisibilityRule};
use mogaf::optim::refine;
use mogaf::pipeline::{run_pipeline_with, Ablation, Stage};
use mogaf::scene::{scene_trajectories, TrajectoryTensor};
use mogaf::synth::{generate_scene, rasterize_all};
use mogaf::{Error, Result};

use crate::config::{assignment_layer, env_layer, resolve, RunConfig};
use crate::{Cli, Command, Common, ExportFormat, GroupMethod};

fn flag_layer(common: &Common, ablate: Option<&str>) -> Result<Value> {
    let mut layer = assignment_layer(&common.set)?;
    let obj = layer.as_object_mut().expect("assignment layer is an object");
    if let Some(t) = common.threads {
        obj.insert("threads".into(), t.into());
    }
    if let Some(s) = common.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(p) = &common.preset {
        obj.insert("preset".into(), p.clone().into());
    }
    if let Some(a) = ablate {
        obj.insert("ablation".into(), a.into());
    }
    let mut fc = Map::new();
    if let Some(e) = common.epochs {
        fc.insert("epochs".into(), e.into());
    }
    if let Some(l) = common.layers {
        fc.insert("layers".into(), l.into());
    }
    if !fc.is_empty() {
        let slot = obj.entry("forecaster").or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(existing) = slot {
            existing.extend(fc);
        }
    }
    Ok(layer)
}

fn resolve_config(common: &Common, ablate: Option<&str>) -> Result<RunConfig> {
    let cfg = resolve(common.config.as_deref(), env_layer(std::env::vars()), flag_layer(common, ablate)?)?;
    cfg.pipeline.validate()?;
    if cfg.threads > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

fn write_resolved(dir: &Path, command: &str, inputs: &[(&'static str, &Path)], cfg: &RunConfig) -> Result<()> {
    let resolved = Resolved {
        command,
        inputs: inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
        config: cfg,
    };
    io::write_json(&dir.join("config.json"), &resolved)
}

fn horizon_csv(start: usize, curve: &[f64]) -> String {
    let mut s = String::from("step,t,epe\n");
    for (k, e) in curve.iter().enumerate() {
        s.push_str(&format!("{},{},{e:.16e}\n", k + 1, start + k));
    }
    s
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}

fn print_table(r: &TrackingReport) {
    println!("metric          value");
    println!("EPE             {:.6}", r.epe);
    println!("delta3d@0.10    {:.2}", r.delta3d_10);
    println!("delta3d@0.05    {:.2}", r.delta3d_05);
    println!("AJ              {}", pct(r.aj));
    println!("delta_avg (2D)  {:.2}", r.delta_avg_2d);
    println!("OA              {}", pct(r.oa));
    println!("points (3D/2D)  {}/{}", r.points_3d, r.points_2d);
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Generate { out, groups } => generate(common, &out, groups),
        Command::Group {
            scene,
            masks,
            out,
            method,
        } => {
            let cfg = resolve_config(common, None)?;
            let s = io::load_scene(&scene)?;
            let frames = io::load_masks(&masks)?;
            let bank = match method {
                GroupMethod::Scene => group_scene(&s, &frames, &cfg.pipeline.grouping)?,
                GroupMethod::Naive4d => group_naive4d(&s, &frames, &cfg.pipeline.grouping)?,
            };
            info!("{} groups, {} of {} gaussians assigned", bank.len(), bank.num_assigned(), s.len());
            write_resolved(&out, "group", &[("scene", &scene), ("masks", &masks)], &cfg)?;
            io::write_json(&out.join("bank.json"), &bank)?;
            io::write_text(&out.join("labels.csv"), &io::labels_csv(&s.ids(), &bank))
        }
        Command::Refine {
            scene,
            bank,
            observed,
            out,
        } => {
            let cfg = resolve_config(common, None)?;
            let s = io::load_scene(&scene)?;
            let b = io::load_bank(&bank)?;
            let obs = io::load_trajectories(&observed)?;
            let (refined, report) = refine(&s, &b, &obs, &cfg.pipeline.optim)?;
            info!(
                "loss {:.4e} -> {:.4e} in {} steps",
                report.initial.total,
                report.final_loss().total,
                report.accepted_steps
            );
            write_resolved(
                &out,
                "refine",
                &[("scene", &scene), ("bank", &bank), ("observed", &observed)],
                &cfg,
            )?;
            io::save_scene(&out.join("refined_scene.json"), &refined)?;
            io::write_json(&out.join("refine_report.json"), &report)
        }
        Command::Train { scene, bank, out } => {
            let cfg = resolve_config(common, None)?;
            let s = io::load_scene(&scene)?;
            let b = io::load_bank(&bank)?;
            let history = scene_trajectories(&s)?;
            let ungrouped = history.len() > b.num_assigned();
            let (models, reports) = train_bank(&history, &b, &cfg.pipeline.effective_forecaster(), ungrouped)?;
            write_resolved(&out, "train", &[("scene", &scene), ("bank", &bank)], &cfg)?;
            io::save_models(&out.join("models.json"), &models)?;
            for (k, r) in reports.iter().enumerate() {
                if let Some(r) = r {
                    io::write_text(&out.join(format!("loss_group_{k}.csv")), &io::loss_csv(r))?;
                }
            }
            Ok(())
        }
        Command::Forecast {
            scene,
            bank,
            models,
            horizon,
            out,
        } => {
            let cfg = resolve_config(common, None)?;
            if horizon == 0 {
                return Err(Error::Config("horizon must be >= 1".into()));
            }
            let s = io::load_scene(&scene)?;
            let b = io::load_bank(&bank)?;
            let m = io::load_models(&models)?;
            let pred = forecast_bank(&scene_trajectories(&s)?, &b, &m, horizon)?;
            write_resolved(
                &out,
                "forecast",
                &[("scene", &scene), ("bank", &bank), ("models", &models)],
                &cfg,
            )?;
            io::save_trajectories(&out.join("forecast.csv"), &pred)
        }
        Command::Eval {
            pred,
            gt,
            scene,
            ground_truth,
            out,
            emit_plot_data,
        } => {
            let cfg = resolve_config(common, None)?;
            eval(&cfg, &pred, &gt, &scene, ground_truth.as_deref(), &out, emit_plot_data)
        }
        Command::Export {
            scene,
            format,
            bank,
            t,
            out,
        } => {
            let cfg = resolve_config(common, None)?;
            let s = io::load_scene(&scene)?;
            let b = bank.as_deref().map(io::load_bank).transpose()?;
            let mut inputs: Vec<(&'static str, &Path)> = vec![("scene", &scene)];
            if let Some(p) = &bank {
                inputs.push(("bank", p));
            }
            write_resolved(&out, "export", &inputs, &cfg)?;
            match format {
                ExportFormat::Ply => {
                    let frames: Vec<usize> = match t {
                        Some(t) if t < s.num_timesteps() => vec![t],
                        Some(t) => {
                            return Err(Error::Config(format!(
                                "timestep {t} outside 0..{}",
                                s.num_timesteps()
                            )))
                        }
                        None => (0..s.num_timesteps()).collect(),
                    };
                    for t in frames {
                        io::write_text(&out.join(format!("frame_{t:04}.ply")), &io::scene_ply(&s, b.as_ref(), t)?)?;
                    }
                }
                ExportFormat::Csv => {
                    io::save_trajectories(&out.join("trajectories.csv"), &scene_trajectories(&s)?)?;
                    if let Some(b) = &b {
                        io::write_text(&out.join("labels.csv"), &io::labels_csv(&s.ids(), b))?;
                    }
                }
            }
            Ok(())
        }
        Command::Pipeline {
            out,
            ablate,
            dry_run,
            emit_plot_data,
        } => pipeline(common, out, ablate.as_deref(), dry_run, emit_plot_data),
    }
}

fn generate(common: &Common, out: &Path, groups: Option<usize>) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let mut synth = cfg.pipeline.synth_config()?;
    if let Some(n) = groups {
        if n == 0 || n > synth.groups.len() {
            return Err(Error::Config(format!(
                "--groups must be in 1..={} for this scene, got {n}",
                synth.groups.len()
            )));
        }
        synth.groups.truncate(n);
    }
    synth.validate()?;
    let (scene, gt) = generate_scene(&synth)?;
    let masks = rasterize_all(&scene, &gt, synth.splat_radius, synth.occlusion_margin)?;
    write_resolved(out, "generate", &[], &cfg)?;
    io::save_scene(&out.join("scene.json"), &scene)?;
    io::write_json(&out.join("ground_truth.json"), &gt)?;
    io::save_trajectories(&out.join("trajectories.csv"), &scene_trajectories(&scene)?)?;
    io::save_masks(&out.join("masks"), &masks)?;
    info!("wrote {} gaussians over {} frames to {}", scene.len(), scene.num_timesteps(), out.display());
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    pred_path: &Path,
    gt_path: &Path,
    scene_path: &Path,
    truth_path: Option<&Path>,
    out: &Path,
    emit_plot_data: bool,
) -> Result<()> {
    let pred = io::load_trajectories(pred_path)?;
    let gt: TrajectoryTensor = io::load_trajectories(gt_path)?;
    let scene = io::load_scene(scene_path)?;
    let synth = cfg.pipeline.synth_config()?;
    let (labels, occluded) = match truth_path {
        Some(p) => {
            let truth: mogaf::synth::GroundTruth = io::read_json(p)?;
            let index: BTreeMap<_, _> = truth.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
            let end = gt.start + gt.num_timesteps();
            let mut labels = Vec::with_capacity(gt.len());
            let mut occ = Vec::with_capacity(gt.len());
            for id in &gt.gaussian_ids {
                let r = *index
                    .get(id)
                    .ok_or_else(|| Error::TrajectoryMismatch(format!("gaussian {id} not in ground truth")))?;
                let flags = truth.occluded[r].get(gt.start..end).ok_or_else(|| {
                    Error::TrajectoryMismatch(format!("ground truth lacks occlusion flags for frames up to {end}"))
                })?;
                labels.push(truth.labels[r]);
                occ.push(flags.to_vec());
            }
            (labels, Some(occ))
        }
        None => (vec![0; gt.len()], None),
    };
    let rule = VisibilityRule {
        labels,
        splat_radius: synth.splat_radius,
        margin: synth.occlusion_margin,
    };
    let report = evaluate(&pred, &gt, &scene.cameras, occluded.as_deref(), &rule, cfg.pipeline.delta_normalizer)?;
    let mut inputs: Vec<(&'static str, &Path)> = vec![("pred", pred_path), ("gt", gt_path), ("scene", scene_path)];
    if let Some(p) = truth_path {
        inputs.push(("ground_truth", p));
    }
    write_resolved(out, "eval", &inputs, cfg)?;
    io::write_json(&out.join("report.json"), &report)?;
    if emit_plot_data {
        io::write_text(&out.join("horizon_epe.csv"), &horizon_csv(gt.start, &epe_per_horizon(&pred, &gt)?))?;
    }
    print_table(&report);
    Ok(())
}

const STAGES: [&str; 6] = ["generate", "group", "refine", "train", "forecast", "evaluate"];

fn pipeline(
    common: &Common,
    out: Option<PathBuf>,
    ablate: Option<&str>,
    dry_run: bool,
    emit_plot_data: bool,
) -> Result<()> {
    let cfg = resolve_config(common, ablate)?;
    let p = &cfg.pipeline;
    if dry_run {
        println!("plan: {}", STAGES.join(" -> "));
        println!("ablation: {}", p.ablation.name());
        println!("output: {}", out.as_ref().map_or("(none)".into(), |o| o.display().to_string()));
        println!("{}", io::to_json(&cfg)?.trim_end());
        return Ok(());
    }
    let out = out.ok_or_else(|| Error::Config("--out is required unless --dry-run is given".into()))?;
    write_resolved(&out, "pipeline", &[], &cfg)?;
    let mut on_stage = |stage: Stage<'_>| -> Result<()> {
        match stage {
            Stage::Observed(obs) => {
                io::save_scene(&out.join("scene.json"), &obs.full)?;
                io::write_json(&out.join("ground_truth.json"), &obs.gt)?;
                io::save_scene(&out.join("reconstruction.json"), &obs.reconstruction)?;
                io::save_trajectories(&out.join("measured.csv"), &obs.measured)?;
                io::save_trajectories(&out.join("future_gt.csv"), &obs.future)?;
                io::save_masks(&out.join("masks"), &obs.masks)?;
            }
            Stage::Grouped(bank) => {
                io::write_json(&out.join("bank.json"), bank)?;
                let ids: Vec<_> = bank_ids(bank);
                io::write_text(&out.join("labels.csv"), &io::labels_csv(&ids, bank))?;
            }
            Stage::Refined(scene, report) => {
                io::save_scene(&out.join("refined_scene.json"), scene)?;
                io::write_json(&out.join("refine_report.json"), report)?;
            }
            Stage::Trained(models, reports) => {
                io::save_models(&out.join("models.json"), models)?;
                for (k, r) in reports.iter().enumerate() {
                    if let Some(r) = r {
                        io::write_text(&out.join(format!("loss_group_{k}.csv")), &io::loss_csv(r))?;
                    }
                }
            }
            Stage::Forecast(pred) => io::save_trajectories(&out.join("forecast.csv"), pred)?,
        }
        Ok(())
    };
    let output = run_pipeline_with(p, &mut on_stage)?;
    io::write_json(&out.join("report.json"), &output.report)?;
    if emit_plot_data {
        io::write_text(
            &out.join("horizon_epe.csv"),
            &horizon_csv(output.observation.future.start, &output.report.horizon_epe),
        )?;
    }
    println!(
        "{} seed {} ablation {}: {} gaussians, {} observed + {} forecast frames",
        output.report.preset,
        p.seed,
        if p.ablation == Ablation::None { "none" } else { p.ablation.name() },
        output.report.num_gaussians,
        output.report.observed_frames,
        output.report.horizon
    );
    print_table(&output.report.tracking);
    Ok(())
}

fn bank_ids(bank: &MemoryBank) -> Vec<mogaf::scene::GaussianId> {
    let mut ids: Vec<_> = bank.groups.iter().flat_map(|g| g.member_ids.iter().copied()).collect();
    ids.sort_unstable();
    ids
}
