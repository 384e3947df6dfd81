//! End-to-end run on a synthetic scene: observe a prefix, group, refine,
//! train forecasters, roll out the remaining frames and score them.
//!
//! The observed prefix plays the role of a fitted reconstruction. Its input
//! scene carries injected per-gaussian drift, and the refinement target is
//! the true prefix with per-frame measurement noise. Everything after the
//! prefix is held out as forecasting ground truth.

use std::collections::BTreeSet;

use log::info;
use serde::{Deserialize, Serialize};

use crate::forecast::{forecast_bank, train_bank, train_group, BankModels, ForecasterConfig, TrainReport};
use crate::grouping::{group_naive4d, group_scene, label_accuracy, GroupingParams, MemoryBank, MotionGroup};
use crate::metrics::{epe_per_horizon, evaluate, DeltaNormalizer, TrackingReport, VisibilityRule};
use crate::optim::{refine, LossBreakdown, OptimParams, OptimReport};
use crate::scene::{scene_trajectories, DynamicScene, TrajectoryTensor};
use crate::synth::{generate_scene, inject_drift, perturb_means, rasterize_all, GroundTruth, MaskFrame, SynthConfig};
use crate::{Error, Result};

/// Ablation arms of the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// One non-rigid group for the whole scene and a single forecaster.
    NoGrouping,
    /// Forecasters trained without span masking.
    NoMasking,
    /// Per-frame projection grouping instead of motion-aware grouping.
    Naive4d,
    /// Motion-aware grouping for refinement but one scene-wide forecaster.
    GlobalForecaster,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoGrouping,
        Ablation::NoMasking,
        Ablation::Naive4d,
        Ablation::GlobalForecaster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoGrouping => "no-grouping",
            Ablation::NoMasking => "no-masking",
            Ablation::Naive4d => "naive4d",
            Ablation::GlobalForecaster => "global-forecaster",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{name}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    /// Replaces the preset scene when set.
    pub synth: Option<SynthConfig>,
    /// Share of frames observed; the rest is forecast.
    pub observe_fraction: f64,
    /// RMS of the drift injected into the reconstruction (scene units).
    pub drift_sigma: f64,
    pub drift_copies: usize,
    /// Std of the per-frame noise on observed means (scene units).
    pub observation_noise: f64,
    pub grouping: GroupingParams,
    pub optim: OptimParams,
    pub forecaster: ForecasterConfig,
    pub delta_normalizer: DeltaNormalizer,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: "rigid-nonrigid-mix".into(),
            seed: 0,
            synth: None,
            observe_fraction: 0.6,
            drift_sigma: 0.01,
            drift_copies: 2,
            observation_noise: 0.005,
            grouping: GroupingParams::default(),
            optim: OptimParams {
                steps: 100,
                ..OptimParams::default()
            },
            forecaster: ForecasterConfig {
                window: Some(12),
                ..ForecasterConfig::default()
            },
            delta_normalizer: DeltaNormalizer::default(),
            ablation: Ablation::None,
        }
    }
}

impl PipelineConfig {
    pub fn synth_config(&self) -> Result<SynthConfig> {
        match &self.synth {
            Some(s) => Ok(s.clone()),
            None => SynthConfig::preset(&self.preset, self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config()?.validate()?;
        if !(self.observe_fraction > 0.0 && self.observe_fraction < 1.0) {
            return Err(Error::Config("observe_fraction must be in (0, 1)".into()));
        }
        if !(self.drift_sigma >= 0.0) || !(self.observation_noise >= 0.0) {
            return Err(Error::Config("drift_sigma and observation_noise must be >= 0".into()));
        }
        self.grouping.validate()?;
        self.optim.validate()?;
        self.forecaster.validate()
    }

    /// Forecaster settings after the ablation is applied.
    pub fn effective_forecaster(&self) -> ForecasterConfig {
        let mut f = self.forecaster.clone();
        if self.ablation == Ablation::NoMasking {
            f.mask_start = 0.0;
            f.mask_end = 0.0;
        }
        f
    }
}

/// Observed prefix and held-out future of a generated scene.
#[derive(Clone, Debug)]
pub struct Observation {
    pub full: DynamicScene,
    pub gt: GroundTruth,
    pub observed_frames: usize,
    /// Drifted reconstruction of the prefix; the refinement input.
    pub reconstruction: DynamicScene,
    /// Noisy measured means of the prefix; the refinement target.
    pub measured: TrajectoryTensor,
    pub masks: Vec<MaskFrame>,
    /// True trajectories of the held-out frames.
    pub future: TrajectoryTensor,
}

// independent streams derived from the run seed
const DRIFT_STREAM: u64 = 0x6472_6966_7400_0001;
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0002;

pub fn observe(cfg: &PipelineConfig) -> Result<Observation> {
    let synth = cfg.synth_config()?;
    let (full, gt) = generate_scene(&synth)?;
    let len = full.num_timesteps();
    let observed_frames = ((cfg.observe_fraction * len as f64).round() as usize).clamp(4, len - 1);
    let prefix = full.truncated(observed_frames)?;
    let masks = rasterize_all(&prefix, &gt.truncated(observed_frames), synth.splat_radius, synth.occlusion_margin)?;
    let reconstruction = inject_drift(
        &prefix,
        &prefix.ids(),
        cfg.drift_sigma,
        cfg.drift_copies,
        cfg.seed ^ DRIFT_STREAM,
    )?;
    let measured = perturb_means(&scene_trajectories(&prefix)?, cfg.observation_noise, cfg.seed ^ NOISE_STREAM);
    let future = scene_trajectories(&full)?.slice_time(observed_frames, len);
    Ok(Observation {
        full,
        gt,
        observed_frames,
        reconstruction,
        measured,
        masks,
        future,
    })
}

/// Bank used for refinement under the configured ablation.
pub fn group_stage(cfg: &PipelineConfig, obs: &Observation) -> Result<MemoryBank> {
    match cfg.ablation {
        Ablation::NoGrouping => Ok(MemoryBank {
            groups: vec![MotionGroup {
                tau: 0,
                member_ids: obs.reconstruction.ids().into_iter().collect(),
            }],
        }),
        Ablation::Naive4d => group_naive4d(&obs.reconstruction, &obs.masks, &cfg.grouping),
        _ => group_scene(&obs.reconstruction, &obs.masks, &cfg.grouping),
    }
}

/// Trains the forecasters for `history`. Returns the bank used to route
/// gaussians at forecast time (empty when one model serves the whole scene).
pub fn train_stage(
    cfg: &PipelineConfig,
    history: &TrajectoryTensor,
    bank: &MemoryBank,
) -> Result<(MemoryBank, BankModels, Vec<Option<TrainReport>>)> {
    let fc = cfg.effective_forecaster();
    match cfg.ablation {
        Ablation::NoGrouping | Ablation::GlobalForecaster => {
            let (model, report) = train_group(history, &fc)?;
            let models = BankModels {
                groups: Vec::new(),
                global: Some(model),
            };
            Ok((MemoryBank::default(), models, vec![Some(report)]))
        }
        _ => {
            let ungrouped = history.len() > bank.num_assigned();
            let (models, reports) = train_bank(history, bank, &fc, ungrouped)?;
            Ok((bank.clone(), models, reports))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub tau: u8,
    pub size: usize,
    pub final_train_loss: Option<f64>,
}

/// Deterministic run summary. Timings are deliberately left out so equal
/// configurations give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub preset: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub num_gaussians: usize,
    pub observed_frames: usize,
    pub horizon: usize,
    pub grouping_accuracy: f64,
    pub groups: Vec<GroupSummary>,
    pub ungrouped: usize,
    pub refine_initial: LossBreakdown,
    pub refine_final: LossBreakdown,
    pub refine_accepted_steps: usize,
    pub tracking: TrackingReport,
    /// Mean 3D error at each future step.
    pub horizon_epe: Vec<f64>,
}

impl PipelineReport {
    /// Mean of `horizon_epe` over steps `from..` (1-based step numbers).
    pub fn epe_from_step(&self, from: usize) -> f64 {
        let tail = &self.horizon_epe[from.saturating_sub(1).min(self.horizon_epe.len())..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub observation: Observation,
    pub bank: MemoryBank,
    pub refined: DynamicScene,
    pub refine_report: OptimReport,
    pub models: BankModels,
    pub train_reports: Vec<Option<TrainReport>>,
    pub prediction: TrajectoryTensor,
}

/// Scores `prediction` against the held-out frames of `obs`.
pub fn evaluate_forecast(
    cfg: &PipelineConfig,
    obs: &Observation,
    prediction: &TrajectoryTensor,
) -> Result<(TrackingReport, Vec<f64>)> {
    let synth = cfg.synth_config()?;
    let gt_index: std::collections::HashMap<_, _> =
        obs.gt.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let rows = obs
        .future
        .gaussian_ids
        .iter()
        .map(|id| {
            gt_index
                .get(id)
                .copied()
                .ok_or_else(|| Error::TrajectoryMismatch(format!("gaussian {id} missing from ground truth")))
        })
        .collect::<Result<Vec<_>>>()?;
    let from = obs.future.start;
    let to = from + obs.future.num_timesteps();
    let occluded: Vec<Vec<bool>> = rows.iter().map(|&r| obs.gt.occluded[r][from..to].to_vec()).collect();
    let rule = VisibilityRule {
        labels: rows.iter().map(|&r| obs.gt.labels[r]).collect(),
        splat_radius: synth.splat_radius,
        margin: synth.occlusion_margin,
    };
    let tracking = evaluate(
        prediction,
        &obs.future,
        &obs.full.cameras,
        Some(&occluded),
        &rule,
        cfg.delta_normalizer,
    )?;
    Ok((tracking, epe_per_horizon(prediction, &obs.future)?))
}

/// Intermediate results handed to the stage callback as soon as they exist.
pub enum Stage<'a> {
    Observed(&'a Observation),
    Grouped(&'a MemoryBank),
    Refined(&'a DynamicScene, &'a OptimReport),
    Trained(&'a BankModels, &'a [Option<TrainReport>]),
    Forecast(&'a TrajectoryTensor),
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline_with(cfg, &mut |_| Ok(()))
}

/// [`run_pipeline`] reporting each stage to `on_stage`; an error from the
/// callback aborts the run.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    on_stage: &mut dyn FnMut(Stage<'_>) -> Result<()>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let obs = observe(cfg)?;
    on_stage(Stage::Observed(&obs))?;
    info!(
        "observed {} of {} frames, {} gaussians",
        obs.observed_frames,
        obs.full.num_timesteps(),
        obs.full.len()
    );

    let bank = group_stage(cfg, &obs)?;
    info!("grouping: {} groups, {} of {} assigned", bank.len(), bank.num_assigned(), obs.full.len());
    on_stage(Stage::Grouped(&bank))?;

    let (refined, refine_report) = refine(&obs.reconstruction, &bank, &obs.measured, &cfg.optim)?;
    info!(
        "refine: loss {:.4e} -> {:.4e} in {} steps",
        refine_report.initial.total,
        refine_report.final_loss().total,
        refine_report.accepted_steps
    );
    on_stage(Stage::Refined(&refined, &refine_report))?;

    let history = scene_trajectories(&refined)?;
    let (route, models, train_reports) = train_stage(cfg, &history, &bank)?;
    on_stage(Stage::Trained(&models, &train_reports))?;
    let horizon = obs.future.num_timesteps();
    let prediction = forecast_bank(&history, &route, &models, horizon)?;
    on_stage(Stage::Forecast(&prediction))?;
    let (tracking, horizon_epe) = evaluate_forecast(cfg, &obs, &prediction)?;
    info!("forecast: EPE {:.4e}, delta3d@0.10 {:.2}%", tracking.epe, tracking.delta3d_10);

    let groups = if route.is_empty() {
        vec![GroupSummary {
            tau: 0,
            size: history.len(),
            final_train_loss: train_reports[0].as_ref().map(|r| r.final_loss.total),
        }]
    } else {
        bank.groups
            .iter()
            .zip(&train_reports)
            .map(|(g, r)| GroupSummary {
                tau: g.tau,
                size: g.len(),
                final_train_loss: r.as_ref().map(|r| r.final_loss.total),
            })
            .collect()
    };
    let assigned: BTreeSet<_> = bank.groups.iter().flat_map(|g| g.member_ids.iter().copied()).collect();
    let report = PipelineReport {
        preset: cfg.synth.as_ref().map_or_else(|| cfg.preset.clone(), |_| "custom".into()),
        seed: cfg.seed,
        ablation: cfg.ablation,
        num_gaussians: obs.full.len(),
        observed_frames: obs.observed_frames,
        horizon,
        grouping_accuracy: label_accuracy(&bank, &obs.gt),
        groups,
        ungrouped: obs.full.len() - assigned.len(),
        refine_initial: refine_report.initial,
        refine_final: refine_report.final_loss(),
        refine_accepted_steps: refine_report.accepted_steps,
        tracking,
        horizon_epe,
    };
    Ok(PipelineOutput {
        report,
        observation: obs,
        bank,
        refined,
        refine_report,
        models,
        train_reports,
        prediction,
    })
}
