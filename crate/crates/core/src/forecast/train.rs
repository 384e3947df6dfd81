//! Training, gradient checks, rollout and group-wise forecasting.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{
    build_forward, build_loss, mask_span, ForecasterConfig, ForecasterModel, Frame,
    LossParts, PreparedBatch, CHANNELS,
};
use super::tape::{Mat, Tape};
use crate::error::{Error, Result};
use crate::grouping::MemoryBank;
use crate::optim::gradient_error;
use crate::scene::{GaussianId, TrajectoryTensor};

/// Flips quaternions so consecutive frames lie in the same hemisphere.
pub fn align_sequence(seq: &mut [Frame]) {
    for t in 1..seq.len() {
        let dot: f64 = (3..7).map(|c| seq[t][c] * seq[t - 1][c]).sum();
        if dot < 0.0 {
            for c in 3..7 {
                seq[t][c] = -seq[t][c];
            }
        }
    }
}

fn align_to(frame: &mut Frame, reference: &Frame) {
    let dot: f64 = (3..7).map(|c| frame[c] * reference[c]).sum();
    if dot < 0.0 {
        for v in &mut frame[3..7] {
            *v = -*v;
        }
    }
}

fn canonical_frame(mut f: Frame) -> Frame {
    if f[3] < 0.0 {
        for v in &mut f[3..7] {
            *v = -*v;
        }
    }
    f
}

/// Sliding-window samples: inputs `[t - w, t)`, target `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub windows: Vec<Vec<Frame>>,
    pub targets: Vec<Frame>,
}

impl TrainingSet {
    pub fn from_trajectories(traj: &TrajectoryTensor, window: usize) -> Self {
        let mut set = Self::default();
        for seq in &traj.values {
            let mut seq = seq.clone();
            align_sequence(&mut seq);
            for t in window..seq.len() {
                set.windows.push(seq[t - window..t].to_vec());
                set.targets.push(seq[t]);
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn prev_two(&self, idx: &[usize]) -> Vec<([f64; 3], [f64; 3])> {
        idx.iter()
            .map(|&i| {
                let w = &self.windows[i];
                let (a, b) = (&w[w.len() - 1], &w[w.len() - 2]);
                ([a[0], a[1], a[2]], [b[0], b[1], b[2]])
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training-mode loss per epoch.
    pub epoch_losses: Vec<LossParts>,
    /// Evaluation-mode loss on the full training set after training.
    pub final_loss: LossParts,
    pub samples: usize,
    pub parameters: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Mat]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Mat], grads: &[Option<Mat>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            for j in 0..p.data.len() {
                let gj = g.data[j];
                self.m[k][j] = B1 * self.m[k][j] + (1.0 - B1) * gj;
                self.v[k][j] = B2 * self.v[k][j] + (1.0 - B2) * gj * gj;
                p.data[j] -= lr * (self.m[k][j] / c1) / ((self.v[k][j] / c2).sqrt() + EPS);
            }
        }
    }
}

fn batch_loss(
    model: &ForecasterModel,
    set: &TrainingSet,
    idx: &[usize],
    spans: Option<&[std::ops::Range<usize>]>,
    dropout_rng: Option<&mut ChaCha8Rng>,
    want_grad: bool,
) -> (LossParts, Option<Vec<Option<Mat>>>) {
    let windows: Vec<&[Frame]> = idx.iter().map(|&i| set.windows[i].as_slice()).collect();
    let batch = PreparedBatch::new(&windows, spans);
    let mut tape = Tape::new();
    let fwd = build_forward(&mut tape, model, &batch, dropout_rng);
    let targets: Vec<Frame> = idx
        .iter()
        .map(|&i| {
            let mut t = set.targets[i];
            align_to(&mut t, set.windows[i].last().expect("non-empty window"));
            t
        })
        .collect();
    let prev = set.prev_two(idx);
    let (total, pred, acc) = build_loss(&mut tape, fwd.prediction, &targets, &prev, model.config.lambda_acc);
    let parts = LossParts {
        pred: tape.value(pred).data[0],
        acc: tape.value(acc).data[0],
        total: tape.value(total).data[0],
    };
    let grads = want_grad.then(|| tape.backward(total, model.params.len()));
    (parts, grads)
}

/// Trains one forecaster on the sequences of a group.
pub fn train_group(
    history: &TrajectoryTensor,
    config: &ForecasterConfig,
) -> Result<(ForecasterModel, TrainReport)> {
    config.validate()?;
    let window = config.window_for(history.num_timesteps())?;
    let set = TrainingSet::from_trajectories(history, window);
    if set.is_empty() {
        return Err(Error::Config("no training samples for forecaster".into()));
    }
    let mut model = ForecasterModel::new(config.clone(), window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&model.params);
    let mut report = TrainReport {
        samples: set.len(),
        parameters: model.num_parameters(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..config.epochs {
        let ratio = config.mask_ratio(epoch);
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(config.batch_size) {
            let spans: Vec<_> = chunk.iter().map(|_| mask_span(window, ratio, &mut rng)).collect();
            let (parts, grads) = batch_loss(&model, &set, chunk, Some(&spans), Some(&mut rng), true);
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "forecaster loss became {} at epoch {epoch}",
                    parts.total
                )));
            }
            adam.update(&mut model.params, &grads.expect("gradient requested"), lr);
            let w = chunk.len() as f64 / set.len() as f64;
            sum.pred += parts.pred * w;
            sum.acc += parts.acc * w;
            sum.total += parts.total * w;
        }
        if epoch % 50 == 0 || epoch + 1 == config.epochs {
            debug!("epoch {epoch}: loss {:.6e} (mask ratio {ratio:.3})", sum.total);
        }
        report.epoch_losses.push(sum);
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let mut final_loss = LossParts::default();
    for chunk in all.chunks(256) {
        let (parts, _) = batch_loss(&model, &set, chunk, None, None, false);
        let w = chunk.len() as f64 / set.len() as f64;
        final_loss.pred += parts.pred * w;
        final_loss.acc += parts.acc * w;
        final_loss.total += parts.total * w;
    }
    report.final_loss = final_loss;
    info!(
        "trained forecaster on {} samples ({} parameters), final loss {:.4e}",
        set.len(),
        model.num_parameters(),
        final_loss.total
    );
    Ok((model, report))
}

/// Evaluation-mode predictions for many windows.
pub fn predict(model: &ForecasterModel, windows: &[Vec<Frame>]) -> Result<Vec<Frame>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let mut aligned: Vec<Vec<Frame>> = Vec::with_capacity(chunk.len());
        for w in chunk {
            if w.len() != model.window {
                return Err(Error::Dimension(format!(
                    "window of {} frames, model expects {}",
                    w.len(),
                    model.window
                )));
            }
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite forecaster input".into()));
            }
            let mut w = w.clone();
            align_sequence(&mut w);
            aligned.push(w);
        }
        let refs: Vec<&[Frame]> = aligned.iter().map(|w| w.as_slice()).collect();
        let batch = PreparedBatch::new(&refs, None);
        let mut tape = Tape::new();
        let fwd = build_forward(&mut tape, model, &batch, None);
        for (l, a) in fwd.attention.iter().enumerate() {
            if tape.value(*a).data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite activations in layer {l} attention")));
            }
        }
        let pred = tape.value(fwd.prediction);
        if pred.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite activations in forecaster head".into()));
        }
        for r in 0..pred.rows {
            let mut f = [0.0; CHANNELS];
            f.copy_from_slice(pred.row(r));
            out.push(canonical_frame(f));
        }
    }
    Ok(out)
}

pub fn forward(model: &ForecasterModel, seq: &[Frame]) -> Result<Frame> {
    Ok(predict(model, &[seq.to_vec()])?[0])
}

/// Autoregressive forecast of `horizon` frames after `seed_seq`.
pub fn rollout(model: &ForecasterModel, seed_seq: &[Frame], horizon: usize) -> Result<Vec<Frame>> {
    rollout_many(model, &[seed_seq.to_vec()], horizon).map(|mut v| v.remove(0))
}

/// Batched rollout; each seed sequence evolves independently.
pub fn rollout_many(
    model: &ForecasterModel,
    seeds: &[Vec<Frame>],
    horizon: usize,
) -> Result<Vec<Vec<Frame>>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let mut windows: Vec<Vec<Frame>> = seeds.to_vec();
    let mut out: Vec<Vec<Frame>> = vec![Vec::with_capacity(horizon); seeds.len()];
    for _ in 0..horizon {
        let next = predict(model, &windows)?;
        for ((w, o), f) in windows.iter_mut().zip(out.iter_mut()).zip(next) {
            o.push(f);
            w.remove(0);
            w.push(f);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelGradientCheck {
    pub max_rel_error: f64,
    /// Worst error per parameter name that was probed.
    pub per_param: Vec<(String, f64)>,
    pub probes: usize,
}

/// Analytic vs central-difference gradients of the group loss on random
/// parameter coordinates (dropout off; masking from `spans` if given).
pub fn check_model_gradients(
    model: &ForecasterModel,
    set: &TrainingSet,
    spans: Option<&[std::ops::Range<usize>]>,
    probes: usize,
    seed: u64,
) -> ModelGradientCheck {
    let idx: Vec<usize> = (0..set.len()).collect();
    let (_, grads) = batch_loss(model, set, &idx, spans, None, true);
    let grads = grads.expect("gradient requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per: Vec<f64> = vec![0.0; model.params.len()];
    let mut probed = vec![false; model.params.len()];
    let mut check = ModelGradientCheck {
        probes,
        ..Default::default()
    };
    for p in 0..probes {
        // cycle through slots so every parameter array is probed
        let slot = p % model.params.len();
        let j = rng.random_range(0..model.params[slot].len());
        let value = model.params[slot].data[j];
        let h = 1e-5 * value.abs().max(1.0);
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params[slot].data[j] += delta;
            batch_loss(&m, set, &idx, spans, None, false).0.total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads[slot].as_ref().map_or(0.0, |g| g.data[j]);
        let err = gradient_error(analytic, numeric);
        per[slot] = per[slot].max(err);
        probed[slot] = true;
        check.max_rel_error = check.max_rel_error.max(err);
    }
    check.per_param = model
        .names
        .iter()
        .zip(per)
        .zip(probed)
        .filter(|(_, p)| *p)
        .map(|((n, e), _)| (n.clone(), e))
        .collect();
    check
}

/// One forecaster per group plus an optional scene-global fallback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankModels {
    pub groups: Vec<Option<ForecasterModel>>,
    pub global: Option<ForecasterModel>,
}

/// Trains group forecasters in parallel. Group `k` uses seed `config.seed + k`,
/// so results do not depend on the thread count.
pub fn train_bank(
    history: &TrajectoryTensor,
    bank: &MemoryBank,
    config: &ForecasterConfig,
    with_global: bool,
) -> Result<(BankModels, Vec<Option<TrainReport>>)> {
    let jobs: Vec<(usize, Vec<GaussianId>)> = bank
        .groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(k, g)| (k, g.member_ids.iter().copied().collect()))
        .collect();
    let trained: Vec<(usize, ForecasterModel, TrainReport)> = jobs
        .par_iter()
        .map(|(k, ids)| {
            let cfg = ForecasterConfig {
                seed: config.seed.wrapping_add(*k as u64),
                ..config.clone()
            };
            let (m, r) = train_group(&history.select(ids)?, &cfg)?;
            Ok((*k, m, r))
        })
        .collect::<Result<_>>()?;
    let mut models = BankModels {
        groups: vec![None; bank.len()],
        global: None,
    };
    let mut reports = vec![None; bank.len()];
    for (k, m, r) in trained {
        models.groups[k] = Some(m);
        reports[k] = Some(r);
    }
    if with_global {
        let (m, _) = train_group(history, config)?;
        models.global = Some(m);
    }
    Ok((models, reports))
}

/// Rolls every gaussian forward with its group's forecaster (ungrouped
/// gaussians use the global model). Output rows follow `history` order and
/// start right after its last frame.
pub fn forecast_bank(
    history: &TrajectoryTensor,
    bank: &MemoryBank,
    models: &BankModels,
    horizon: usize,
) -> Result<TrajectoryTensor> {
    let assignment = bank.assignment();
    let len = history.num_timesteps();
    let mut jobs: Vec<(Option<usize>, Vec<usize>)> = Vec::new();
    for (k, _) in bank.groups.iter().enumerate() {
        jobs.push((Some(k), Vec::new()));
    }
    jobs.push((None, Vec::new()));
    for (i, id) in history.gaussian_ids.iter().enumerate() {
        match assignment.get(id) {
            Some(&k) => jobs[k].1.push(i),
            None => jobs[bank.len()].1.push(i),
        }
    }
    let mut values: Vec<Vec<Frame>> = vec![Vec::new(); history.len()];
    for (k, rows) in jobs.iter().filter(|(_, r)| !r.is_empty()) {
        let model = match k {
            Some(k) => models.groups.get(*k).and_then(|m| m.as_ref()).or(models.global.as_ref()),
            None => models.global.as_ref(),
        }
        .ok_or_else(|| {
            Error::MissingModel(k.map_or("ungrouped gaussians".into(), |k| format!("group {k}")))
        })?;
        if len < model.window {
            return Err(Error::TrajectoryMismatch(format!(
                "history of {len} frames is shorter than the model window {}",
                model.window
            )));
        }
        let seeds: Vec<Vec<Frame>> = rows
            .iter()
            .map(|&i| history.values[i][len - model.window..].to_vec())
            .collect();
        let out = rollout_many(model, &seeds, horizon)?;
        for (&i, seq) in rows.iter().zip(out) {
            values[i] = seq;
        }
    }
    TrajectoryTensor::new(history.gaussian_ids.clone(), values, history.start + len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::model::loss_group;
    use crate::grouping::MotionGroup;

    fn line(n: usize, start: [f64; 3], vel: [f64; 3]) -> Vec<Frame> {
        (0..n)
            .map(|t| {
                let t = t as f64;
                [start[0] + vel[0] * t, start[1] + vel[1] * t, start[2] + vel[2] * t, 1.0, 0.0, 0.0, 0.0]
            })
            .collect()
    }

    fn lines(count: usize, len: usize, seed: u64) -> TrajectoryTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..count)
            .map(|_| {
                let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let v = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
                line(len, s, v)
            })
            .collect();
        TrajectoryTensor::new((0..count as u32).collect(), values, 0).unwrap()
    }

    fn small_config() -> ForecasterConfig {
        ForecasterConfig {
            d_model: 16,
            heads: 4,
            ff_dim: 16,
            epochs: 2,
            window: Some(4),
            ..Default::default()
        }
    }

    #[test]
    fn fresh_model_output_contract() {
        let model = ForecasterModel::new(small_config(), 4).unwrap();
        let seq = line(4, [0.1, 0.2, 0.3], [0.01, 0.0, -0.02]);
        let out = forward(&model, &seq).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let n: f64 = out[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12 && out[3] >= 0.0);
        assert!(forward(&model, &seq[..3]).is_err());
    }

    #[test]
    fn batch_order_independent() {
        let model = ForecasterModel::new(small_config(), 4).unwrap();
        let a = line(4, [0.0; 3], [0.1, 0.0, 0.0]);
        let b = line(4, [1.0; 3], [0.0, -0.1, 0.05]);
        let ab = predict(&model, &[a.clone(), b.clone()]).unwrap();
        let ba = predict(&model, &[b, a]).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = ForecasterModel::new(small_config(), 4).unwrap();
        let set = TrainingSet::from_trajectories(&lines(3, 6, 1), 4);
        let refs: Vec<&[Frame]> = set.windows.iter().map(|w| w.as_slice()).collect();
        let batch = PreparedBatch::new(&refs, None);
        let mut tape = Tape::new();
        let fwd = build_forward(&mut tape, &model, &batch, None);
        for row in tape.attention_probs(fwd.attention[0]).unwrap().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_graph_matches_formula() {
        let model = ForecasterModel::new(small_config(), 4).unwrap();
        let set = TrainingSet::from_trajectories(&lines(5, 7, 2), 4);
        let idx: Vec<usize> = (0..set.len()).collect();
        let (parts, _) = batch_loss(&model, &set, &idx, None, None, false);
        let preds = predict(&model, &set.windows).unwrap();
        let oracle = loss_group(&preds, &set.targets, &set.prev_two(&idx), 1.0).unwrap();
        assert!((parts.total - oracle.total).abs() <= 1e-12 * oracle.total.max(1.0));
    }

    #[test]
    fn model_gradients() {
        let cfg = ForecasterConfig {
            layers: 2,
            ..small_config()
        };
        let model = ForecasterModel::new(cfg, 4).unwrap();
        let set = TrainingSet::from_trajectories(&lines(3, 6, 3), 4);
        let spans = vec![1..3, 0..0, 0..1, 2..3, 0..0, 1..2];
        let check = check_model_gradients(&model, &set, Some(&spans), 120, 5);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        assert!(check.per_param.iter().any(|(n, _)| n == "mask_token"));
    }

    #[test]
    fn rollout_prefix_and_horizon_one() {
        let model = ForecasterModel::new(small_config(), 4).unwrap();
        let seq = line(4, [0.0; 3], [0.1, 0.1, 0.0]);
        let one = rollout(&model, &seq, 1).unwrap();
        assert_eq!(one[0], forward(&model, &seq).unwrap());
        let a = rollout(&model, &seq, 5).unwrap();
        let b = rollout(&model, &seq, 6).unwrap();
        assert_eq!(a[..], b[..5]);
        assert!(rollout(&model, &seq, 0).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let hist = lines(6, 8, 4);
        let (a, ra) = train_group(&hist, &small_config()).unwrap();
        let (b, rb) = train_group(&hist, &small_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epoch_losses.len(), 2);
    }

    #[test]
    fn constant_trajectories_memorized() {
        let values: Vec<Vec<Frame>> = (0..4)
            .map(|i| vec![[0.1 * i as f64, -0.2, 0.3, 1.0, 0.0, 0.0, 0.0]; 8])
            .collect();
        let hist = TrajectoryTensor::new((0..4).collect(), values.clone(), 0).unwrap();
        let cfg = ForecasterConfig {
            epochs: 200,
            window: Some(5),
            ..Default::default()
        };
        let (model, report) = train_group(&hist, &cfg).unwrap();
        assert!(report.final_loss.pred < 1e-4);
        let p = forward(&model, &values[2][..5]).unwrap();
        let mse: f64 = p.iter().zip(&values[2][0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 7.0;
        assert!(mse < 1e-4);
    }

    #[test]
    fn bank_forecast_layout() {
        let hist = lines(6, 8, 6);
        let bank = MemoryBank {
            groups: vec![
                MotionGroup { tau: 1, member_ids: [0, 2, 4].into_iter().collect() },
                MotionGroup { tau: 0, member_ids: [1, 3].into_iter().collect() },
            ],
        };
        let (models, _) = train_bank(&hist, &bank, &small_config(), true).unwrap();
        let out = forecast_bank(&hist, &bank, &models, 3).unwrap();
        assert_eq!(out.gaussian_ids, hist.gaussian_ids);
        assert_eq!(out.start, 8);
        assert_eq!(out.num_timesteps(), 3);
        // group rollout equals rolling its members directly
        let direct = rollout(models.groups[0].as_ref().unwrap(), &hist.values[2][4..], 3).unwrap();
        assert_eq!(out.values[2], direct);
        let no_global = BankModels { global: None, ..models };
        assert!(matches!(forecast_bank(&hist, &bank, &no_global, 3), Err(Error::MissingModel(_))));
    }
}
