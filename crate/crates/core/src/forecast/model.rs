//! Transformer forecaster: parameters, normalization, masking, forward graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Channels per frame: mean (3) then quaternion `w, x, y, z`.
pub const CHANNELS: usize = 7;
pub const STD_FLOOR: f64 = 1e-6;
/// Added to the variance before the square root, so near-constant channels
/// (e.g. a fixed orientation) do not turn rounding noise into unit-scale input.
pub const VAR_EPS: f64 = 1e-6;

pub type Frame = [f64; CHANNELS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Input frames per sample; `None` uses `min(T - 1, 32)` of the history.
    pub window: Option<usize>,
    pub lambda_acc: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to zero over the epochs.
    pub cosine_decay: bool,
    pub mask_start: f64,
    pub mask_end: f64,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 8,
            ff_dim: 64,
            layers: 1,
            dropout: 0.2,
            window: None,
            lambda_acc: 1.0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 3e-3,
            cosine_decay: true,
            mask_start: 0.4,
            mask_end: 0.0,
            seed: 0,
        }
    }
}

pub const MAX_WINDOW: usize = 32;

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be divisible by heads".into()));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("layers, ff_dim, batch_size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        for r in [self.mask_start, self.mask_end] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config("mask ratios must be in [0, 1]".into()));
            }
        }
        if let Some(w) = self.window {
            if w < 3 {
                return Err(Error::Config("window must be >= 3".into()));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_acc >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and lambda_acc >= 0".into()));
        }
        Ok(())
    }

    /// Window for a history of `len` frames.
    pub fn window_for(&self, len: usize) -> Result<usize> {
        let w = self.window.unwrap_or_else(|| len.saturating_sub(1).min(MAX_WINDOW));
        if w < 3 {
            return Err(Error::Config(format!(
                "history of {len} frames is too short for a window of at least 3"
            )));
        }
        if len < w + 1 {
            return Err(Error::Config(format!("history of {len} frames needs window + 1 = {}", w + 1)));
        }
        Ok(w)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs <= 1 {
            return self.learning_rate;
        }
        let x = epoch as f64 / self.epochs as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * x).cos())
    }

    /// Mask ratio at `epoch`, linear from start to end.
    pub fn mask_ratio(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.mask_start;
        }
        self.mask_start + (self.mask_end - self.mask_start) * epoch as f64 / (self.epochs - 1) as f64
    }
}

/// Per-channel statistics of one input window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub mean: Frame,
    pub std: Frame,
}

impl NormalizationState {
    pub fn denormalize(&self, x: &Frame) -> Frame {
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            out[c] = x[c] * self.std[c] + self.mean[c];
        }
        out
    }
}

/// Zero-mean, unit population-std channels, with `std = sqrt(var + VAR_EPS)`.
pub fn instance_normalize(seq: &[Frame]) -> (Vec<Frame>, NormalizationState) {
    let n = seq.len().max(1) as f64;
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        mean[c] = seq.iter().map(|f| f[c]).sum::<f64>() / n;
        let var = seq.iter().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / n;
        std[c] = (var + VAR_EPS).sqrt().max(STD_FLOOR);
    }
    let out = seq
        .iter()
        .map(|f| {
            let mut o = [0.0; CHANNELS];
            for c in 0..CHANNELS {
                o[c] = (f[c] - mean[c]) / std[c];
            }
            o
        })
        .collect();
    (out, NormalizationState { mean, std })
}

/// Contiguous masked span `[start, start + len)` for a window, never
/// covering the final frame.
pub fn mask_span(window: usize, ratio: f64, rng: &mut impl Rng) -> std::ops::Range<usize> {
    let len = ((ratio * window as f64).round() as usize).min(window.saturating_sub(1));
    if len == 0 {
        return 0..0;
    }
    let start = rng.random_range(0..=window - 1 - len);
    start..start + len
}

/// Parameter slots in creation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterModel {
    pub config: ForecasterConfig,
    pub window: usize,
    pub names: Vec<String>,
    pub params: Vec<Mat>,
}

struct LayerSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

// fixed slot order: embed_w, embed_b, pos, mask_token, head_w, head_b, then
// 16 slots per layer
const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
const POS: usize = 2;
const MASK_TOKEN: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;
const PER_LAYER: usize = 16;

fn layer_slots(l: usize) -> LayerSlots {
    let b = 6 + l * PER_LAYER;
    LayerSlots {
        wq: b,
        bq: b + 1,
        wk: b + 2,
        bk: b + 3,
        wv: b + 4,
        bv: b + 5,
        wo: b + 6,
        bo: b + 7,
        ln1_g: b + 8,
        ln1_b: b + 9,
        w1: b + 10,
        b1: b + 11,
        w2: b + 12,
        b2: b + 13,
        ln2_g: b + 14,
        ln2_b: b + 15,
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

fn filled(rows: usize, cols: usize, v: f64) -> Mat {
    Mat::from_vec(rows, cols, vec![v; rows * cols])
}

impl ForecasterModel {
    pub fn new(config: ForecasterConfig, window: usize) -> Result<Self> {
        config.validate()?;
        if window < 3 {
            return Err(Error::Config("window must be >= 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, m: Mat| {
            names.push(name);
            params.push(m);
        };
        add("embed.weight".into(), xavier(CHANNELS, d, &mut rng));
        add("embed.bias".into(), filled(1, d, 0.0));
        let pos = Mat::from_vec(window, d, (0..window * d).map(|_| rng.random_range(-0.02..0.02)).collect());
        add("pos".into(), pos);
        add("mask_token".into(), filled(1, CHANNELS, 0.0));
        add("head.weight".into(), xavier(window * d, CHANNELS, &mut rng));
        add("head.bias".into(), filled(1, CHANNELS, 0.0));
        for l in 0..config.layers {
            for p in ["q", "k", "v", "o"] {
                add(format!("layer{l}.attn.w{p}"), xavier(d, d, &mut rng));
                add(format!("layer{l}.attn.b{p}"), filled(1, d, 0.0));
            }
            add(format!("layer{l}.ln1.gamma"), filled(1, d, 1.0));
            add(format!("layer{l}.ln1.beta"), filled(1, d, 0.0));
            add(format!("layer{l}.ff.w1"), xavier(d, config.ff_dim, &mut rng));
            add(format!("layer{l}.ff.b1"), filled(1, config.ff_dim, 0.0));
            add(format!("layer{l}.ff.w2"), xavier(config.ff_dim, d, &mut rng));
            add(format!("layer{l}.ff.b2"), filled(1, d, 0.0));
            add(format!("layer{l}.ln2.gamma"), filled(1, d, 1.0));
            add(format!("layer{l}.ln2.beta"), filled(1, d, 0.0));
        }
        Ok(Self {
            config,
            window,
            names,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Checks shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(ForecasterConfig { seed: 0, ..self.config.clone() }, self.window)?;
        if fresh.names != self.names
            || fresh
                .params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.rows != b.rows || a.cols != b.cols || b.data.len() != b.rows * b.cols)
        {
            return Err(Error::parse("forecaster checkpoint", "parameter layout does not match config"));
        }
        if self.params.iter().flat_map(|p| &p.data).any(|v| !v.is_finite()) {
            return Err(Error::parse("forecaster checkpoint", "non-finite parameter"));
        }
        Ok(())
    }
}

/// Normalized batch ready for the graph.
pub struct PreparedBatch {
    /// `(batch * window) × 7`, normalized.
    pub inputs: Mat,
    pub stats: Vec<NormalizationState>,
    /// Rows replaced by the mask token.
    pub masked: Vec<bool>,
}

impl PreparedBatch {
    pub fn new(windows: &[&[Frame]], spans: Option<&[std::ops::Range<usize>]>) -> Self {
        let w = windows.first().map_or(0, |s| s.len());
        let mut data = Vec::with_capacity(windows.len() * w * CHANNELS);
        let mut stats = Vec::with_capacity(windows.len());
        let mut masked = vec![false; windows.len() * w];
        for (b, seq) in windows.iter().enumerate() {
            let (norm, st) = instance_normalize(seq);
            for f in &norm {
                data.extend_from_slice(f);
            }
            stats.push(st);
            if let Some(spans) = spans {
                for r in spans[b].clone() {
                    masked[b * w + r] = true;
                }
            }
        }
        Self {
            inputs: Mat::from_vec(windows.len() * w, CHANNELS, data),
            stats,
            masked,
        }
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// Graph outputs of one forward pass.
pub struct ForwardGraph {
    /// `batch × 7`, denormalized, unit quaternion part.
    pub prediction: Var,
    pub attention: Vec<Var>,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let scale: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.affine(x, scale, &vec![0.0; n])
}

/// Builds the forward graph. `dropout_rng` enables training-mode dropout.
pub fn build_forward(
    tape: &mut Tape,
    model: &ForecasterModel,
    batch: &PreparedBatch,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> ForwardGraph {
    let cfg = &model.config;
    let (w, d) = (model.window, cfg.d_model);
    let nb = batch.len();
    let p: Vec<Var> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, m)| tape.param(i, m))
        .collect();

    let mut x = tape.constant(batch.inputs.clone());
    if batch.masked.iter().any(|m| *m) {
        x = tape.mask_rows(x, p[MASK_TOKEN], batch.masked.clone());
    }
    let h = tape.matmul(x, p[EMBED_W]);
    let h = tape.add_row(h, p[EMBED_B]);
    let mut h = tape.add_block(h, p[POS]);
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let s = layer_slots(l);
        let q = tape.matmul(h, p[s.wq]);
        let q = tape.add_row(q, p[s.bq]);
        let k = tape.matmul(h, p[s.wk]);
        let k = tape.add_row(k, p[s.bk]);
        let v = tape.matmul(h, p[s.wv]);
        let v = tape.add_row(v, p[s.bv]);
        let a = tape.attention(q, k, v, cfg.heads, w);
        attention.push(a);
        let a = tape.matmul(a, p[s.wo]);
        let a = tape.add_row(a, p[s.bo]);
        let a = dropout(tape, a, cfg.dropout, dropout_rng.as_deref_mut());
        let r = tape.add(h, a);
        let h1 = tape.layer_norm(r, p[s.ln1_g], p[s.ln1_b]);
        let f = tape.matmul(h1, p[s.w1]);
        let f = tape.add_row(f, p[s.b1]);
        let f = tape.gelu(f);
        let f = tape.matmul(f, p[s.w2]);
        let f = tape.add_row(f, p[s.b2]);
        let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut());
        let r = tape.add(h1, f);
        h = tape.layer_norm(r, p[s.ln2_g], p[s.ln2_b]);
    }
    let flat = tape.reshape(h, nb, w * d);
    let y = tape.matmul(flat, p[HEAD_W]);
    let y = tape.add_row(y, p[HEAD_B]);
    let mut scale = Vec::with_capacity(nb * CHANNELS);
    let mut shift = Vec::with_capacity(nb * CHANNELS);
    for st in &batch.stats {
        scale.extend_from_slice(&st.std);
        shift.extend_from_slice(&st.mean);
    }
    let y = tape.affine(y, scale, &shift);
    let prediction = tape.quat_normalize(y, 3);
    ForwardGraph {
        prediction,
        attention,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pred: f64,
    pub acc: f64,
    pub total: f64,
}

/// `L_pred + λ_acc L_acc`, both averaged over the batch.
///
/// `prev_two` holds the last two input means `(μ_{T-1}, μ_{T-2})` per item.
pub fn loss_group(
    predictions: &[Frame],
    targets: &[Frame],
    prev_two: &[([f64; 3], [f64; 3])],
    lambda_acc: f64,
) -> Result<LossParts> {
    if predictions.len() != targets.len() || predictions.len() != prev_two.len() {
        return Err(Error::Dimension(format!(
            "loss_group: {} predictions, {} targets, {} histories",
            predictions.len(),
            targets.len(),
            prev_two.len()
        )));
    }
    let n = predictions.len().max(1) as f64;
    let mut pred = 0.0;
    let mut acc = 0.0;
    for ((p, t), (m1, m2)) in predictions.iter().zip(targets).zip(prev_two) {
        pred += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        acc += (0..3).map(|c| (p[c] - 2.0 * m1[c] + m2[c]).powi(2)).sum::<f64>();
    }
    pred /= n;
    acc /= n;
    Ok(LossParts {
        pred,
        acc,
        total: pred + lambda_acc * acc,
    })
}

/// Loss graph on top of a forward pass; returns the scalar node and the
/// `(L_pred, L_acc)` nodes.
pub fn build_loss(
    tape: &mut Tape,
    prediction: Var,
    targets: &[Frame],
    prev_two: &[([f64; 3], [f64; 3])],
    lambda_acc: f64,
) -> (Var, Var, Var) {
    let n = targets.len();
    let t = tape.constant(Mat::from_vec(n, CHANNELS, targets.iter().flatten().copied().collect()));
    let diff = tape.sub(prediction, t);
    let sq = tape.sum_squares(diff);
    let pred = tape.scale(sq, 1.0 / n as f64);
    let anchor: Vec<f64> = prev_two
        .iter()
        .flat_map(|(m1, m2)| (0..3).map(move |c| 2.0 * m1[c] - m2[c]))
        .collect();
    let anchor = tape.constant(Mat::from_vec(n, 3, anchor));
    let means = tape.slice_cols(prediction, 0, 3);
    let accel = tape.sub(means, anchor);
    let asq = tape.sum_squares(accel);
    let acc = tape.scale(asq, 1.0 / n as f64);
    let weighted = tape.scale(acc, lambda_acc);
    let total = tape.add(pred, weighted);
    (total, pred, acc)
}
