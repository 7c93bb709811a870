//! Missed-suture detection on before/after frame pairs: dataset assembly,
//! class-balanced batching, augmentation, a small convolutional pair
//! classifier with a logistic baseline, evaluation and file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::devices::{
    camera_capture, CameraConfig, CapturePhase, Frame, FrameAnnotation, NeedleDriveOutcome, Side, SlipState,
    ThreadSegment, VesselConfig, VesselModel, FRAME_SIZE,
};
use crate::rng::{derive, derive_named, rng_from, SimRng};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training failed at epoch {epoch}: {message}")]
    TrainingFailure { epoch: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file {path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, VisionError>;

fn io_err(path: &Path, source: std::io::Error) -> VisionError {
    VisionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Success,
    Missed,
}

impl PairLabel {
    pub fn class(self) -> usize {
        match self {
            PairLabel::Success => 0,
            PairLabel::Missed => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 1 {
            PairLabel::Missed
        } else {
            PairLabel::Success
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub before: Frame,
    pub after: Frame,
    pub label: PairLabel,
    pub seed: u64,
}

impl FramePair {
    pub fn new(before: Frame, after: Frame, label: PairLabel, seed: u64) -> Result<Self> {
        check_dims(&before, &after)?;
        Ok(Self {
            before,
            after,
            label,
            seed,
        })
    }
}

fn check_dims(a: &Frame, b: &Frame) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(VisionError::InvalidArgument(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width != FRAME_SIZE || a.height != FRAME_SIZE {
        return Err(VisionError::InvalidArgument(format!(
            "expected {FRAME_SIZE}x{FRAME_SIZE} frames, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<FramePair>,
    pub val: Vec<FramePair>,
    pub test: Vec<FramePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub success: usize,
    pub missed: usize,
}

pub fn class_counts(pairs: &[FramePair]) -> ClassCounts {
    let missed = pairs.iter().filter(|p| p.label == PairLabel::Missed).count();
    ClassCounts {
        success: pairs.len() - missed,
        missed,
    }
}

impl DatasetSplit {
    pub fn counts(&self) -> [ClassCounts; 3] {
        [class_counts(&self.train), class_counts(&self.val), class_counts(&self.test)]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renders one before/after pair at a random site with the drive outcome
/// fixed by `label`.
pub fn render_pair(label: PairLabel, camera: &CameraConfig, seed: u64) -> Result<FramePair> {
    let mut rng = rng_from(seed);
    let mut vessel = VesselModel::new(VesselConfig::default()).map_err(|e| VisionError::InvalidArgument(e.to_string()))?;
    let site = rng.random_range(0..vessel.n_sites);
    let side = if rng.random::<bool>() { Side::Right } else { Side::Left };
    vessel.slip_state[side.index()].angular_deg = rng.random_range(0.0..10.0);
    let scene_seed = rng.random::<u64>();
    let outcome = NeedleDriveOutcome {
        engaged: label == PairLabel::Success,
        applied_tangential_force_n: 0.0,
        applied_axial_force_n: 0.0,
        bite_depth_actual_mm: 0.0,
        slip: SlipState::default(),
    };
    let err = |e: crate::devices::DeviceError| VisionError::InvalidArgument(e.to_string());
    let before = camera_capture(&vessel, site, side, CapturePhase::Before, None, scene_seed, camera, &mut rng).map_err(err)?;
    let after =
        camera_capture(&vessel, site, side, CapturePhase::After, Some(&outcome), scene_seed, camera, &mut rng).map_err(err)?;
    FramePair::new(before, after, label, seed)
}

/// `imbalance_ratio` is success:missed. Splits 80/10/10 stratified by class.
pub fn build_dataset(n_pairs: usize, imbalance_ratio: f64, camera: &CameraConfig, seed: u64) -> Result<DatasetSplit> {
    if n_pairs < 20 {
        return Err(VisionError::InvalidArgument(format!("need at least 20 pairs, got {n_pairs}")));
    }
    if !(imbalance_ratio > 0.0) || !imbalance_ratio.is_finite() {
        return Err(VisionError::InvalidArgument(format!("imbalance ratio {imbalance_ratio}")));
    }
    let n_missed = (n_pairs as f64 / (imbalance_ratio + 1.0)).round() as usize;
    let n_success = n_pairs - n_missed;
    if n_missed == 0 || n_success == 0 {
        return Err(VisionError::InvalidArgument(format!(
            "ratio {imbalance_ratio} leaves a class empty for {n_pairs} pairs"
        )));
    }
    let mut order: Vec<PairLabel> = std::iter::repeat_n(PairLabel::Success, n_success)
        .chain(std::iter::repeat_n(PairLabel::Missed, n_missed))
        .collect();
    let mut rng = rng_from(derive_named(seed, "vision/dataset"));
    order.shuffle(&mut rng);
    let pairs = order
        .iter()
        .enumerate()
        .map(|(i, label)| render_pair(*label, camera, derive(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let n_val = (n_pairs as f64 * 0.1).round() as usize;
    let n_test = n_val;
    let val_missed = n_val * n_missed / n_pairs;
    let test_missed = (n_test * n_missed).div_ceil(n_pairs);
    let quota = [
        (n_val - val_missed, val_missed),
        (n_test - test_missed, test_missed),
    ];
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut taken = [[0usize; 2]; 2];
    for p in pairs {
        let c = p.label.class();
        let want = |q: (usize, usize)| if c == 0 { q.0 } else { q.1 };
        if taken[0][c] < want(quota[0]) {
            taken[0][c] += 1;
            split.val.push(p);
        } else if taken[1][c] < want(quota[1]) {
            taken[1][c] += 1;
            split.test.push(p);
        } else {
            split.train.push(p);
        }
    }
    Ok(split)
}

/// One epoch of batches with exact class parity. The majority class is
/// covered once in shuffled order (topped up by resampling for the last
/// batch); the minority is resampled with replacement.
pub fn balanced_batches(labels: &[PairLabel], batch_size: usize, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(VisionError::InvalidArgument(format!("batch size {batch_size} must be even and > 0")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.class()].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(VisionError::InvalidArgument("both classes must be present".into()));
    }
    let half = batch_size / 2;
    let (major, minor) = if by_class[0].len() >= by_class[1].len() {
        (0, 1)
    } else {
        (1, 0)
    };
    let mut majority = by_class[major].clone();
    majority.shuffle(rng);
    let n_batches = majority.len().div_ceil(half);
    while majority.len() < n_batches * half {
        let pick = by_class[major][rng.random_range(0..by_class[major].len())];
        majority.push(pick);
    }
    let minority = &by_class[minor];
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch: Vec<usize> = majority[b * half..(b + 1) * half].to_vec();
        for _ in 0..half {
            batch.push(minority[rng.random_range(0..minority.len())]);
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rot90: bool,
    pub flips: bool,
    pub max_rotation_deg: f64,
    pub max_translate_px: f64,
    pub max_scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub pixel_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rot90: true,
            flips: true,
            max_rotation_deg: 10.0,
            max_translate_px: 2.0,
            max_scale: 0.05,
            brightness: 0.05,
            contrast: 0.1,
            pixel_dropout: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Forward map from source to augmented pixel coordinates, `p' = A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Self { a: inv, t }
    }
}

/// Parameters drawn once per pair and applied identically to both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub geometry: Affine,
    pub brightness: f64,
    pub contrast: f64,
    pub dropout_seed: u64,
    pub dropout_rate: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            geometry: Affine::identity(),
            brightness: 0.0,
            contrast: 1.0,
            dropout_seed: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, size: usize, rng: &mut SimRng) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let c = (size as f64 - 1.0) / 2.0;
        let quarter = if cfg.rot90 { rng.random_range(0..4) } else { 0 };
        let theta = quarter as f64 * std::f64::consts::FRAC_PI_2
            + rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
        let flip_x = cfg.flips && rng.random::<bool>();
        let scale = 1.0 + rng.random_range(-1.0..=1.0) * cfg.max_scale;
        let (s, co) = theta.sin_cos();
        let fx = if flip_x { -1.0 } else { 1.0 };
        let a = [[scale * co * fx, -scale * s], [scale * s * fx, scale * co]];
        let shift = [
            rng.random_range(-1.0..=1.0) * cfg.max_translate_px,
            rng.random_range(-1.0..=1.0) * cfg.max_translate_px,
        ];
        // rotate/flip/scale about the frame centre, then translate
        let t = [
            c - (a[0][0] * c + a[0][1] * c) + shift[0],
            c - (a[1][0] * c + a[1][1] * c) + shift[1],
        ];
        Self {
            geometry: Affine { a, t },
            brightness: rng.random_range(-1.0..=1.0) * cfg.brightness,
            contrast: 1.0 + rng.random_range(-1.0..=1.0) * cfg.contrast,
            dropout_seed: rng.random(),
            dropout_rate: cfg.pixel_dropout,
        }
    }

    fn apply_pixels(&self, frame: &Frame, channel: u64) -> Vec<f32> {
        let (w, h) = (frame.width, frame.height);
        let inv = self.geometry.inverse();
        let mut out = vec![0f32; w * h];
        let mut drop_rng = rng_from(derive(self.dropout_seed, channel));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let v = bilinear(frame, sx, sy);
                let v = (v - 0.5) * self.contrast + 0.5 + self.brightness;
                let dropped = self.dropout_rate > 0.0 && drop_rng.random::<f64>() < self.dropout_rate;
                out[y * w + x] = if dropped { 0.0 } else { v.clamp(0.0, 1.0) as f32 };
            }
        }
        out
    }

    pub fn apply_frame(&self, frame: &Frame, channel: u64) -> Frame {
        Frame {
            width: frame.width,
            height: frame.height,
            pixels: self.apply_pixels(frame, channel),
            annotation: self.apply_annotation(&frame.annotation),
        }
    }

    /// Moves the ground-truth thread with the geometry.
    pub fn apply_annotation(&self, ann: &FrameAnnotation) -> FrameAnnotation {
        let thread = ann.thread.map(|t| {
            let (x0, y0) = self.geometry.apply(t.x0, t.y0);
            let (x1, y1) = self.geometry.apply(t.x1, t.y1);
            ThreadSegment {
                x0,
                y0,
                x1,
                y1,
                half_width: t.half_width,
            }
        });
        FrameAnnotation {
            thread,
            ..ann.clone()
        }
    }

    pub fn apply_pair(&self, pair: &FramePair) -> FramePair {
        FramePair {
            before: self.apply_frame(&pair.before, 0),
            after: self.apply_frame(&pair.after, 1),
            label: pair.label,
            seed: pair.seed,
        }
    }
}

/// Edge pixels replicate outward.
fn bilinear(frame: &Frame, x: f64, y: f64) -> f64 {
    let max_x = (frame.width - 1) as f64;
    let max_y = (frame.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(frame.width - 1), (y0 + 1).min(frame.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let g = |xx: usize, yy: usize| f64::from(frame.get(xx, yy));
    let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
    let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

const IN: usize = FRAME_SIZE / 2;
const IN_CH: usize = 2;
const C1: usize = 8;
const C2: usize = 16;
const P1: usize = IN / 2;
const P2_POOL: usize = 4;
const P2: usize = P1 / P2_POOL;
const FEAT: usize = C2 * P2 * P2;
const DIFF: usize = IN / 2;

/// 2x2 average-pooled pair, both channels centred on the before-frame mean.
pub fn pair_tensor(before: &[f32], after: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; IN_CH * IN * IN];
    for (ch, src) in [before, after].iter().enumerate() {
        for y in 0..IN {
            for x in 0..IN {
                let i = 2 * y * FRAME_SIZE + 2 * x;
                out[ch * IN * IN + y * IN + x] =
                    0.25 * (src[i] + src[i + 1] + src[i + FRAME_SIZE] + src[i + FRAME_SIZE + 1]);
            }
        }
    }
    let m = out[..IN * IN].iter().sum::<f32>() / (IN * IN) as f32;
    for v in &mut out {
        *v -= m;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Cnn,
    Logistic,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Cnn => 1,
            ModelKind::Logistic => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ModelKind::Cnn),
            2 => Some(ModelKind::Logistic),
            _ => None,
        }
    }

    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Cnn => C1 * IN_CH * 9 + C1 + C2 * C1 * 9 + C2 + 2 * FEAT + 2,
            ModelKind::Logistic => 2 * DIFF * DIFF + 2,
        }
    }
}

mod offs {
    use super::*;
    pub const W1: usize = 0;
    pub const B1: usize = W1 + C1 * IN_CH * 9;
    pub const W2: usize = B1 + C1;
    pub const B2: usize = W2 + C2 * C1 * 9;
    pub const WD: usize = B2 + C2;
    pub const BD: usize = WD + 2 * FEAT;
}

/// Two-way scorer on a before/after pair. Class 0 is Success, 1 Missed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassifier {
    pub kind: ModelKind,
    pub params: Vec<f32>,
    pub dropout: f32,
    pub config_hash: String,
}

fn softmax2(l: [f32; 2]) -> [f32; 2] {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn conv3x3(input: &[f32], in_ch: usize, size: usize, w: &[f32], b: &[f32], out_ch: usize) -> Vec<f32> {
    let mut out = vec![0f32; out_ch * size * size];
    for oc in 0..out_ch {
        let o = &mut out[oc * size * size..(oc + 1) * size * size];
        o.fill(b[oc]);
        for ic in 0..in_ch {
            let plane = &input[ic * size * size..(ic + 1) * size * size];
            let k = &w[(oc * in_ch + ic) * 9..(oc * in_ch + ic) * 9 + 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (size + 1 - ky).min(size);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (size + 1 - kx).min(size);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * size..(y + 1) * size];
                        let irow = &plane[iy * size..(iy + 1) * size];
                        for x in x_lo..x_hi {
                            orow[x] += wv * irow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    in_ch: usize,
    size: usize,
    w: &[f32],
    dout: &[f32],
    out_ch: usize,
    dw: &mut [f32],
    db: &mut [f32],
    mut din: Option<&mut [f32]>,
) {
    for oc in 0..out_ch {
        let d = &dout[oc * size * size..(oc + 1) * size * size];
        db[oc] += d.iter().sum::<f32>();
        for ic in 0..in_ch {
            let plane = &input[ic * size * size..(ic + 1) * size * size];
            let base = (oc * in_ch + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (size + 1 - ky).min(size);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (size + 1 - kx).min(size);
                    let wv = w[base + ky * 3 + kx];
                    let mut acc = 0f32;
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let drow = &d[y * size..(y + 1) * size];
                        let irow = &plane[iy * size..(iy + 1) * size];
                        for x in x_lo..x_hi {
                            acc += drow[x] * irow[x + kx - 1];
                        }
                        if let Some(din) = din.as_deref_mut() {
                            let grow = &mut din[ic * size * size + iy * size..ic * size * size + (iy + 1) * size];
                            for x in x_lo..x_hi {
                                grow[x + kx - 1] += drow[x] * wv;
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

fn max_pool(input: &[f32], ch: usize, size: usize, k: usize) -> (Vec<f32>, Vec<usize>) {
    let os = size / k;
    let mut out = vec![0f32; ch * os * os];
    let mut arg = vec![0usize; ch * os * os];
    for c in 0..ch {
        for oy in 0..os {
            for ox in 0..os {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = c * size * size + (oy * k + dy) * size + ox * k + dx;
                        if input[i] > best {
                            best = input[i];
                            bi = i;
                        }
                    }
                }
                out[c * os * os + oy * os + ox] = best;
                arg[c * os * os + oy * os + ox] = bi;
            }
        }
    }
    (out, arg)
}

impl PairClassifier {
    pub fn new(kind: ModelKind, dropout: f32, seed: u64) -> Self {
        let mut rng = rng_from(derive_named(seed, "vision/init"));
        let mut params = vec![0f32; kind.n_params()];
        let mut normal = |slice: &mut [f32], std: f64| {
            let d = rand_distr::Normal::new(0.0, std).expect("std > 0");
            for v in slice {
                *v = rand_distr::Distribution::sample(&d, &mut rng) as f32;
            }
        };
        match kind {
            ModelKind::Cnn => {
                normal(&mut params[offs::W1..offs::B1], (2.0 / (IN_CH * 9) as f64).sqrt());
                normal(&mut params[offs::W2..offs::B2], (2.0 / (C1 * 9) as f64).sqrt());
                normal(&mut params[offs::WD..offs::BD], (1.0 / FEAT as f64).sqrt());
            }
            ModelKind::Logistic => {
                let n = 2 * DIFF * DIFF;
                normal(&mut params[..n], 0.01);
            }
        }
        Self {
            kind,
            params,
            dropout,
            config_hash: String::new(),
        }
    }

    fn diff_features(x: &[f32]) -> Vec<f32> {
        let mut f = vec![0f32; DIFF * DIFF];
        for y in 0..DIFF {
            for xx in 0..DIFF {
                let mut s = 0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * y + dy) * IN + 2 * xx + dx;
                        s += x[IN * IN + i] - x[i];
                    }
                }
                f[y * DIFF + xx] = 0.25 * s;
            }
        }
        f
    }

    /// Logits; `grad` receives dLoss/dparams for `label` when given.
    fn forward(&self, x: &[f32], mask: Option<&[f32]>, backprop: Option<(usize, &mut [f32])>) -> ([f32; 2], f32) {
        match self.kind {
            ModelKind::Logistic => {
                let f = Self::diff_features(x);
                let n = DIFF * DIFF;
                let p = &self.params;
                let mut logits = [p[2 * n], p[2 * n + 1]];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += p[j * n..(j + 1) * n].iter().zip(&f).map(|(w, v)| w * v).sum::<f32>();
                }
                let probs = softmax2(logits);
                let mut loss = 0.0;
                if let Some((label, g)) = backprop {
                    loss = -probs[label].max(1e-12).ln();
                    for j in 0..2 {
                        let dl = probs[j] - if j == label { 1.0 } else { 0.0 };
                        for (gi, v) in g[j * n..(j + 1) * n].iter_mut().zip(&f) {
                            *gi += dl * v;
                        }
                        g[2 * n + j] += dl;
                    }
                }
                (logits, loss)
            }
            ModelKind::Cnn => {
                let p = &self.params;
                let mut a1 = conv3x3(x, IN_CH, IN, &p[offs::W1..offs::B1], &p[offs::B1..offs::W2], C1);
                a1.iter_mut().for_each(|v| *v = v.max(0.0));
                let (p1, arg1) = max_pool(&a1, C1, IN, 2);
                let mut a2 = conv3x3(&p1, C1, P1, &p[offs::W2..offs::B2], &p[offs::B2..offs::WD], C2);
                a2.iter_mut().for_each(|v| *v = v.max(0.0));
                let (p2, arg2) = max_pool(&a2, C2, P1, P2_POOL);
                let feat: Vec<f32> = match mask {
                    Some(m) => p2.iter().zip(m).map(|(v, k)| v * k).collect(),
                    None => p2,
                };
                let wd = &p[offs::WD..offs::BD];
                let mut logits = [p[offs::BD], p[offs::BD + 1]];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += wd[j * FEAT..(j + 1) * FEAT].iter().zip(&feat).map(|(w, v)| w * v).sum::<f32>();
                }
                let probs = softmax2(logits);
                let Some((label, g)) = backprop else {
                    return (logits, 0.0);
                };
                let loss = -probs[label].max(1e-12).ln();
                let mut dfeat = vec![0f32; FEAT];
                for j in 0..2 {
                    let dl = probs[j] - if j == label { 1.0 } else { 0.0 };
                    let gw = &mut g[offs::WD + j * FEAT..offs::WD + (j + 1) * FEAT];
                    for k in 0..FEAT {
                        gw[k] += dl * feat[k];
                        dfeat[k] += dl * wd[j * FEAT + k];
                    }
                    g[offs::BD + j] += dl;
                }
                if let Some(m) = mask {
                    dfeat.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
                }
                let mut da2 = vec![0f32; C2 * P1 * P1];
                for (k, &src) in arg2.iter().enumerate() {
                    if a2[src] > 0.0 {
                        da2[src] += dfeat[k];
                    }
                }
                let mut dp1 = vec![0f32; C1 * P1 * P1];
                {
                    let (gw2, rest) = g[offs::W2..].split_at_mut(offs::B2 - offs::W2);
                    conv3x3_backward(
                        &p1,
                        C1,
                        P1,
                        &p[offs::W2..offs::B2],
                        &da2,
                        C2,
                        gw2,
                        &mut rest[..C2],
                        Some(&mut dp1),
                    );
                }
                let mut da1 = vec![0f32; C1 * IN * IN];
                for (k, &src) in arg1.iter().enumerate() {
                    if a1[src] > 0.0 {
                        da1[src] += dp1[k];
                    }
                }
                let (gw1, rest) = g[offs::W1..].split_at_mut(offs::B1 - offs::W1);
                conv3x3_backward(x, IN_CH, IN, &p[offs::W1..offs::B1], &da1, C1, gw1, &mut rest[..C1], None);
                (logits, loss)
            }
        }
    }

    pub fn probabilities_tensor(&self, x: &[f32]) -> [f32; 2] {
        softmax2(self.forward(x, None, None).0)
    }

    pub fn probabilities(&self, before: &Frame, after: &Frame) -> Result<[f32; 2]> {
        check_dims(before, after)?;
        Ok(self.probabilities_tensor(&pair_tensor(&before.pixels, &after.pixels)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: PairLabel,
    pub confidence: f64,
}

pub fn predict(classifier: &PairClassifier, before: &Frame, after: &Frame) -> Result<Prediction> {
    let p = classifier.probabilities(before, after)?;
    let class = usize::from(p[1] > p[0]);
    Ok(Prediction {
        label: PairLabel::from_class(class),
        confidence: f64::from(p[class]),
    })
}

/// Missed is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: PairLabel, predicted: PairLabel) {
        match (truth, predicted) {
            (PairLabel::Missed, PairLabel::Missed) => self.tp += 1,
            (PairLabel::Success, PairLabel::Missed) => self.fp += 1,
            (PairLabel::Success, PairLabel::Success) => self.tn += 1,
            (PairLabel::Missed, PairLabel::Success) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub precision_missed: f64,
    pub recall_missed: f64,
    pub f1_missed: f64,
    pub confusion: Confusion,
}

impl EvalMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let total = c.total().max(1) as f64;
        let precision = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
        let recall = if c.tp + c.fn_ > 0 { c.tp as f64 / (c.tp + c.fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: (c.tp + c.tn) as f64 / total,
            precision_missed: precision,
            recall_missed: recall,
            f1_missed: f1,
            confusion: c,
        }
    }
}

pub fn evaluate(classifier: &PairClassifier, pairs: &[FramePair]) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(VisionError::InvalidArgument("no pairs to evaluate".into()));
    }
    let mut c = Confusion::default();
    for p in pairs {
        c.record(p.label, predict(classifier, &p.before, &p.after)?.label);
    }
    Ok(EvalMetrics::from_confusion(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cnn,
            learning_rate: 3e-4,
            dropout: 0.5,
            batch_size: 16,
            max_epochs: 300,
            patience: 30,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub classifier: PairClassifier,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_metrics: EvalMetrics,
    pub test_metrics: Option<EvalMetrics>,
}

pub const CURVE_CSV_HEADER: &str = "epoch,loss,val_acc,val_f1";

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for r in curve {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.val_acc, r.val_f1);
    }
    out
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: lr as f32,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn val_pass(classifier: &PairClassifier, tensors: &[(Vec<f32>, PairLabel)]) -> (f64, EvalMetrics) {
    let mut loss = 0.0;
    let mut c = Confusion::default();
    for (x, label) in tensors {
        let p = classifier.probabilities_tensor(x);
        loss -= f64::from(p[label.class()].max(1e-12)).ln();
        c.record(*label, PairLabel::from_class(usize::from(p[1] > p[0])));
    }
    (loss / tensors.len() as f64, EvalMetrics::from_confusion(c))
}

/// Minimises cross-entropy over balanced batches with Adam, keeping the
/// checkpoint with the lowest validation loss and stopping after
/// `patience` epochs without improvement.
pub fn train(split: &DatasetSplit, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(VisionError::InvalidArgument("train and validation splits must be non-empty".into()));
    }
    if !(config.learning_rate >= 0.0 && (0.0..1.0).contains(&config.dropout)) {
        return Err(VisionError::InvalidArgument("learning rate must be >= 0 and dropout in [0,1)".into()));
    }
    let mut model = PairClassifier::new(config.model, config.dropout as f32, seed);
    model.config_hash = config.hash();
    let labels: Vec<PairLabel> = split.train.iter().map(|p| p.label).collect();
    let val: Vec<(Vec<f32>, PairLabel)> = split
        .val
        .iter()
        .map(|p| (pair_tensor(&p.before.pixels, &p.after.pixels), p.label))
        .collect();
    let plain: Vec<Vec<f32>> = if config.augment.enabled {
        Vec::new()
    } else {
        split.train.iter().map(|p| pair_tensor(&p.before.pixels, &p.after.pixels)).collect()
    };
    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut rng = rng_from(derive_named(seed, "vision/train"));
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_metrics = None;
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let keep = 1.0 - config.dropout as f32;
    let mut grad = vec![0f32; model.params.len()];
    for epoch in 1..=config.max_epochs {
        let batches = balanced_batches(&labels, config.batch_size, &mut rng)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            grad.fill(0.0);
            let mut batch_loss = 0f32;
            for &i in batch {
                let pair = &split.train[i];
                let x = if config.augment.enabled {
                    let aug = Augmentation::sample(&config.augment, FRAME_SIZE, &mut rng);
                    pair_tensor(&aug.apply_pixels(&pair.before, 0), &aug.apply_pixels(&pair.after, 1))
                } else {
                    plain[i].clone()
                };
                let mask: Option<Vec<f32>> = (model.kind == ModelKind::Cnn && config.dropout > 0.0).then(|| {
                    (0..FEAT)
                        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                });
                let (_, loss) = model.forward(&x, mask.as_deref(), Some((pair.label.class(), &mut grad)));
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(VisionError::TrainingFailure {
                    epoch,
                    message: format!("non-finite batch loss {batch_loss} after {seen} samples"),
                });
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(VisionError::TrainingFailure {
                    epoch,
                    message: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model.params, &grad);
            epoch_loss += f64::from(batch_loss);
            seen += batch.len();
        }
        let (val_loss, metrics) = val_pass(&model, &val);
        if !val_loss.is_finite() {
            return Err(VisionError::TrainingFailure {
                epoch,
                message: format!("validation loss {val_loss}"),
            });
        }
        curve.push(EpochRecord {
            epoch,
            loss: epoch_loss / seen as f64,
            val_loss,
            val_acc: metrics.accuracy,
            val_f1: metrics.f1_missed,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.clone();
            best_metrics = Some(metrics);
        } else if epoch - best_epoch >= config.patience {
            stopped_early = true;
            break;
        }
    }
    let test_metrics = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(&best, &split.test)?)
    };
    Ok(TrainOutcome {
        classifier: best,
        curve,
        best_epoch,
        stopped_early,
        val_metrics: best_metrics.expect("at least one epoch ran"),
        test_metrics,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"SVPC";
pub const MODEL_FORMAT_VERSION: u32 = 1;

impl PairClassifier {
    /// Layout: magic, format version, model kind, dropout, config hash
    /// (length-prefixed), parameter count, little-endian f32 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.params.len() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.dropout.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let bad = |m: &str| VisionError::Format {
            path: label.to_string(),
            message: m.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(bad("not a pair-classifier model"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != MODEL_FORMAT_VERSION {
            return Err(bad(&format!("unsupported model version {version}")));
        }
        let kind = ModelKind::from_code(take(1)?[0]).ok_or_else(|| bad("unknown model kind"))?;
        let dropout = f32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let hlen = u32_at(take(4)?) as usize;
        let config_hash = String::from_utf8(take(hlen)?.to_vec()).map_err(|_| bad("config hash not utf-8"))?;
        let n = u32_at(take(4)?) as usize;
        if n != kind.n_params() {
            return Err(bad(&format!("{n} parameters, expected {}", kind.n_params())));
        }
        let raw = take(n * 4)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            kind,
            params,
            dropout,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

pub fn frame_to_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary PGM; the annotation is not stored in the file.
pub fn frame_from_pgm(bytes: &[u8], annotation: FrameAnnotation, label: &str) -> Result<Frame> {
    let bad = |m: String| VisionError::Format {
        path: label.to_string(),
        message: m,
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad(format!("magic {:?}, expected P5", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("header field {s:?}: {e}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} unsupported")));
    }
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("pixel data truncated".into()))?;
    let pixels = data.iter().map(|b| f32::from(*b) / maxval as f32).collect();
    Frame::new(w, h, pixels, annotation).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub before: String,
    pub after: String,
    pub label: PairLabel,
    pub seed: u64,
    pub split: String,
    pub before_annotation: FrameAnnotation,
    pub after_annotation: FrameAnnotation,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<Vec<PairManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::new();
    let mut idx = 0;
    for (name, pairs) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for p in pairs {
            let before = format!("pair_{idx:04}_before.pgm");
            let after = format!("pair_{idx:04}_after.pgm");
            fs::write(dir.join(&before), frame_to_pgm(&p.before)).map_err(|e| io_err(&dir.join(&before), e))?;
            fs::write(dir.join(&after), frame_to_pgm(&p.after)).map_err(|e| io_err(&dir.join(&after), e))?;
            entries.push(PairManifestEntry {
                before,
                after,
                label: p.label,
                seed: p.seed,
                split: name.into(),
                before_annotation: p.before.annotation.clone(),
                after_annotation: p.after.annotation.clone(),
            });
            idx += 1;
        }
    }
    let path = dir.join(DATASET_MANIFEST);
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(entries)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let entries: Vec<PairManifestEntry> = serde_json::from_str(&text).map_err(|e| VisionError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in entries {
        let load = |file: &str, ann: FrameAnnotation| -> Result<Frame> {
            let p = dir.join(file);
            let bytes = fs::read(&p).map_err(|err| io_err(&p, err))?;
            frame_from_pgm(&bytes, ann, &p.display().to_string())
        };
        let pair = FramePair::new(
            load(&e.before, e.before_annotation)?,
            load(&e.after, e.after_annotation)?,
            e.label,
            e.seed,
        )?;
        match e.split.as_str() {
            "train" => split.train.push(pair),
            "val" => split.val.push(pair),
            "test" => split.test.push(pair),
            other => {
                return Err(VisionError::Format {
                    path: path.display().to_string(),
                    message: format!("unknown split {other:?}"),
                })
            }
        }
    }
    Ok(split)
}
