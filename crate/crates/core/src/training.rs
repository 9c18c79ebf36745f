//! Focal-loss / Adam training with on-the-fly augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cine_data::{self, read_ctv, CineDataError, CineVolume, LabelTask, Manifest, Split};
use crate::densenet::{build_model, save_checkpoint, ArchConfig, Mode, Model, ModelError, Param};
use crate::heart_extraction::{extract_heart, ExtractionConfig, ExtractionError};
use crate::image::bilinear;
use crate::nn::{Graph, NnError, Tensor};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("split: {0}")]
    Split(String),
    #[error("sample {subject}: {source}")]
    Sample {
        subject: String,
        #[source]
        source: Box<crate::Error>,
    },
    #[error(transparent)]
    Data(#[from] CineDataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainingError {
    TrainingError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    /// Per-class focal weights; `None` means inverse training-set frequency
    /// normalised to mean 1.
    pub focal_alpha: Option<Vec<f64>>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub augment_prob: f64,
    pub rotation_range_deg: f64,
    pub contrast_gamma_range: (f64, f64),
    pub bias_field_order: usize,
    pub bias_field_coeff_range: (f64, f64),
    pub target_depth: usize,
    pub seed: u64,
    pub task: LabelTask,
    /// Inputs are already heart-centred crops of the model input size.
    pub skip_extraction: bool,
    pub workers: usize,
    #[serde(flatten)]
    pub extraction: ExtractionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 500,
            batch_size: 2,
            focal_gamma: 2.0,
            focal_alpha: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            augment_prob: 0.2,
            rotation_range_deg: 15.0,
            contrast_gamma_range: (0.7, 1.5),
            bias_field_order: 3,
            bias_field_coeff_range: (-0.3, 0.3),
            target_depth: 30,
            seed: 0,
            task: LabelTask::TwoClass,
            skip_extraction: false,
            workers: 1,
            extraction: ExtractionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.target_depth == 0 {
            return bad("epochs, batch_size and target_depth must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.focal_gamma < 0.0 {
            return bad("focal_gamma must be non-negative");
        }
        if let Some(a) = &self.focal_alpha {
            if a.len() != self.task.num_classes() || a.iter().any(|v| !(*v >= 0.0)) {
                return bad("focal_alpha needs one non-negative weight per class");
            }
        }
        if self.contrast_gamma_range.0 <= 0.0 || self.contrast_gamma_range.0 > self.contrast_gamma_range.1 {
            return bad("contrast_gamma_range must be positive and ordered");
        }
        if self.bias_field_coeff_range.0 > self.bias_field_coeff_range.1 {
            return bad("bias_field_coeff_range must be ordered");
        }
        if !self.skip_extraction {
            self.extraction.validate().map_err(|e| TrainingError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Mean over the batch of `-alpha_y (1 - p_y)^gamma ln p_y`.
pub fn focal_loss(probs: &Tensor, targets: &[usize], gamma: f64, alpha: &[f64]) -> Result<f64, NnError> {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone(), false);
    let loss = g.focal_loss(p, targets, gamma, alpha)?;
    Ok(g.value(loss).item())
}

/// Inverse class frequency, normalised to mean 1. Absent classes count as one sample.
pub fn inverse_frequency_alpha(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / num_classes as f64;
    inv.iter().map(|v| v / mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails before touching any parameter if a
/// gradient is non-finite.
pub fn adam_step(params: &mut [Param], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TrainingError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TrainingError::InvalidConfig("parameter/gradient/state count mismatch".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(TrainingError::InvalidConfig(format!("gradient shape mismatch for {}", p.name)));
        }
        if !g.is_finite() {
            return Err(TrainingError::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut())) {
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Which augmentations fired and with what parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentRecord {
    pub rotation_deg: Option<f64>,
    pub contrast_gamma: Option<f64>,
    pub bias_coeffs: Option<Vec<f64>>,
}

/// Monomials `x^i y^j` with `i + j <= order`, in a fixed order.
fn bias_terms(order: usize) -> Vec<(i32, i32)> {
    let mut terms = Vec::new();
    for total in 0..=order as i32 {
        for i in (0..=total).rev() {
            terms.push((i, total - i));
        }
    }
    terms
}

/// In-plane rotation of every frame about the frame centre, bilinear with zero fill.
pub fn rotate_frames(vox: &[f64], dims: [usize; 3], deg: f64) -> Vec<f64> {
    let [h, w, d] = dims;
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; vox.len()];
    let mut frame = vec![0.0; h * w];
    for t in 0..d {
        for p in 0..h * w {
            frame[p] = vox[p * d + t];
        }
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                let sy = c * dy - s * dx + cy;
                let sx = s * dy + c * dx + cx;
                out[(r * w + col) * d + t] = bilinear(&frame, h, w, sy, sx, Some(0.0));
            }
        }
    }
    out
}

/// Applies rotation, contrast and bias-field augmentation, each independently
/// with probability `augment_prob`.
pub fn augment<R: Rng>(volume: &CineVolume, cfg: &TrainConfig, rng: &mut R) -> (CineVolume, AugmentRecord) {
    let mut record = AugmentRecord::default();
    if rng.random::<f64>() < cfg.augment_prob {
        let r = cfg.rotation_range_deg;
        record.rotation_deg = Some(if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 });
    }
    if rng.random::<f64>() < cfg.augment_prob {
        let (lo, hi) = cfg.contrast_gamma_range;
        record.contrast_gamma = Some(if hi > lo { rng.random_range(lo..=hi) } else { lo });
    }
    if rng.random::<f64>() < cfg.augment_prob {
        let (lo, hi) = cfg.bias_field_coeff_range;
        let n = bias_terms(cfg.bias_field_order).len();
        record.bias_coeffs = Some((0..n).map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect());
    }
    if record == AugmentRecord::default() {
        return (volume.clone(), record);
    }
    let [h, w, d] = volume.dims();
    let mut vox: Vec<f64> = volume.voxels().iter().map(|&v| v as f64).collect();

    if let Some(deg) = record.rotation_deg {
        vox = rotate_frames(&vox, [h, w, d], deg);
    }

    if let Some(gamma) = record.contrast_gamma {
        let lo = vox.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vox.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let span = hi - lo;
            vox.iter_mut().for_each(|v| *v = lo + span * ((*v - lo) / span).powf(gamma));
        }
    }

    if let Some(coeffs) = &record.bias_coeffs {
        let terms = bias_terms(cfg.bias_field_order);
        for r in 0..h {
            let y = if h > 1 { 2.0 * r as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
            for col in 0..w {
                let x = if w > 1 { 2.0 * col as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                let poly: f64 = terms.iter().zip(coeffs).map(|(&(i, j), c)| c * x.powi(i) * y.powi(j)).sum();
                let gain = poly.exp();
                for t in 0..d {
                    vox[(r * w + col) * d + t] *= gain;
                }
            }
        }
    }

    let out = volume.with_voxels(vox.into_iter().map(|v| v as f32).collect()).expect("augmentation keeps values finite");
    (out, record)
}

/// Target split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Sizes proportional to a reference split (largest remainder rounding).
    pub fn proportional(total: usize, reference: (usize, usize, usize), seed: u64) -> Self {
        let [a, b, c] = largest_remainder(total, &[reference.0 as f64, reference.1 as f64, reference.2 as f64])[..] else {
            unreachable!()
        };
        Self { train_n: a, val_n: b, test_n: c, seed }
    }

    /// The clinical 322 / 81 / 173 proportions.
    pub fn paper_proportions(total: usize, seed: u64) -> Self {
        Self::proportional(total, (322, 81, 173), seed)
    }

    fn sizes(&self) -> [usize; 3] {
        [self.train_n, self.val_n, self.test_n]
    }
}

/// Integer apportionment of `total` by `weights` using largest remainders;
/// ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns train/val/test so every class is spread in proportion to its
/// prevalence (each class/split count within 1 of its ideal share).
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest, TrainingError> {
    let n = manifest.len();
    let sizes = spec.sizes();
    if sizes.iter().sum::<usize>() != n {
        return Err(TrainingError::Split(format!("split sizes {sizes:?} do not sum to {n} samples")));
    }
    let active = sizes.iter().filter(|&&s| s > 0).count();
    let mut by_class: Vec<(u8, Vec<usize>)> = Vec::new();
    for (label, _) in manifest.class_histogram() {
        let idx: Vec<usize> = (0..n).filter(|&i| manifest.entries[i].label == label).collect();
        if idx.len() < active {
            return Err(TrainingError::Split(format!(
                "class {label} has {} samples, fewer than the {active} non-empty splits",
                idx.len()
            )));
        }
        by_class.push((label, idx));
    }
    // Floor of each ideal share, then place the leftovers so that both class
    // totals and split totals come out exact.
    let ideal = |nc: usize, s: usize| nc as f64 * sizes[s] as f64 / n as f64;
    let mut alloc: Vec<[usize; 3]> = by_class
        .iter()
        .map(|(_, idx)| [0, 1, 2].map(|s| ideal(idx.len(), s).floor() as usize))
        .collect();
    let mut split_left: [usize; 3] = [0, 1, 2].map(|s| sizes[s] - alloc.iter().map(|a| a[s]).sum::<usize>());
    let mut class_left: Vec<usize> = by_class.iter().zip(&alloc).map(|((_, idx), a)| idx.len() - a.iter().sum::<usize>()).collect();
    let mut class_order: Vec<usize> = (0..by_class.len()).collect();
    class_order.sort_by(|&a, &b| class_left[b].cmp(&class_left[a]).then(a.cmp(&b)));
    for &c in &class_order {
        while class_left[c] > 0 {
            let nc = by_class[c].1.len();
            let pick = (0..3)
                .filter(|&s| split_left[s] > 0 && alloc[c][s] == ideal(nc, s).floor() as usize)
                .max_by(|&a, &b| {
                    split_left[a].cmp(&split_left[b]).then_with(|| {
                        let fa = ideal(nc, a).fract();
                        let fb = ideal(nc, b).fract();
                        fa.total_cmp(&fb)
                    }).then(b.cmp(&a))
                })
                .ok_or_else(|| TrainingError::Split("could not balance class remainders".into()))?;
            alloc[c][pick] += 1;
            split_left[pick] -= 1;
            class_left[c] -= 1;
        }
    }
    let mut rng = stream(spec.seed, &[0x5911_7000]);
    let mut out = manifest.clone();
    for ((_, idx), a) in by_class.iter().zip(&alloc) {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for (s, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            for i in it.by_ref().take(a[s]) {
                out.entries[i].split = split;
            }
        }
    }
    Ok(out)
}

/// Extraction (unless skipped), depth resampling and z-scoring.
pub fn preprocess(volume: &CineVolume, cfg: &TrainConfig) -> crate::Result<CineVolume> {
    let cropped = if cfg.skip_extraction {
        volume.clone()
    } else {
        extract_heart(volume, &cfg.extraction).map_err(|e: ExtractionError| crate::Error::from(e))?
    };
    let resized = cine_data::resize_depth_area(&cropped, cfg.target_depth)?;
    Ok(cine_data::zscore_normalize(&resized)?)
}

/// Reads and preprocesses every entry, in manifest order.
pub fn load_preprocessed(manifest: &Manifest, indices: &[usize], cfg: &TrainConfig) -> Result<Vec<CineVolume>, TrainingError> {
    let load = |i: usize| -> Result<CineVolume, TrainingError> {
        let e = &manifest.entries[i];
        let wrap = |err: crate::Error| TrainingError::Sample { subject: e.subject_id.clone(), source: Box::new(err) };
        let v = read_ctv(manifest.resolve(e)).map_err(|err| wrap(err.into()))?;
        preprocess(&v, cfg).map_err(wrap)
    };
    let workers = cfg.workers.max(1).min(indices.len().max(1));
    if workers == 1 {
        return indices.iter().map(|&i| load(i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    let results: Vec<Result<Vec<CineVolume>, TrainingError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&i| load(i)).collect::<Result<Vec<_>, _>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("preprocessing worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Stacks `(H, W, D)` volumes into an `(N, 1, H, W, D)` batch.
pub fn batch_tensor(volumes: &[&CineVolume]) -> Result<Tensor, NnError> {
    let [h, w, d] = volumes[0].dims();
    let mut data = Vec::with_capacity(volumes.len() * h * w * d);
    for v in volumes {
        if v.dims() != [h, w, d] {
            return Err(NnError::Shape { op: "batch", detail: format!("{:?} vs {:?}", v.dims(), [h, w, d]) });
        }
        data.extend(v.voxels().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![volumes.len(), 1, h, w, d], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub optimizer_steps: u64,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainingError> {
        let path = path.as_ref();
        let mut text = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for r in &self.epochs {
            text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub history: TrainHistory,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

const STREAM_EPOCH: u64 = 0xE90C;
const STREAM_AUGMENT: u64 = 0xA06;

/// Mean focal loss and accuracy of `model` (running statistics) on preprocessed samples.
pub fn score_samples(
    model: &Model,
    samples: &[CineVolume],
    targets: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<(f64, f64), TrainingError> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (v, &t) in samples.iter().zip(targets) {
        let (probs, _) = model.forward(&batch_tensor(&[v])?, None)?;
        loss += focal_loss(&probs, &[t], gamma, alpha)?;
        if argmax(probs.data()) == t {
            correct += 1;
        }
    }
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Trains from scratch on the manifest's train split, selecting the checkpoint
/// with the best validation accuracy. `observer` sees every finished epoch.
pub fn train(
    manifest: &Manifest,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    if arch.num_classes != cfg.task.num_classes() {
        return Err(TrainingError::InvalidConfig(format!(
            "model has {} classes but task needs {}",
            arch.num_classes,
            cfg.task.num_classes()
        )));
    }
    let expected = [cfg.extraction.target_hw.0, cfg.extraction.target_hw.1, cfg.target_depth];
    if !cfg.skip_extraction && arch.input_shape != expected {
        return Err(TrainingError::InvalidConfig(format!(
            "model input {:?} differs from preprocessing output {expected:?}",
            arch.input_shape
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let pick = |split: Split| -> Vec<usize> { (0..manifest.len()).filter(|&i| manifest.entries[i].split == split).collect() };
    let train_idx = pick(Split::Train);
    let val_idx = pick(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainingError::Split("no training samples".into()));
    }
    let label = |i: usize| cfg.task.map_label(manifest.entries[i].label);
    let train_targets: Vec<usize> = train_idx.iter().map(|&i| label(i)).collect();
    let val_targets: Vec<usize> = val_idx.iter().map(|&i| label(i)).collect();
    let train_data = load_preprocessed(manifest, &train_idx, cfg)?;
    let val_data = load_preprocessed(manifest, &val_idx, cfg)?;
    let alpha = cfg
        .focal_alpha
        .clone()
        .unwrap_or_else(|| inverse_frequency_alpha(&train_targets, cfg.task.num_classes()));

    let mut model = build_model(arch, cfg.seed)?;
    let mut adam = AdamState::new(model.params());
    let adam_cfg = cfg.adam();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model, AdamState)> = None;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[STREAM_EPOCH, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<CineVolume> = chunk
                .iter()
                .map(|&k| {
                    let mut rng = stream(cfg.seed, &[STREAM_AUGMENT, train_idx[k] as u64, epoch as u64]);
                    augment(&train_data[k], cfg, &mut rng).0
                })
                .collect();
            let refs: Vec<&CineVolume> = augmented.iter().collect();
            let targets: Vec<usize> = chunk.iter().map(|&k| train_targets[k]).collect();
            let batch = batch_tensor(&refs)?;
            let mut pass = model.forward_pass(&batch, Mode::Train, None, true)?;
            let loss = pass.graph.focal_loss(pass.probs, &targets, cfg.focal_gamma, &alpha)?;
            let loss_value = pass.graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainingError::NonFiniteLoss { epoch, batch: b });
            }
            let mut grads = pass.graph.backward(loss)?;
            let grad_list: Vec<Tensor> = pass.param_vars.iter().map(|&v| grads.take(v)).collect();
            adam_step(model.params_mut(), &grad_list, &mut adam, &adam_cfg)?;
            model.round_params_to_f32();
            model.update_running_stats(&std::mem::take(&mut pass.bn_stats));
            history.optimizer_steps += 1;
            loss_sum += loss_value;
            batches += 1;
        }
        let (val_loss, val_accuracy) = score_samples(&model, &val_data, &val_targets, cfg.focal_gamma, &alpha)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_loss, val_accuracy };
        observer(&record);
        history.epochs.push(record);
        history.write_csv(out_dir.join("history.csv"))?;
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => val_accuracy > *acc,
        };
        if improved || val_idx.is_empty() {
            history.best_epoch = epoch;
            save_checkpoint(&model, Some(&adam), &best_path)?;
            best = Some((if val_accuracy.is_nan() { f64::NEG_INFINITY } else { val_accuracy }, model.clone(), adam.clone()));
        }
    }
    save_checkpoint(&model, Some(&adam), &last_path)?;
    let best_model = best.map(|(_, m, _)| m).expect("at least one epoch");
    Ok(TrainOutcome { best: best_model, last: model, history, best_checkpoint: best_path, last_checkpoint: last_path })
}
