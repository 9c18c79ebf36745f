//! Gradient-weighted class activation maps and overlay rendering.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::cine_data::{CineDataError, CineVolume};
use crate::densenet::{Mode, Model, ModelError};
use crate::image::source_coord;
use crate::nn::{NnError, Tensor};

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error("target class {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },
    #[error("model has non-finite parameters")]
    NonFiniteModel,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] CineDataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> GradCamError {
    GradCamError::Io { path: path.display().to_string(), source }
}

/// Attention over the classifier input grid, `(H, W, D)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub target_class: usize,
    pub source_layer: String,
    /// The rectified map was identically zero ("empty attention").
    pub empty: bool,
}

impl Heatmap {
    pub fn get(&self, r: usize, c: usize, t: usize) -> f64 {
        self.values[(r * self.dims[1] + c) * self.dims[2] + t]
    }

    /// Total attention per frame.
    pub fn frame_mass(&self) -> Vec<f64> {
        let d = self.dims[2];
        let mut out = vec![0.0; d];
        for (i, v) in self.values.iter().enumerate() {
            out[i % d] += v;
        }
        out
    }

    pub fn to_volume(&self, spacing_mm: (f64, f64), subject_id: &str) -> Result<CineVolume, GradCamError> {
        let vox = self.values.iter().map(|&v| v as f32).collect();
        Ok(CineVolume::new(self.dims, spacing_mm, vox, subject_id)?)
    }
}

/// Trilinear resampling with pixel-centre alignment and edge clamping.
pub fn trilinear_resize(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f64)> {
        (0..len_out)
            .map(|i| {
                let x = source_coord(i, len_in, len_out).clamp(0.0, (len_in - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(len_in - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(from[0], to[0]), axis(from[1], to[1]), axis(from[2], to[2]));
    let at = |r: usize, c: usize, t: usize| src[(r * from[1] + c) * from[2] + t];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(r0, r1, fr) in &ax {
        for &(c0, c1, fc) in &ay {
            for &(t0, t1, ft) in &az {
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let plane = |r: usize| lerp(lerp(at(r, c0, t0), at(r, c0, t1), ft), lerp(at(r, c1, t0), at(r, c1, t1), ft), fc);
                out.push(lerp(plane(r0), plane(r1), fr));
            }
        }
    }
    out
}

/// Grad-CAM at `layer` (default: the last transition convolution) for one
/// `(1, 1, H, W, D)` input, seeded from the target-class logit.
pub fn gradcam(model: &Model, input: &Tensor, target_class: usize, layer: Option<&str>) -> Result<Heatmap, GradCamError> {
    let classes = model.config().num_classes;
    if target_class >= classes {
        return Err(GradCamError::InvalidClass { class: target_class, classes });
    }
    if model.params().iter().any(|p| !p.value.is_finite()) {
        return Err(GradCamError::NonFiniteModel);
    }
    if input.shape().first() != Some(&1) {
        return Err(GradCamError::Shape(format!("expected a single-sample batch, got {:?}", input.shape())));
    }
    let default = model.default_cam_layer();
    let layer = layer.unwrap_or(&default);
    let mut pass = model.forward_pass(input, Mode::Eval, Some(layer), true)?;
    let captured = pass.captured.expect("capture validated by forward_pass");
    let score = pass.graph.class_score(pass.logits, target_class)?;
    let grads = pass.graph.backward_retaining(score, &[captured])?;
    let acts = pass.graph.value(captured);
    let [_, k, h, w, d] = acts.dims5("gradcam")?;
    let s = h * w * d;
    let dy = grads.get_or_zeros(captured);
    let mut raw = vec![0.0; s];
    for ch in 0..k {
        let gch = &dy.data()[ch * s..(ch + 1) * s];
        let weight = gch.iter().sum::<f64>() / s as f64;
        for (r, a) in raw.iter_mut().zip(&acts.data()[ch * s..(ch + 1) * s]) {
            *r += weight * a;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let dims = model.config().input_shape;
    let mut values = trilinear_resize(&raw, [h, w, d], dims);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let empty = !(hi > lo);
    if empty {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    Ok(Heatmap { dims, values, target_class, source_layer: layer.to_string(), empty })
}

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Blue (0) to red (1).
pub fn colormap(h: f64) -> [f64; 3] {
    [255.0 * h, 0.0, 255.0 * (1.0 - h)]
}

/// Grayscale underlay blended with the colormap at opacity `0.4 * h`.
pub fn blend_pixel(gray: f64, h: f64) -> [u8; 3] {
    let a = OVERLAY_ALPHA * h;
    colormap(h).map(|c| ((1.0 - a) * gray + a * c).round().clamp(0.0, 255.0) as u8)
}

/// Writes `frame_XXX.ppm` (binary P6) for every frame plus `index.txt`.
pub fn overlay_export(cine: &CineVolume, heatmap: &Heatmap, out_dir: impl AsRef<Path>) -> Result<(), GradCamError> {
    let out_dir = out_dir.as_ref();
    if cine.dims() != heatmap.dims {
        return Err(GradCamError::Shape(format!("cine {:?} vs heatmap {:?}", cine.dims(), heatmap.dims)));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let [h, w, d] = cine.dims();
    let lo = cine.voxels().iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = cine.voxels().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut index = String::new();
    for t in 0..d {
        let name = format!("frame_{t:03}.ppm");
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for r in 0..h {
            for c in 0..w {
                let gray = (255.0 * (cine.get(r, c, t) as f64 - lo) / span).round();
                bytes.extend_from_slice(&blend_pixel(gray, heatmap.get(r, c, t)));
            }
        }
        let path = out_dir.join(&name);
        fs::File::create(&path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| io_err(&path, e))?;
        index.push_str(&format!("{name}\t{t}\n"));
    }
    let path = out_dir.join("index.txt");
    fs::write(&path, index).map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densenet::{build_model, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> Model {
        let cfg = ArchConfig {
            num_blocks: 3,
            layers_per_block: 2,
            growth_rate: 4,
            paper_faithful: false,
            num_classes: 2,
            input_shape: [16, 16, 8],
            ..ArchConfig::default()
        };
        let mut m = build_model(&cfg, 3).unwrap();
        // Give the model running statistics from one training batch.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![2, 1, 16, 16, 8], (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pass = m.forward_pass(&x, Mode::Train, None, false).unwrap();
        m.update_running_stats(&pass.bn_stats);
        m
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, 16, 16, 8], (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn heatmap_shape_and_range() {
        let m = small_model();
        for class in 0..2 {
            let hm = gradcam(&m, &input(1), class, None).unwrap();
            assert_eq!(hm.dims, [16, 16, 8]);
            assert_eq!(hm.values.len(), 16 * 16 * 8);
            if hm.empty {
                assert!(hm.values.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(hm.values.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
                assert_eq!(hm.values.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
        }
        assert!(matches!(gradcam(&m, &input(1), 2, None), Err(GradCamError::InvalidClass { .. })));
        assert!(gradcam(&m, &input(1), 0, Some("nope")).is_err());
    }

    #[test]
    fn invariant_to_positive_rescaling_of_target_row() {
        let m = small_model();
        let base = gradcam(&m, &input(2), 1, None).unwrap();
        let mut scaled = m.clone();
        let idx = scaled.param_index("head.fc.weight").unwrap();
        let feats = scaled.params()[idx].value.shape()[1];
        for v in &mut scaled.params_mut()[idx].value.data_mut()[feats..2 * feats] {
            *v *= 3.7;
        }
        let other = gradcam(&scaled, &input(2), 1, None).unwrap();
        for (a, b) in base.values.iter().zip(&other.values) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_attention_when_all_weights_negative() {
        let mut m = small_model();
        // Negating the target row flips every channel weight, so exactly one of
        // the two maps survives the ReLU on a positive activation layer.
        let hm = gradcam(&m, &input(3), 0, Some("head.relu")).unwrap();
        let idx = m.param_index("head.fc.weight").unwrap();
        let feats = m.params()[idx].value.shape()[1];
        for v in &mut m.params_mut()[idx].value.data_mut()[..feats] {
            *v = -v.abs() - 1e-3;
        }
        let neg = gradcam(&m, &input(3), 0, Some("head.relu")).unwrap();
        assert!(neg.empty, "non-negative activations with negative weights must rectify to zero");
        assert!(neg.values.iter().all(|&v| v == 0.0));
        assert_eq!(hm.dims, neg.dims);
    }

    #[test]
    fn trilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        assert_eq!(trilinear_resize(&src, [3, 4, 5], [3, 4, 5]), src);
        let c = vec![0.25; 8];
        assert!(trilinear_resize(&c, [2, 2, 2], [7, 5, 3]).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    fn fixture() -> (CineVolume, Heatmap) {
        let vox: Vec<f32> = (0..3 * 4 * 2).map(|i| i as f32 * 0.5).collect();
        let cine = CineVolume::new([3, 4, 2], (1.0, 1.0), vox, "fx").unwrap();
        let values = (0..24).map(|i| ((i * 7) % 24) as f64 / 23.0).collect();
        (cine, Heatmap { dims: [3, 4, 2], values, target_class: 1, source_layer: "x".into(), empty: false })
    }

    #[test]
    fn overlay_zero_and_full_heatmaps() {
        let (cine, mut hm) = fixture();
        let dir = tempfile::tempdir().unwrap();
        hm.values.iter_mut().for_each(|v| *v = 0.0);
        overlay_export(&cine, &hm, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("frame_001.ppm")).unwrap();
        let header = b"P6\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        for r in 0..3 {
            for c in 0..4 {
                let gray = (255.0 * cine.get(r, c, 1) as f64 / 11.5).round() as u8;
                assert_eq!(&px[(r * 4 + c) * 3..(r * 4 + c + 1) * 3], &[gray, gray, gray]);
            }
        }
        hm.values.iter_mut().for_each(|v| *v = 1.0);
        overlay_export(&cine, &hm, dir.path()).unwrap();
        let px = fs::read(dir.path().join("frame_000.ppm")).unwrap()[header.len()..].to_vec();
        let gray = (255.0 * cine.get(0, 1, 0) as f64 / 11.5).round();
        let expected = [(0.6 * gray + 0.4 * 255.0).round() as u8, (0.6 * gray).round() as u8, (0.6 * gray).round() as u8];
        assert_eq!(&px[3..6], &expected);
        let index = fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(index.lines().count(), 2);
    }

    #[test]
    fn overlay_golden_bytes() {
        let (cine, hm) = fixture();
        let dir = tempfile::tempdir().unwrap();
        overlay_export(&cine, &hm, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("frame_000.ppm")).unwrap();
        let hash = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        assert_eq!(bytes.len(), 11 + 36);
        assert_eq!(hash, GOLDEN_OVERLAY_HASH);
    }

    const GOLDEN_OVERLAY_HASH: u64 = 14176663458161918104;

    #[test]
    fn overlay_shape_mismatch() {
        let (cine, mut hm) = fixture();
        hm.dims = [4, 3, 2];
        assert!(matches!(overlay_export(&cine, &hm, std::env::temp_dir()), Err(GradCamError::Shape(_))));
    }
}
