//! WebAssembly bindings for the static explorer page in `www/`.
//!
//! Images cross the boundary as RGBA bytes, row-major, ready for `ImageData`.

use avd_core::cine_data::CineVolume;
use avd_core::heart_extraction::{trace_extraction, BoundingBox, ExtractionConfig, ExtractionTrace};
use avd_core::image::{Image, Mask};
use avd_core::nn::Tensor;
use avd_core::phantom::{generate_phantom, PhantomConfig, PhantomTruth};
use avd_core::rng::stream;
use avd_core::training::focal_loss;
use wasm_bindgen::prelude::*;

const VOID_RGB: [u8; 3] = [230, 60, 50];
const BOX_RGB: [u8; 3] = [60, 200, 90];
const EDGE_RGB: [u8; 3] = [250, 210, 60];

fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn push(out: &mut Vec<u8>, rgb: [u8; 3]) {
    out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
}

fn image_rgba(img: &Image) -> Vec<u8> {
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(img.data.len() * 4);
    for &v in &img.data {
        let g = gray((v - lo) / span);
        push(&mut out, [g, g, g]);
    }
    out
}

fn mask_rgba(mask: &Mask, rgb: [u8; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.data.len() * 4);
    for &m in &mask.data {
        push(&mut out, if m { rgb } else { [0, 0, 0] });
    }
    out
}

fn draw_box(rgba: &mut [u8], cols: usize, b: &BoundingBox, rgb: [u8; 3]) {
    for r in b.row_min..=b.row_max {
        for c in b.col_min..=b.col_max {
            if r == b.row_min || r == b.row_max || c == b.col_min || c == b.col_max {
                let k = (r * cols + c) * 4;
                rgba[k..k + 3].copy_from_slice(&rgb);
            }
        }
    }
}

fn bbox_vec(b: Option<BoundingBox>) -> Vec<u32> {
    b.map(|b| vec![b.row_min as u32, b.col_min as u32, b.row_max as u32, b.col_max as u32]).unwrap_or_default()
}

/// One synthetic cine phantom plus its ground truth.
#[wasm_bindgen]
pub struct PhantomView {
    volume: CineVolume,
    truth: PhantomTruth,
}

#[wasm_bindgen]
impl PhantomView {
    /// `label`: 0 normal, 1 AR, 2 AS, 3 MVD. `small` selects the 64 x 64 x 16 preset.
    #[wasm_bindgen(constructor)]
    pub fn new(label: u8, seed: u64, small: bool) -> Result<PhantomView, String> {
        if label > 3 {
            return Err("label must be 0..=3".to_string());
        }
        let cfg = if small { PhantomConfig::small() } else { PhantomConfig::default() };
        let (volume, truth) = generate_phantom(label, &cfg, &mut stream(seed, &[label as u64]));
        Ok(PhantomView { volume, truth })
    }

    pub fn rows(&self) -> usize {
        self.volume.rows()
    }

    pub fn cols(&self) -> usize {
        self.volume.cols()
    }

    pub fn frames(&self) -> usize {
        self.volume.frame_count()
    }

    pub fn label(&self) -> u8 {
        self.truth.label
    }

    /// Frame `t` in grey, optionally with the true flow void in red and the
    /// per-frame heart box in green.
    pub fn frame_rgba(&self, t: usize, show_void: bool, show_box: bool) -> Result<Vec<u8>, String> {
        if t >= self.frames() {
            return Err("frame out of range".to_string());
        }
        let cols = self.cols();
        let mut out = Vec::with_capacity(self.rows() * cols * 4);
        for (k, &v) in self.volume.frame(t).iter().enumerate() {
            if show_void && self.truth.void_mask[t].data[k] {
                push(&mut out, VOID_RGB);
            } else {
                let g = gray(v as f64);
                push(&mut out, [g, g, g]);
            }
        }
        if show_box {
            draw_box(&mut out, cols, &self.truth.heart_bbox[t], BOX_RGB);
        }
        Ok(out)
    }

    /// Mean intensity per frame.
    pub fn frame_means(&self) -> Vec<f64> {
        (0..self.frames())
            .map(|t| {
                let f = self.volume.frame(t);
                f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64
            })
            .collect()
    }

    /// True union box as `[row_min, col_min, row_max, col_max]`.
    pub fn truth_bbox(&self) -> Vec<u32> {
        bbox_vec(Some(self.truth.union_bbox))
    }

    /// Runs the localisation stages with the given Canny and dilation parameters.
    pub fn extract(
        &self,
        canny_sigma: f64,
        high_percentile: f64,
        low_ratio: f64,
        dilation_radius_px: usize,
        late_frame_fraction: f64,
    ) -> Result<ExtractionView, String> {
        let cfg = ExtractionConfig {
            canny_sigma,
            canny_high_percentile: high_percentile,
            canny_low_ratio: low_ratio,
            dilation_radius_px,
            late_frame_fraction,
            ..Default::default()
        };
        let trace = trace_extraction(&self.volume, &cfg).map_err(|e| e.to_string())?;
        Ok(ExtractionView { trace, truth: self.truth.union_bbox })
    }
}

/// Intermediate images of one extraction run.
#[wasm_bindgen]
pub struct ExtractionView {
    trace: ExtractionTrace,
    truth: BoundingBox,
}

#[wasm_bindgen]
impl ExtractionView {
    pub fn rows(&self) -> usize {
        self.trace.difference.rows
    }

    pub fn cols(&self) -> usize {
        self.trace.difference.cols
    }

    /// 0 difference, 1 edges, 2 dilated edges, 3 difference with detected (green)
    /// and true (red) boxes.
    pub fn stage_rgba(&self, stage: u8) -> Result<Vec<u8>, String> {
        Ok(match stage {
            0 => image_rgba(&self.trace.difference),
            1 => mask_rgba(&self.trace.edges, EDGE_RGB),
            2 => mask_rgba(&self.trace.dilated, EDGE_RGB),
            3 => {
                let mut out = image_rgba(&self.trace.difference);
                draw_box(&mut out, self.cols(), &self.truth, VOID_RGB);
                if let Some(b) = &self.trace.bbox {
                    draw_box(&mut out, self.cols(), b, BOX_RGB);
                }
                out
            }
            _ => return Err("stage must be 0..=3".to_string()),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.trace.edges.count()
    }

    /// Detected box, empty when no moving structure was found.
    pub fn bbox(&self) -> Vec<u32> {
        bbox_vec(self.trace.bbox)
    }

    /// IoU of the detected box against the true union box, 0 when nothing was found.
    pub fn iou(&self) -> f64 {
        self.trace.bbox.map_or(0.0, |b| b.iou(&self.truth))
    }
}

/// Focal loss of a correct-class probability `p_t`, sampled at `n` points on
/// `(0, 1)`, computed with the training loss itself.
#[wasm_bindgen]
pub fn focal_curve(gamma: f64, alpha: f64, n: usize) -> Result<Vec<f64>, String> {
    if n < 2 {
        return Err("need at least two points".to_string());
    }
    let pts = curve_points(n);
    let mut probs = Vec::with_capacity(2 * n);
    for &p in &pts {
        probs.extend_from_slice(&[p, 1.0 - p]);
    }
    let err = |e: avd_core::nn::NnError| e.to_string();
    let mut out = Vec::with_capacity(n);
    for row in probs.chunks(2) {
        let t = Tensor::new(vec![1, 2], row.to_vec()).map_err(err)?;
        out.push(focal_loss(&t, &[0], gamma, &[alpha, alpha]).map_err(err)?);
    }
    Ok(out)
}

/// Abscissae used by [`focal_curve`].
#[wasm_bindgen]
pub fn curve_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_frames_have_rgba_size() {
        let p = PhantomView::new(2, 7, true).unwrap();
        let f = p.frame_rgba(3, true, true).unwrap();
        assert_eq!(f.len(), p.rows() * p.cols() * 4);
        assert_eq!(p.frame_means().len(), p.frames());
        assert!(p.frame_rgba(p.frames(), false, false).is_err());
    }

    #[test]
    fn extraction_finds_the_heart() {
        let p = PhantomView::new(0, 3, false).unwrap();
        let x = p.extract(2.0, 90.0, 0.5, 2, 0.33).unwrap();
        assert_eq!(x.bbox().len(), 4);
        assert!(x.iou() > 0.5);
        for s in 0..4 {
            assert_eq!(x.stage_rgba(s).unwrap().len(), x.rows() * x.cols() * 4);
        }
        assert!(p.extract(-1.0, 90.0, 0.5, 2, 0.33).is_err());
    }

    #[test]
    fn focal_curve_reduces_to_cross_entropy() {
        let pts = curve_points(50);
        let ce = focal_curve(0.0, 1.0, 50).unwrap();
        let fl = focal_curve(2.0, 1.0, 50).unwrap();
        for ((p, c), f) in pts.iter().zip(&ce).zip(&fl) {
            assert!((c + p.ln()).abs() < 1e-9);
            assert!(f <= c);
        }
    }
}
