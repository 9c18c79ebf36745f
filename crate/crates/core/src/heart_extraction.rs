//! Adaptive heart localisation.
//!
//! The heart is taken to be the largest structure that moves over the cardiac
//! cycle: the absolute difference of an early- and a late-systolic frame is
//! edge-detected, the edges are dilated with a diamond, and the largest connected
//! component gives a bounding box. Every frame is then cropped to that box,
//! resampled to isotropic 1 mm pixels and centre padded/cropped to a fixed size.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cine_data::{write_ctv, CineDataError, CineVolume};
use crate::image::{bilinear, source_coord, Image, Mask};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no moving structure found")]
    NoMovingStructure,
    #[error("implausible heart region: {rows}x{cols} px after resampling")]
    ImplausibleRegion { rows: usize, cols: usize },
    #[error("cine volume needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] CineDataError),
}

/// Smallest accepted resampled region, in pixels per side.
pub const MIN_REGION_PX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub canny_sigma: f64,
    pub dilation_radius_px: usize,
    pub target_spacing_mm: (f64, f64),
    pub target_hw: (usize, usize),
    pub early_frame_fraction: f64,
    pub late_frame_fraction: f64,
    pub canny_high_percentile: f64,
    pub canny_low_ratio: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            canny_sigma: 2.0,
            dilation_radius_px: 2,
            target_spacing_mm: (1.0, 1.0),
            target_hw: (224, 224),
            early_frame_fraction: 0.0,
            late_frame_fraction: 0.33,
            canny_high_percentile: 90.0,
            canny_low_ratio: 0.5,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let bad = |m: &str| Err(ExtractionError::InvalidConfig(m.to_string()));
        if !(self.canny_sigma > 0.0) {
            return bad("canny_sigma must be positive");
        }
        if self.dilation_radius_px < 1 {
            return bad("dilation_radius_px must be >= 1");
        }
        if !(0.0..1.0).contains(&self.early_frame_fraction)
            || !(self.late_frame_fraction > 0.0 && self.late_frame_fraction <= 1.0)
            || self.early_frame_fraction >= self.late_frame_fraction
        {
            return bad("frame fractions must satisfy 0 <= early < late <= 1");
        }
        if !(self.canny_high_percentile > 50.0 && self.canny_high_percentile < 100.0) {
            return bad("canny_high_percentile must lie in (50, 100)");
        }
        if !(self.canny_low_ratio > 0.0 && self.canny_low_ratio < 1.0) {
            return bad("canny_low_ratio must lie in (0, 1)");
        }
        if !(self.target_spacing_mm.0 > 0.0 && self.target_spacing_mm.1 > 0.0) {
            return bad("target spacing must be positive");
        }
        if self.target_hw.0 < 2 || self.target_hw.1 < 2 {
            return bad("target_hw must be at least 2x2");
        }
        Ok(())
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }
    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            row_min: self.row_min.min(other.row_min),
            row_max: self.row_max.max(other.row_max),
            col_min: self.col_min.min(other.col_min),
            col_max: self.col_max.max(other.col_max),
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        let inter = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    /// Tight box around the set pixels of `mask`, if any.
    pub fn of_mask(mask: &Mask) -> Option<BoundingBox> {
        let mut bb: Option<BoundingBox> = None;
        for r in 0..mask.rows {
            for c in 0..mask.cols {
                if mask.get(r, c) {
                    let p = BoundingBox { row_min: r, row_max: r, col_min: c, col_max: c };
                    bb = Some(bb.map_or(p, |b| b.union(&p)));
                }
            }
        }
        bb
    }
}

/// Frame indices `(early, late)` used for the difference image.
pub fn difference_frames(frame_count: usize, cfg: &ExtractionConfig) -> (usize, usize) {
    let last = (frame_count - 1) as f64;
    let mut early = (cfg.early_frame_fraction * last).round() as usize;
    let mut late = (cfg.late_frame_fraction * last).round() as usize;
    if early == late {
        if late + 1 < frame_count {
            late += 1;
        } else {
            early -= 1;
        }
    }
    (early, late)
}

pub fn frame_difference(cine: &CineVolume, cfg: &ExtractionConfig) -> Result<Image, ExtractionError> {
    let d = cine.frame_count();
    if d < 2 {
        return Err(ExtractionError::TooFewFrames(d));
    }
    let (early, late) = difference_frames(d, cfg);
    let (rows, cols) = (cine.rows(), cine.cols());
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = cine.get(r, c, late) as f64 - cine.get(r, c, early) as f64;
            out.set(r, c, v.abs());
        }
    }
    Ok(out)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur, kernel truncated at 4 sigma, reflected borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (rows, cols) = (image.rows, image.cols);
    let mut tmp = Image::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let cc = reflect(c as isize + k as isize - radius, cols);
                acc += w * image.get(r, cc);
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + k as isize - radius, rows);
                acc += w * tmp.get(rr, c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

/// Gradient magnitude and quantised direction (0: horizontal, 1: 45 deg,
/// 2: vertical, 3: 135 deg) from central differences.
pub fn gradients(image: &Image) -> (Image, Vec<u8>) {
    let (rows, cols) = (image.rows, image.cols);
    let mut mag = Image::zeros(rows, cols);
    let mut dir = vec![0u8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let gx = (image.get(r, reflect(c as isize + 1, cols)) - image.get(r, reflect(c as isize - 1, cols))) / 2.0;
            let gy = (image.get(reflect(r as isize + 1, rows), c) - image.get(reflect(r as isize - 1, rows), c)) / 2.0;
            mag.set(r, c, gx.hypot(gy));
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[r * cols + c] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }
    (mag, dir)
}

/// Non-maximum suppression along the quantised gradient direction. A pixel
/// survives if it is strictly larger than its backward neighbour and at least
/// as large as its forward neighbour, which keeps plateaus one pixel wide.
pub fn non_maximum_suppression(mag: &Image, dir: &[u8]) -> Image {
    let (rows, cols) = (mag.rows, mag.cols);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            mag.get(r as usize, c as usize)
        }
    };
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let m = mag.get(r, c);
            if m <= 0.0 {
                continue;
            }
            let (dr, dc): (isize, isize) = match dir[r * cols + c] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let (ri, ci) = (r as isize, c as isize);
            let back = at(ri - dr, ci - dc);
            let fwd = at(ri + dr, ci + dc);
            if m > back && m >= fwd {
                out.set(r, c, m);
            }
        }
    }
    out
}

/// Linear-interpolated percentile (0-100) of an unsorted sample.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

const NEIGHBOURS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Hysteresis thresholds `(low, high)` derived from the gradient magnitudes.
pub fn canny_thresholds(mag: &Image, cfg: &ExtractionConfig) -> Option<(f64, f64)> {
    let mut nonzero: Vec<f64> = mag.data.iter().copied().filter(|&m| m > 0.0).collect();
    if nonzero.is_empty() {
        return None;
    }
    let high = percentile(&mut nonzero, cfg.canny_high_percentile);
    Some((cfg.canny_low_ratio * high, high))
}

/// Edge linking: keep weak maxima 8-connected to a strong one.
pub fn hysteresis(suppressed: &Image, low: f64, high: f64) -> Mask {
    let (rows, cols) = (suppressed.rows, suppressed.cols);
    let mut out = Mask::empty(rows, cols);
    let mut queue = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            let m = suppressed.get(r, c);
            if m > 0.0 && m >= high {
                out.set(r, c, true);
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in NEIGHBOURS_8 {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                continue;
            }
            let (rr, cc) = (rr as usize, cc as usize);
            let m = suppressed.get(rr, cc);
            if !out.get(rr, cc) && m > 0.0 && m >= low {
                out.set(rr, cc, true);
                queue.push_back((rr, cc));
            }
        }
    }
    out
}

pub fn canny_edges(image: &Image, cfg: &ExtractionConfig) -> Mask {
    let smoothed = gaussian_blur(image, cfg.canny_sigma);
    let (mag, dir) = gradients(&smoothed);
    let Some((low, high)) = canny_thresholds(&mag, cfg) else {
        return Mask::empty(image.rows, image.cols);
    };
    let suppressed = non_maximum_suppression(&mag, &dir);
    hysteresis(&suppressed, low, high)
}

/// Dilation with the L1 ball of the given radius; outside the grid counts as unset.
pub fn dilate_diamond(mask: &Mask, radius: usize) -> Mask {
    let (rows, cols) = (mask.rows, mask.cols);
    let rad = radius as isize;
    let mut out = Mask::empty(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) {
                continue;
            }
            for dr in -rad..=rad {
                let rr = r as isize + dr;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                let span = rad - dr.abs();
                let c0 = (c as isize - span).max(0) as usize;
                let c1 = (c as isize + span).min(cols as isize - 1) as usize;
                for cc in c0..=c1 {
                    out.set(rr as usize, cc, true);
                }
            }
        }
    }
    out
}

/// 8-connected component labelling; returns `(labels, sizes)` with label 0 = background.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut labels = vec![0u32; rows * cols];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        sizes.push(0);
        labels[start] = label;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            sizes[label as usize] += 1;
            let (r, c) = ((p / cols) as isize, (p % cols) as isize);
            for (dr, dc) in NEIGHBOURS_8 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                    continue;
                }
                let q = rr as usize * cols + cc as usize;
                if mask.data[q] && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            }
        }
    }
    (labels, sizes)
}

/// Bounding box of the largest 8-connected component; ties go to the smallest
/// `(row_min, col_min)`.
pub fn largest_component_bbox(mask: &Mask) -> Result<BoundingBox, ExtractionError> {
    let (labels, sizes) = label_components(mask);
    if sizes.len() == 1 {
        return Err(ExtractionError::NoMovingStructure);
    }
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; sizes.len()];
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (r, c) = (p / mask.cols, p % mask.cols);
        let px = BoundingBox { row_min: r, row_max: r, col_min: c, col_max: c };
        let slot = &mut boxes[l as usize];
        *slot = Some(slot.map_or(px, |b| b.union(&px)));
    }
    let best = (1..sizes.len())
        .map(|l| (sizes[l], boxes[l].expect("labelled component has pixels")))
        .min_by(|(sa, ba), (sb, bb)| {
            sb.cmp(sa).then(ba.row_min.cmp(&bb.row_min)).then(ba.col_min.cmp(&bb.col_min))
        })
        .map(|(_, b)| b)
        .expect("at least one component");
    Ok(best)
}

/// Geometry of the crop, resample and pad/crop stage. Reusable on any volume
/// sharing the source grid (e.g. ground-truth masks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub bbox: BoundingBox,
    pub source_spacing_mm: (f64, f64),
    pub target_spacing_mm: (f64, f64),
    /// Size of the crop after resampling, before padding/cropping.
    pub resampled_hw: (usize, usize),
    pub target_hw: (usize, usize),
}

impl CropTransform {
    pub fn new(
        bbox: BoundingBox,
        source_spacing_mm: (f64, f64),
        cfg: &ExtractionConfig,
    ) -> Result<Self, ExtractionError> {
        let rows = (bbox.height() as f64 * source_spacing_mm.0 / cfg.target_spacing_mm.0).round() as usize;
        let cols = (bbox.width() as f64 * source_spacing_mm.1 / cfg.target_spacing_mm.1).round() as usize;
        if rows < MIN_REGION_PX || cols < MIN_REGION_PX {
            return Err(ExtractionError::ImplausibleRegion { rows, cols });
        }
        Ok(Self {
            bbox,
            source_spacing_mm,
            target_spacing_mm: cfg.target_spacing_mm,
            resampled_hw: (rows, cols),
            target_hw: cfg.target_hw,
        })
    }

    /// Offset of the resampled crop inside the output grid (negative = cropped).
    fn placement(resampled: usize, target: usize) -> isize {
        (target as isize - resampled as isize).div_euclid(2)
    }

    pub fn apply(&self, volume: &CineVolume) -> Result<CineVolume, ExtractionError> {
        let d = volume.frame_count();
        let (bh, bw) = (self.bbox.height(), self.bbox.width());
        let (rh, rw) = self.resampled_hw;
        let (th, tw) = self.target_hw;
        let off_r = Self::placement(rh, th);
        let off_c = Self::placement(rw, tw);
        let ys: Vec<f64> = (0..rh).map(|i| source_coord(i, bh, rh)).collect();
        let xs: Vec<f64> = (0..rw).map(|j| source_coord(j, bw, rw)).collect();
        let mut out = vec![0.0f32; th * tw * d];
        let mut crop = vec![0.0f64; bh * bw];
        for t in 0..d {
            for r in 0..bh {
                for c in 0..bw {
                    crop[r * bw + c] = volume.get(self.bbox.row_min + r, self.bbox.col_min + c, t) as f64;
                }
            }
            for (i, &y) in ys.iter().enumerate() {
                let orow = i as isize + off_r;
                if orow < 0 || orow >= th as isize {
                    continue;
                }
                for (j, &x) in xs.iter().enumerate() {
                    let ocol = j as isize + off_c;
                    if ocol < 0 || ocol >= tw as isize {
                        continue;
                    }
                    let v = bilinear(&crop, bh, bw, y, x, None);
                    out[(orow as usize * tw + ocol as usize) * d + t] = v as f32;
                }
            }
        }
        Ok(CineVolume::new([th, tw, d], self.target_spacing_mm, out, volume.subject_id())?)
    }
}

/// Intermediate images of one extraction run.
#[derive(Debug, Clone)]
pub struct ExtractionTrace {
    pub difference: Image,
    pub edges: Mask,
    pub dilated: Mask,
    pub bbox: Option<BoundingBox>,
}

impl ExtractionTrace {
    /// Writes the four stages as frames of a single `.ctv` volume:
    /// difference, edges, dilated edges, and the difference with the box outline at 1.
    pub fn write_debug_ctv(&self, path: impl AsRef<Path>, spacing_mm: (f64, f64)) -> Result<(), ExtractionError> {
        let (rows, cols) = (self.difference.rows, self.difference.cols);
        let peak = self.difference.max().max(f64::MIN_POSITIVE);
        let diff: Vec<f32> = self.difference.data.iter().map(|&v| (v / peak) as f32).collect();
        let edges: Vec<f32> = self.edges.data.iter().map(|&b| b as u8 as f32).collect();
        let dilated: Vec<f32> = self.dilated.data.iter().map(|&b| b as u8 as f32).collect();
        let mut overlay = diff.clone();
        if let Some(b) = self.bbox {
            for r in b.row_min..=b.row_max {
                for c in b.col_min..=b.col_max {
                    if r == b.row_min || r == b.row_max || c == b.col_min || c == b.col_max {
                        overlay[r * cols + c] = 1.0;
                    }
                }
            }
        }
        let vol = CineVolume::from_frames(rows, cols, &[diff, edges, dilated, overlay], spacing_mm, "extraction-debug")?;
        write_ctv(&vol, path)?;
        Ok(())
    }
}

/// Difference, edges, dilation and component stages without the crop.
pub fn trace_extraction(cine: &CineVolume, cfg: &ExtractionConfig) -> Result<ExtractionTrace, ExtractionError> {
    cfg.validate()?;
    let difference = frame_difference(cine, cfg)?;
    let edges = canny_edges(&difference, cfg);
    let dilated = dilate_diamond(&edges, cfg.dilation_radius_px);
    let bbox = largest_component_bbox(&dilated).ok();
    Ok(ExtractionTrace { difference, edges, dilated, bbox })
}

/// Locates the heart and returns the transform that standardises the grid.
pub fn locate_heart(cine: &CineVolume, cfg: &ExtractionConfig) -> Result<CropTransform, ExtractionError> {
    let trace = trace_extraction(cine, cfg)?;
    let bbox = trace.bbox.ok_or(ExtractionError::NoMovingStructure)?;
    CropTransform::new(bbox, cine.spacing_mm(), cfg)
}

pub fn extract_heart(cine: &CineVolume, cfg: &ExtractionConfig) -> Result<CineVolume, ExtractionError> {
    locate_heart(cine, cfg)?.apply(cine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_image(rows: usize, cols: usize, steps: &[(usize, f64)]) -> Image {
        let mut img = Image::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v: f64 = steps.iter().filter(|(at, _)| c >= *at).map(|(_, a)| a).sum();
                img.set(r, c, v);
            }
        }
        img
    }

    fn brute_dilate(mask: &Mask, radius: usize) -> Mask {
        let mut out = Mask::empty(mask.rows, mask.cols);
        for r in 0..mask.rows {
            for c in 0..mask.cols {
                let mut hit = false;
                for qr in 0..mask.rows {
                    for qc in 0..mask.cols {
                        if mask.get(qr, qc) && r.abs_diff(qr) + c.abs_diff(qc) <= radius {
                            hit = true;
                        }
                    }
                }
                out.set(r, c, hit);
            }
        }
        out
    }

    #[test]
    fn frame_selection_and_difference() {
        let cfg = ExtractionConfig::default();
        assert_eq!(difference_frames(2, &cfg), (0, 1));
        assert_eq!(difference_frames(20, &cfg), (0, 6));
        assert_eq!(difference_frames(30, &cfg), (0, 10));

        let a: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..16).map(|i| (i * i) as f32 * 0.5).collect();
        let v = CineVolume::from_frames(4, 4, &[a.clone(), b.clone()], (1.0, 1.0), "ab").unwrap();
        let diff = frame_difference(&v, &cfg).unwrap();
        for i in 0..16 {
            assert_eq!(diff.data[i], (b[i] as f64 - a[i] as f64).abs());
        }

        let still = CineVolume::from_frames(4, 4, &[a.clone(), a.clone(), a], (1.0, 1.0), "s").unwrap();
        assert!(frame_difference(&still, &cfg).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn translated_disk_difference_is_symmetric_difference() {
        let disk = |cr: f64, cc: f64| -> Vec<f32> {
            (0..48 * 48)
                .map(|p| {
                    let (r, c) = ((p / 48) as f64, (p % 48) as f64);
                    if (r - cr).powi(2) + (c - cc).powi(2) <= 81.0 { 1.0 } else { 0.0 }
                })
                .collect()
        };
        let (f0, f1) = (disk(24.0, 18.0), disk(24.0, 23.0));
        let frames = vec![f0.clone(), f0.clone(), f1.clone(), f1.clone()];
        let v = CineVolume::from_frames(48, 48, &frames, (1.0, 1.0), "disk").unwrap();
        let cfg = ExtractionConfig { late_frame_fraction: 0.67, ..Default::default() };
        let diff = frame_difference(&v, &cfg).unwrap();
        for p in 0..48 * 48 {
            let xor = (f0[p] > 0.5) != (f1[p] > 0.5);
            assert_eq!(diff.data[p] > 0.0, xor);
        }
    }

    #[test]
    fn canny_constant_image_is_empty() {
        let img = Image::new(32, 32, vec![7.5; 1024]);
        assert!(canny_edges(&img, &ExtractionConfig::default()).is_empty());
    }

    #[test]
    fn canny_vertical_step_is_thin_line() {
        let img = step_image(64, 64, &[(32, 100.0)]);
        let edges = canny_edges(&img, &ExtractionConfig::default());
        assert!(!edges.is_empty());
        for r in 0..64 {
            let cols: Vec<usize> = (0..64).filter(|&c| edges.get(r, c)).collect();
            assert_eq!(cols.len(), 1, "row {r}: {cols:?}");
            assert!(cols[0].abs_diff(32) <= 1 || cols[0] == 31, "row {r}: {cols:?}");
        }
    }

    #[test]
    fn canny_hysteresis_drops_weak_step() {
        let img = step_image(64, 64, &[(20, 100.0), (44, 1.0)]);
        let cfg = ExtractionConfig::default();
        let (mag, _) = gradients(&gaussian_blur(&img, cfg.canny_sigma));
        let (low, _high) = canny_thresholds(&mag, &cfg).unwrap();
        let weak_peak = (38..50).map(|c| mag.get(32, c)).fold(0.0, f64::max);
        assert!(low > weak_peak, "low {low} vs weak response {weak_peak}");
        let edges = canny_edges(&img, &cfg);
        for r in 0..64 {
            let cols: Vec<usize> = (0..64).filter(|&c| edges.get(r, c)).collect();
            assert_eq!(cols.len(), 1);
            assert!(cols[0].abs_diff(20) <= 1);
        }
    }

    #[test]
    fn nms_leaves_no_dominated_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::new(40, 40, (0..1600).map(|_| rng.random::<f64>()).collect());
        let (mag, dir) = gradients(&gaussian_blur(&img, 1.0));
        let sup = non_maximum_suppression(&mag, &dir);
        for r in 1..39 {
            for c in 1..39 {
                if sup.get(r, c) == 0.0 {
                    continue;
                }
                let (dr, dc): (isize, isize) = match dir[r * 40 + c] {
                    0 => (0, 1),
                    1 => (1, 1),
                    2 => (1, 0),
                    _ => (1, -1),
                };
                let a = mag.get((r as isize + dr) as usize, (c as isize + dc) as usize);
                let b = mag.get((r as isize - dr) as usize, (c as isize - dc) as usize);
                assert!(!(a > mag.get(r, c) && b > mag.get(r, c)));
            }
        }
    }

    #[test]
    fn dilate_examples() {
        assert!(dilate_diamond(&Mask::empty(9, 9), 2).is_empty());
        let mut m = Mask::empty(9, 9);
        m.set(4, 4, true);
        let d = dilate_diamond(&m, 2);
        assert_eq!(d.count(), 13);
        let rows: Vec<usize> = (0..9).map(|r| (0..9).filter(|&c| d.get(r, c)).count()).collect();
        assert_eq!(rows, vec![0, 0, 1, 3, 5, 3, 1, 0, 0]);
    }

    #[test]
    fn dilate_matches_brute_force_on_random_masks() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mask::new(32, 32, (0..1024).map(|_| rng.random::<f64>() < 0.05).collect());
            for radius in 1..=3 {
                assert_eq!(dilate_diamond(&m, radius), brute_dilate(&m, radius));
            }
        }
    }

    #[test]
    fn component_bbox_examples() {
        let mut m = Mask::empty(10, 10);
        m.set(3, 5, true);
        assert_eq!(
            largest_component_bbox(&m).unwrap(),
            BoundingBox { row_min: 3, row_max: 3, col_min: 5, col_max: 5 }
        );

        let mut m = Mask::empty(20, 20);
        for r in 0..2 {
            for c in 0..5 {
                m.set(r + 1, c + 1, true);
            }
        }
        for r in 0..5 {
            for c in 0..5 {
                m.set(r + 10, c + 12, true);
            }
        }
        assert_eq!(
            largest_component_bbox(&m).unwrap(),
            BoundingBox { row_min: 10, row_max: 14, col_min: 12, col_max: 16 }
        );

        assert!(matches!(largest_component_bbox(&Mask::empty(4, 4)), Err(ExtractionError::NoMovingStructure)));
    }

    #[test]
    fn component_ties_and_diagonal_connectivity() {
        let mut m = Mask::empty(10, 10);
        // Diagonal chain is one component under 8-connectivity.
        for i in 0..4 {
            m.set(5 + i, 5 + i, true);
        }
        // Equal-sized component earlier in scan order wins the tie.
        for c in 0..4 {
            m.set(1, c, true);
        }
        let bb = largest_component_bbox(&m).unwrap();
        assert_eq!(bb, BoundingBox { row_min: 1, row_max: 1, col_min: 0, col_max: 3 });
    }

    #[test]
    fn static_volume_has_no_moving_structure() {
        let frame: Vec<f32> = (0..64 * 64).map(|p| ((p % 64) as f32 / 8.0).sin()).collect();
        let v = CineVolume::from_frames(64, 64, &vec![frame; 6], (1.2, 1.2), "static").unwrap();
        let err = extract_heart(&v, &ExtractionConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "no moving structure found");
    }

    #[test]
    fn crop_transform_geometry() {
        let bbox = BoundingBox { row_min: 2, row_max: 11, col_min: 4, col_max: 23 };
        let cfg = ExtractionConfig { target_hw: (16, 16), ..Default::default() };
        let t = CropTransform::new(bbox, (1.5, 1.0), &cfg).unwrap();
        assert_eq!(t.resampled_hw, (15, 20));
        let tiny = BoundingBox { row_min: 0, row_max: 4, col_min: 0, col_max: 20 };
        assert!(matches!(
            CropTransform::new(tiny, (1.0, 1.0), &cfg),
            Err(ExtractionError::ImplausibleRegion { .. })
        ));

        let vol = CineVolume::new([30, 30, 2], (1.5, 1.0), vec![2.0; 1800], "c").unwrap();
        let out = t.apply(&vol).unwrap();
        assert_eq!(out.dims(), [16, 16, 2]);
        assert_eq!(out.spacing_mm(), (1.0, 1.0));
        // Rows: 15 resampled rows centred in 16 (one zero row at the bottom);
        // columns: 20 cropped to 16.
        assert_eq!(out.get(0, 0, 0), 2.0);
        assert_eq!(out.get(15, 8, 1), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ExtractionConfig::default().validate().is_ok());
        let bad = ExtractionConfig { canny_high_percentile: 40.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExtractionConfig { early_frame_fraction: 0.5, late_frame_fraction: 0.4, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
