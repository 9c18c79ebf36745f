//! Synthetic cine phantoms: a contracting elliptical "heart" with an aortic
//! root, a static bright distractor, and class-dependent flow voids.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cine_data::{write_ctv, CineDataError, CineVolume, Manifest, ManifestEntry, Split};
use crate::heart_extraction::BoundingBox;
use crate::image::Mask;
use crate::rng::stream;
use crate::training::largest_remainder;

/// Label-map codes of the `_truth` companion volume.
pub const TRUTH_BACKGROUND: f32 = 0.0;
pub const TRUTH_HEART: f32 = 1.0;
pub const TRUTH_VOID: f32 = 2.0;

/// Prevalence of normal / AR / AS / MVD in the clinical cohort.
pub const DEFAULT_CLASS_WEIGHTS: [f64; 4] = [0.67, 0.14, 0.10, 0.09];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub grid: (usize, usize, usize),
    pub spacing_mm: (f64, f64),
    /// Ventricle centre as fractions of (rows, cols).
    pub heart_center: (f64, f64),
    /// End-diastolic semi-axes in pixels (rows, cols).
    pub heart_axes: (f64, f64),
    /// Myocardium thickness as a fraction of the semi-axes.
    pub wall_fraction: f64,
    /// Peak shrinkage as a fraction of the axes.
    pub contraction_amplitude: f64,
    /// Valve position on the ventricle boundary, degrees counter-clockwise from +col.
    pub valve_angle_deg: f64,
    pub root_length_px: f64,
    pub root_radius_px: f64,
    /// Systolic distension of the root radius, as a fraction.
    pub root_distension: f64,
    pub blood_intensity: f64,
    pub myocardium_intensity: f64,
    pub background_intensity: f64,
    pub distractor_intensity: f64,
    /// Distractor top-left corner as fractions of (rows, cols), and size in pixels.
    pub distractor_origin: (f64, f64),
    pub distractor_size: (usize, usize),
    pub void_intensity: f64,
    pub void_half_angle_deg: f64,
    /// Inward (regurgitant) void length as a fraction of the row semi-axis.
    pub void_inward_fraction: f64,
    pub noise_sigma: f64,
    /// Per-sample jitter: centre shift (fraction of grid) and axis scale.
    pub center_jitter: f64,
    pub axis_jitter: f64,
    pub angle_jitter_deg: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid: (192, 192, 20),
            spacing_mm: (1.4, 1.4),
            heart_center: (0.55, 0.3),
            heart_axes: (44.0, 36.0),
            wall_fraction: 0.2,
            contraction_amplitude: 0.15,
            valve_angle_deg: 50.0,
            root_length_px: 28.0,
            root_radius_px: 8.0,
            root_distension: 0.3,
            blood_intensity: 0.9,
            myocardium_intensity: 0.5,
            background_intensity: 0.1,
            distractor_intensity: 0.8,
            distractor_origin: (0.2, 0.62),
            distractor_size: (120, 64),
            void_intensity: 0.15,
            void_half_angle_deg: 25.0,
            void_inward_fraction: 0.6,
            noise_sigma: 0.02,
            center_jitter: 0.03,
            axis_jitter: 0.1,
            angle_jitter_deg: 10.0,
        }
    }
}

impl PhantomConfig {
    /// 64 x 64 x 16 grid at 1 mm, for fast end-to-end experiments.
    pub fn small() -> Self {
        Self {
            grid: (64, 64, 16),
            spacing_mm: (1.0, 1.0),
            heart_center: (0.56, 0.3),
            heart_axes: (12.0, 10.0),
            root_length_px: 8.0,
            root_radius_px: 3.0,
            distractor_origin: (0.15, 0.64),
            distractor_size: (40, 20),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (h, w, d) = self.grid;
        if h < 8 || w < 8 || d < 4 {
            return Err(format!("grid {h}x{w}x{d} too small"));
        }
        if !(self.root_distension >= 0.0) {
            return Err("root_distension must be non-negative".into());
        }
        if !(self.contraction_amplitude > 0.0 && self.contraction_amplitude < 1.0) {
            return Err("contraction_amplitude must lie in (0, 1)".into());
        }
        for v in [
            self.blood_intensity,
            self.myocardium_intensity,
            self.background_intensity,
            self.distractor_intensity,
            self.void_intensity,
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err("intensities must lie in [0, 1]".into());
            }
        }
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0) {
            return Err("spacing must be positive".into());
        }
        if !(self.wall_fraction > 0.0 && self.wall_fraction < 1.0) {
            return Err("wall_fraction must lie in (0, 1)".into());
        }
        if self.noise_sigma < 0.0 {
            return Err("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground truth of one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub label: u8,
    pub heart_mask: Vec<Mask>,
    pub heart_bbox: Vec<BoundingBox>,
    pub union_bbox: BoundingBox,
    pub void_mask: Vec<Mask>,
}

impl PhantomTruth {
    /// 0 background, 1 heart, 2 flow void.
    pub fn label_map(&self, dims: [usize; 3], spacing_mm: (f64, f64), subject_id: &str) -> Result<CineVolume, CineDataError> {
        let [h, w, d] = dims;
        let mut vox = vec![TRUTH_BACKGROUND; h * w * d];
        for t in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let v = if self.void_mask[t].get(r, c) {
                        TRUTH_VOID
                    } else if self.heart_mask[t].get(r, c) {
                        TRUTH_HEART
                    } else {
                        continue;
                    };
                    vox[(r * w + c) * d + t] = v;
                }
            }
        }
        CineVolume::new(dims, spacing_mm, vox, format!("{subject_id}_truth"))
    }
}

/// Fraction of peak contraction at frame `t` of `d`: rises over the first
/// third of the cycle, relaxes over the rest.
pub fn contraction_profile(t: usize, d: usize) -> f64 {
    let phase = t as f64 / d as f64;
    if phase < 1.0 / 3.0 {
        (std::f64::consts::FRAC_PI_2 * phase * 3.0).sin().powi(2)
    } else {
        (std::f64::consts::FRAC_PI_2 * (phase - 1.0 / 3.0) * 1.5).cos().powi(2)
    }
}

pub fn is_systolic(t: usize, d: usize) -> bool {
    3 * t < d
}

pub fn is_diastolic(t: usize, d: usize) -> bool {
    2 * t >= d
}

/// Whether `label` has a void in frame `t`: 1 = AR (diastolic, inward),
/// 2 = AS (systolic, outward), 3 = both.
pub fn void_phases(label: u8, t: usize, d: usize) -> (bool, bool) {
    let outward = matches!(label, 2 | 3) && is_systolic(t, d);
    let inward = matches!(label, 1 | 3) && is_diastolic(t, d);
    (outward, inward)
}

fn in_wedge(p: (f64, f64), apex: (f64, f64), dir: (f64, f64), half_angle: f64, length: f64) -> bool {
    let v = (p.0 - apex.0, p.1 - apex.1);
    let along = v.0 * dir.0 + v.1 * dir.1;
    if along <= 0.0 || along > length {
        return false;
    }
    let norm = (v.0 * v.0 + v.1 * v.1).sqrt();
    along / norm >= half_angle.cos()
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let s = if len2 > 0.0 { ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = (a.0 + s * ab.0 - p.0, a.1 + s * ab.1 - p.1);
    (q.0 * q.0 + q.1 * q.1).sqrt()
}

/// Renders one phantom of class `label` (0 normal, 1 AR, 2 AS, 3 MVD).
pub fn generate_phantom<R: Rng>(label: u8, cfg: &PhantomConfig, rng: &mut R) -> (CineVolume, PhantomTruth) {
    assert!(label <= 3, "phantom label must be 0-3");
    let (h, w, d) = cfg.grid;
    let jitter = |rng: &mut R, amount: f64| if amount > 0.0 { rng.random_range(-amount..=amount) } else { 0.0 };
    let cy = (cfg.heart_center.0 + jitter(rng, cfg.center_jitter)) * h as f64;
    let cx = (cfg.heart_center.1 + jitter(rng, cfg.center_jitter)) * w as f64;
    let scale = 1.0 + jitter(rng, cfg.axis_jitter);
    let (ar, ac) = (cfg.heart_axes.0 * scale, cfg.heart_axes.1 * scale);
    let theta = (cfg.valve_angle_deg + jitter(rng, cfg.angle_jitter_deg)).to_radians();
    // Outward direction at the valve in (row, col); rows grow downwards.
    let u = (-theta.sin(), theta.cos());
    let half = cfg.void_half_angle_deg.to_radians();

    let dr = (cfg.distractor_origin.0 * h as f64).round() as usize;
    let dc = (cfg.distractor_origin.1 * w as f64).round() as usize;
    let (dh, dw) = cfg.distractor_size;

    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut vox = vec![0f32; h * w * d];
    let mut heart_mask = Vec::with_capacity(d);
    let mut void_mask = Vec::with_capacity(d);
    let mut frame = vec![0f64; h * w];
    for t in 0..d {
        let f = contraction_profile(t, d);
        let s = 1.0 - cfg.contraction_amplitude * f;
        let root_radius = cfg.root_radius_px * (1.0 + cfg.root_distension * f);
        let (or, oc) = (ar * s, ac * s);
        let (ir, ic) = (or * (1.0 - cfg.wall_fraction), oc * (1.0 - cfg.wall_fraction));
        let valve = (cy - or * theta.sin(), cx + oc * theta.cos());
        let root_start = (valve.0 - u.0 * cfg.wall_fraction * or, valve.1 - u.1 * cfg.wall_fraction * oc);
        let root_end = (valve.0 + u.0 * cfg.root_length_px, valve.1 + u.1 * cfg.root_length_px);
        let (outward, inward) = void_phases(label, t, d);
        let mut hm = Mask::empty(h, w);
        let mut vm = Mask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                let p = (r as f64, c as f64);
                let ey = (p.0 - cy) / or;
                let ex = (p.1 - cx) / oc;
                let iy = (p.0 - cy) / ir;
                let ix = (p.1 - cx) / ic;
                let in_outer = ey * ey + ex * ex <= 1.0;
                let in_cavity = iy * iy + ix * ix <= 1.0;
                let root_dist = distance_to_segment(p, root_start, root_end);
                let in_root_blood = root_dist <= root_radius;
                let in_root_wall = root_dist <= root_radius + 0.5 * cfg.wall_fraction * oc;
                let mut v = cfg.background_intensity;
                if r >= dr && r < dr + dh && c >= dc && c < dc + dw {
                    v = cfg.distractor_intensity;
                }
                if in_outer || in_root_wall {
                    hm.set(r, c, true);
                    v = cfg.myocardium_intensity;
                }
                if in_cavity || in_root_blood {
                    v = cfg.blood_intensity;
                    let jet = outward && in_root_blood && !in_cavity && in_wedge(p, valve, u, half, cfg.root_length_px);
                    let back = inward && in_cavity && in_wedge(p, valve, (-u.0, -u.1), half, cfg.void_inward_fraction * or);
                    if jet || back {
                        vm.set(r, c, true);
                        v = cfg.void_intensity;
                    }
                }
                frame[r * w + c] = v;
            }
        }
        for (p, v) in frame.iter().enumerate() {
            vox[p * d + t] = (v + noise.sample(rng)) as f32;
        }
        heart_mask.push(hm);
        void_mask.push(vm);
    }
    let heart_bbox: Vec<BoundingBox> =
        heart_mask.iter().map(|m| BoundingBox::of_mask(m).expect("heart inside the grid")).collect();
    let union_bbox = heart_bbox.iter().skip(1).fold(heart_bbox[0], |acc, b| acc.union(b));
    let volume = CineVolume::new([h, w, d], cfg.spacing_mm, vox, "phantom").expect("finite phantom");
    (volume, PhantomTruth { label, heart_mask, heart_bbox, union_bbox, void_mask })
}

/// Class counts for `n` samples by largest remainder.
pub fn class_counts(n: usize, class_weights: &[f64]) -> Vec<usize> {
    largest_remainder(n, class_weights)
}

const STREAM_PHANTOM: u64 = 0x9A47;
const STREAM_ORDER: u64 = 0x0D3E;

/// Writes `phantom_XXXX.ctv`, `phantom_XXXX_truth.ctv` and `manifest.csv`
/// (split "unassigned") into `out_dir`.
pub fn generate_dataset(
    n: usize,
    class_weights: &[f64],
    cfg: &PhantomConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> crate::Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if n < 4 {
        return Err(CineDataError::InvalidVolume(format!("dataset needs at least 4 samples, got {n}")).into());
    }
    if class_weights.len() != 4 || class_weights.iter().any(|w| !(*w >= 0.0)) || class_weights.iter().sum::<f64>() <= 0.0 {
        return Err(CineDataError::InvalidVolume("class_weights needs four non-negative weights".into()).into());
    }
    cfg.validate().map_err(CineDataError::InvalidVolume)?;
    std::fs::create_dir_all(out_dir).map_err(|e| crate::Error::io(out_dir, e))?;
    let counts = class_counts(n, class_weights);
    let mut labels: Vec<u8> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c as u8, k)).collect();
    labels.shuffle(&mut stream(seed, &[STREAM_ORDER]));
    let mut entries = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("phantom_{i:04}");
        let (mut vol, truth) = generate_phantom(label, cfg, &mut stream(seed, &[STREAM_PHANTOM, i as u64]));
        vol.set_subject_id(&id);
        let file = format!("{id}.ctv");
        write_ctv(&vol, out_dir.join(&file))?;
        let truth_vol = truth.label_map(vol.dims(), cfg.spacing_mm, &id)?;
        write_ctv(&truth_vol, out_dir.join(format!("{id}_truth.ctv")))?;
        entries.push(ManifestEntry { subject_id: id, path: file.into(), label, split: Split::Unassigned });
    }
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(label: u8, seed: u64) -> (CineVolume, PhantomTruth) {
        generate_phantom(label, &PhantomConfig::small(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn void_phase_table() {
        let d = 16;
        for seed in 0..3 {
            for label in 0..4u8 {
                let (_, truth) = gen(label, seed);
                for t in 0..d {
                    let present = !truth.void_mask[t].is_empty();
                    let (o, i) = void_phases(label, t, d);
                    assert_eq!(present, o || i, "label {label} frame {t}");
                    if label == 0 {
                        assert!(!present);
                    }
                    if label == 2 {
                        assert_eq!(present, is_systolic(t, d));
                    }
                    if label == 1 {
                        assert_eq!(present, is_diastolic(t, d));
                    }
                }
            }
        }
    }

    #[test]
    fn voids_lie_in_the_heart() {
        let (_, truth) = gen(3, 5);
        for (v, h) in truth.void_mask.iter().zip(&truth.heart_mask) {
            for r in 0..v.rows {
                for c in 0..v.cols {
                    assert!(!v.get(r, c) || h.get(r, c));
                }
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let (a, _) = gen(2, 11);
        let (b, _) = gen(2, 11);
        let bits = |v: &CineVolume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&gen(2, 12).0));
    }

    #[test]
    fn diastolic_blood_pool_uniform_for_stenosis() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..PhantomConfig::small() };
        let (v, truth) = generate_phantom(2, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let t = 12;
        for r in 0..64 {
            for c in 0..64 {
                if truth.heart_mask[t].get(r, c) {
                    let x = v.get(r, c, t) as f64;
                    assert!((x - 0.9).abs() < 1e-6 || (x - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn heart_contracts_and_relaxes() {
        let (_, truth) = gen(0, 2);
        let area: Vec<usize> = truth.heart_mask.iter().map(Mask::count).collect();
        let peak = (0..16).min_by_key(|&t| area[t]).unwrap();
        assert!((4..=6).contains(&peak), "{area:?}");
        assert!(area[0] > area[peak] && area[15] > area[peak]);
    }

    #[test]
    fn heart_is_the_largest_moving_structure() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..PhantomConfig::default() };
        let (v, truth) = generate_phantom(0, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let (h, w, _) = cfg.grid;
        let late = 6;
        let mut heart_change = 0;
        let mut other_change = 0;
        for r in 0..h {
            for c in 0..w {
                let changed = v.get(r, c, 0) != v.get(r, c, late);
                let heart = truth.heart_mask[0].get(r, c) || truth.heart_mask[late].get(r, c);
                if changed && heart {
                    heart_change += 1;
                } else if changed {
                    other_change += 1;
                }
            }
        }
        assert!(heart_change > 0);
        assert_eq!(other_change, 0);
        let heart_area = truth.heart_mask[0].count();
        assert!(cfg.distractor_size.0 * cfg.distractor_size.1 > heart_area);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        assert_eq!(class_counts(100, &DEFAULT_CLASS_WEIGHTS), vec![67, 14, 10, 9]);
        assert_eq!(class_counts(10, &[1.0, 0.0, 0.0, 0.0]), vec![10, 0, 0, 0]);
        let cfg = PhantomConfig { grid: (24, 24, 6), heart_axes: (5.0, 4.0), root_length_px: 3.0, root_radius_px: 1.5, distractor_size: (12, 6), ..PhantomConfig::small() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(8, &DEFAULT_CLASS_WEIGHTS, &cfg, 4, a.path()).unwrap();
        let mb = generate_dataset(8, &DEFAULT_CLASS_WEIGHTS, &cfg, 4, b.path()).unwrap();
        assert_eq!(ma.entries, mb.entries);
        for e in &ma.entries {
            let fa = std::fs::read(a.path().join(&e.path)).unwrap();
            let fb = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(fa, fb);
            assert!(a.path().join(format!("{}_truth.ctv", e.subject_id)).exists());
        }
        assert_eq!(std::fs::read(a.path().join("manifest.csv")).unwrap(), std::fs::read(b.path().join("manifest.csv")).unwrap());
        assert!(generate_dataset(3, &DEFAULT_CLASS_WEIGHTS, &cfg, 4, a.path()).is_err());
    }
}
