//! Cine volumes, label manifests and the shared depth/intensity preprocessing.
//!
//! A [`CineVolume`] is a single-slice acquisition over the cardiac cycle, stored
//! as an `H x W x D` grid in row-major `(row, col, frame)` order, frame index
//! fastest. The on-disk `.ctv` format is one JSON header line followed by the
//! raw little-endian `f32` payload in the same order.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CTV_MAGIC: &str = "CTV1";
pub const CTV_DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CineDataError {
    #[error("non-finite voxel at index {0}")]
    NonFiniteVoxel(usize),
    #[error("bad magic {0:?}")]
    BadMagic(String),
    #[error("payload length mismatch: header needs {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("label out of range: {0}")]
    LabelOutOfRange(i64),
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("unknown split token {0:?}")]
    UnknownSplit(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("degenerate volume (zero standard deviation)")]
    DegenerateVolume,
    #[error("target depth must be at least 1")]
    InvalidTargetDepth,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CineDataError {
    CineDataError::Io { path: path.display().to_string(), source }
}

/// One 2D+time acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct CineVolume {
    dims: [usize; 3],
    spacing_mm: (f64, f64),
    voxels: Vec<f32>,
    subject_id: String,
}

impl CineVolume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: (f64, f64),
        voxels: Vec<f32>,
        subject_id: impl Into<String>,
    ) -> Result<Self, CineDataError> {
        let [h, w, d] = dims;
        if h < 2 || w < 2 || d < 2 {
            return Err(CineDataError::InvalidVolume(format!(
                "dimensions must be >= 2, got {h}x{w}x{d}"
            )));
        }
        if voxels.len() != h * w * d {
            return Err(CineDataError::InvalidVolume(format!(
                "{} voxels for a {h}x{w}x{d} grid",
                voxels.len()
            )));
        }
        for s in [spacing_mm.0, spacing_mm.1] {
            if !(s > 0.0 && s < 10.0) {
                return Err(CineDataError::InvalidVolume(format!(
                    "spacing {s} mm outside (0, 10)"
                )));
            }
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(CineDataError::NonFiniteVoxel(i));
        }
        Ok(Self { dims, spacing_mm, voxels, subject_id: subject_id.into() })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: (f64, f64), subject_id: impl Into<String>) -> Result<Self, CineDataError> {
        Self::new(dims, spacing_mm, vec![0.0; dims[0] * dims[1] * dims[2]], subject_id)
    }

    /// Stacks equally sized 2-D frames (row-major, `rows * cols` each) along the time axis.
    pub fn from_frames(
        rows: usize,
        cols: usize,
        frames: &[Vec<f32>],
        spacing_mm: (f64, f64),
        subject_id: impl Into<String>,
    ) -> Result<Self, CineDataError> {
        let d = frames.len();
        let mut voxels = vec![0.0f32; rows * cols * d];
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != rows * cols {
                return Err(CineDataError::InvalidVolume(format!(
                    "frame {t} has {} pixels, expected {}",
                    frame.len(),
                    rows * cols
                )));
            }
            for (p, &v) in frame.iter().enumerate() {
                voxels[p * d + t] = v;
            }
        }
        Self::new([rows, cols, d], spacing_mm, voxels, subject_id)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn rows(&self) -> usize {
        self.dims[0]
    }
    pub fn cols(&self) -> usize {
        self.dims[1]
    }
    pub fn frame_count(&self) -> usize {
        self.dims[2]
    }
    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }
    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }
    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn set_subject_id(&mut self, id: impl Into<String>) {
        self.subject_id = id.into();
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, t: usize) -> usize {
        (r * self.dims[1] + c) * self.dims[2] + t
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, t: usize) -> f32 {
        self.voxels[self.index(r, c, t)]
    }

    /// Frame `t` as a row-major image.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        let d = self.dims[2];
        self.voxels.iter().skip(t).step_by(d).copied().collect()
    }

    /// Builds a volume with the same metadata but new voxel values.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self, CineDataError> {
        Self::new(self.dims, self.spacing_mm, voxels, self.subject_id.clone())
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CtvHeader {
    magic: String,
    dims: [usize; 3],
    spacing: [f64; 2],
    subject_id: String,
    dtype: String,
}

pub fn write_ctv(volume: &CineVolume, path: impl AsRef<Path>) -> Result<(), CineDataError> {
    let path = path.as_ref();
    if let Some(i) = volume.voxels.iter().position(|v| !v.is_finite()) {
        return Err(CineDataError::NonFiniteVoxel(i));
    }
    let header = CtvHeader {
        magic: CTV_MAGIC.to_string(),
        dims: volume.dims,
        spacing: [volume.spacing_mm.0, volume.spacing_mm.1],
        subject_id: volume.subject_id.clone(),
        dtype: CTV_DTYPE.to_string(),
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = serde_json::to_string(&header)
        .map_err(|e| CineDataError::MalformedHeader(e.to_string()))?;
    line.push('\n');
    out.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    for v in &volume.voxels {
        out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_ctv(path: impl AsRef<Path>) -> Result<CineVolume, CineDataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(|e| io_err(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(CineDataError::MalformedHeader("missing header terminator".into()));
    }
    let text = std::str::from_utf8(&line)
        .map_err(|_| CineDataError::MalformedHeader("header is not UTF-8".into()))?;
    let header: CtvHeader = serde_json::from_str(text.trim_end())
        .map_err(|e| CineDataError::MalformedHeader(e.to_string()))?;
    if header.magic != CTV_MAGIC {
        return Err(CineDataError::BadMagic(header.magic));
    }
    if header.dtype != CTV_DTYPE {
        return Err(CineDataError::MalformedHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    let count: usize = header.dims.iter().product();
    let mut payload = Vec::with_capacity(count * 4);
    reader.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != count * 4 {
        return Err(CineDataError::PayloadLengthMismatch { expected: count * 4, found: payload.len() });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    CineVolume::new(header.dims, (header.spacing[0], header.spacing[1]), voxels, header.subject_id)
}

/// Classification task. Label codes on disk are always the 4-class codes;
/// the 2-class task folds every pathology into "AVD".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTask {
    TwoClass,
    FourClass,
}

impl LabelTask {
    pub fn num_classes(self) -> usize {
        match self {
            LabelTask::TwoClass => 2,
            LabelTask::FourClass => 4,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelTask::TwoClass => &["no pathology", "AVD"],
            LabelTask::FourClass => &["no pathology", "AR", "AS", "MVD"],
        }
    }

    /// Maps a stored 0..=3 label code onto this task's class index.
    pub fn map_label(self, label: u8) -> usize {
        match self {
            LabelTask::TwoClass => usize::from(label != 0),
            LabelTask::FourClass => label as usize,
        }
    }
}

impl std::str::FromStr for LabelTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_class" | "2" | "two-class" => Ok(LabelTask::TwoClass),
            "four_class" | "4" | "four-class" => Ok(LabelTask::FourClass),
            other => Err(format!("unknown task {other:?} (expected two_class or four_class)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CineDataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(CineDataError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Path as written in the manifest; relative paths resolve against the manifest directory.
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory used to resolve relative entry paths.
    pub base_dir: PathBuf,
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    subject_id: String,
    path: String,
    label: i64,
    split: String,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self, CineDataError> {
        let m = Self { entries, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CineDataError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label > 3 {
                return Err(CineDataError::LabelOutOfRange(e.label as i64));
            }
            if !seen.insert(e.subject_id.as_str()) {
                return Err(CineDataError::DuplicateSubject(e.subject_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Fails on the first entry whose volume file does not exist.
    pub fn check_paths(&self) -> Result<(), CineDataError> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(CineDataError::Manifest(format!(
                    "volume for {:?} not found at {}",
                    e.subject_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Count of each stored label code.
    pub fn class_histogram(&self) -> BTreeMap<u8, usize> {
        let mut h = BTreeMap::new();
        for e in &self.entries {
            *h.entry(e.label).or_insert(0) += 1;
        }
        h
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CineDataError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| CineDataError::Manifest(e.to_string()))?;
        w.write_record(["subject_id", "path", "label", "split"])
            .map_err(|e| CineDataError::Manifest(e.to_string()))?;
        for e in &self.entries {
            w.write_record([
                e.subject_id.as_str(),
                &e.path.to_string_lossy(),
                &e.label.to_string(),
                e.split.token(),
            ])
            .map_err(|e| CineDataError::Manifest(e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, CineDataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| CineDataError::Manifest(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "path", "label", "split"] {
        return Err(CineDataError::Manifest(format!(
            "expected header subject_id,path,label,split, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| CineDataError::Manifest(e.to_string()))?;
        if !(0..=3).contains(&row.label) {
            return Err(CineDataError::LabelOutOfRange(row.label));
        }
        entries.push(ManifestEntry {
            subject_id: row.subject_id,
            path: PathBuf::from(row.path),
            label: row.label as u8,
            split: row.split.parse()?,
        });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(entries, base)
}

/// Overlap-weighted (area) interpolation along the frame axis.
///
/// Output frame `t` averages the input over `[t*D/T, (t+1)*D/T)`. Weights are
/// integer overlap lengths in units of `1/T`, so constants are preserved exactly.
pub fn resize_depth_area(volume: &CineVolume, target_depth: usize) -> Result<CineVolume, CineDataError> {
    if target_depth == 0 {
        return Err(CineDataError::InvalidTargetDepth);
    }
    let [h, w, d] = volume.dims;
    if d == target_depth {
        return Ok(volume.clone());
    }
    let t_len = target_depth;
    // Input frame i spans [i*T, (i+1)*T); output frame j spans [j*D, (j+1)*D).
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(t_len);
    for j in 0..t_len {
        let lo = j * d;
        let hi = (j + 1) * d;
        let mut row = Vec::new();
        for i in (lo / t_len)..d {
            let a = i * t_len;
            let b = (i + 1) * t_len;
            if a >= hi {
                break;
            }
            let overlap = hi.min(b).saturating_sub(lo.max(a));
            if overlap > 0 {
                row.push((i, overlap as f64));
            }
        }
        weights.push(row);
    }
    let norm = d as f64;
    let mut out = vec![0.0f32; h * w * t_len];
    for p in 0..h * w {
        let src = &volume.voxels[p * d..(p + 1) * d];
        let dst = &mut out[p * t_len..(p + 1) * t_len];
        for (j, row) in weights.iter().enumerate() {
            let acc: f64 = row.iter().map(|&(i, wt)| src[i] as f64 * wt).sum();
            dst[j] = (acc / norm) as f32;
        }
    }
    CineVolume::new([h, w, t_len], volume.spacing_mm, out, volume.subject_id.clone())
}

/// Whole-volume z-score with the population standard deviation.
pub fn zscore_normalize(volume: &CineVolume) -> Result<CineVolume, CineDataError> {
    let n = volume.voxels.len() as f64;
    let mean = volume.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(CineDataError::DegenerateVolume);
    }
    let voxels = volume.voxels.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    volume.with_voxels(voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> CineVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let v = (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        CineVolume::new(dims, (1.25, 1.5), v, format!("rand{seed}")).unwrap()
    }

    #[test]
    fn zero_volume_payload_is_32_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.ctv");
        let v = CineVolume::zeros([2, 2, 2], (1.0, 1.0), "z").unwrap();
        write_ctv(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 32);
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["magic"], "CTV1");
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(read_ctv(&p).unwrap(), v);
    }

    #[test]
    fn nan_voxel_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.ctv");
        let mut v = CineVolume::zeros([2, 2, 2], (1.0, 1.0), "n").unwrap();
        v.voxels[3] = f32::NAN;
        let err = write_ctv(&v, &p).unwrap_err();
        assert!(err.to_string().contains("non-finite voxel"));
        assert!(!p.exists());
    }

    #[test]
    fn random_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ctv");
        let v = random_volume([8, 8, 4], 7);
        write_ctv(&v, &p).unwrap();
        let back = read_ctv(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing_mm(), v.spacing_mm());
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn write_raw(p: &Path, header: &str, floats: usize) {
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(b'\n');
        for _ in 0..floats {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(p, bytes).unwrap();
    }

    #[test]
    fn truncated_payload_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ctv");
        write_raw(
            &p,
            r#"{"magic":"CTV1","dims":[2,2,2],"spacing":[1.0,1.0],"subject_id":"t","dtype":"f32le"}"#,
            7,
        );
        assert!(read_ctv(&p).unwrap_err().to_string().contains("payload length mismatch"));
        write_raw(
            &p,
            r#"{"magic":"XTV1","dims":[2,2,2],"spacing":[1.0,1.0],"subject_id":"t","dtype":"f32le"}"#,
            8,
        );
        assert!(read_ctv(&p).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn non_finite_payload_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inf.ctv");
        let mut bytes =
            br#"{"magic":"CTV1","dims":[2,2,2],"spacing":[1.0,1.0],"subject_id":"t","dtype":"f32le"}"#
                .to_vec();
        bytes.push(b'\n');
        for i in 0..8 {
            let v = if i == 5 { f32::INFINITY } else { 0.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_ctv(&p), Err(CineDataError::NonFiniteVoxel(5))));
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "subject_id,path,label,split\n").unwrap();
        assert!(read_manifest(&p).unwrap().is_empty());

        std::fs::write(&p, "subject_id,path,label,split\na,a.ctv,5,train\n").unwrap();
        assert!(read_manifest(&p).unwrap_err().to_string().contains("label out of range"));

        std::fs::write(&p, "subject_id,path,label,split\na,a.ctv,1,holdout\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(CineDataError::UnknownSplit(_))));

        std::fs::write(&p, "subject_id,path,label,split\na,a.ctv,1,train\na,b.ctv,2,test\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(CineDataError::DuplicateSubject(_))));

        std::fs::write(
            &p,
            "subject_id,path,label,split\ns0,s0.ctv,0,train\ns1,s1.ctv,1,val\ns2,s2.ctv,2,test\ns3,s3.ctv,3,unassigned\n",
        )
        .unwrap();
        let m = read_manifest(&p).unwrap();
        let hist: Vec<(u8, usize)> = m.class_histogram().into_iter().collect();
        assert_eq!(hist, vec![(0, 1), (1, 1), (2, 1), (3, 1)]);
        assert_eq!(m.resolve(&m.entries[2]), dir.path().join("s2.ctv"));
        assert!(m.check_paths().is_err());
    }

    #[test]
    fn manifest_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Manifest::new(
            vec![
                ManifestEntry { subject_id: "x".into(), path: "x.ctv".into(), label: 2, split: Split::Val },
                ManifestEntry { subject_id: "y".into(), path: "y.ctv".into(), label: 0, split: Split::Unassigned },
            ],
            dir.path(),
        )
        .unwrap();
        m.write(&p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn label_task_mapping() {
        assert_eq!(LabelTask::TwoClass.class_names(), ["no pathology", "AVD"]);
        assert_eq!(LabelTask::FourClass.class_names(), ["no pathology", "AR", "AS", "MVD"]);
        let two: Vec<usize> = (0..4).map(|l| LabelTask::TwoClass.map_label(l)).collect();
        assert_eq!(two, vec![0, 1, 1, 1]);
    }

    fn per_frame_constant(values: &[f32]) -> CineVolume {
        let frames: Vec<Vec<f32>> = values.iter().map(|&v| vec![v; 6]).collect();
        CineVolume::from_frames(2, 3, &frames, (1.0, 1.0), "pf").unwrap()
    }

    /// Direct summation over the continuous frame axis with fine sub-steps.
    fn area_oracle(frames: &[f64], target: usize) -> Vec<f64> {
        let d = frames.len();
        let sub = 1_000_000;
        let mut out = vec![0.0; target];
        for (j, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (j as f64 * d as f64 / target as f64, (j + 1) as f64 * d as f64 / target as f64);
            let mut acc = 0.0;
            let step = (hi - lo) / sub as f64;
            for s in 0..sub {
                let x = lo + (s as f64 + 0.5) * step;
                acc += frames[(x.floor() as usize).min(d - 1)] * step;
            }
            *o = acc / (hi - lo);
        }
        out
    }

    #[test]
    fn resize_depth_examples() {
        let v = per_frame_constant(&[0.0, 1.0, 2.0, 3.0]);
        let r = resize_depth_area(&v, 2).unwrap();
        assert_eq!(r.frame(0), vec![0.5; 6]);
        assert_eq!(r.frame(1), vec![2.5; 6]);

        let rnd = random_volume([4, 5, 7], 3);
        assert_eq!(resize_depth_area(&rnd, 7).unwrap(), rnd);

        let c = CineVolume::new([3, 3, 5], (1.0, 1.0), vec![0.3f32; 45], "c").unwrap();
        for t in [2, 3, 4, 6, 11, 30] {
            let r = resize_depth_area(&c, t).unwrap();
            assert!(r.voxels().iter().all(|&x| x == 0.3f32), "T={t}");
        }
        assert!(resize_depth_area(&c, 0).is_err());
        assert!(resize_depth_area(&c, 1).is_err());
    }

    #[test]
    fn resize_depth_matches_integration_oracle() {
        let frames = [0.2, -1.0, 3.5, 0.0, 2.25, 7.0, -0.5];
        let v = per_frame_constant(&frames.map(|x| x as f32));
        for t in [2, 3, 5, 10, 13] {
            let r = resize_depth_area(&v, t).unwrap();
            let expected = area_oracle(&frames, t);
            for (j, e) in expected.iter().enumerate() {
                assert!((r.get(0, 0, j) as f64 - e).abs() < 1e-4, "T={t} j={j}");
            }
        }
    }

    #[test]
    fn zscore_examples() {
        let v = CineVolume::new([2, 2, 2], (1.0, 1.0), vec![0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0, 0.0], "s").unwrap();
        let z = zscore_normalize(&v).unwrap();
        assert_eq!(z.voxels(), &[-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0]);

        let c = CineVolume::new([2, 2, 2], (1.0, 1.0), vec![4.0; 8], "c").unwrap();
        assert!(zscore_normalize(&c).unwrap_err().to_string().contains("degenerate volume"));

        let r = random_volume([16, 16, 8], 11);
        let z = zscore_normalize(&r).unwrap();
        // Independent two-pass statistics over the f32 output.
        let n = z.voxels().len() as f64;
        let mean: f64 = z.voxels().iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (z.voxels().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5);
        assert!((std - 1.0).abs() < 1e-5);

        let zz = zscore_normalize(&z).unwrap();
        for (a, b) in zz.voxels().iter().zip(z.voxels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn ctv_round_trip_is_bit_exact(
            h in 2usize..6, w in 2usize..6, d in 2usize..6,
            seed in 0u64..1000, sr in 0.1f64..9.9, sc in 0.1f64..9.9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = h * w * d;
            let vox: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)).collect();
            let v = CineVolume::new([h, w, d], (sr, sc), vox, format!("p{seed}")).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.ctv");
            write_ctv(&v, &p).unwrap();
            let back = read_ctv(&p).unwrap();
            proptest::prop_assert_eq!(back.spacing_mm(), v.spacing_mm());
            for (a, b) in back.voxels().iter().zip(v.voxels()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn resize_preserves_mean_of_frame_means(d in 2usize..12, t in 2usize..40, seed in 0u64..500) {
            let v = random_volume([3, 2, d], seed);
            let r = resize_depth_area(&v, t).unwrap();
            proptest::prop_assert!((v.mean() - r.mean()).abs() < 1e-5);
        }

        #[test]
        fn zscore_statistics(seed in 0u64..500, d in 2usize..6) {
            let v = random_volume([5, 4, d], seed);
            let z = zscore_normalize(&v).unwrap();
            let n = z.voxels().len() as f64;
            let mean = z.mean();
            let std = (z.voxels().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            proptest::prop_assert!(mean.abs() < 1e-5);
            proptest::prop_assert!((std - 1.0).abs() < 1e-5);
        }
    }
}
