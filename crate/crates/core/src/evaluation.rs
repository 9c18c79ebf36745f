//! Test-set metrics: confusion matrix, accuracy / F1 / precision with bootstrap
//! spread, and one-vs-rest ROC.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cine_data::{Manifest, Split};
use crate::densenet::Model;
use crate::rng::stream;
use crate::training::{argmax, batch_tensor, load_preprocessed, TrainConfig, TrainingError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("test split is empty")]
    NoTestSamples,
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            "weighted" => Ok(Self::Weighted),
            _ => Err(format!("unknown averaging {s:?} (expected macro, micro or weighted)")),
        }
    }
}

/// `K x K` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let k = self.classes();
        let mut text = String::from("truth");
        for j in 0..k {
            text.push_str(&format!(",pred_{j}"));
        }
        text.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            text.push_str(&i.to_string());
            for v in row {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Confusion, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::Length(format!("{} truths, {} predictions", y_true.len(), y_pred.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= k {
                return Err(EvalError::LabelOutOfRange { label, classes: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(Confusion { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

/// Accuracy plus averaged F1 and precision; 0/0 counts as 0.
pub fn classification_metrics(confusion: &Confusion, averaging: Averaging) -> Result<Metrics, EvalError> {
    let k = confusion.classes();
    let total = confusion.total() as f64;
    if k == 0 || total == 0.0 {
        return Err(EvalError::Empty);
    }
    let c = &confusion.counts;
    let tp: Vec<f64> = (0..k).map(|i| c[i][i] as f64).collect();
    let predicted: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c[i][j] as f64).sum()).collect();
    let actual: Vec<f64> = (0..k).map(|i| c[i].iter().sum::<u64>() as f64).collect();
    let accuracy = tp.iter().sum::<f64>() / total;
    let precision: Vec<f64> = (0..k).map(|i| ratio(tp[i], predicted[i])).collect();
    let recall: Vec<f64> = (0..k).map(|i| ratio(tp[i], actual[i])).collect();
    let f1: Vec<f64> = (0..k).map(|i| ratio(2.0 * precision[i] * recall[i], precision[i] + recall[i])).collect();
    let (f1, precision) = match averaging {
        Averaging::Macro => (f1.iter().sum::<f64>() / k as f64, precision.iter().sum::<f64>() / k as f64),
        // Micro precision and F1 both collapse to accuracy for single-label data.
        Averaging::Micro => (accuracy, accuracy),
        Averaging::Weighted => {
            let w = |v: &[f64]| v.iter().zip(&actual).map(|(a, n)| a * n).sum::<f64>() / total;
            (w(&f1), w(&precision))
        }
    };
    Ok(Metrics { accuracy, f1, precision })
}

/// Mann-Whitney AUC of `scores` for the positive set; ties count one half.
/// `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Sum over positives of (#negatives below + half #negatives tied).
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos_here = group.iter().filter(|&&s| positive[s]).count();
        let neg_here = group.len() - pos_here;
        wins += pos_here as f64 * (neg_below as f64 + 0.5 * neg_here as f64);
        neg_below += neg_here;
        i = j;
    }
    Some(wins / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class. Classes absent from `y_true` (or present in every
/// row) yield NaN.
pub fn roc_auc_ovr(y_true: &[usize], scores: &[Vec<f64>], k: usize) -> Result<Vec<f64>, EvalError> {
    if y_true.len() != scores.len() {
        return Err(EvalError::Length(format!("{} truths, {} score rows", y_true.len(), scores.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != k) {
        return Err(EvalError::Length(format!("score row of length {} for {k} classes", row.len())));
    }
    if let Some(&label) = y_true.iter().find(|&&t| t >= k) {
        return Err(EvalError::LabelOutOfRange { label, classes: k });
    }
    Ok((0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
            binary_auc(&s, &pos).unwrap_or(f64::NAN)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC points for decreasing thresholds, starting at (0, 0) with an infinite threshold.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<RocPoint> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if positive[order[i]] { tp += 1.0 } else { fp += 1.0 }
            i += 1;
        }
        points.push(RocPoint { fpr: ratio(fp, n_neg), tpr: ratio(tp, n_pos), threshold: thr });
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    pub precision: MeanStd,
    /// NaN (serialised as null) where a class is absent from the test set.
    pub per_class_auc: Vec<f64>,
    pub n_test: usize,
    pub averaging: Averaging,
    pub bootstrap_n: usize,
    #[serde(skip)]
    pub roc: Vec<Vec<RocPoint>>,
}

fn std_of(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

impl EvalReport {
    /// Metrics on the full set plus bootstrap standard deviations.
    pub fn from_predictions(
        y_true: &[usize],
        probs: &[Vec<f64>],
        k: usize,
        bootstrap_n: usize,
        seed: u64,
        averaging: Averaging,
    ) -> Result<Self, EvalError> {
        if y_true.is_empty() {
            return Err(EvalError::Empty);
        }
        let y_pred: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        let confusion = confusion_matrix(y_true, &y_pred, k)?;
        let point = classification_metrics(&confusion, averaging)?;
        let per_class_auc = roc_auc_ovr(y_true, probs, k)?;
        let n = y_true.len();
        let mut rng = stream(seed, &[0xB0075]);
        let mut samples = [Vec::with_capacity(bootstrap_n), Vec::with_capacity(bootstrap_n), Vec::with_capacity(bootstrap_n)];
        let (mut t, mut p) = (vec![0; n], vec![0; n]);
        for _ in 0..bootstrap_n {
            for i in 0..n {
                let j = rng.random_range(0..n);
                t[i] = y_true[j];
                p[i] = y_pred[j];
            }
            let m = classification_metrics(&confusion_matrix(&t, &p, k)?, averaging)?;
            samples[0].push(m.accuracy);
            samples[1].push(m.f1);
            samples[2].push(m.precision);
        }
        let roc = (0..k)
            .map(|c| {
                let s: Vec<f64> = probs.iter().map(|r| r[c]).collect();
                let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
                roc_curve(&s, &pos)
            })
            .collect();
        Ok(Self {
            confusion,
            accuracy: MeanStd { mean: point.accuracy, std: std_of(&samples[0]) },
            f1: MeanStd { mean: point.f1, std: std_of(&samples[1]) },
            precision: MeanStd { mean: point.precision, std: std_of(&samples[2]) },
            per_class_auc,
            n_test: n,
            averaging,
            bootstrap_n,
            roc,
        })
    }

    /// Writes `report.json`, `auc.csv`, `confusion.csv` and `roc_<class>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        let p = dir.join("report.json");
        fs::write(&p, json).map_err(|e| io_err(&p, e))?;
        self.confusion.write_csv(dir.join("confusion.csv"))?;
        let mut text = String::from("class,auc\n");
        for (c, auc) in self.per_class_auc.iter().enumerate() {
            text.push_str(&format!("{c},{auc}\n"));
        }
        let p = dir.join("auc.csv");
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        for (c, points) in self.roc.iter().enumerate() {
            let mut text = String::from("fpr,tpr,threshold\n");
            for pt in points {
                text.push_str(&format!("{},{},{}\n", pt.fpr, pt.tpr, pt.threshold));
            }
            let p = dir.join(format!("roc_{c}.csv"));
            fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        }
        Ok(())
    }
}

/// Class probabilities for each volume, in order, with running statistics.
pub fn predict_volumes(model: &Model, volumes: &[crate::cine_data::CineVolume]) -> Result<Vec<Vec<f64>>, EvalError> {
    volumes
        .iter()
        .map(|v| {
            let batch = batch_tensor(&[v]).map_err(TrainingError::from)?;
            let (probs, _) = model.forward(&batch, None).map_err(TrainingError::from)?;
            Ok(probs.into_data())
        })
        .collect()
}

/// Runs the model over the manifest's test split without augmentation.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    cfg: &TrainConfig,
    bootstrap_n: usize,
    averaging: Averaging,
) -> Result<EvalReport, EvalError> {
    let idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.entries[i].split == Split::Test).collect();
    if idx.is_empty() {
        return Err(EvalError::NoTestSamples);
    }
    let volumes = load_preprocessed(manifest, &idx, cfg)?;
    let probs = predict_volumes(model, &volumes)?;
    let y_true: Vec<usize> = idx.iter().map(|&i| cfg.task.map_label(manifest.entries[i].label)).collect();
    let k = cfg.task.num_classes();
    if model.config().num_classes != k {
        return Err(EvalError::Length(format!("model has {} classes, task {k}", model.config().num_classes)));
    }
    EvalReport::from_predictions(&y_true, &probs, k, bootstrap_n, cfg.seed, averaging)
}
