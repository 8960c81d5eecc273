//! Evaluation protocol: target-only scoring with all target-private
//! classes collapsed into a single "Unknown" bucket, per-class accuracies
//! and their unweighted averages, threshold and shared-set sweeps, and
//! feature-embedding export for downstream 2-D visualization.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{DomainDataset, UniDATask};
use crate::exec::ExecMode;
use crate::ma::{transferable_weight_target, Prediction, WeightFlags};
use crate::nn::models::{Classifier, DomainDiscriminator, FeatureExtractor};
use crate::nn::ops;

/// Name of the rejection bucket that absorbs every target-private class.
pub const UNKNOWN_CLASS: &str = "Unknown";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/ground-truth mismatch: {0}")]
    IdMismatch(String),
    #[error("sweep grid must contain at least {want} points, got {got}")]
    GridTooSmall { want: usize, got: usize },
    #[error("target sample {0} has no evaluation label")]
    MissingLabel(usize),
    #[error(transparent)]
    Weight(#[from] crate::ma::MaError),
}

/// Ground-truth bucket for one target sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Truth {
    Shared(String),
    Unknown,
}

/// Map target evaluation labels onto shared-class names or Unknown.
pub fn ground_truth(task: &UniDATask, target: &DomainDataset) -> Result<Vec<Truth>, EvalError> {
    (0..target.len())
        .map(|i| {
            let label = target.eval_label(i).ok_or(EvalError::MissingLabel(i))?;
            let name = target.label_set().name(label);
            Ok(if task.shared.contains(name) {
                Truth::Shared(name.to_string())
            } else {
                Truth::Unknown
            })
        })
        .collect()
}

/// Accuracy of one evaluation class.
#[derive(Clone, Debug, Serialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Row-major confusion counts: one row per ground-truth class, one column
/// per predictable class (every source class plus Unknown).
#[derive(Clone, Debug, Serialize)]
pub struct Confusion {
    pub truth_names: Vec<String>,
    pub pred_names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

/// One point of a decision-threshold sweep.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepPoint {
    pub w0: f64,
    pub avg_all: f64,
    pub unknown_accuracy: f64,
}

/// The evaluation protocol's output.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    /// Per-class accuracy over shared classes present in the target plus
    /// Unknown (when the target has private samples).
    pub per_class: Vec<ClassAccuracy>,
    /// Unweighted mean over the shared classes present; `None` when the
    /// task has no shared classes in the target.
    pub avg_shared: Option<f64>,
    /// Unweighted mean over all evaluation classes (shared + Unknown).
    pub avg_all: f64,
    /// Jaccard overlap of the task, straight from the set-size formula.
    pub jaccard: f64,
    /// Externally reported overlap for the same task, when one exists.
    /// Surfaced so a disagreement with the formula value is visible.
    pub jaccard_reference: Option<f64>,
    pub confusion: Confusion,
    pub threshold_curve: Option<Vec<SweepPoint>>,
}

impl MetricsReport {
    pub fn class_accuracy(&self, name: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.accuracy)
    }

    pub fn unknown_accuracy(&self) -> Option<f64> {
        self.class_accuracy(UNKNOWN_CLASS)
    }

    /// Recompute `avg_all` from the stored confusion counts (consistency
    /// check for the emitted artifact).
    pub fn avg_all_from_confusion(&self) -> f64 {
        let mut accs = Vec::new();
        for (i, truth) in self.confusion.truth_names.iter().enumerate() {
            let total: usize = self.confusion.counts[i].iter().sum();
            if total == 0 {
                continue;
            }
            let correct = self.confusion.pred_names.iter().enumerate().find_map(|(j, p)| {
                (p == truth).then(|| self.confusion.counts[i][j])
            });
            accs.push(correct.unwrap_or(0) as f64 / total as f64);
        }
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }

    /// Write the per-class rows as CSV.
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["class", "correct", "total", "accuracy"])?;
        for c in &self.per_class {
            wtr.write_record([
                c.name.clone(),
                c.correct.to_string(),
                c.total.to_string(),
                format!("{:.6}", c.accuracy),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>8} {:>9}", "class", "correct", "total", "accuracy")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<24} {:>8} {:>8} {:>8.2}%",
                c.name,
                c.correct,
                c.total,
                100.0 * c.accuracy
            )?;
        }
        if let Some(avg) = self.avg_shared {
            writeln!(f, "avg (shared classes): {:.2}%", 100.0 * avg)?;
        }
        writeln!(f, "avg (all classes):    {:.2}%", 100.0 * self.avg_all)?;
        write!(f, "label-set overlap (Jaccard): {:.4}", self.jaccard)?;
        if let Some(reference) = self.jaccard_reference {
            write!(
                f,
                " (reported reference: {reference:.2}; formula value differs by {:+.4})",
                self.jaccard - reference
            )?;
        }
        Ok(())
    }
}

/// Score thresholded predictions against target ground truth. Predictions
/// and truths pair by position and must agree on sample ids 0..n.
pub fn score(
    predictions: &[Prediction],
    truths: &[Truth],
    task: &UniDATask,
) -> Result<MetricsReport, EvalError> {
    score_with_reference(predictions, truths, task, None)
}

/// [`score`] with an externally reported overlap value to surface.
pub fn score_with_reference(
    predictions: &[Prediction],
    truths: &[Truth],
    task: &UniDATask,
    jaccard_reference: Option<f64>,
) -> Result<MetricsReport, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::IdMismatch(format!(
            "{} predictions vs {} ground-truth entries",
            predictions.len(),
            truths.len()
        )));
    }
    for (i, p) in predictions.iter().enumerate() {
        if p.sample_id != i {
            return Err(EvalError::IdMismatch(format!(
                "prediction {i} carries sample id {}",
                p.sample_id
            )));
        }
    }

    // Evaluation classes: shared classes with >= 1 target sample, then
    // Unknown if any private sample exists.
    let mut truth_names: Vec<String> = task
        .shared
        .names()
        .iter()
        .filter(|n| truths.iter().any(|t| matches!(t, Truth::Shared(s) if s == *n)))
        .cloned()
        .collect();
    if truths.iter().any(|t| *t == Truth::Unknown) {
        truth_names.push(UNKNOWN_CLASS.to_string());
    }
    let mut pred_names: Vec<String> = task.source_labels.names().to_vec();
    pred_names.push(UNKNOWN_CLASS.to_string());

    let truth_index = |t: &Truth| -> usize {
        match t {
            Truth::Shared(s) => truth_names.iter().position(|n| n == s).expect("present"),
            Truth::Unknown => truth_names.len() - 1,
        }
    };
    let mut counts = vec![vec![0usize; pred_names.len()]; truth_names.len()];
    for (p, t) in predictions.iter().zip(truths) {
        let pred_name = match p.class_index {
            Some(ci) => task.source_labels.name(ci).to_string(),
            None => UNKNOWN_CLASS.to_string(),
        };
        let col = pred_names
            .iter()
            .position(|n| *n == pred_name)
            .expect("prediction names cover all source classes and Unknown");
        counts[truth_index(t)][col] += 1;
    }

    let mut per_class = Vec::new();
    for (i, name) in truth_names.iter().enumerate() {
        let total: usize = counts[i].iter().sum();
        let correct = pred_names
            .iter()
            .position(|n| n == name)
            .map(|j| counts[i][j])
            .unwrap_or(0);
        per_class.push(ClassAccuracy {
            name: name.clone(),
            correct,
            total,
            accuracy: correct as f64 / total.max(1) as f64,
        });
    }
    let shared_accs: Vec<f64> = per_class
        .iter()
        .filter(|c| c.name != UNKNOWN_CLASS)
        .map(|c| c.accuracy)
        .collect();
    let avg_shared = if shared_accs.is_empty() {
        None
    } else {
        Some(shared_accs.iter().sum::<f64>() / shared_accs.len() as f64)
    };
    let avg_all =
        per_class.iter().map(|c| c.accuracy).sum::<f64>() / per_class.len().max(1) as f64;

    Ok(MetricsReport {
        per_class,
        avg_shared,
        avg_all,
        jaccard: task.jaccard,
        jaccard_reference,
        confusion: Confusion { truth_names, pred_names, counts },
        threshold_curve: None,
    })
}

/// Per-sample scores cached once so a sweep re-thresholds without
/// re-running the model.
#[derive(Clone, Debug)]
pub struct PredictionCache {
    pub d: Vec<f64>,
    pub conf: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// One inference pass over the full target set.
pub fn cache_scores(
    feature: &FeatureExtractor,
    classifier: &Classifier,
    disc_sim: &DomainDiscriminator,
    target: &DomainDataset,
    batch: usize,
    mode: ExecMode,
) -> PredictionCache {
    let n = target.len();
    let mut d = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let x = target.batch(&idx);
        let feats = feature.features(&x, mode);
        let probs = classifier.proba(&feats, mode);
        d.extend(disc_sim.domain_probability(&feats, mode).iter());
        conf.extend(ops::max_rows(&probs).iter());
        argmax.extend(ops::argmax_rows(&probs));
    }
    PredictionCache { d, conf, argmax }
}

/// Threshold the cached scores at `w0`.
pub fn predictions_from_cache(
    cache: &PredictionCache,
    w0: f64,
    flags: WeightFlags,
) -> Result<Vec<Prediction>, EvalError> {
    (0..cache.d.len())
        .map(|i| {
            let w_t = transferable_weight_target(cache.d[i], cache.conf[i], flags)?;
            Ok(Prediction {
                sample_id: i,
                class_index: (w_t > w0).then_some(cache.argmax[i]),
                w_t,
                d: cache.d[i],
                conf: cache.conf[i],
                threshold: w0,
            })
        })
        .collect()
}

/// Score the cached predictions at every grid threshold. The model was
/// evaluated once when the cache was built.
pub fn threshold_sweep(
    cache: &PredictionCache,
    truths: &[Truth],
    task: &UniDATask,
    grid: &[f64],
    flags: WeightFlags,
) -> Result<Vec<SweepPoint>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::GridTooSmall { want: 1, got: 0 });
    }
    grid.iter()
        .map(|&w0| {
            let preds = predictions_from_cache(cache, w0, flags)?;
            let report = score(&preds, truths, task)?;
            Ok(SweepPoint {
                w0,
                avg_all: report.avg_all,
                unknown_accuracy: report.unknown_accuracy().unwrap_or(0.0),
            })
        })
        .collect()
}

/// Run a full experiment per shared-set size and collect the accuracy
/// curve. The runner owns training; this owns the curve shape.
pub fn shared_set_sweep<E>(
    sizes: &[usize],
    mut run_point: impl FnMut(usize) -> Result<MetricsReport, E>,
) -> Result<Vec<(usize, MetricsReport)>, E> {
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        out.push((s, run_point(s)?));
    }
    Ok(out)
}

/// One exported embedding row.
#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub domain: String,
    pub category: String,
    pub feature: Vec<f64>,
}

/// Extract feature vectors for every sample of every tagged dataset.
pub fn export_embeddings(
    feature: &FeatureExtractor,
    datasets: &[(&str, &DomainDataset)],
    batch: usize,
    mode: ExecMode,
) -> Vec<EmbeddingRow> {
    let mut rows = Vec::new();
    for (tag, ds) in datasets {
        for start in (0..ds.len()).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch).min(ds.len())).collect();
            let x = ds.batch(&idx);
            let feats: Array2<f64> = feature.features(&x, mode);
            for (row, &i) in idx.iter().enumerate() {
                let category = ds
                    .eval_label(i)
                    .map(|l| ds.label_set().name(l).to_string())
                    .unwrap_or_else(|| "unlabeled".to_string());
                rows.push(EmbeddingRow {
                    sample_id: i,
                    domain: tag.to_string(),
                    category,
                    feature: feats.row(row).to_vec(),
                });
            }
        }
    }
    rows
}

/// Write embedding rows as CSV (id, domain, category, f0..f{d-1}).
pub fn write_embeddings_csv(rows: &[EmbeddingRow], w: impl Write) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let d = rows.first().map_or(0, |r| r.feature.len());
    let mut header = vec!["sample_id".to_string(), "domain".to_string(), "category".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.to_string(), r.domain.clone(), r.category.clone()];
        rec.extend(r.feature.iter().map(|v| format!("{v:.8}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_unida_task, LabelSet};

    fn task_2shared() -> UniDATask {
        let source = LabelSet::new(["a", "b", "s1"]).unwrap();
        let target = LabelSet::new(["a", "b", "t1"]).unwrap();
        build_unida_task(&source, &target).unwrap()
    }

    fn pred(i: usize, class: Option<usize>) -> Prediction {
        Prediction { sample_id: i, class_index: class, w_t: 1.0, d: 0.5, conf: 0.5, threshold: 0.5 }
    }

    #[test]
    fn score_arithmetic_matches_protocol() {
        let task = task_2shared();
        // class a: 2 samples, both right (1.0); class b: 2 samples, 1 right
        // (0.5); unknown: 2 samples, 1 rejected (0.5)
        let truths = vec![
            Truth::Shared("a".into()),
            Truth::Shared("a".into()),
            Truth::Shared("b".into()),
            Truth::Shared("b".into()),
            Truth::Unknown,
            Truth::Unknown,
        ];
        let preds = vec![
            pred(0, Some(0)),
            pred(1, Some(0)),
            pred(2, Some(1)),
            pred(3, Some(0)),
            pred(4, None),
            pred(5, Some(1)),
        ];
        let report = score(&preds, &truths, &task).unwrap();
        assert!((report.avg_shared.unwrap() - 0.75).abs() < 1e-12);
        assert!((report.avg_all - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-12);
        assert!((report.avg_all_from_confusion() - report.avg_all).abs() < 1e-12);
    }

    #[test]
    fn all_correct_scores_one() {
        let task = task_2shared();
        let truths = vec![Truth::Shared("a".into()), Truth::Unknown];
        let preds = vec![pred(0, Some(0)), pred(1, None)];
        let report = score(&preds, &truths, &task).unwrap();
        assert_eq!(report.avg_all, 1.0);
    }

    #[test]
    fn all_unknown_prediction_pattern() {
        let task = task_2shared();
        let truths = vec![
            Truth::Shared("a".into()),
            Truth::Shared("b".into()),
            Truth::Unknown,
        ];
        let preds = vec![pred(0, None), pred(1, None), pred(2, None)];
        let report = score(&preds, &truths, &task).unwrap();
        assert_eq!(report.class_accuracy("a"), Some(0.0));
        assert_eq!(report.class_accuracy("b"), Some(0.0));
        assert_eq!(report.unknown_accuracy(), Some(1.0));
    }

    #[test]
    fn score_is_permutation_invariant() {
        let task = task_2shared();
        let truths = vec![
            Truth::Shared("a".into()),
            Truth::Shared("b".into()),
            Truth::Unknown,
            Truth::Shared("a".into()),
        ];
        let preds = vec![pred(0, Some(0)), pred(1, Some(0)), pred(2, None), pred(3, Some(1))];
        let r1 = score(&preds, &truths, &task).unwrap();
        // permute jointly, reassign ids in order
        let perm = [2usize, 0, 3, 1];
        let truths2: Vec<Truth> = perm.iter().map(|&i| truths[i].clone()).collect();
        let preds2: Vec<Prediction> = perm
            .iter()
            .enumerate()
            .map(|(new_id, &i)| Prediction { sample_id: new_id, ..preds[i].clone() })
            .collect();
        let r2 = score(&preds2, &truths2, &task).unwrap();
        assert_eq!(r1.avg_all, r2.avg_all);
        assert_eq!(r1.avg_shared, r2.avg_shared);
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let task = task_2shared();
        let truths = vec![Truth::Unknown];
        let preds = vec![pred(3, None)];
        assert!(score(&preds, &truths, &task).is_err());
    }

    #[test]
    fn sweep_monotone_unknown_rate() {
        let cache = PredictionCache {
            d: vec![0.1, 0.4, 0.7, 0.9, 0.2, 0.6],
            conf: vec![0.3, 0.8, 0.9, 0.99, 0.2, 0.5],
            argmax: vec![0, 1, 0, 1, 0, 1],
        };
        let task = task_2shared();
        let truths = vec![
            Truth::Shared("a".into()),
            Truth::Shared("b".into()),
            Truth::Shared("a".into()),
            Truth::Shared("b".into()),
            Truth::Unknown,
            Truth::Unknown,
        ];
        let grid: Vec<f64> = (0..=100).map(|i| 2.0 * i as f64 / 100.0).collect();
        let pts = threshold_sweep(&cache, &truths, &task, &grid, WeightFlags::default()).unwrap();
        // unknown accuracy non-decreasing in w0
        for w in pts.windows(2) {
            assert!(w[1].unknown_accuracy >= w[0].unknown_accuracy - 1e-12);
        }
        // w0 = 0 rejects nothing, w0 = 2 rejects everything
        assert_eq!(pts[0].unknown_accuracy, 0.0);
        assert_eq!(pts[pts.len() - 1].unknown_accuracy, 1.0);
        // empty grid errors
        assert!(threshold_sweep(&cache, &truths, &task, &[], WeightFlags::default()).is_err());
    }
}
