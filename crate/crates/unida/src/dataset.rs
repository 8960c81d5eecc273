//! Label-set algebra, task construction and the dataset abstraction.
//!
//! Class identity across domains is matched by *name*, never by index:
//! the same category may sit at different indices in different datasets.
//! Target-domain labels are retained for evaluation but hidden from the
//! training-facing accessor.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate class name {0:?} in label set")]
    DuplicateClassName(String),
    #[error("label set must contain at least one class")]
    EmptyLabelSet,
    #[error("class index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },
    #[error("dataset directory {0} contains no class subdirectories")]
    EmptyDirectory(String),
    #[error("class {0:?} has no decodable images")]
    EmptyClass(String),
    #[error("image batch has {got} channels/size, dataset expects {want}")]
    ShapeMismatch { want: String, got: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// An ordered set of class names; index = position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DatasetError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DatasetError::EmptyLabelSet);
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(DatasetError::DuplicateClassName(n.clone()));
            }
        }
        Ok(LabelSet { names })
    }

    /// An empty set — only valid as a *derived* partition (e.g. no shared
    /// classes), never as a domain's own label set.
    pub fn empty() -> Self {
        LabelSet { names: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names.join(", "))
    }
}

/// A universal domain adaptation task: two label sets and their induced
/// shared/private partition, plus the Jaccard overlap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniDATask {
    pub source_labels: LabelSet,
    pub target_labels: LabelSet,
    pub shared: LabelSet,
    pub source_private: LabelSet,
    pub target_private: LabelSet,
    pub jaccard: f64,
}

/// Partition two label sets into shared and private parts. The shared set
/// keeps source order; each private set keeps its own domain's order.
pub fn build_unida_task(
    source_labels: &LabelSet,
    target_labels: &LabelSet,
) -> Result<UniDATask, DatasetError> {
    if source_labels.is_empty() || target_labels.is_empty() {
        return Err(DatasetError::EmptyLabelSet);
    }
    let shared: Vec<String> = source_labels
        .names()
        .iter()
        .filter(|n| target_labels.contains(n))
        .cloned()
        .collect();
    let source_private: Vec<String> = source_labels
        .names()
        .iter()
        .filter(|n| !target_labels.contains(n))
        .cloned()
        .collect();
    let target_private: Vec<String> = target_labels
        .names()
        .iter()
        .filter(|n| !source_labels.contains(n))
        .cloned()
        .collect();
    let union = source_labels.len() + target_labels.len() - shared.len();
    let jaccard = shared.len() as f64 / union as f64;
    let wrap = |v: Vec<String>| {
        if v.is_empty() {
            LabelSet::empty()
        } else {
            LabelSet { names: v }
        }
    };
    Ok(UniDATask {
        source_labels: source_labels.clone(),
        target_labels: target_labels.clone(),
        shared: wrap(shared),
        source_private: wrap(source_private),
        target_private: wrap(target_private),
        jaccard,
    })
}

/// Overlap of the two label sets: `|shared| / |source ∪ target|`.
pub fn jaccard_index(task: &UniDATask) -> f64 {
    task.jaccard
}

/// Which side of the adaptation a dataset plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainRole {
    RealSource,
    SyntheticSource,
    Target,
}

/// A labeled image collection. Images are (channels, height, width)
/// intensities in [0, 1], all the same resolution.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    role: DomainRole,
    images: Vec<Array3<f64>>,
    labels: Vec<Option<usize>>,
    label_set: LabelSet,
}

impl DomainDataset {
    pub fn new(
        role: DomainRole,
        images: Vec<Array3<f64>>,
        labels: Vec<Option<usize>>,
        label_set: LabelSet,
    ) -> Result<Self, DatasetError> {
        assert_eq!(images.len(), labels.len(), "one label slot per image");
        if let Some(first) = images.first() {
            for img in &images {
                if img.dim() != first.dim() {
                    return Err(DatasetError::ShapeMismatch {
                        want: format!("{:?}", first.dim()),
                        got: format!("{:?}", img.dim()),
                    });
                }
            }
        }
        for l in labels.iter().flatten() {
            if *l >= label_set.len() {
                return Err(DatasetError::LabelOutOfRange {
                    index: *l,
                    classes: label_set.len(),
                });
            }
        }
        Ok(DomainDataset { role, images, labels, label_set })
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn image(&self, i: usize) -> &Array3<f64> {
        &self.images[i]
    }

    /// (channels, height, width) of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images
            .first()
            .map(|im| im.dim())
            .unwrap_or((0, 0, 0))
    }

    /// Label visible to training code. Target-role labels are evaluation
    /// ground truth only, so this returns `None` for them.
    pub fn train_label(&self, i: usize) -> Option<usize> {
        match self.role {
            DomainRole::Target => None,
            _ => self.labels[i],
        }
    }

    /// Label for scoring, regardless of role.
    pub fn eval_label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Stack the given samples into a (batch, C, H, W) array.
    pub fn batch(&self, indices: &[usize]) -> Array4<f64> {
        let (c, h, w) = self.image_shape();
        let mut out = Array4::<f64>::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.images[i]);
        }
        out
    }

    /// Training labels for the given samples; panics if any is hidden.
    pub fn batch_train_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| {
                self.train_label(i)
                    .expect("training labels requested from an unlabeled or target-role dataset")
            })
            .collect()
    }

    /// Per-class sample counts (by eval label).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.label_set.len()];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        counts
    }
}

/// Load a directory-per-class image tree. Class names are the subdirectory
/// names sorted lexicographically; images are decoded, resized to
/// `image_size` x `image_size` and scaled to [0, 1]. Undecodable files are
/// skipped with a warning; a class with no decodable images is an error.
pub fn ingest_folder_dataset(
    path: &Path,
    role: DomainRole,
    image_size: usize,
) -> Result<DomainDataset, DatasetError> {
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    if class_dirs.is_empty() {
        return Err(DatasetError::EmptyDirectory(path.display().to_string()));
    }
    let label_set = LabelSet::new(class_dirs.iter().map(|(n, _)| n.clone()))?;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class_idx, (class_name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut decoded = 0usize;
        for file in files {
            match image::open(&file) {
                Ok(img) => {
                    let resized = image::imageops::resize(
                        &img.to_rgb8(),
                        image_size as u32,
                        image_size as u32,
                        image::imageops::FilterType::Triangle,
                    );
                    let mut arr = Array3::<f64>::zeros((3, image_size, image_size));
                    for (x, y, pixel) in resized.enumerate_pixels() {
                        for ch in 0..3 {
                            arr[[ch, y as usize, x as usize]] = pixel.0[ch] as f64 / 255.0;
                        }
                    }
                    images.push(arr);
                    labels.push(Some(class_idx));
                    decoded += 1;
                }
                Err(err) => {
                    eprintln!("warning: skipping undecodable image {}: {err}", file.display());
                }
            }
        }
        if decoded == 0 {
            return Err(DatasetError::EmptyClass(class_name.clone()));
        }
    }
    DomainDataset::new(role, images, labels, label_set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().copied()).unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(matches!(
            LabelSet::new(["a", "b", "a"]),
            Err(DatasetError::DuplicateClassName(_))
        ));
    }

    #[test]
    fn task_partition_counts_match_benchmark_tasks() {
        // 7-class source vs 21-class target with 5 common names
        let source = ls(&["farmland", "forest", "dense_residential", "river", "parking", "industrial", "grassland"]);
        let target_names: Vec<String> = ["farmland", "forest", "dense_residential", "river", "parking"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..16).map(|i| format!("target_only_{i}")))
            .collect();
        let target = LabelSet::new(target_names).unwrap();
        let task = build_unida_task(&source, &target).unwrap();
        assert_eq!(task.shared.len(), 5);
        assert_eq!(task.source_private.len(), 2);
        assert_eq!(task.target_private.len(), 16);
        assert!((task.jaccard - 5.0 / 23.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_are_closed_set() {
        let s = ls(&["a", "b", "c", "d"]);
        let task = build_unida_task(&s, &s).unwrap();
        assert_eq!(task.shared.len(), 4);
        assert!(task.source_private.is_empty());
        assert!(task.target_private.is_empty());
        assert!((task.jaccard - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_sets_have_zero_jaccard() {
        let task = build_unida_task(&ls(&["a", "b"]), &ls(&["c", "d"])).unwrap();
        assert!(task.shared.is_empty());
        assert_eq!(task.jaccard, 0.0);
    }

    #[test]
    fn partition_reassembles_inputs() {
        let source = ls(&["x", "m", "a"]);
        let target = ls(&["a", "q", "x"]);
        let task = build_unida_task(&source, &target).unwrap();
        let mut rebuilt: Vec<&str> = task
            .shared
            .names()
            .iter()
            .chain(task.source_private.names())
            .map(|s| s.as_str())
            .collect();
        rebuilt.sort_unstable();
        let mut want: Vec<&str> = source.names().iter().map(|s| s.as_str()).collect();
        want.sort_unstable();
        assert_eq!(rebuilt, want);
    }

    #[test]
    fn target_role_hides_training_labels() {
        let img = Array3::<f64>::zeros((3, 4, 4));
        let set = ls(&["a", "b"]);
        let d = DomainDataset::new(
            DomainRole::Target,
            vec![img.clone(), img],
            vec![Some(0), Some(1)],
            set,
        )
        .unwrap();
        assert_eq!(d.train_label(0), None);
        assert_eq!(d.eval_label(0), Some(0));
        assert_eq!(d.eval_label(1), Some(1));
    }

    #[test]
    fn jaccard_is_symmetric_and_order_invariant() {
        let a = ls(&["p", "q", "r", "s"]);
        let b = ls(&["s", "q", "z"]);
        let t1 = build_unida_task(&a, &b).unwrap();
        let t2 = build_unida_task(&b, &a).unwrap();
        assert_eq!(t1.jaccard, t2.jaccard);
        let a_shuffled = ls(&["s", "r", "q", "p"]);
        let t3 = build_unida_task(&a_shuffled, &b).unwrap();
        assert_eq!(t1.jaccard, t3.jaccard);
    }
}
