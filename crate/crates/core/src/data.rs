//! Synthetic long-tailed datasets, class-count profiles and head/medium/tail
//! partitions.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, TENSOR_MAGIC};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Per-class training counts, sorted so that class 0 is the most frequent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts {
    counts: Vec<usize>,
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(c: ClassCounts) -> Self {
        c.counts
    }
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("counts", "at least one class is required"));
        }
        if counts.contains(&0) {
            return Err(Error::invalid(
                "counts",
                "every class needs at least one sample",
            ));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("counts", "counts must be non-increasing"));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `n_max / n_min`.
    pub fn imbalance_ratio(&self) -> f64 {
        self.counts[0] as f64 / *self.counts.last().expect("non-empty") as f64
    }
}

/// Exponential profile `n_i = floor(n_max * rho^(-i / (C - 1)))`.
pub fn longtail_counts(n_max: usize, rho: f64, classes: usize) -> Result<ClassCounts> {
    if classes < 2 {
        return Err(Error::invalid(
            "classes",
            "at least two classes are required",
        ));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::invalid(
            "rho",
            format!("{rho} must be a finite ratio >= 1"),
        ));
    }
    if rho > n_max as f64 {
        return Err(Error::invalid(
            "rho",
            format!("{rho} exceeds n_max = {n_max}; the rarest class would be empty"),
        ));
    }
    let last = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|i| {
            let exact = n_max as f64 * rho.powf(-(i as f64) / last);
            // Absorb representation error so exact integers do not floor down.
            (exact * (1.0 + 1e-12)).floor() as usize
        })
        .collect();
    ClassCounts::new(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Head,
    Medium,
    Tail,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Head, Split::Medium, Split::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Split::Head => "head",
            Split::Medium => "medium",
            Split::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPartition {
    pub head_threshold: usize,
    pub tail_threshold: usize,
    pub assignment: Vec<Split>,
}

impl SplitPartition {
    pub fn members(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == split)
            .map(|(i, _)| i)
    }

    pub fn of(&self, class: usize) -> Split {
        self.assignment[class]
    }
}

/// Head iff `n_i > head_threshold`, tail iff `n_i <= tail_threshold`,
/// medium otherwise.
pub fn partition_splits(
    counts: &ClassCounts,
    head_threshold: usize,
    tail_threshold: usize,
) -> Result<SplitPartition> {
    if head_threshold <= tail_threshold {
        return Err(Error::invalid(
            "split thresholds",
            format!("head threshold {head_threshold} must exceed tail threshold {tail_threshold}"),
        ));
    }
    let assignment = counts
        .counts()
        .iter()
        .map(|&n| {
            if n > head_threshold {
                Split::Head
            } else if n <= tail_threshold {
                Split::Tail
            } else {
                Split::Medium
            }
        })
        .collect();
    Ok(SplitPartition {
        head_threshold,
        tail_threshold,
        assignment,
    })
}

/// How a dataset was generated. Stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub role: String,
    pub profile: String,
    pub separation: f32,
    pub noise_std: f32,
    pub class_means: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub counts: ClassCounts,
    pub meta: DatasetMeta,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dims(&self) -> usize {
        self.features.dim(1)
    }

    pub fn classes(&self) -> usize {
        self.counts.classes()
    }

    /// Sample indices grouped by label.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            idx[y].push(i);
        }
        idx
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 || self.features.dim(0) != self.labels.len() {
            return Err(Error::shape(
                "dataset features",
                &[self.labels.len(), 0],
                self.features.shape(),
            ));
        }
        let mut freq = vec![0usize; self.classes()];
        for &y in &self.labels {
            if y >= freq.len() {
                return Err(Error::invalid(
                    "labels",
                    format!("label {y} outside 0..{}", freq.len()),
                ));
            }
            freq[y] += 1;
        }
        if freq != self.counts.counts() {
            return Err(Error::invalid(
                "labels",
                "label frequencies disagree with class counts",
            ));
        }
        Ok(())
    }

    pub fn subset_by_label(&self, keep: impl Fn(usize) -> bool) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.features.select_rows(&idx), labels)
    }
}

/// Training set plus a balanced test set drawn from the same class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: DatasetBundle,
    pub test: DatasetBundle,
}

/// Isotropic Gaussian classes. Class means are uniform on the sphere of radius
/// `separation`; noise has unit variance. Samples are grouped by class.
pub fn synth_gaussian_longtail(
    counts: &ClassCounts,
    in_dims: usize,
    separation: f32,
    seed: u64,
    test_per_class: usize,
) -> Result<SyntheticData> {
    if in_dims < 2 {
        return Err(Error::invalid("in_dims", "must be at least 2"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::invalid(
            "separation",
            "must be a positive finite number",
        ));
    }
    if test_per_class == 0 {
        return Err(Error::invalid("test_per_class", "must be at least 1"));
    }
    let classes = counts.classes();
    let mut mean_rng = rng::stream(seed, "data.means", 0);
    let class_means: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..in_dims)
                .map(|_| mean_rng.sample(StandardNormal))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.iter()
                .map(|x| (x / norm * separation as f64) as f32)
                .collect()
        })
        .collect();

    let draw = |role: &str, per_class: &[usize]| -> Result<DatasetBundle> {
        let mut r = rng::stream(seed, &format!("data.{role}"), 0);
        let n: usize = per_class.iter().sum();
        let mut features = Vec::with_capacity(n * in_dims);
        let mut labels = Vec::with_capacity(n);
        for (class, &count) in per_class.iter().enumerate() {
            for _ in 0..count {
                for &m in &class_means[class] {
                    let z: f32 = r.sample(StandardNormal);
                    features.push(m + z);
                }
                labels.push(class);
            }
        }
        Ok(DatasetBundle {
            features: Tensor::new(vec![n, in_dims], features)?,
            labels,
            counts: ClassCounts::new(per_class.to_vec())?,
            meta: DatasetMeta {
                seed,
                role: role.to_string(),
                profile: "gaussian_exponential".to_string(),
                separation,
                noise_std: 1.0,
                class_means: class_means.clone(),
            },
        })
    };

    Ok(SyntheticData {
        train: draw("train", counts.counts())?,
        test: draw("test", &vec![test_per_class; classes])?,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    counts: ClassCounts,
    meta: DatasetMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the tensors to `path` (H2TTENS1) and metadata to `<path>.json`.
pub fn save_dataset(path: &Path, bundle: &DatasetBundle) -> Result<()> {
    let labels = bundle.labels.iter().map(|&y| y as f32).collect();
    container::write_file(
        path,
        TENSOR_MAGIC,
        &[
            ("features".to_string(), bundle.features.clone()),
            (
                "labels".to_string(),
                Tensor::new(vec![bundle.len()], labels)?,
            ),
        ],
    )?;
    let sidecar = Sidecar {
        counts: bundle.counts.clone(),
        meta: bundle.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    let meta_path = sidecar_path(path);
    std::fs::write(&meta_path, json).map_err(|e| Error::io(meta_path, e))
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let mut tensors = container::read_file(path, TENSOR_MAGIC)?;
    let mut take = |name: &str| -> Result<Tensor> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid("dataset", format!("missing tensor {name}")))?;
        Ok(tensors.swap_remove(pos).1)
    };
    let features = take("features")?;
    let raw_labels = take("labels")?;
    let labels = raw_labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                Ok(v as usize)
            } else {
                Err(Error::invalid(
                    "labels",
                    format!("{v} is not a class index"),
                ))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let json = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&json)?;
    let bundle = DatasetBundle {
        features,
        labels,
        counts: sidecar.counts,
        meta: sidecar.meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cifar_style_profile_endpoints() {
        let c = longtail_counts(500, 100.0, 100).unwrap();
        assert_eq!(c.counts()[0], 500);
        assert_eq!(c.counts()[99], 5);
        // floor(500 * 100^(-50/99)) = floor(48.85..)
        let oracle = (500.0f64 * 100f64.powf(-50.0 / 99.0)).floor() as usize;
        assert_eq!(oracle, 48);
        assert_eq!(c.counts()[50], 48);
    }

    #[test]
    fn balanced_profile() {
        let c = longtail_counts(37, 1.0, 6).unwrap();
        assert!(c.counts().iter().all(|&n| n == 37));
    }

    #[test]
    fn rho_above_n_max_is_rejected() {
        assert!(matches!(
            longtail_counts(10, 11.0, 5),
            Err(Error::Validation { .. })
        ));
        assert!(longtail_counts(10, 0.5, 5).is_err());
        assert!(longtail_counts(10, 2.0, 1).is_err());
    }

    #[test]
    fn split_rule() {
        let c = ClassCounts::new(vec![500, 50, 5]).unwrap();
        let p = partition_splits(&c, 100, 20).unwrap();
        assert_eq!(p.assignment, vec![Split::Head, Split::Medium, Split::Tail]);

        let c = ClassCounts::new(vec![500; 4]).unwrap();
        assert!(partition_splits(&c, 100, 20)
            .unwrap()
            .assignment
            .iter()
            .all(|s| *s == Split::Head));

        let c = ClassCounts::new(vec![100]).unwrap();
        assert_eq!(
            partition_splits(&c, 100, 20).unwrap().assignment,
            vec![Split::Medium]
        );
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let c = ClassCounts::new(vec![5]).unwrap();
        assert!(partition_splits(&c, 20, 100).is_err());
        assert!(partition_splits(&c, 20, 20).is_err());
    }

    #[test]
    fn synth_bookkeeping_and_determinism() {
        let c = ClassCounts::new(vec![5, 5]).unwrap();
        let a = synth_gaussian_longtail(&c, 2, 3.0, 42, 4).unwrap();
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.train.labels.iter().filter(|&&y| y == 0).count(), 5);
        assert_eq!(a.test.len(), 8);
        a.train.validate().unwrap();
        let b = synth_gaussian_longtail(&c, 2, 3.0, 42, 4).unwrap();
        assert!(a.train.features.bit_eq(&b.train.features));
        assert_eq!(a, b);
        for m in &a.train.meta.class_means {
            let r: f32 = m.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((r - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_separation_rejected() {
        let c = ClassCounts::new(vec![5, 5]).unwrap();
        assert!(matches!(
            synth_gaussian_longtail(&c, 2, 0.0, 1, 1),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.h2t");
        let c = longtail_counts(30, 10.0, 4).unwrap();
        let data = synth_gaussian_longtail(&c, 3, 2.5, 7, 5).unwrap();
        save_dataset(&path, &data.train).unwrap();
        let back = load_dataset(&path).unwrap();
        assert!(back.features.bit_eq(&data.train.features));
        assert_eq!(back, data.train);
    }

    #[test]
    fn load_reports_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.h2t");
        let c = ClassCounts::new(vec![3, 2]).unwrap();
        let data = synth_gaussian_longtail(&c, 2, 1.0, 7, 1).unwrap();
        save_dataset(&path, &data.train).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"NOTMAGIC");
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::BadMagic { .. })));

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated(_))));
    }

    proptest! {
        #[test]
        fn profile_is_monotone_with_bounded_ratio(
            n_max in 2usize..5000,
            rho_frac in 0.0f64..1.0,
            classes in 2usize..200,
        ) {
            let rho = 1.0 + rho_frac * (n_max as f64 - 1.0);
            let c = longtail_counts(n_max, rho, classes).unwrap();
            prop_assert!(c.counts().windows(2).all(|w| w[0] >= w[1]));
            let n_min = *c.counts().last().unwrap() as f64;
            let measured = c.imbalance_ratio();
            prop_assert!(measured >= rho * (1.0 - 2.0 / n_min) - 1e-9);
            prop_assert!(measured <= rho * (1.0 + 2.0 / n_min) + 1e-9);
        }

        #[test]
        fn partition_covers_every_class(
            counts in prop::collection::vec(1usize..400, 1..40),
            tail in 0usize..50,
            gap in 1usize..100,
        ) {
            let mut counts = counts;
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let c = ClassCounts::new(counts).unwrap();
            let p = partition_splits(&c, tail + gap, tail).unwrap();
            let total: usize = Split::ALL.iter().map(|s| p.members(*s).count()).sum();
            prop_assert_eq!(total, c.classes());
        }
    }
}
