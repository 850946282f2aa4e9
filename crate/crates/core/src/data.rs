//! Synthetic datasets, anomaly-class splits, device partitioning and the
//! plain-text matrix file format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    feature_dim: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, feature_dim: usize) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.features.len() != feature_dim) {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                found: bad.features.len(),
            });
        }
        Ok(Self {
            samples,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            feature_dim: self.feature_dim,
        }
    }
}

/// Parameters of the class-conditional Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of each coordinate of a class mean.
    pub class_mean_separation: f64,
    /// Standard deviation of the per-sample noise.
    pub noise_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            feature_dim: 112,
            num_classes: 4,
            samples_per_class: 3000,
            // A small feature scale keeps full-batch gradient descent stable
            // at step sizes around 1e-2.
            class_mean_separation: 0.3,
            noise_scale: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidDataset("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidDataset(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidDataset(
                "samples_per_class must be at least 1".into(),
            ));
        }
        if !(self.class_mean_separation.is_finite() && self.class_mean_separation > 0.0) {
            return Err(Error::InvalidDataset(
                "class_mean_separation must be positive".into(),
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidDataset(
                "noise_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Each class gets a random mean vector; samples are that mean plus
/// independent Gaussian noise. Samples are ordered by class.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut mean_rng = rng_from(&[seed, 0x3ea5]);
    let mut noise_rng = rng_from(&[seed, 0x0153]);
    let mean_dist = Normal::new(0.0, spec.class_mean_separation)
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    let noise_dist =
        Normal::new(0.0, spec.noise_scale).map_err(|e| Error::InvalidDataset(e.to_string()))?;

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let mean: Vec<f64> = (0..spec.feature_dim)
            .map(|_| mean_dist.sample(&mut mean_rng))
            .collect();
        for _ in 0..spec.samples_per_class {
            let features = mean
                .iter()
                .map(|m| m + noise_dist.sample(&mut noise_rng))
                .collect();
            samples.push(Sample::new(features, class as u32));
        }
    }
    LabeledDataset::new(samples, spec.feature_dim)
}

/// Result of designating anomaly classes. Index lists refer to the source
/// dataset.
#[derive(Debug, Clone)]
pub struct AnomalySplit {
    pub train: LabeledDataset,
    pub test_normal: LabeledDataset,
    pub test_anomalous: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub normal_indices: Vec<usize>,
    pub anomalous_indices: Vec<usize>,
}

/// Moves every sample of `anomaly_classes` to the anomalous test set and holds
/// out `holdout_frac` of each remaining class (stratified, seeded) as normal
/// test data. Each normal class keeps `ceil((1 - holdout_frac) * n_c)` samples
/// for training.
pub fn split_anomaly(
    ds: &LabeledDataset,
    anomaly_classes: &BTreeSet<u32>,
    holdout_frac: f64,
    seed: u64,
) -> Result<AnomalySplit> {
    let classes = ds.class_ids();
    if anomaly_classes.is_empty() {
        return Err(Error::InvalidDataset("anomaly class set is empty".into()));
    }
    if let Some(c) = anomaly_classes.iter().find(|c| !classes.contains(c)) {
        return Err(Error::InvalidDataset(format!(
            "anomaly class {c} is not present in the dataset"
        )));
    }
    if anomaly_classes.len() == classes.len() {
        return Err(Error::InvalidDataset(
            "every class is anomalous; no training data remains".into(),
        ));
    }
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidDataset(format!(
            "holdout_frac must be in (0, 1), got {holdout_frac}"
        )));
    }

    let mut rng = rng_from(&[seed, 0x4017]);
    let mut train_indices = Vec::new();
    let mut normal_indices = Vec::new();
    let mut anomalous_indices = Vec::new();
    for class in &classes {
        let mut members: Vec<usize> = ds
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == *class)
            .map(|(i, _)| i)
            .collect();
        if anomaly_classes.contains(class) {
            anomalous_indices.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let keep = train_count(members.len(), holdout_frac);
        let (train, held) = members.split_at(keep);
        let mut train = train.to_vec();
        let mut held = held.to_vec();
        train.sort_unstable();
        held.sort_unstable();
        train_indices.extend(train);
        normal_indices.extend(held);
    }

    Ok(AnomalySplit {
        train: ds.subset(&train_indices),
        test_normal: ds.subset(&normal_indices),
        test_anomalous: ds.subset(&anomalous_indices),
        train_indices,
        normal_indices,
        anomalous_indices,
    })
}

fn train_count(n: usize, holdout_frac: f64) -> usize {
    // Guard against 0.8 * 3000 landing a hair above 2400.
    (((1.0 - holdout_frac) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    /// Whole classes go to clusters round-robin; requires classes >= k.
    ByClass,
    /// Samples sorted by class, then cut into contiguous near-equal slices per
    /// device, so each device sees one or two classes.
    ClassOrdered,
    /// Samples shuffled, then cut into contiguous near-equal slices.
    Uniform,
}

/// Assignment of devices to clusters and of training samples to devices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub cluster_of_device: Vec<usize>,
    pub samples_of_device: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_devices(&self) -> usize {
        self.cluster_of_device.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_of_device.iter().max().map_or(0, |c| c + 1)
    }

    pub fn devices_of_cluster(&self, cluster: usize) -> Vec<usize> {
        self.cluster_of_device
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(d, _)| d)
            .collect()
    }
}

/// Balanced contiguous device-to-cluster map: the first `n % k` clusters get
/// one extra device, so no cluster exceeds `ceil(n / k)` devices.
pub fn cluster_assignment(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidPartition(format!(
            "cluster count must satisfy 1 <= k <= N, got N={n}, k={k}"
        )));
    }
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(n);
    for c in 0..k {
        let size = base + usize::from(c < extra);
        out.extend(std::iter::repeat_n(c, size));
    }
    Ok(out)
}

fn even_slices(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let len = items.len();
    (0..parts)
        .map(|p| items[p * len / parts..(p + 1) * len / parts].to_vec())
        .collect()
}

pub fn partition(
    ds: &LabeledDataset,
    n: usize,
    k: usize,
    policy: PartitionPolicy,
    seed: u64,
) -> Result<Partition> {
    let cluster_of_device = cluster_assignment(n, k)?;
    let samples_of_device = match policy {
        PartitionPolicy::Uniform => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng_from(&[seed, 0x9a27]));
            even_slices(&order, n)
        }
        PartitionPolicy::ClassOrdered => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.sort_by_key(|&i| ds.samples()[i].label);
            even_slices(&order, n)
        }
        PartitionPolicy::ByClass => {
            let classes: Vec<u32> = ds.class_ids().into_iter().collect();
            if classes.len() < k {
                return Err(Error::InvalidPartition(format!(
                    "by-class partition needs at least k={k} classes, dataset has {}",
                    classes.len()
                )));
            }
            let mut per_cluster: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, s) in ds.samples().iter().enumerate() {
                let rank = classes
                    .binary_search(&s.label)
                    .expect("label from class set");
                per_cluster[rank % k].push(i);
            }
            let mut out = vec![Vec::new(); n];
            for (c, samples) in per_cluster.iter_mut().enumerate() {
                samples.sort_by_key(|&i| (ds.samples()[i].label, i));
                let devices: Vec<usize> = (0..n).filter(|&d| cluster_of_device[d] == c).collect();
                for (d, slice) in devices.iter().zip(even_slices(samples, devices.len())) {
                    out[*d] = slice;
                }
            }
            out
        }
    };
    Ok(Partition {
        cluster_of_device,
        samples_of_device,
    })
}

/// Writes `ds` in the matrix format: a `#` header, then one sample per line as
/// comma-separated features followed by an integer label.
pub fn write_matrix_file(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    let _ = writeln!(text, "# features={} label=last", ds.feature_dim());
    for s in ds.samples() {
        for v in &s.features {
            // `{:?}` prints the shortest representation that parses back exactly.
            let _ = write!(text, "{v:?},");
        }
        let _ = writeln!(text, "{}", s.label);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_matrix_file(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(parse_err(
                line_no,
                "expected at least one feature and a label".into(),
            ));
        }
        let (label_field, feature_fields) = fields.split_last().expect("len >= 2");
        match dim {
            None => dim = Some(feature_fields.len()),
            Some(d) if d != feature_fields.len() => {
                return Err(parse_err(
                    line_no,
                    format!(
                        "ragged row: expected {d} features, found {}",
                        feature_fields.len()
                    ),
                ))
            }
            Some(_) => {}
        }
        let features = feature_fields
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        parse_err(
                            line_no,
                            format!("column {}: `{f}` is not a finite number", col + 1),
                        )
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = label_field
            .parse::<u32>()
            .map_err(|_| parse_err(line_no, format!("label `{label_field}` is not an integer")))?;
        samples.push(Sample::new(features, label));
    }
    let dim = dim.ok_or_else(|| parse_err(0, "file contains no samples".into()))?;
    LabeledDataset::new(samples, dim)
}
