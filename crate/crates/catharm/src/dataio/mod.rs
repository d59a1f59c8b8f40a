//! Dataset ingestion and assembly: IDX images, schema-driven CSV, synthetic
//! generators, transform/successor pair builders, and fold splitting.
//!
//! A [`Dataset`] is loaded first (features, labels, raw covariate columns),
//! then [`Dataset::attach_covariates`] bins the declared covariates and — for
//! transform-derived covariates — augments the rows and prebuilds their pair
//! sets. Tabular features are stored raw; the training pipeline standardizes
//! them with train-split statistics.

mod idx;
mod synth;
mod tabular;
mod transforms;

pub use idx::{load_mnist_idx, write_mnist_idx};
pub use synth::{synth_credit, synth_digits, synth_income, synth_monotone};
pub use tabular::{load_tabular_csv, parse_schema, ColumnKind, ColumnRole, SchemaColumn};
pub use transforms::{
    apply_transform_steps, make_successor_pairs, make_transform_pairs, rotate_image, scale_image,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pairing::{
    bin_covariate, BinningInfo, ColumnRef, CovariateSpec, PairSet, PairingError,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {what}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        got: u32,
    },
    #[error("truncated {what}: needed {needed} bytes, had {had}")]
    Truncated {
        what: &'static str,
        needed: usize,
        had: usize,
    },
    #[error("dimension mismatch: {message}")]
    DimensionMismatch { message: String },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("column '{0}' missing from data")]
    MissingColumn(String),
    #[error("no labeled successor pairs could be formed")]
    EmptyClass,
    #[error("dataset is not an image dataset")]
    NotAnImageDataset,
    #[error("k={k} folds requested for {m} samples")]
    KTooLarge { k: usize, m: usize },
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DataKind {
    Image { height: usize, width: usize },
    Tabular,
}

impl DataKind {
    pub fn is_image(&self) -> bool {
        matches!(self, DataKind::Image { .. })
    }
}

/// One attached covariate: its spec, raw values, bin codes, realized binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub spec: CovariateSpec,
    pub raw: Vec<f64>,
    pub codes: Vec<i64>,
    pub binning: BinningInfo,
}

/// Per-column affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Fits mean/std on the given rows; columns outside `numeric` keep the
    /// identity transform, as do constant columns.
    pub fn fit(features: &Tensor, rows: &[usize], numeric: &[bool]) -> Standardization {
        let p = features.cols();
        let mut mean = vec![0.0; p];
        let mut std = vec![1.0; p];
        if rows.is_empty() {
            return Standardization { mean, std };
        }
        for c in 0..p {
            if !numeric.get(c).copied().unwrap_or(false) {
                continue;
            }
            let mut mu = 0.0;
            for &r in rows {
                mu += features.get(r, c);
            }
            mu /= rows.len() as f64;
            let mut var = 0.0;
            for &r in rows {
                let d = features.get(r, c) - mu;
                var += d * d;
            }
            var /= rows.len() as f64;
            mean[c] = mu;
            std[c] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Standardization { mean, std }
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let (m, p) = (features.rows(), features.cols());
        let mut out = features.clone();
        let data = out.data_mut();
        for r in 0..m {
            for c in 0..p {
                data[r * p + c] = (data[r * p + c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn identity(p: usize) -> Standardization {
        Standardization {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }
}

/// Feature matrix, labels, covariate table and provenance for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Source columns eligible as covariates, by name (raw values).
    pub raw_columns: BTreeMap<String, Vec<f64>>,
    pub covariates: Vec<CovariateColumn>,
    /// Pair sets fixed at assembly time (transform/successor covariates).
    pub prebuilt_pairs: BTreeMap<String, PairSet>,
    /// Feature columns eligible for standardization.
    pub numeric_columns: Vec<bool>,
    /// Content hash of features+labels, hex.
    pub provenance: String,
    pub dropped_rows: usize,
    /// Generator ground truth (class-1 probability per row), when synthetic.
    pub ground_truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_parts(
        kind: DataKind,
        features: Tensor,
        labels: Vec<usize>,
        raw_columns: BTreeMap<String, Vec<f64>>,
        numeric_columns: Vec<bool>,
    ) -> Dataset {
        let n_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
        let provenance = content_hash(&features, &labels);
        Dataset {
            kind,
            features,
            labels,
            n_classes,
            raw_columns,
            covariates: Vec::new(),
            prebuilt_pairs: BTreeMap::new(),
            numeric_columns,
            provenance,
            dropped_rows: 0,
            ground_truth: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn codes_for(&self, covariate: &str) -> Option<&[i64]> {
        self.covariates
            .iter()
            .find(|c| c.spec.name == covariate)
            .map(|c| c.codes.as_slice())
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateColumn> {
        self.covariates.iter().find(|c| c.spec.name == name)
    }

    /// Bins the declared covariates and attaches them in order. Transform
    /// covariates augment the dataset (from the original rows) and prebuild
    /// their pair sets; already-attached columns are extended by copying the
    /// base row's values onto each augmented row.
    pub fn attach_covariates(
        mut self,
        specs: &[CovariateSpec],
        seed: u64,
    ) -> Result<Dataset, DataError> {
        let base_rows = self.len();
        for spec in specs {
            spec.validate()?;
            match &spec.column {
                ColumnRef::Transform { kind, max_steps } => {
                    if !self.kind.is_image() {
                        return Err(DataError::NotAnImageDataset);
                    }
                    let start = self.len();
                    let (aug_features, aug_labels, pairs, codes_new) = transforms::augment(
                        &self.features,
                        &self.labels,
                        self.kind,
                        *kind,
                        *max_steps,
                        base_rows,
                        start,
                        &spec.name,
                    )?;
                    // extend existing columns by copying the base rows' values
                    for col in self.covariates.iter_mut() {
                        for base in 0..base_rows {
                            for _ in 0..*max_steps {
                                col.raw.push(col.raw[base]);
                                col.codes.push(col.codes[base]);
                            }
                        }
                    }
                    for (_, raw) in self.raw_columns.iter_mut() {
                        for base in 0..base_rows {
                            for _ in 0..*max_steps {
                                raw.push(raw[base]);
                            }
                        }
                    }
                    let mut codes = vec![0i64; start];
                    codes.extend(codes_new);
                    let raw: Vec<f64> = codes.iter().map(|&c| c as f64).collect();
                    self.features =
                        crate::tensor::concat_rows(&[&self.features, &aug_features])
                            .map_err(|e| DataError::Invalid(e.to_string()))?;
                    self.labels.extend(aug_labels);
                    self.prebuilt_pairs.insert(spec.name.clone(), pairs);
                    self.covariates.push(CovariateColumn {
                        spec: spec.clone(),
                        raw,
                        codes,
                        binning: BinningInfo::Width { width: 1.0 },
                    });
                }
                ColumnRef::Label => {
                    let raw: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
                    let (codes, binning) = bin_covariate(&raw, spec)?;
                    self.covariates.push(CovariateColumn {
                        spec: spec.clone(),
                        raw,
                        codes,
                        binning,
                    });
                }
                ColumnRef::Named { name } => {
                    let raw = self
                        .raw_columns
                        .get(name)
                        .cloned()
                        .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
                    let (codes, binning) = bin_covariate(&raw, spec)?;
                    self.covariates.push(CovariateColumn {
                        spec: spec.clone(),
                        raw,
                        codes,
                        binning,
                    });
                }
            }
        }
        let _ = seed; // reserved for stochastic augmentation variants
        self.provenance = content_hash(&self.features, &self.labels);
        Ok(self)
    }

    /// Row subset, preserving order. Prebuilt pairs are kept when both
    /// endpoints survive, reindexed to the new positions.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let features = crate::tensor::gather_rows(&self.features, rows).expect("valid rows");
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let remap: BTreeMap<usize, usize> =
            rows.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let covariates = self
            .covariates
            .iter()
            .map(|c| CovariateColumn {
                spec: c.spec.clone(),
                raw: rows.iter().map(|&r| c.raw[r]).collect(),
                codes: rows.iter().map(|&r| c.codes[r]).collect(),
                binning: c.binning.clone(),
            })
            .collect();
        let raw_columns = self
            .raw_columns
            .iter()
            .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
            .collect();
        let prebuilt_pairs = self
            .prebuilt_pairs
            .iter()
            .map(|(k, set)| {
                let entries = set
                    .entries
                    .iter()
                    .filter_map(|e| {
                        let (i, j) = (remap.get(&e.i)?, remap.get(&e.j)?);
                        Some(crate::pairing::PairEntry {
                            i: *i,
                            j: *j,
                            d: e.d,
                        })
                    })
                    .collect();
                (
                    k.clone(),
                    PairSet {
                        covariate: set.covariate.clone(),
                        entries,
                    },
                )
            })
            .collect();
        let ground_truth = self
            .ground_truth
            .as_ref()
            .map(|gt| rows.iter().map(|&r| gt[r]).collect());
        Dataset {
            kind: self.kind,
            provenance: content_hash(&features, &labels),
            features,
            labels,
            n_classes: self.n_classes,
            raw_columns,
            covariates,
            prebuilt_pairs,
            numeric_columns: self.numeric_columns.clone(),
            dropped_rows: self.dropped_rows,
            ground_truth,
        }
    }

    /// Seeded uniform row subsample (order-preserving).
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<usize> = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        rows.sort_unstable();
        self.select(&rows)
    }
}

/// Stratified k-fold assignment: per-class seeded shuffles dealt round-robin
/// with a global cursor, so fold sizes differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    let m = labels.len();
    if k > m || k < 2 {
        return Err(DataError::KTooLarge { k, m });
    }
    let n_classes = labels.iter().copied().max().map_or(1, |v| v + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for class_rows in by_class.iter_mut() {
        use rand::seq::SliceRandom;
        class_rows.shuffle(&mut rng);
        for &row in class_rows.iter() {
            folds[cursor % k].push(row);
            cursor += 1;
        }
    }
    for fold in folds.iter_mut() {
        fold.sort_unstable();
    }
    Ok(folds)
}

pub(crate) fn content_hash(features: &Tensor, labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for v in features.data() {
        h.update(v.to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    let out = h.finalize();
    let mut s = String::with_capacity(16);
    for b in out.iter().take(8) {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::{BinRule, Constraint, CovariateKind, MorphismSpec};

    fn toy_dataset() -> Dataset {
        let features = Tensor::matrix(
            6,
            2,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        )
        .unwrap();
        let labels = vec![0, 1, 0, 1, 0, 1];
        let mut raw = BTreeMap::new();
        raw.insert("site".to_string(), vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        Dataset::from_parts(DataKind::Tabular, features, labels, raw, vec![true, true])
    }

    #[test]
    fn attach_named_covariate() {
        let specs = vec![CovariateSpec {
            name: "site".into(),
            kind: CovariateKind::Categorical,
            column: ColumnRef::Named {
                name: "site".into(),
            },
            bins: BinRule::Enumerate,
            constraint: Constraint::Invariance,
            morphism: MorphismSpec::None,
        }];
        let d = toy_dataset().attach_covariates(&specs, 0).unwrap();
        assert_eq!(d.codes_for("site").unwrap(), &[0, 1, 0, 1, 1, 0]);
    }

    #[test]
    fn attach_missing_column_errors() {
        let specs = vec![CovariateSpec {
            name: "nope".into(),
            kind: CovariateKind::Categorical,
            column: ColumnRef::Named {
                name: "nope".into(),
            },
            bins: BinRule::Enumerate,
            constraint: Constraint::Invariance,
            morphism: MorphismSpec::None,
        }];
        assert!(matches!(
            toy_dataset().attach_covariates(&specs, 0),
            Err(DataError::MissingColumn(_))
        ));
    }

    #[test]
    fn select_remaps_prebuilt_pairs() {
        let mut d = toy_dataset();
        d.prebuilt_pairs.insert(
            "t".into(),
            PairSet {
                covariate: "t".into(),
                entries: vec![
                    crate::pairing::PairEntry { i: 0, j: 2, d: -1 },
                    crate::pairing::PairEntry { i: 1, j: 5, d: -1 },
                ],
            },
        );
        let s = d.select(&[0, 2, 3]);
        let set = &s.prebuilt_pairs["t"];
        assert_eq!(set.entries.len(), 1);
        assert_eq!((set.entries[0].i, set.entries[0].j), (0, 1));
    }

    #[test]
    fn ingest_twice_identical_hash() {
        let a = toy_dataset();
        let b = toy_dataset();
        assert_eq!(a.provenance, b.provenance);
        assert_eq!(a, b);
    }

    #[test]
    fn kfold_sizes_and_partition() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let folds = kfold_split(&labels, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.len(), 20);
        }
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_deterministic() {
        let labels: Vec<usize> = (0..37).map(|i| i % 3).collect();
        let a = kfold_split(&labels, 5, 11).unwrap();
        let b = kfold_split(&labels, 5, 11).unwrap();
        assert_eq!(a, b);
        let c = kfold_split(&labels, 5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kfold_stratification_balance() {
        // 60/40 class split over 100 rows: every fold within one sample of
        // the global ratio
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 5 < 2)).collect();
        let folds = kfold_split(&labels, 5, 3).unwrap();
        for f in &folds {
            let ones = f.iter().filter(|&&i| labels[i] == 1).count();
            assert!((ones as i64 - 8).abs() <= 1, "ones={ones}");
        }
    }

    #[test]
    fn kfold_rejects_k_over_m() {
        assert!(kfold_split(&[0, 1, 0], 4, 0).is_err());
    }

    #[test]
    fn standardization_train_stats_and_reuse() {
        let d = toy_dataset();
        let train_rows: Vec<usize> = vec![0, 1, 2, 3];
        let s = Standardization::fit(&d.features, &train_rows, &d.numeric_columns);
        let std_features = s.apply(&d.features);
        for c in 0..2 {
            let mut mu = 0.0;
            for &r in &train_rows {
                mu += std_features.get(r, c);
            }
            mu /= train_rows.len() as f64;
            assert!(mu.abs() < 1e-10);
            let mut var = 0.0;
            for &r in &train_rows {
                var += std_features.get(r, c) * std_features.get(r, c);
            }
            var /= train_rows.len() as f64;
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn subsample_deterministic() {
        let d = toy_dataset();
        let a = d.subsample(3, 5);
        let b = d.subsample(3, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }
}
