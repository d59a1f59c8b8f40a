//! Covariate binning and pair enumeration: turns covariate columns into
//! integer bin codes and batches into ((i, j), d) tuples, one pair set per
//! covariate, with d = code(i) - code(j).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PairingError {
    #[error("value {value} outside declared range for covariate '{covariate}'")]
    ValueOutOfRange { covariate: String, value: f64 },
    #[error("bin edges must be strictly increasing")]
    BadEdges,
    #[error("bin width must be positive")]
    BadWidth,
    #[error("covariate '{covariate}': {message}")]
    InvalidSpec { covariate: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Categorical,
    Ordinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Invariance,
    Equivariance,
}

/// Latent morphism parameterization attached to a covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "dim")]
pub enum MorphismSpec {
    None,
    Linear(usize),
    Orthogonal(usize),
}

impl MorphismSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            MorphismSpec::None => None,
            MorphismSpec::Linear(n) | MorphismSpec::Orthogonal(n) => Some(*n),
        }
    }

    pub fn is_orthogonal(&self) -> bool {
        matches!(self, MorphismSpec::Orthogonal(_))
    }
}

/// How raw covariate values map to integer bin codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "arg")]
pub enum BinRule {
    /// First-appearance enumeration of distinct values (categorical).
    Enumerate,
    /// Fixed-width bins anchored at 0: code = floor(v / width), v >= 0.
    Width(f64),
    /// Explicit ascending edges; code k covers [edges[k], edges[k+1]),
    /// the last bin is unbounded above.
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rotate,
    Scale,
}

/// Where a covariate's raw values come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source")]
pub enum ColumnRef {
    Named { name: String },
    Label,
    Transform { kind: TransformKind, max_steps: usize },
}

/// One covariate: name, kind, source column, binning, constraint and
/// morphism parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub column: ColumnRef,
    pub bins: BinRule,
    pub constraint: Constraint,
    pub morphism: MorphismSpec,
}

impl CovariateSpec {
    /// Checks the structural invariants: categorical implies invariance,
    /// equivariance implies a morphism.
    pub fn validate(&self) -> Result<(), PairingError> {
        if self.kind == CovariateKind::Categorical && self.constraint != Constraint::Invariance {
            return Err(PairingError::InvalidSpec {
                covariate: self.name.clone(),
                message: "categorical covariates must use the invariance constraint".into(),
            });
        }
        if self.constraint == Constraint::Equivariance && self.morphism == MorphismSpec::None {
            return Err(PairingError::InvalidSpec {
                covariate: self.name.clone(),
                message: "equivariance requires a morphism".into(),
            });
        }
        if let BinRule::Width(w) = self.bins {
            if w <= 0.0 {
                return Err(PairingError::BadWidth);
            }
        }
        if let BinRule::Edges(e) = &self.bins {
            if e.is_empty() || e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PairingError::BadEdges);
            }
        }
        Ok(())
    }
}

/// Description of the realized binning, recorded for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BinningInfo {
    Categories(Vec<String>),
    Width { width: f64 },
    Edges(Vec<f64>),
}

/// Bins raw values according to the spec's rule. Categorical covariates are
/// enumerated in first-appearance order; ordinal rules keep arithmetic codes.
pub fn bin_covariate(
    values: &[f64],
    spec: &CovariateSpec,
) -> Result<(Vec<i64>, BinningInfo), PairingError> {
    spec.validate()?;
    let rule = match (&spec.bins, spec.kind) {
        (BinRule::Enumerate, _) | (_, CovariateKind::Categorical) => BinRule::Enumerate,
        (r, _) => r.clone(),
    };
    match rule {
        BinRule::Enumerate => {
            let mut seen: Vec<f64> = Vec::new();
            let mut codes = Vec::with_capacity(values.len());
            for &v in values {
                let code = match seen.iter().position(|&s| s == v) {
                    Some(p) => p,
                    None => {
                        seen.push(v);
                        seen.len() - 1
                    }
                };
                codes.push(code as i64);
            }
            let cats = seen.iter().map(|v| format!("{v}")).collect();
            Ok((codes, BinningInfo::Categories(cats)))
        }
        BinRule::Width(w) => {
            let mut codes = Vec::with_capacity(values.len());
            for &v in values {
                if v < 0.0 || !v.is_finite() {
                    return Err(PairingError::ValueOutOfRange {
                        covariate: spec.name.clone(),
                        value: v,
                    });
                }
                codes.push((v / w).floor() as i64);
            }
            Ok((codes, BinningInfo::Width { width: w }))
        }
        BinRule::Edges(edges) => {
            let mut codes = Vec::with_capacity(values.len());
            for &v in values {
                if v < edges[0] || !v.is_finite() {
                    return Err(PairingError::ValueOutOfRange {
                        covariate: spec.name.clone(),
                        value: v,
                    });
                }
                let k = edges.iter().rposition(|&e| v >= e).expect("v >= edges[0]");
                codes.push(k as i64);
            }
            Ok((codes, BinningInfo::Edges(edges)))
        }
    }
}

/// Pair enumeration policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairPolicy {
    /// Every ordered cross-bin pair in the batch (both orientations).
    All,
    /// Unordered pairs (i < j) agreeing on label and every other covariate's
    /// bin; any difference on this covariate.
    Matched,
}

impl PairPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            PairPolicy::All => "all",
            PairPolicy::Matched => "matched",
        }
    }

    pub fn parse(s: &str) -> Option<PairPolicy> {
        match s {
            "all" => Some(PairPolicy::All),
            "matched" => Some(PairPolicy::Matched),
            _ => None,
        }
    }

    /// Same-bin pairs are the implicit invariance term of the equivariance
    /// objective, so `matched` keeps them; `all` is the pure cross-group
    /// invariance reading and drops them.
    pub fn default_include_d0(&self) -> bool {
        matches!(self, PairPolicy::Matched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOptions {
    pub policy: PairPolicy,
    pub include_d0: bool,
    pub max_pairs: usize,
    pub seed: u64,
}

impl PairOptions {
    pub fn new(policy: PairPolicy) -> Self {
        PairOptions {
            policy,
            include_d0: policy.default_include_d0(),
            max_pairs: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub i: usize,
    pub j: usize,
    /// Signed bin difference code(i) - code(j).
    pub d: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub covariate: String,
    pub entries: Vec<PairEntry>,
}

impl PairSet {
    pub fn empty(covariate: &str) -> Self {
        PairSet {
            covariate: covariate.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Inputs needed to enumerate pairs for one covariate over a batch.
pub struct PairingContext<'a> {
    /// Bin codes of this covariate over the whole dataset.
    pub codes: &'a [i64],
    /// Labels (matched policy agreement), if any.
    pub labels: Option<&'a [usize]>,
    /// Bin codes of every *other* covariate (matched policy agreement).
    pub other_codes: Vec<&'a [i64]>,
}

/// Enumerates ((i, j), d) pairs over `batch` indices under the policy.
/// Deterministic: iteration is in batch order and the subsample is seeded.
pub fn enumerate_pairs(
    ctx: &PairingContext,
    covariate: &str,
    opts: &PairOptions,
    batch: &[usize],
) -> PairSet {
    let mut entries = Vec::new();
    match opts.policy {
        PairPolicy::All => {
            for (ai, &a) in batch.iter().enumerate() {
                for (bi, &b) in batch.iter().enumerate() {
                    if ai == bi {
                        continue;
                    }
                    let d = ctx.codes[a] - ctx.codes[b];
                    if d == 0 && !opts.include_d0 {
                        continue;
                    }
                    entries.push(PairEntry { i: a, j: b, d });
                }
            }
        }
        PairPolicy::Matched => {
            for (ai, &a) in batch.iter().enumerate() {
                for &b in batch.iter().skip(ai + 1) {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if let Some(labels) = ctx.labels {
                        if labels[lo] != labels[hi] {
                            continue;
                        }
                    }
                    if ctx.other_codes.iter().any(|c| c[lo] != c[hi]) {
                        continue;
                    }
                    let d = ctx.codes[lo] - ctx.codes[hi];
                    if d == 0 && !opts.include_d0 {
                        continue;
                    }
                    entries.push(PairEntry { i: lo, j: hi, d });
                }
            }
        }
    }
    if entries.len() > opts.max_pairs {
        entries = subsample(entries, opts.max_pairs, opts.seed);
    }
    PairSet {
        covariate: covariate.to_string(),
        entries,
    }
}

/// Seeded uniform subsample preserving the original order.
pub fn subsample<T>(items: Vec<T>, keep: usize, seed: u64) -> Vec<T> {
    if items.len() <= keep {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, items.len(), keep).into_vec();
    picks.sort_unstable();
    let mut picked = picks.into_iter().peekable();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(idx, item)| {
            if picked.peek() == Some(&idx) {
                picked.next();
                Some(item)
            } else {
                None
            }
        })
        .collect()
}

/// Histogram of d values, in ascending d order.
pub fn pair_stats(set: &PairSet) -> BTreeMap<i64, usize> {
    let mut hist = BTreeMap::new();
    for e in &set.entries {
        *hist.entry(e.d).or_insert(0) += 1;
    }
    hist
}
