//! Synthetic datasets with a controllable inter-class-similarity dial,
//! plus CSV ingestion for externally computed feature sets.
//!
//! Classes are built from a dictionary of `A` orthonormal attribute
//! directions in `R^D`. Each class mean is the sum of `k` attributes — a
//! fraction drawn from a pool shared across classes (the similarity dial)
//! and the rest assigned privately — plus an optional orthonormal
//! class-unique direction. Samples add per-attribute coefficient jitter and
//! isotropic noise. With orthonormal attributes and disjoint private
//! supports, two classes that share nothing have exactly orthogonal means,
//! which gives the tests exact anchors.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine, dot, norm, Matrix, Rng};
use crate::SCHEMA_VERSION;

/// Generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Feature dimension D.
    pub dim: usize,
    /// Size A of the orthonormal attribute dictionary (requires A <= D).
    pub attribute_pool: usize,
    /// Attributes per class k (requires k <= A).
    pub attrs_per_class: usize,
    /// Fraction of each class's attributes drawn from the shared pool; the
    /// shared pool holds `ceil(shared_fraction * A)` attributes. 0 gives
    /// disjoint classes, 1 makes every attribute shared.
    pub shared_fraction: f64,
    /// Coefficient on each class's private orthonormal direction. Positive
    /// values require `A + C <= D` so the directions stay orthonormal.
    pub unique_strength: f64,
    /// Std of the per-sample perturbation of each attribute coefficient.
    pub jitter_std: f64,
    /// Std of the isotropic per-sample noise.
    pub noise_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            dim: 16,
            attribute_pool: 8,
            attrs_per_class: 3,
            shared_fraction: 0.5,
            unique_strength: 1.0,
            jitter_std: 0.2,
            noise_std: 0.3,
            train_per_class: 20,
            test_per_class: 20,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn shared_pool_size(&self) -> usize {
        (self.shared_fraction * self.attribute_pool as f64).ceil() as usize
    }

    /// Shared attributes per class: `round(shared_fraction * k)`.
    pub fn shared_per_class(&self) -> usize {
        (self.shared_fraction * self.attrs_per_class as f64).round() as usize
    }

    pub fn private_per_class(&self) -> usize {
        self.attrs_per_class - self.shared_per_class()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "num_classes and dim must be positive".into(),
            ));
        }
        if self.attrs_per_class == 0 {
            return Err(Error::InvalidArgument(
                "attrs_per_class must be positive".into(),
            ));
        }
        if self.attrs_per_class > self.attribute_pool {
            return Err(Error::InvalidArgument(format!(
                "attrs_per_class {} exceeds attribute_pool {}",
                self.attrs_per_class, self.attribute_pool
            )));
        }
        if self.attribute_pool > self.dim {
            return Err(Error::InvalidArgument(format!(
                "attribute_pool {} exceeds dim {} (attributes must stay orthonormal)",
                self.attribute_pool, self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::InvalidArgument(format!(
                "shared_fraction must lie in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        for (name, v) in [
            ("unique_strength", self.unique_strength),
            ("jitter_std", self.jitter_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        if self.unique_strength > 0.0 && self.attribute_pool + self.num_classes > self.dim {
            return Err(Error::InvalidArgument(format!(
                "unique directions need attribute_pool + num_classes <= dim \
                 ({} + {} > {})",
                self.attribute_pool, self.num_classes, self.dim
            )));
        }
        let private_pool = self.attribute_pool - self.shared_pool_size();
        if self.private_per_class() > private_pool {
            return Err(Error::InvalidArgument(format!(
                "each class needs {} private attributes but the private pool has only {private_pool}",
                self.private_per_class()
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument(
                "train_per_class and test_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Labeled feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Pairwise cosine matrix over class means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub matrix: Matrix,
    pub mean_offdiag: f64,
    pub max_offdiag: f64,
}

/// Orthonormal basis of `count` directions in `R^dim` via Gram-Schmidt on
/// seeded Gaussian draws.
fn orthonormal_basis(count: usize, dim: usize, rng: &mut Rng) -> Matrix {
    assert!(count <= dim);
    let mut basis = Matrix::zeros(count, dim);
    let mut built = 0;
    while built < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
        for prev in 0..built {
            let p = basis.row(prev);
            let proj = dot(&v, p);
            for (vi, pi) in v.iter_mut().zip(p) {
                *vi -= proj * pi;
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue; // essentially impossible, but redraw rather than divide by ~0
        }
        for vi in v.iter_mut() {
            *vi /= n;
        }
        basis.row_mut(built).copy_from_slice(&v);
        built += 1;
    }
    basis
}

/// Attribute indices per class: `shared_per_class` distinct draws from the
/// shared pool (classes may overlap), then `private_per_class` attributes
/// assigned round-robin from the rest (disjoint whenever capacity allows).
fn class_attributes(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let shared_pool = spec.shared_pool_size();
    let k_shared = spec.shared_per_class();
    let k_private = spec.private_per_class();
    let private_pool = spec.attribute_pool - shared_pool;
    (0..spec.num_classes)
        .map(|class| {
            let mut attrs: Vec<usize> = rng.choose_distinct(shared_pool, k_shared);
            for j in 0..k_private {
                attrs.push(shared_pool + (class * k_private + j) % private_pool);
            }
            attrs
        })
        .collect()
}

/// Generates `(train, test, ground-truth class means)` deterministically
/// from the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Matrix)> {
    spec.validate()?;
    let (c, d, a) = (spec.num_classes, spec.dim, spec.attribute_pool);

    let with_uniques = spec.unique_strength > 0.0;
    let total_dirs = a + if with_uniques { c } else { 0 };
    let basis = orthonormal_basis(total_dirs, d, &mut Rng::substream(spec.seed, 0));
    let attrs = class_attributes(spec, &mut Rng::substream(spec.seed, 1));

    let mut means = Matrix::zeros(c, d);
    for class in 0..c {
        let mu = means.row_mut(class);
        for &attr in &attrs[class] {
            axpy(1.0, basis.row(attr), mu);
        }
        if with_uniques {
            axpy(spec.unique_strength, basis.row(a + class), mu);
        }
    }

    let sample_split = |per_class: usize, split: SplitTag, stream: u64| {
        let mut rng = Rng::substream(spec.seed, stream);
        let n = c * per_class;
        let mut features = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for class in 0..c {
            for _ in 0..per_class {
                let x = features.row_mut(row);
                x.copy_from_slice(means.row(class));
                if spec.jitter_std > 0.0 {
                    for &attr in &attrs[class] {
                        let eps = rng.normal(0.0, spec.jitter_std);
                        axpy(eps, basis.row(attr), x);
                    }
                }
                if spec.noise_std > 0.0 {
                    for v in x.iter_mut() {
                        *v += rng.normal(0.0, spec.noise_std);
                    }
                }
                labels.push(class);
                row += 1;
            }
        }
        Dataset {
            features,
            labels,
            num_classes: c,
            split,
        }
    };

    let train = sample_split(spec.train_per_class, SplitTag::Train, 2);
    let test = sample_split(spec.test_per_class, SplitTag::Test, 3);
    Ok((train, test, means))
}

/// Similarity report from explicit class means.
pub fn similarity_stats_from_means(means: &Matrix) -> Result<SimilarityReport> {
    let c = means.rows();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "similarity statistics need at least 2 classes".into(),
        ));
    }
    let mut matrix = Matrix::zeros(c, c);
    for i in 0..c {
        matrix.set(i, i, cosine(means.row(i), means.row(i))?);
        for j in i + 1..c {
            let v = cosine(means.row(i), means.row(j))?;
            matrix.set(i, j, v);
            matrix.set(j, i, v);
        }
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut pairs = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            sum += matrix.get(i, j);
            max = max.max(matrix.get(i, j));
            pairs += 1;
        }
    }
    Ok(SimilarityReport {
        matrix,
        mean_offdiag: sum / pairs as f64,
        max_offdiag: max,
    })
}

/// Similarity report from a dataset, using per-class sample means. Errors
/// if any class has no samples.
pub fn similarity_stats(dataset: &Dataset) -> Result<SimilarityReport> {
    let counts = dataset.class_counts();
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no samples"
        )));
    }
    let mut means = Matrix::zeros(dataset.num_classes, dataset.dim());
    for (row, &label) in dataset.labels.iter().enumerate() {
        axpy(1.0, dataset.features.row(row), means.row_mut(label));
    }
    for class in 0..dataset.num_classes {
        let n = counts[class] as f64;
        for v in means.row_mut(class) {
            *v /= n;
        }
    }
    similarity_stats_from_means(&means)
}

// ---------------------------------------------------------------------------
// CSV + metadata persistence
// ---------------------------------------------------------------------------

/// Writes `label,f0,...,f{D-1}` rows. Floats use the shortest decimal that
/// round-trips, so save -> load is lossless.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..dataset.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, &label) in dataset.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in dataset.features.row(row) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a dataset CSV. `declared_classes` (from the metadata sidecar, when
/// available) pins the class count and rejects out-of-range labels;
/// otherwise the count is inferred as `max label + 1`.
pub fn load_csv(path: &Path, declared_classes: Option<usize>, split: SplitTag) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse_at_line(1, "empty file"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.first() != Some(&"label") || fields.len() < 2 {
        return Err(Error::parse_at_line(
            1,
            "header must be label,f0,...,f{D-1}",
        ));
    }
    let dim = fields.len() - 1;

    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(Error::parse_at_line(
                line_no,
                format!("expected {} columns, found {}", dim + 1, cells.len()),
            ));
        }
        let label: usize = cells[0].parse().map_err(|_| {
            Error::parse_at_line(line_no, format!("bad label {:?}", cells[0]))
        })?;
        if let Some(c) = declared_classes {
            if label >= c {
                return Err(Error::parse_at_line(
                    line_no,
                    format!("label {label} out of range for {c} declared classes"),
                ));
            }
        }
        labels.push(label);
        for cell in &cells[1..] {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse_at_line(line_no, format!("bad numeric cell {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse_at_line(
                    line_no,
                    format!("non-finite feature {v}"),
                ));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::parse_at_line(2, "file contains no samples"));
    }
    let num_classes =
        declared_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap() + 1);
    Ok(Dataset {
        features: Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        num_classes,
        split,
    })
}

/// Sidecar metadata describing a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Generator spec, when the data is synthetic.
    pub generator: Option<SyntheticSpec>,
}

impl DatasetMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metadata serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}", path.display()),
            message: e.to_string(),
        })?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                location: format!("{}", path.display()),
                message: format!(
                    "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                    meta.schema_version
                ),
            });
        }
        Ok(meta)
    }
}

/// Per-class stratified split; every class lands in both halves with
/// `round(fraction * n)` samples in the first (clamped so neither side is
/// empty).
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let counts = dataset.class_counts();
    if let Some(small) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {small} has fewer than 2 samples and cannot be split"
        )));
    }
    let mut first_rows = Vec::new();
    let mut second_rows = Vec::new();
    for class in 0..dataset.num_classes {
        let mut rows: Vec<usize> = (0..dataset.len())
            .filter(|&r| dataset.labels[r] == class)
            .collect();
        Rng::substream(seed, class as u64).shuffle(&mut rows);
        let n = rows.len();
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        first_rows.extend_from_slice(&rows[..take]);
        second_rows.extend_from_slice(&rows[take..]);
    }
    let pick = |rows: &[usize], split: SplitTag| {
        let mut features = Matrix::zeros(rows.len(), dataset.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            features.row_mut(i).copy_from_slice(dataset.features.row(r));
            labels.push(dataset.labels[r]);
        }
        Dataset {
            features,
            labels,
            num_classes: dataset.num_classes,
            split,
        }
    };
    Ok((
        pick(&first_rows, SplitTag::Train),
        pick(&second_rows, SplitTag::Test),
    ))
}
