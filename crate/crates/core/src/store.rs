//! Embedding datasets, text-classifier weights and the TIPEMB file format.
//!
//! TIPEMB layout (little-endian):
//!
//! ```text
//! 0..7    magic "TIPEMB1"
//! 7       version (u8) = 1
//! 8..12   num_classes (u32)
//! 12..20  rows (u64)
//! 20..24  dim (u32)
//! 24      dtype (u8), 1 = f32
//! 25      normalized flag (u8), 0 or 1
//! 26..28  zero padding
//!         num_classes × (u16 byte length, UTF-8 name)
//!         rows × dim f32, row-major
//!         rows × u32 labels
//!         u32 CRC32 (IEEE) of every preceding byte
//! ```
//!
//! A text classifier uses the same layout with `rows = num_classes` and labels
//! `0..num_classes` in order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAGIC: &[u8; 7] = b"TIPEMB1";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

/// Tolerance on row norms for data marked as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;
/// Rows with a norm at or below this are rejected by [`normalize_rows`].
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

const HEADER_LEN: usize = 28;

/// How a classifier's text prompts were formed upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Single,
    Ensemble7,
    Custom,
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f32>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Builds a set and checks every invariant. With `normalized = true` each
    /// row must already have unit norm.
    pub fn new(
        features: Array2<f32>,
        labels: Vec<u32>,
        class_names: Vec<String>,
        normalized: bool,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidSet("set has no rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidSet("dim must be positive".into()));
        }
        if class_names.len() < 2 {
            return Err(Error::InvalidSet(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if labels.len() != features.nrows() {
            return Err(Error::LengthMismatch {
                left: features.nrows(),
                right: labels.len(),
            });
        }
        check_unique_names(&class_names)?;
        for &label in &labels {
            if label as usize >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: class_names.len(),
                });
            }
        }
        check_finite(features.view())?;
        if normalized {
            check_unit_rows(features.view())?;
        }
        Ok(Self {
            features,
            labels,
            class_names,
            normalized,
        })
    }

    /// L2-normalizes every row and marks the set normalized.
    pub fn into_normalized(self) -> Result<Self> {
        let normalized = normalize_rows(self.features.mapv(f64::from).view())?;
        Self::new(
            normalized.mapv(|x| x as f32),
            self.labels,
            self.class_names,
            true,
        )
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    /// Features widened to f64 for computation.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Number of rows per class, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Row indices grouped by class, each list in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// The common per-class count, or `UnbalancedClasses` for the first class
    /// that differs from class 0.
    pub fn balanced_shots(&self) -> Result<usize> {
        let counts = self.class_counts();
        let expected = counts[0];
        for (class, &count) in counts.iter().enumerate() {
            if count != expected || count == 0 {
                return Err(Error::UnbalancedClasses {
                    class,
                    count,
                    expected,
                });
            }
        }
        Ok(expected)
    }

    /// A new set made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.class_names.clone(), self.normalized)
    }

    /// Checks that `self` and `other` describe the same label space.
    pub fn check_compatible(&self, other: &EmbeddingSet) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                what: "feature dim",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if self.num_classes() != other.num_classes() {
            return Err(Error::DimMismatch {
                what: "num_classes",
                expected: self.num_classes(),
                found: other.num_classes(),
            });
        }
        Ok(())
    }
}

/// Per-class unit-norm weight rows of a zero-shot text classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    weights: Array2<f32>,
    class_names: Vec<String>,
    prompt_mode: PromptMode,
}

impl TextClassifier {
    pub fn new(
        weights: Array2<f32>,
        class_names: Vec<String>,
        prompt_mode: PromptMode,
    ) -> Result<Self> {
        if weights.nrows() != class_names.len() {
            return Err(Error::DimMismatch {
                what: "classifier rows",
                expected: class_names.len(),
                found: weights.nrows(),
            });
        }
        if class_names.len() < 2 {
            return Err(Error::InvalidSet(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if weights.ncols() == 0 {
            return Err(Error::InvalidSet("dim must be positive".into()));
        }
        check_unique_names(&class_names)?;
        check_finite(weights.view())?;
        check_unit_rows(weights.view())?;
        Ok(Self {
            weights,
            class_names,
            prompt_mode,
        })
    }

    pub fn weights(&self) -> ArrayView2<'_, f32> {
        self.weights.view()
    }

    pub fn weights_f64(&self) -> Array2<f64> {
        self.weights.mapv(f64::from)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_mode(&self) -> PromptMode {
        self.prompt_mode
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Checks that the classifier can score `set`.
    pub fn check_compatible(&self, set: &EmbeddingSet) -> Result<()> {
        if self.dim() != set.dim() {
            return Err(Error::DimMismatch {
                what: "classifier dim",
                expected: set.dim(),
                found: self.dim(),
            });
        }
        if self.num_classes() != set.num_classes() {
            return Err(Error::DimMismatch {
                what: "classifier classes",
                expected: set.num_classes(),
                found: self.num_classes(),
            });
        }
        Ok(())
    }
}

fn check_unique_names(names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateClassName(name.clone()));
        }
    }
    Ok(())
}

fn check_finite(m: ArrayView2<'_, f32>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
    }
    Ok(())
}

fn check_unit_rows(m: ArrayView2<'_, f32>) -> Result<()> {
    for (row, r) in m.axis_iter(Axis(0)).enumerate() {
        let norm = r.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { row, norm });
        }
    }
    Ok(())
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = linalg::norm(row.view());
        if n.is_nan() || n <= ZERO_NORM_THRESHOLD {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// TIPEMB encoding

/// Serializes an embedding set into TIPEMB bytes.
pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    encode_raw(
        set.features.view(),
        &set.labels,
        &set.class_names,
        set.normalized,
    )
}

fn encode_raw(
    features: ArrayView2<'_, f32>,
    labels: &[u32],
    class_names: &[String],
    normalized: bool,
) -> Vec<u8> {
    let names_len: usize = class_names.iter().map(|n| 2 + n.len()).sum();
    let mut buf =
        Vec::with_capacity(HEADER_LEN + names_len + features.len() * 4 + labels.len() * 4 + 4);
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&(class_names.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(u8::from(normalized));
    buf.extend_from_slice(&[0, 0]);
    for name in class_names {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::TruncatedFile(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct RawFile {
    features: Array2<f32>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    normalized: bool,
}

fn decode_raw(bytes: &[u8]) -> Result<RawFile> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 7 };
    let version = r.u8("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let num_classes = r.u32("header")? as usize;
    let rows = usize::try_from(r.u64("header")?)
        .map_err(|_| Error::Malformed("row count exceeds address space".into()))?;
    let dim = r.u32("header")? as usize;
    let dtype = r.u8("header")?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let normalized = match r.u8("header")? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("normalized flag {other}"))),
    };
    if r.take(2, "header")? != [0, 0] {
        return Err(Error::Malformed("non-zero padding".into()));
    }

    let mut class_names = Vec::with_capacity(num_classes.min(1 << 16));
    for _ in 0..num_classes {
        let len = r.u16("class names")? as usize;
        let raw = r.take(len, "class names")?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::Malformed(format!("class name is not UTF-8: {e}")))?;
        class_names.push(name.to_owned());
    }

    let n_values = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::Malformed("rows × dim overflows".into()))?;
    let raw = r.take(
        n_values
            .checked_mul(4)
            .ok_or(Error::TruncatedFile("features"))?,
        "features",
    )?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features =
        Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::Malformed(e.to_string()))?;

    let raw = r.take(
        rows.checked_mul(4).ok_or(Error::TruncatedFile("labels"))?,
        "labels",
    )?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(RawFile {
        features,
        labels,
        class_names,
        normalized,
    })
}

/// Parses and validates TIPEMB bytes as an embedding set.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let raw = decode_raw(bytes)?;
    EmbeddingSet::new(raw.features, raw.labels, raw.class_names, raw.normalized)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_embeddings(&fs::read(path)?)
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_embeddings(set))?;
    Ok(())
}

pub fn encode_classifier(clf: &TextClassifier) -> Vec<u8> {
    let labels: Vec<u32> = (0..clf.num_classes() as u32).collect();
    encode_raw(clf.weights.view(), &labels, &clf.class_names, true)
}

/// Parses a classifier file. The prompt mode is not part of the format, so
/// loaded classifiers report [`PromptMode::Custom`].
pub fn decode_classifier(bytes: &[u8]) -> Result<TextClassifier> {
    let raw = decode_raw(bytes)?;
    if raw.features.nrows() != raw.class_names.len() {
        return Err(Error::Malformed(format!(
            "classifier has {} rows for {} classes",
            raw.features.nrows(),
            raw.class_names.len()
        )));
    }
    if raw.labels.iter().enumerate().any(|(i, &l)| l as usize != i) {
        return Err(Error::Malformed(
            "classifier labels must be 0..num_classes in order".into(),
        ));
    }
    TextClassifier::new(raw.features, raw.class_names, PromptMode::Custom)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<TextClassifier> {
    decode_classifier(&fs::read(path)?)
}

pub fn save_classifier(clf: &TextClassifier, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_classifier(clf))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the seeded synthetic task.
///
/// Class `i` has centroid `e_i`. Samples are `normalize(e_i + noise)` with
/// i.i.d. `N(0, noise_sigma²)` coordinates. Classifier rows are
/// `normalize((1 - m)·e_i + m·g)` with `g` a standard normal vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    /// Extra held-out samples per class; zero means no validation split.
    pub val_per_class: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub classifier_misalignment: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            shots: 16,
            test_per_class: 100,
            val_per_class: 0,
            dim: 32,
            noise_sigma: 0.3,
            classifier_misalignment: 0.4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: EmbeddingSet,
    pub val: Option<EmbeddingSet>,
    pub test: EmbeddingSet,
    pub clf: TextClassifier,
}

/// Generates a deterministic synthetic few-shot task.
///
/// Draw order is fixed: train samples (class-major), validation samples,
/// test samples, then classifier perturbations.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig(
            "num_classes must be at least 2".into(),
        ));
    }
    if cfg.dim < cfg.num_classes {
        return Err(Error::DimTooSmall {
            dim: cfg.dim,
            num_classes: cfg.num_classes,
        });
    }
    if cfg.shots == 0 || cfg.test_per_class == 0 {
        return Err(Error::InvalidConfig(
            "shots and test_per_class must be positive".into(),
        ));
    }
    if !cfg.noise_sigma.is_finite() || cfg.noise_sigma < 0.0 {
        return Err(Error::InvalidConfig(
            "noise_sigma must be finite and >= 0".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.classifier_misalignment) {
        return Err(Error::InvalidConfig(
            "classifier_misalignment must lie in [0, 1]".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_names: Vec<String> = (0..cfg.num_classes)
        .map(|i| format!("class_{i:03}"))
        .collect();

    let mut sample = |per_class: usize| -> Result<EmbeddingSet> {
        let rows = cfg.num_classes * per_class;
        let mut raw = Array2::<f64>::zeros((rows, cfg.dim));
        let mut labels = Vec::with_capacity(rows);
        for class in 0..cfg.num_classes {
            for s in 0..per_class {
                let mut row = raw.row_mut(class * per_class + s);
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = cfg.noise_sigma * z;
                }
                row[class] += 1.0;
                labels.push(class as u32);
            }
        }
        let features = normalize_rows(raw.view())?.mapv(|x| x as f32);
        EmbeddingSet::new(features, labels, class_names.clone(), true)
    };

    let train = sample(cfg.shots)?;
    let val = if cfg.val_per_class > 0 {
        Some(sample(cfg.val_per_class)?)
    } else {
        None
    };
    let test = sample(cfg.test_per_class)?;

    let m = cfg.classifier_misalignment;
    let mut raw = Array2::<f64>::zeros((cfg.num_classes, cfg.dim));
    for (class, mut row) in raw.axis_iter_mut(Axis(0)).enumerate() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = m * z;
        }
        row[class] += 1.0 - m;
    }
    let weights = normalize_rows(raw.view())?.mapv(|x| x as f32);
    let clf = TextClassifier::new(weights, class_names, PromptMode::Custom)?;

    Ok(SynthData {
        train,
        val,
        test,
        clf,
    })
}
