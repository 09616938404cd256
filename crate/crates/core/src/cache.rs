//! Key-value cache built from a few-shot training set, plus prototype-based
//! cache shrinking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::store::{self, EmbeddingSet};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 5.5;

/// Seeds used when an experiment repeats a random grouping and averages.
pub const REPEAT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Cached keys (training features) and values (one-hot labels) with the
/// residual ratio `alpha` and kernel sharpness `beta`.
///
/// Read as an adapter, `keys` is the first linear layer and `valuesᵀ` the
/// second; both biases are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    keys: Array2<f64>,
    values: Array2<f64>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    alpha: f64,
    beta: f64,
    shots_effective: usize,
}

impl CacheModel {
    pub fn keys(&self) -> ArrayView2<'_, f64> {
        self.keys.view()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// Class of each cached row.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    pub fn shots_effective(&self) -> usize {
        self.shots_effective
    }

    /// Same cache with different blending hyperparameters.
    pub fn with_hyperparams(&self, alpha: f64, beta: f64) -> Result<Self> {
        check_hyperparams(alpha, beta)?;
        Ok(Self {
            alpha,
            beta,
            ..self.clone()
        })
    }

    /// True when every value row is exactly one-hot and selects its label.
    pub fn values_are_onehot(&self) -> bool {
        self.values
            .axis_iter(Axis(0))
            .zip(&self.labels)
            .all(|(row, &l)| {
                row.iter()
                    .enumerate()
                    .all(|(j, &v)| v == if j == l as usize { 1.0 } else { 0.0 })
            })
    }

    /// Same cache with `keys` swapped in (shape must match).
    pub fn with_keys(&self, keys: Array2<f64>) -> Result<Self> {
        if keys.dim() != self.keys.dim() {
            return Err(Error::DimMismatch {
                what: "keys shape",
                expected: self.keys.len(),
                found: keys.len(),
            });
        }
        Ok(self.replace_blocks(keys, self.values.clone()))
    }

    /// Same cache with `values` swapped in (shape must match).
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::DimMismatch {
                what: "values shape",
                expected: self.values.len(),
                found: values.len(),
            });
        }
        Ok(self.replace_blocks(self.keys.clone(), values))
    }

    pub(crate) fn replace_blocks(&self, keys: Array2<f64>, values: Array2<f64>) -> Self {
        debug_assert_eq!(keys.dim(), self.keys.dim());
        debug_assert_eq!(values.dim(), self.values.dim());
        Self {
            keys,
            values,
            ..self.clone()
        }
    }

    /// Writes `keys.emb`, `values.emb` and `cache.meta` into `dir`.
    ///
    /// Keys are stored as f32; fine-tuned keys that are no longer unit-norm
    /// are written with the normalized flag cleared.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &CacheMeta) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let keys32 = self.keys.mapv(|x| x as f32);
        let unit = keys32.axis_iter(Axis(0)).all(|r| {
            let n = r.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            (n - 1.0).abs() <= store::UNIT_NORM_TOL
        });
        let keys = EmbeddingSet::new(keys32, self.labels.clone(), self.class_names.clone(), unit)?;
        store::save_embeddings(&keys, dir.join("keys.emb"))?;
        let values = EmbeddingSet::new(
            self.values.mapv(|x| x as f32),
            self.labels.clone(),
            self.class_names.clone(),
            self.values_are_onehot(),
        )?;
        store::save_embeddings(&values, dir.join("values.emb"))?;
        let meta = CacheMeta {
            alpha: self.alpha,
            beta: self.beta,
            shots_effective: self.shots_effective,
            ..meta.clone()
        };
        fs::write(dir.join("cache.meta"), meta.to_text())?;
        Ok(())
    }

    /// Reads a cache written by [`CacheModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CacheMeta)> {
        let dir = dir.as_ref();
        let meta = CacheMeta::parse(&fs::read_to_string(dir.join("cache.meta"))?)?;
        let keys = store::load_embeddings(dir.join("keys.emb"))?;
        let values = store::load_embeddings(dir.join("values.emb"))?;
        if keys.labels() != values.labels() || keys.class_names() != values.class_names() {
            return Err(Error::Malformed(
                "keys.emb and values.emb disagree on labels".into(),
            ));
        }
        if values.dim() != keys.num_classes() {
            return Err(Error::DimMismatch {
                what: "values width",
                expected: keys.num_classes(),
                found: values.dim(),
            });
        }
        check_hyperparams(meta.alpha, meta.beta)?;
        let cache = Self {
            keys: keys.features_f64(),
            values: values.features_f64(),
            labels: keys.labels().to_vec(),
            class_names: keys.class_names().to_vec(),
            alpha: meta.alpha,
            beta: meta.beta,
            shots_effective: meta.shots_effective,
        };
        Ok((cache, meta))
    }
}

/// Contents of `cache.meta`: UTF-8 `key=value` lines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheMeta {
    pub alpha: f64,
    pub beta: f64,
    pub shots_effective: usize,
    pub seed: u64,
    /// Hash of the configuration that produced the cache, if any.
    pub provenance: Option<String>,
}

impl CacheMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "shots_effective={}", self.shots_effective);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(p) = &self.provenance {
            let _ = writeln!(s, "provenance={p}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut alpha = None;
        let mut beta = None;
        let mut shots = None;
        let mut seed = None;
        let mut provenance = None;
        let bad = |line: &str| Error::Malformed(format!("cache.meta: bad line {line:?}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k.trim() {
                "alpha" => alpha = Some(v.trim().parse().map_err(|_| bad(line))?),
                "beta" => beta = Some(v.trim().parse().map_err(|_| bad(line))?),
                "shots_effective" => shots = Some(v.trim().parse().map_err(|_| bad(line))?),
                "seed" => seed = Some(v.trim().parse().map_err(|_| bad(line))?),
                "provenance" => provenance = Some(v.trim().to_owned()),
                _ => log::warn!("cache.meta: ignoring unknown key {k:?}"),
            }
        }
        let missing = |k: &str| Error::Malformed(format!("cache.meta: missing {k}"));
        Ok(Self {
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
            beta: beta.ok_or_else(|| missing("beta"))?,
            shots_effective: shots.ok_or_else(|| missing("shots_effective"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            provenance,
        })
    }
}

fn check_hyperparams(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    Ok(())
}

/// One-hot rows: row `i` has a 1 in column `labels[i]`.
pub fn encode_onehot(labels: &[u32], num_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        out[[i, l as usize]] = 1.0;
    }
    Ok(out)
}

/// Builds the cache from a balanced, normalized few-shot set. Row order is
/// preserved.
///
/// `beta = 0` is accepted (the kernel is then constant); it is only useful
/// for gradient checks.
pub fn build_cache(train: &EmbeddingSet, alpha: f64, beta: f64) -> Result<CacheModel> {
    if !train.is_normalized() {
        return Err(Error::NotNormalized);
    }
    check_hyperparams(alpha, beta)?;
    let shots = train.balanced_shots()?;
    Ok(CacheModel {
        keys: train.features_f64(),
        values: encode_onehot(train.labels(), train.num_classes())?,
        labels: train.labels().to_vec(),
        class_names: train.class_names().to_vec(),
        alpha,
        beta,
        shots_effective: shots,
    })
}

/// Random per-class partition of sample indices into equal groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub seed: u64,
    pub group_size: usize,
    /// `assignment[class][group]` lists row indices of the input set.
    pub assignment: Vec<Vec<Vec<usize>>>,
}

impl GroupingPlan {
    /// Draws a plan for `set`: each class's indices are shuffled with a
    /// single seeded stream (classes in order) and cut into `target_shots`
    /// consecutive groups.
    pub fn draw(set: &EmbeddingSet, target_shots: usize, seed: u64) -> Result<Self> {
        let shots = set.balanced_shots()?;
        if target_shots == 0 || shots % target_shots != 0 {
            return Err(Error::NotDivisible {
                shots,
                target: target_shots,
            });
        }
        let group_size = shots / target_shots;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assignment = set
            .class_indices()
            .into_iter()
            .map(|mut idx| {
                idx.shuffle(&mut rng);
                idx.chunks(group_size).map(<[usize]>::to_vec).collect()
            })
            .collect();
        Ok(Self {
            seed,
            group_size,
            assignment,
        })
    }
}

/// Shrinks each class to `target_shots` prototypes, each the renormalized
/// mean of a random equal-sized group of that class's features.
///
/// Output rows are class-major in group order. Groups of one copy the source
/// row unchanged.
pub fn prototype_reduce(
    train: &EmbeddingSet,
    target_shots: usize,
    seed: u64,
) -> Result<(EmbeddingSet, GroupingPlan)> {
    if !train.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let plan = GroupingPlan::draw(train, target_shots, seed)?;
    let feats = train.features();
    let rows = train.num_classes() * target_shots;
    let mut out = Array2::<f32>::zeros((rows, train.dim()));
    let mut labels = Vec::with_capacity(rows);
    let mut r = 0;
    for (class, groups) in plan.assignment.iter().enumerate() {
        for group in groups {
            if let [single] = group.as_slice() {
                out.row_mut(r).assign(&feats.row(*single));
            } else {
                let mut mean = Array1::<f64>::zeros(train.dim());
                for &i in group {
                    mean.zip_mut_with(&feats.row(i), |m, &x| *m += f64::from(x));
                }
                mean /= group.len() as f64;
                let n = linalg::norm(mean.view());
                if n.is_nan() || n <= store::ZERO_NORM_THRESHOLD {
                    return Err(Error::ZeroNormRow(r));
                }
                out.row_mut(r)
                    .zip_mut_with(&mean, |o, &m| *o = (m / n) as f32);
            }
            labels.push(class as u32);
            r += 1;
        }
    }
    let set = EmbeddingSet::new(out, labels, train.class_names().to_vec(), true)?;
    Ok((set, plan))
}

/// Fixes the cache at `cache_size` entries per class when more shots are
/// available, by grouping as in [`prototype_reduce`].
pub fn reduce_many_shots(
    train: &EmbeddingSet,
    cache_size: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    let shots = train.balanced_shots()?;
    if cache_size == 0 || shots < cache_size {
        return Err(Error::NotDivisible {
            shots,
            target: cache_size,
        });
    }
    Ok(prototype_reduce(train, cache_size, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{synth_generate, SynthConfig};
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn onehot_examples() {
        assert_eq!(
            encode_onehot(&[0, 2], 3).unwrap(),
            array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        );
        assert!(matches!(
            encode_onehot(&[1], 1),
            Err(Error::LabelOutOfRange {
                label: 1,
                num_classes: 1
            })
        ));
        let m = encode_onehot(&[3, 1, 0, 2, 2], 4).unwrap();
        assert!(m.axis_iter(Axis(0)).all(|r| r.sum() == 1.0));
    }

    #[test]
    fn two_by_one_cache() {
        let train = EmbeddingSet::new(
            array![[1.0f32, 0.0], [0.0, 1.0]],
            vec![0, 1],
            names(2),
            true,
        )
        .unwrap();
        let cache = build_cache(&train, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.values(), array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(cache.shots_effective(), 1);
        assert!(cache.values_are_onehot());
    }

    #[test]
    fn cache_shape_is_classes_times_shots_by_dim() {
        let d = synth_generate(&SynthConfig {
            num_classes: 12,
            shots: 4,
            dim: 24,
            test_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let cache = build_cache(&d.train, 1.0, 5.5).unwrap();
        assert_eq!(cache.keys().dim(), (48, 24));
        assert_eq!(cache.values().dim(), (48, 12));
    }

    #[test]
    fn unbalanced_and_unnormalized_are_rejected() {
        let train = EmbeddingSet::new(
            array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0]],
            vec![0, 1, 0],
            names(2),
            true,
        )
        .unwrap();
        assert!(matches!(
            build_cache(&train, 1.0, 5.5),
            Err(Error::UnbalancedClasses {
                class: 1,
                count: 1,
                expected: 2
            })
        ));
        let raw = EmbeddingSet::new(
            array![[2.0f32, 0.0], [0.0, 1.0]],
            vec![0, 1],
            names(2),
            false,
        )
        .unwrap();
        assert!(matches!(
            build_cache(&raw, 1.0, 5.5),
            Err(Error::NotNormalized)
        ));
    }

    fn synth(shots: usize) -> EmbeddingSet {
        synth_generate(&SynthConfig {
            num_classes: 3,
            shots,
            dim: 6,
            test_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap()
        .train
    }

    fn sorted_rows(set: &EmbeddingSet) -> Vec<(u32, Vec<u32>)> {
        let mut v: Vec<_> = set
            .features()
            .axis_iter(Axis(0))
            .zip(set.labels())
            .map(|(r, &l)| (l, r.iter().map(|x| x.to_bits()).collect()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn group_size_one_preserves_multiset() {
        let train = synth(4);
        let (out, plan) = prototype_reduce(&train, 4, 9).unwrap();
        assert_eq!(plan.group_size, 1);
        assert_eq!(sorted_rows(&out), sorted_rows(&train));
    }

    #[test]
    fn pair_prototype_is_renormalized_mean() {
        let train = synth(2);
        let (out, _) = prototype_reduce(&train, 1, 0).unwrap();
        assert_eq!(out.rows(), 3);
        let f = train.features_f64();
        for class in 0..3 {
            let mean = (&f.row(2 * class) + &f.row(2 * class + 1)) / 2.0;
            let expect = &mean / linalg::norm(mean.view());
            for (a, b) in out.features().row(class).iter().zip(expect.iter()) {
                assert!((f64::from(*a) - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn plan_partitions_each_class() {
        let train = synth(8);
        let plan = GroupingPlan::draw(&train, 2, 3).unwrap();
        assert_eq!(plan.group_size, 4);
        for (class, groups) in plan.assignment.iter().enumerate() {
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, train.class_indices()[class]);
            assert!(groups.iter().all(|g| g.len() == 4));
        }
        assert_eq!(plan, GroupingPlan::draw(&train, 2, 3).unwrap());
    }

    #[test]
    fn many_shot_reduction() {
        let train = synth(64);
        let reduced = reduce_many_shots(&train, 16, 0).unwrap();
        assert_eq!(reduced.balanced_shots().unwrap(), 16);
        let (via_proto, _) = prototype_reduce(&train, 16, 0).unwrap();
        assert_eq!(reduced, via_proto);
        for r in reduced.features().axis_iter(Axis(0)) {
            let n = r.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let sixteen = synth(16);
        assert_eq!(
            sorted_rows(&reduce_many_shots(&sixteen, 16, 5).unwrap()),
            sorted_rows(&sixteen)
        );
        assert!(matches!(
            reduce_many_shots(&synth(10), 4, 0),
            Err(Error::NotDivisible {
                shots: 10,
                target: 4
            })
        ));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = build_cache(&synth(2), 1.5, 3.5).unwrap();
        let meta = CacheMeta {
            seed: 7,
            provenance: Some("abc123".into()),
            ..CacheMeta::default()
        };
        cache.save(dir.path(), &meta).unwrap();
        let (back, meta_back) = CacheModel::load(dir.path()).unwrap();
        assert_eq!(back, cache);
        assert_eq!(meta_back.seed, 7);
        assert_eq!(meta_back.alpha, 1.5);
        assert_eq!(meta_back.provenance.as_deref(), Some("abc123"));
        let text = fs::read_to_string(dir.path().join("cache.meta")).unwrap();
        assert!(text.contains("shots_effective=2\n"));
    }
}
