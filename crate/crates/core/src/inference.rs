//! Training-free prediction.
//!
//! Logits are `alpha · φ(f·Kᵀ)·V + f·W_cᵀ` with `φ(x) = exp(-β(1 - x))`,
//! where `K` are the cached keys, `V` the cached one-hot values and `W_c` the
//! text classifier. All arithmetic is f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::cache::CacheModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::store::{EmbeddingSet, TextClassifier};

/// Logits for a batch of queries, optionally with the two terms that were
/// blended to produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    pub values: Array2<f64>,
    /// `(cache_term, clip_term)`; `values = alpha·cache_term + clip_term`.
    pub components: Option<(Array2<f64>, Array2<f64>)>,
}

impl LogitsBatch {
    pub fn plain(values: Array2<f64>) -> Self {
        Self {
            values,
            components: None,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }
}

/// The affinity kernel `exp(-β(1 - x))`.
#[inline]
pub fn kernel(x: f64, beta: f64) -> f64 {
    (-beta * (1.0 - x)).exp()
}

fn check_query(test: &EmbeddingSet, dim: usize) -> Result<()> {
    if !test.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if test.dim() != dim {
        return Err(Error::DimMismatch {
            what: "query dim",
            expected: dim,
            found: test.dim(),
        });
    }
    Ok(())
}

fn check_cache_classes(test: &EmbeddingSet, cache: &CacheModel) -> Result<()> {
    if cache.num_classes() != test.num_classes() {
        return Err(Error::DimMismatch {
            what: "cache classes",
            expected: test.num_classes(),
            found: cache.num_classes(),
        });
    }
    Ok(())
}

pub(crate) fn affinities_raw(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    beta: f64,
) -> Array2<f64> {
    let mut out = linalg::matmul_nt(queries, keys);
    out.par_mapv_inplace(|x| kernel(x, beta));
    out
}

pub(crate) fn cache_term_raw(
    queries: ArrayView2<'_, f64>,
    cache: &CacheModel,
) -> (Array2<f64>, Array2<f64>) {
    let a = affinities_raw(queries, cache.keys(), cache.beta());
    let term = linalg::matmul(a.view(), cache.values());
    (a, term)
}

pub(crate) fn blend_raw(
    queries: ArrayView2<'_, f64>,
    cache: &CacheModel,
    weights: ArrayView2<'_, f64>,
) -> LogitsBatch {
    let (_, cache_term) = cache_term_raw(queries, cache);
    let clip_term = linalg::matmul_nt(queries, weights);
    let alpha = cache.alpha();
    let values = Zip::from(&cache_term)
        .and(&clip_term)
        .map_collect(|&c, &z| alpha * c + z);
    LogitsBatch {
        values,
        components: Some((cache_term, clip_term)),
    }
}

/// `A[i, j] = exp(-β(1 - f_i · k_j))` for every query row and cached key.
pub fn affinities(test: &EmbeddingSet, cache: &CacheModel) -> Result<Array2<f64>> {
    check_query(test, cache.dim())?;
    Ok(affinities_raw(
        test.features_f64().view(),
        cache.keys(),
        cache.beta(),
    ))
}

/// Retrieval term `A · V`: column `j` sums the affinity mass of class-`j` keys.
pub fn cache_logits(test: &EmbeddingSet, cache: &CacheModel) -> Result<Array2<f64>> {
    check_query(test, cache.dim())?;
    check_cache_classes(test, cache)?;
    Ok(cache_term_raw(test.features_f64().view(), cache).1)
}

/// Zero-shot logits `f · W_cᵀ`.
pub fn zero_shot_logits(test: &EmbeddingSet, clf: &TextClassifier) -> Result<Array2<f64>> {
    check_query(test, clf.dim())?;
    clf.check_compatible(test)?;
    Ok(linalg::matmul_nt(
        test.features_f64().view(),
        clf.weights_f64().view(),
    ))
}

/// Residual blend of the cache term and the zero-shot term.
pub fn blended_logits(
    test: &EmbeddingSet,
    cache: &CacheModel,
    clf: &TextClassifier,
) -> Result<LogitsBatch> {
    check_query(test, cache.dim())?;
    check_cache_classes(test, cache)?;
    clf.check_compatible(test)?;
    Ok(blend_raw(
        test.features_f64().view(),
        cache,
        clf.weights_f64().view(),
    ))
}

/// `x · wᵀ + b` for a weight matrix stored as `[out × in]`.
fn linear(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((x.nrows(), w.nrows()));
    for (mut orow, xrow) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
        for ((o, wrow), bias) in orow.iter_mut().zip(w.axis_iter(Axis(0))).zip(b.iter()) {
            let mut acc = 0.0;
            for (a, c) in xrow.iter().zip(wrow.iter()) {
                acc += a * c;
            }
            *o = acc + bias;
        }
    }
    out
}

/// The same prediction evaluated literally as a two-layer adapter with
/// `W₁ = keys`, `W₂ = valuesᵀ`, zero biases and activation φ, followed by
/// the residual blend with the zero-shot classifier.
///
/// Computed by separate layer applications rather than the fused path in
/// [`blended_logits`], so the two serve as cross-checks of each other.
pub fn mlp_form_logits(
    test: &EmbeddingSet,
    cache: &CacheModel,
    clf: &TextClassifier,
) -> Result<LogitsBatch> {
    check_query(test, cache.dim())?;
    check_cache_classes(test, cache)?;
    clf.check_compatible(test)?;
    let f = test.features_f64();
    let w1 = cache.keys();
    let b1 = Array1::<f64>::zeros(w1.nrows());
    let w2 = cache.values().reversed_axes();
    let b2 = Array1::<f64>::zeros(w2.nrows());

    let beta = cache.beta();
    let hidden = linear(f.view(), w1, b1.view()).mapv(|x| kernel(x, beta));
    let adapted = linear(hidden.view(), w2, b2.view());

    let wc = clf.weights_f64();
    let no_bias = Array1::<f64>::zeros(wc.nrows());
    let clip = linear(f.view(), wc.view(), no_bias.view());
    let values = &adapted * cache.alpha() + &clip;
    Ok(LogitsBatch {
        values,
        components: Some((adapted, clip)),
    })
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &LogitsBatch) -> Result<Vec<u32>> {
    argmax_rows(logits.values.view())
}

pub(crate) fn argmax_rows(values: ArrayView2<'_, f64>) -> Result<Vec<u32>> {
    values
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLogit(i));
                }
                if v > best_val {
                    best = j;
                    best_val = v;
                }
            }
            Ok(best as u32)
        })
        .collect()
}
