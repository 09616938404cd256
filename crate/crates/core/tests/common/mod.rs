//! Scalar reference implementations used as independent oracles.
//!
//! Everything here is written with plain nested loops over `Vec<Vec<f64>>`
//! so it shares no code path with the library's matrix kernels.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tipcache::{EmbeddingSet, PromptMode, TextClassifier};

pub type Mat = Vec<Vec<f64>>;

pub fn rows_of<T: Copy + Into<f64>>(m: ArrayView2<'_, T>) -> Mat {
    m.outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

pub fn set_from_rows(rows: &[Vec<f64>], labels: Vec<u32>, num_classes: usize) -> EmbeddingSet {
    let dim = rows[0].len();
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let feats = Array2::from_shape_vec((rows.len(), dim), flat).unwrap();
    EmbeddingSet::new(feats, labels, class_names(num_classes), true).unwrap()
}

/// A random few-shot problem: balanced train set, labelled queries and a
/// unit-row classifier, all on the unit sphere.
pub struct Instance {
    pub num_classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub clf: TextClassifier,
    pub alpha: f64,
    pub beta: f64,
}

pub fn random_instance(
    seed: u64,
    classes: (usize, usize),
    shots: (usize, usize),
    dims: (usize, usize),
    queries: usize,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(classes.0..=classes.1);
    let k = rng.random_range(shots.0..=shots.1);
    let dim = rng.random_range(dims.0..=dims.1);
    let alpha = rng.random_range(0.1..3.0);
    let beta = rng.random_range(0.5..12.0);

    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    for c in 0..n {
        for _ in 0..k {
            train_rows.push(unit_vector(&mut rng, dim));
            train_labels.push(c as u32);
        }
    }
    let test_rows: Vec<Vec<f64>> = (0..queries).map(|_| unit_vector(&mut rng, dim)).collect();
    let test_labels: Vec<u32> = (0..queries)
        .map(|_| rng.random_range(0..n as u32))
        .collect();
    let clf_rows: Vec<f32> = (0..n)
        .flat_map(|_| unit_vector(&mut rng, dim))
        .map(|v| v as f32)
        .collect();
    let clf = TextClassifier::new(
        Array2::from_shape_vec((n, dim), clf_rows).unwrap(),
        class_names(n),
        PromptMode::Custom,
    )
    .unwrap();
    Instance {
        num_classes: n,
        shots: k,
        dim,
        train: set_from_rows(&train_rows, train_labels, n),
        test: set_from_rows(&test_rows, test_labels, n),
        clf,
        alpha,
        beta,
    }
}

pub fn onehot(labels: &[u32], n: usize) -> Mat {
    labels
        .iter()
        .map(|&l| {
            (0..n)
                .map(|j| if j == l as usize { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn affinity(q: &[f64], k: &[f64], beta: f64) -> f64 {
    (-beta * (1.0 - dot(q, k))).exp()
}

/// `alpha · exp(-β(1 - Q·Kᵀ)) · V + Q·Wᵀ`, one entry at a time.
pub fn blended(q: &Mat, keys: &Mat, values: &Mat, w: &Mat, alpha: f64, beta: f64) -> Mat {
    let n = w.len();
    q.iter()
        .map(|qi| {
            (0..n)
                .map(|c| {
                    let mut cache = 0.0;
                    for (k, v) in keys.iter().zip(values) {
                        cache += affinity(qi, k, beta) * v[c];
                    }
                    alpha * cache + dot(qi, &w[c])
                })
                .collect()
        })
        .collect()
}

pub fn zero_shot(q: &Mat, w: &Mat) -> Mat {
    q.iter()
        .map(|qi| w.iter().map(|wc| dot(qi, wc)).collect())
        .collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn mean_xent(logits: &Mat, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l as usize];
    }
    total / logits.len() as f64
}

pub fn cache_loss(
    q: &Mat,
    labels: &[u32],
    keys: &Mat,
    values: &Mat,
    w: &Mat,
    alpha: f64,
    beta: f64,
) -> f64 {
    mean_xent(&blended(q, keys, values, w, alpha, beta), labels)
}

/// Hand-derived gradients of [`cache_loss`] with respect to keys and values.
pub fn cache_grads(
    q: &Mat,
    labels: &[u32],
    keys: &Mat,
    values: &Mat,
    w: &Mat,
    alpha: f64,
    beta: f64,
) -> (Mat, Mat) {
    let b = q.len() as f64;
    let n = w.len();
    let logits = blended(q, keys, values, w, alpha, beta);
    let mut gk = vec![vec![0.0; keys[0].len()]; keys.len()];
    let mut gv = vec![vec![0.0; n]; keys.len()];
    for (i, qi) in q.iter().enumerate() {
        let m = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits[i].iter().map(|v| (v - m).exp()).sum();
        let g: Vec<f64> = (0..n)
            .map(|c| {
                let p = (logits[i][c] - m).exp() / z;
                (p - if c == labels[i] as usize { 1.0 } else { 0.0 }) / b
            })
            .collect();
        for (j, kj) in keys.iter().enumerate() {
            let a = affinity(qi, kj, beta);
            let mut ga = 0.0;
            for c in 0..n {
                ga += g[c] * values[j][c];
                gv[j][c] += alpha * a * g[c];
            }
            let coef = alpha * ga * a * beta;
            for d in 0..qi.len() {
                gk[j][d] += coef * qi[d];
            }
        }
    }
    (gk, gv)
}

/// Fourth-order central difference of `f` along every entry of `params`:
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, grouped as
/// differences so a flat direction yields exactly zero.
pub fn finite_diff(params: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut out = vec![vec![0.0; params[0].len()]; params.len()];
    let mut p = params.clone();
    for i in 0..params.len() {
        for j in 0..params[0].len() {
            let orig = p[i][j];
            let mut at = |offset: f64| {
                p[i][j] = orig + offset;
                f(&p)
            };
            let near = at(h) - at(-h);
            let far = at(2.0 * h) - at(-2.0 * h);
            let d = (8.0 * near - far) / (12.0 * h);
            p[i][j] = orig;
            out[i][j] = d;
        }
    }
    out
}

/// Largest entrywise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &Mat, numeric: &Mat, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (&a, &n) in ra.iter().zip(rn) {
            let denom = a.abs().max(n.abs()).max(floor);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Minibatch fine-tuning of the keys with SGD + momentum and a per-step
/// cosine schedule, shuffling with the same seeded stream as the library.
#[allow(clippy::too_many_arguments)]
pub fn train_keys_sgd_momentum(
    feats: &Mat,
    labels: &[u32],
    mut keys: Mat,
    values: &Mat,
    w: &Mat,
    alpha: f64,
    beta: f64,
    epochs: usize,
    batch: usize,
    base_lr: f64,
    momentum: f64,
    seed: u64,
) -> Mat {
    let rows = feats.len();
    let per_epoch = rows.div_ceil(batch);
    let total = epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut vel = vec![vec![0.0; keys[0].len()]; keys.len()];
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lr =
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let q: Mat = chunk.iter().map(|&i| feats[i].clone()).collect();
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (gk, _) = cache_grads(&q, &y, &keys, values, w, alpha, beta);
            for j in 0..keys.len() {
                for d in 0..keys[0].len() {
                    vel[j][d] = momentum * vel[j][d] + gk[j][d];
                    keys[j][d] -= lr * vel[j][d];
                }
            }
            step += 1;
        }
    }
    keys
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Adapter logits `alpha·(ReLU(x·w1ᵀ + b1)·w2ᵀ + b2)·Wᵀ + x·Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn adapter_logits(
    q: &Mat,
    w1: &Mat,
    b1: &[f64],
    w2: &Mat,
    b2: &[f64],
    w: &Mat,
    alpha: f64,
) -> Mat {
    q.iter()
        .map(|x| {
            let h: Vec<f64> = w1
                .iter()
                .zip(b1)
                .map(|(row, b)| relu(dot(x, row) + b))
                .collect();
            let fa: Vec<f64> = w2.iter().zip(b2).map(|(row, b)| dot(&h, row) + b).collect();
            w.iter()
                .map(|wc| alpha * dot(&fa, wc) + dot(x, wc))
                .collect()
        })
        .collect()
}
