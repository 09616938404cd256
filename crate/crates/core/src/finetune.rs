//! Gradient refinement of the cache keys starting from the training-free
//! cache.
//!
//! Only the blocks named in [`Unfreeze`] change; the text classifier and the
//! input features never do. Keys are not projected back onto the unit sphere.

use std::f64::consts::PI;
use std::io;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::CacheModel;
use crate::error::{Error, Result};
use crate::inference::{self, kernel};
use crate::linalg;
use crate::optim::{BlockState, Optimizer};
use crate::store::{EmbeddingSet, TextClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Which cache blocks receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unfreeze {
    pub keys: bool,
    pub values: bool,
}

impl Unfreeze {
    pub const KEYS: Unfreeze = Unfreeze {
        keys: true,
        values: false,
    };
    pub const VALUES: Unfreeze = Unfreeze {
        keys: false,
        values: true,
    };
    pub const BOTH: Unfreeze = Unfreeze {
        keys: true,
        values: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.keys, self.values) {
            (true, false) => "keys",
            (false, true) => "values",
            (true, true) => "both",
            (false, false) => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub seed: u64,
    pub unfreeze: Unfreeze,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            base_lr: 0.001,
            schedule: Schedule::Cosine,
            optimizer: Optimizer::sgd_momentum(),
            weight_decay: 0.0,
            seed: 0,
            unfreeze: Unfreeze::KEYS,
        }
    }
}

impl TrainConfig {
    /// `base_lr = 0` is allowed and makes training a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad learning rate {}",
                self.base_lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if !self.unfreeze.keys && !self.unfreeze.values {
            return Err(Error::InvalidConfig(
                "nothing to train: unfreeze is empty".into(),
            ));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, rows: usize) -> usize {
        rows.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total, self.base_lr),
            Schedule::Constant if step < total => Ok(self.base_lr),
            Schedule::Constant => Err(Error::StepOutOfRange { step, total }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for rec in &self.epochs {
            out.serialize(rec)
                .map_err(|e| Error::Serialize(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

/// Cosine decay from `base_lr` at step 0 toward zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Mean softmax cross-entropy, `labels[i]` indexing row `i`.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[u32]) -> Result<f64> {
    Ok(softmax_xent(logits, labels, false)?.0)
}

/// Returns the mean loss and, when asked, `∂loss/∂logits = (softmax - onehot)/rows`.
pub(crate) fn softmax_xent(
    logits: ArrayView2<'_, f64>,
    labels: &[u32],
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::LengthMismatch {
            left: logits.nrows(),
            right: labels.len(),
        });
    }
    let rows = logits.nrows() as f64;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(logits.raw_dim()));
    let mut total = 0.0;
    for (i, (row, &label)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        let label = label as usize;
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: label as u32,
                num_classes: row.len(),
            });
        }
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if !v.is_finite() {
                return Err(Error::NonFiniteLogit(i));
            }
            max = max.max(v);
        }
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max);
        if let Some(g) = grad.as_mut() {
            for (j, (gv, &v)) in g.row_mut(i).iter_mut().zip(row).enumerate() {
                let p = (v - max).exp() / sum;
                *gv = (p - if j == label { 1.0 } else { 0.0 }) / rows;
            }
        }
    }
    Ok((total / rows, grad))
}

/// Loss and analytic gradients with respect to the cache blocks.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Present when keys are unfrozen.
    pub grad_keys: Option<Array2<f64>>,
    /// Present when values are unfrozen.
    pub grad_values: Option<Array2<f64>>,
    pub(crate) correct: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_backward(
    features: ArrayView2<'_, f64>,
    labels: &[u32],
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    clf_weights: ArrayView2<'_, f64>,
    alpha: f64,
    beta: f64,
    unfreeze: Unfreeze,
) -> Result<LossGrad> {
    let aff = linalg::matmul_nt(features, keys).mapv(|x| kernel(x, beta));
    let mut logits = linalg::matmul(aff.view(), values);
    let clip = linalg::matmul_nt(features, clf_weights);
    logits.zip_mut_with(&clip, |c, &z| *c = alpha * *c + z);

    let correct = inference::argmax_rows(logits.view())?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let (loss, dlogits) = softmax_xent(logits.view(), labels, true)?;
    let dlogits = dlogits.expect("gradient requested");

    let grad_keys = if unfreeze.keys {
        // ∂L/∂A = α·G·Vᵀ, ∂A/∂s = β·A, ∂s_ij/∂k_j = f_i
        let mut ds = linalg::matmul_nt(dlogits.view(), values);
        ds.zip_mut_with(&aff, |d, &a| *d *= alpha * beta * a);
        let g = linalg::matmul_tn(ds.view(), features);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("keys"));
        }
        Some(g)
    } else {
        None
    };
    let grad_values = if unfreeze.values {
        let mut g = linalg::matmul_tn(aff.view(), dlogits.view());
        g.mapv_inplace(|v| alpha * v);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("values"));
        }
        Some(g)
    } else {
        None
    };
    Ok(LossGrad {
        loss,
        grad_keys,
        grad_values,
        correct,
    })
}

fn check_train_inputs(
    batch: &EmbeddingSet,
    cache: &CacheModel,
    clf: &TextClassifier,
) -> Result<()> {
    if !batch.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if batch.dim() != cache.dim() {
        return Err(Error::DimMismatch {
            what: "batch dim",
            expected: cache.dim(),
            found: batch.dim(),
        });
    }
    if batch.num_classes() != cache.num_classes() {
        return Err(Error::DimMismatch {
            what: "batch classes",
            expected: cache.num_classes(),
            found: batch.num_classes(),
        });
    }
    clf.check_compatible(batch)
}

/// Cross-entropy of the blended logits on `batch` and its gradients with
/// respect to the unfrozen cache blocks.
pub fn loss_and_grad(
    batch: &EmbeddingSet,
    cache: &CacheModel,
    clf: &TextClassifier,
    unfreeze: Unfreeze,
) -> Result<LossGrad> {
    check_train_inputs(batch, cache, clf)?;
    forward_backward(
        batch.features_f64().view(),
        batch.labels(),
        cache.keys(),
        cache.values(),
        clf.weights_f64().view(),
        cache.alpha(),
        cache.beta(),
        unfreeze,
    )
}

/// Shared minibatch driver: seeded reshuffle each epoch, last partial batch
/// kept, learning rate scheduled per iteration. `step` receives the batch
/// row indices and the learning rate and returns `(mean loss, correct)`.
pub(crate) fn minibatch_loop<F>(rows: usize, cfg: &TrainConfig, mut step: F) -> Result<TrainTrace>
where
    F: FnMut(&[usize], f64) -> Result<(f64, usize)>,
{
    cfg.validate()?;
    let per_epoch = cfg.steps_per_epoch(rows);
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut trace = TrainTrace::default();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let first_lr = cfg.lr_at(global, total)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(global, total)?;
            let (loss, ok) = step(batch, lr)?;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            global += 1;
        }
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / rows as f64,
            lr: first_lr,
            train_acc: correct as f64 / rows as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(trace)
}

/// Fine-tunes the unfrozen cache blocks on `train_set`, starting from
/// `cache`. Frozen blocks are returned bit-identical.
pub fn train(
    train_set: &EmbeddingSet,
    cache: &CacheModel,
    clf: &TextClassifier,
    cfg: &TrainConfig,
) -> Result<(CacheModel, TrainTrace)> {
    cfg.validate()?;
    check_train_inputs(train_set, cache, clf)?;
    let feats = train_set.features_f64();
    let labels = train_set.labels();
    let weights = clf.weights_f64();
    let mut keys = cache.keys().to_owned();
    let mut values = cache.values().to_owned();
    let mut key_state = BlockState::new(cfg.optimizer, cfg.weight_decay, keys.len());
    let mut value_state = BlockState::new(cfg.optimizer, cfg.weight_decay, values.len());
    let (alpha, beta) = (cache.alpha(), cache.beta());

    let trace = minibatch_loop(train_set.rows(), cfg, |batch, lr| {
        let x = feats.select(Axis(0), batch);
        let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
        let out = forward_backward(
            x.view(),
            &y,
            keys.view(),
            values.view(),
            weights.view(),
            alpha,
            beta,
            cfg.unfreeze,
        )?;
        if let Some(g) = &out.grad_keys {
            key_state.step(
                keys.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
                lr,
            );
        }
        if let Some(g) = &out.grad_values {
            value_state.step(
                values.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
                lr,
            );
        }
        Ok((out.loss, out.correct))
    })?;

    if keys.iter().chain(values.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("parameters diverged"));
    }
    Ok((cache.replace_blocks(keys, values), trace))
}
