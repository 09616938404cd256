//! Comparison classifiers: a trained bottleneck MLP adapter with ReLU and a
//! residual blend into the zero-shot classifier, and an L2-regularized
//! multinomial logistic-regression probe.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{minibatch_loop, softmax_xent, TrainConfig, TrainTrace};
use crate::inference::{self, LogitsBatch};
use crate::linalg;
use crate::optim::BlockState;
use crate::store::{EmbeddingSet, TextClassifier};

/// Two-layer adapter `f_a = ReLU(f·w1ᵀ + b1)·w2ᵀ + b2` blended as
/// `alpha·f_a·W_cᵀ + f·W_cᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpAdapter {
    /// `[hidden × dim]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[dim × hidden]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub alpha: f64,
}

impl MlpAdapter {
    pub fn zeros(dim: usize, hidden: usize, alpha: f64) -> Self {
        Self {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((dim, hidden)),
            b2: Array1::zeros(dim),
            alpha,
        }
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
    pub fn init(dim: usize, hidden: usize, alpha: f64, seed: u64) -> Result<Self> {
        if hidden == 0 || dim == 0 {
            return Err(Error::InvalidConfig("adapter dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (dim as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        let mut draw = |bound: f64| rng.random_range(-bound..bound);
        let w1 = Array2::from_shape_simple_fn((hidden, dim), || draw(b_in));
        let b1 = Array1::from_shape_simple_fn(hidden, || draw(b_in));
        let w2 = Array2::from_shape_simple_fn((dim, hidden), || draw(b_hid));
        let b2 = Array1::from_shape_simple_fn(dim, || draw(b_hid));
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            alpha,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (h, d) = self.w1.dim();
        if h == 0 || self.b1.len() != h || self.w2.dim() != (d, h) || self.b2.len() != d {
            return Err(Error::InvalidConfig("inconsistent adapter shapes".into()));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(
                "adapter has non-finite parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients of the adapter loss, one field per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

struct AdapterForward {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    projected: Array2<f64>,
    clip: Array2<f64>,
}

fn add_bias(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        row += b;
    }
}

fn adapter_forward(
    x: ArrayView2<'_, f64>,
    adapter: &MlpAdapter,
    wc: ArrayView2<'_, f64>,
) -> AdapterForward {
    let mut pre = linalg::matmul_nt(x, adapter.w1.view());
    add_bias(&mut pre, &adapter.b1);
    let hidden = pre.mapv(|v| v.max(0.0));
    let mut fa = linalg::matmul_nt(hidden.view(), adapter.w2.view());
    add_bias(&mut fa, &adapter.b2);
    let projected = linalg::matmul_nt(fa.view(), wc);
    let clip = linalg::matmul_nt(x, wc);
    AdapterForward {
        pre,
        hidden,
        projected,
        clip,
    }
}

fn check_dims(set: &EmbeddingSet, adapter: &MlpAdapter, clf: &TextClassifier) -> Result<()> {
    adapter.validate()?;
    clf.check_compatible(set)?;
    if adapter.dim() != set.dim() {
        return Err(Error::DimMismatch {
            what: "adapter dim",
            expected: set.dim(),
            found: adapter.dim(),
        });
    }
    Ok(())
}

/// Logits of the adapter baseline; components are `(f_a·W_cᵀ, f·W_cᵀ)`.
pub fn clip_adapter_logits(
    test: &EmbeddingSet,
    adapter: &MlpAdapter,
    clf: &TextClassifier,
) -> Result<LogitsBatch> {
    check_dims(test, adapter, clf)?;
    let fwd = adapter_forward(
        test.features_f64().view(),
        adapter,
        clf.weights_f64().view(),
    );
    let mut values = fwd.projected.clone();
    values.zip_mut_with(&fwd.clip, |p, &c| *p = adapter.alpha * *p + c);
    Ok(LogitsBatch {
        values,
        components: Some((fwd.projected, fwd.clip)),
    })
}

fn adapter_backward(
    x: ArrayView2<'_, f64>,
    labels: &[u32],
    adapter: &MlpAdapter,
    wc: ArrayView2<'_, f64>,
) -> Result<(f64, usize, AdapterGrad)> {
    let fwd = adapter_forward(x, adapter, wc);
    let mut logits = fwd.projected;
    logits.zip_mut_with(&fwd.clip, |p, &c| *p = adapter.alpha * *p + c);
    let correct = inference::argmax_rows(logits.view())?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let (loss, g) = softmax_xent(logits.view(), labels, true)?;
    let g = g.expect("gradient requested");

    let mut dfa = linalg::matmul(g.view(), wc);
    dfa.mapv_inplace(|v| adapter.alpha * v);
    let dw2 = linalg::matmul_tn(dfa.view(), fwd.hidden.view());
    let db2 = dfa.sum_axis(Axis(0));
    let mut dpre = linalg::matmul(dfa.view(), adapter.w2.view());
    dpre.zip_mut_with(&fwd.pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    let dw1 = linalg::matmul_tn(dpre.view(), x);
    let db1 = dpre.sum_axis(Axis(0));
    let grad = AdapterGrad {
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    };
    let finite = grad
        .w1
        .iter()
        .chain(&grad.b1)
        .chain(&grad.w2)
        .chain(&grad.b2)
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFiniteGradient("adapter"));
    }
    Ok((loss, correct, grad))
}

/// Mean cross-entropy of [`clip_adapter_logits`] on `batch` and its gradient.
pub fn clip_adapter_loss_and_grad(
    batch: &EmbeddingSet,
    adapter: &MlpAdapter,
    clf: &TextClassifier,
) -> Result<(f64, AdapterGrad)> {
    check_dims(batch, adapter, clf)?;
    let (loss, _, grad) = adapter_backward(
        batch.features_f64().view(),
        batch.labels(),
        adapter,
        clf.weights_f64().view(),
    )?;
    Ok((loss, grad))
}

/// Shape and blending settings for the adapter baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Bottleneck width; `None` means `dim / 4` (at least 1).
    pub hidden: Option<usize>,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            alpha: 0.5,
        }
    }
}

impl AdapterConfig {
    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or((dim / 4).max(1))
    }
}

/// Training schedule the adapter baseline uses by default: the fine-tuning
/// defaults but with 200 epochs.
pub fn clip_adapter_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    }
}

/// Trains the adapter from a seeded random initialization. `cfg.unfreeze`
/// is ignored; every adapter parameter is trained.
pub fn train_clip_adapter(
    train: &EmbeddingSet,
    clf: &TextClassifier,
    adapter_cfg: &AdapterConfig,
    cfg: &TrainConfig,
) -> Result<(MlpAdapter, TrainTrace)> {
    if !train.is_normalized() {
        return Err(Error::NotNormalized);
    }
    clf.check_compatible(train)?;
    train.balanced_shots()?;
    let mut adapter = MlpAdapter::init(
        train.dim(),
        adapter_cfg.hidden_for(train.dim()),
        adapter_cfg.alpha,
        cfg.seed,
    )?;
    let feats = train.features_f64();
    let labels = train.labels();
    let wc = clf.weights_f64();
    let mut states = [
        BlockState::new(cfg.optimizer, cfg.weight_decay, adapter.w1.len()),
        BlockState::new(cfg.optimizer, cfg.weight_decay, adapter.b1.len()),
        BlockState::new(cfg.optimizer, cfg.weight_decay, adapter.w2.len()),
        BlockState::new(cfg.optimizer, cfg.weight_decay, adapter.b2.len()),
    ];
    let trace = minibatch_loop(train.rows(), cfg, |batch, lr| {
        let x = feats.select(Axis(0), batch);
        let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, correct, g) = adapter_backward(x.view(), &y, &adapter, wc.view())?;
        let slices = [
            (adapter.w1.as_slice_mut(), g.w1.as_slice()),
            (adapter.b1.as_slice_mut(), g.b1.as_slice()),
            (adapter.w2.as_slice_mut(), g.w2.as_slice()),
            (adapter.b2.as_slice_mut(), g.b2.as_slice()),
        ];
        for (state, (p, g)) in states.iter_mut().zip(slices) {
            state.step(p.expect("standard layout"), g.expect("standard layout"), lr);
        }
        Ok((loss, correct))
    })?;
    adapter.validate()?;
    Ok((adapter, trace))
}

/// Multinomial logistic regression on frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `[num_classes × dim]`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub steps: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LinearProbe {
    pub fn logits(&self, set: &EmbeddingSet) -> Result<LogitsBatch> {
        if set.dim() != self.weights.ncols() {
            return Err(Error::DimMismatch {
                what: "probe dim",
                expected: self.weights.ncols(),
                found: set.dim(),
            });
        }
        Ok(LogitsBatch::plain(
            self.raw_logits(set.features_f64().view()),
        ))
    }

    fn raw_logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = linalg::matmul_nt(x, self.weights.view());
        add_bias(&mut z, &self.bias);
        z
    }

    /// Regularized objective `mean CE + λ‖W‖²` and its gradient.
    pub fn objective(&self, set: &EmbeddingSet) -> Result<(f64, Array2<f64>, Array1<f64>)> {
        self.objective_raw(set.features_f64().view(), set.labels())
    }

    fn objective_raw(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[u32],
    ) -> Result<(f64, Array2<f64>, Array1<f64>)> {
        let z = self.raw_logits(x);
        let (ce, g) = softmax_xent(z.view(), labels, true)?;
        let g = g.expect("gradient requested");
        let mut dw = linalg::matmul_tn(g.view(), x);
        dw.zip_mut_with(&self.weights, |d, &w| *d += 2.0 * self.l2_lambda * w);
        let db = g.sum_axis(Axis(0));
        let reg = self.l2_lambda * self.weights.iter().map(|w| w * w).sum::<f64>();
        Ok((ce + reg, dw, db))
    }
}

/// Fits the probe by full-batch gradient descent with step `1/L`, where `L`
/// bounds the objective's curvature. Stops when the gradient norm drops
/// below `1e-6` or after `cfg.epochs` steps. `cfg.seed` drives the random
/// initialization; the other schedule fields are not used.
pub fn train_linear_probe(
    train: &EmbeddingSet,
    num_classes: usize,
    l2_lambda: f64,
    cfg: &TrainConfig,
) -> Result<(LinearProbe, ProbeStats)> {
    const GRAD_TOL: f64 = 1e-6;
    if !(l2_lambda.is_finite() && l2_lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("bad l2_lambda {l2_lambda}")));
    }
    if num_classes != train.num_classes() {
        return Err(Error::DimMismatch {
            what: "probe classes",
            expected: train.num_classes(),
            found: num_classes,
        });
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "step budget must be at least 1".into(),
        ));
    }
    train.balanced_shots()?;
    let x = train.features_f64();
    let dim = train.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut probe = LinearProbe {
        weights: Array2::from_shape_simple_fn((num_classes, dim), || {
            rng.random_range(-bound..bound)
        }),
        bias: Array1::zeros(num_classes),
        l2_lambda,
    };

    // softmax Hessian has spectral norm <= 1/2; augmented rows are [x, 1]
    let max_sq = x
        .axis_iter(Axis(0))
        .map(|r| linalg::dot(r, r) + 1.0)
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + 2.0 * l2_lambda);

    let mut stats = ProbeStats {
        steps: 0,
        loss: f64::NAN,
        grad_norm: f64::INFINITY,
        converged: false,
    };
    for _ in 0..cfg.epochs {
        let (loss, dw, db) = probe.objective_raw(x.view(), train.labels())?;
        let grad_norm = dw.iter().chain(&db).map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient("linear probe"));
        }
        stats.loss = loss;
        stats.grad_norm = grad_norm;
        if grad_norm < GRAD_TOL {
            stats.converged = true;
            break;
        }
        probe.weights.scaled_add(-step, &dw);
        probe.bias.scaled_add(-step, &db);
        stats.steps += 1;
    }
    if !stats.converged {
        let (loss, dw, db) = probe.objective_raw(x.view(), train.labels())?;
        stats.loss = loss;
        stats.grad_norm = dw.iter().chain(&db).map(|v| v * v).sum::<f64>().sqrt();
        stats.converged = stats.grad_norm < GRAD_TOL;
    }
    Ok((probe, stats))
}
