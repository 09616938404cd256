//! Few-shot sampling, accuracy, hyperparameter sweeps and ablation drivers.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{build_cache, prototype_reduce, reduce_many_shots, REPEAT_SEEDS};
use crate::error::{Error, Result};
use crate::finetune::{self, TrainConfig, Unfreeze};
use crate::inference::{self, argmax_rows, LogitsBatch};
use crate::report::{classifier_fingerprint, config_hash, fingerprint, EvalReport};
use crate::store::{EmbeddingSet, TextClassifier};

pub const ALPHA_GRID: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0];
pub const BETA_GRID: [f64; 6] = [1.5, 3.5, 5.5, 7.5, 9.5, 11.5];
pub const CACHE_SIZES: [usize; 6] = [0, 1, 2, 4, 8, 16];
pub const MORE_SHOTS: [usize; 4] = [16, 32, 64, 128];
pub const FIXED_CACHE_SIZE: usize = 16;
/// Held-out samples drawn per class are `min(shots, MAX_VAL_PER_CLASS)`.
pub const MAX_VAL_PER_CLASS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub shots: usize,
    pub seed: u64,
    pub source: String,
}

/// Per class, the first `shots` entries of a seeded shuffle of that class's
/// rows (classes drawn in order from one stream), followed by up to
/// `extra` further entries.
fn draw_per_class(
    full: &EmbeddingSet,
    shots: usize,
    extra: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    full.class_indices()
        .into_iter()
        .enumerate()
        .map(|(class, mut idx)| {
            if idx.len() < shots {
                return Err(Error::InsufficientSamples {
                    class,
                    have: idx.len(),
                    need: shots,
                });
            }
            idx.shuffle(&mut rng);
            let take_extra = extra.min(idx.len() - shots);
            let mut train = idx[..shots].to_vec();
            let mut rest = idx[shots..shots + take_extra].to_vec();
            train.sort_unstable();
            rest.sort_unstable();
            Ok((train, rest))
        })
        .collect()
}

/// Row indices of a balanced K-shot sample, class-major and ascending within
/// each class.
pub fn sample_fewshot_indices(full: &EmbeddingSet, spec: &FewShotSpec) -> Result<Vec<usize>> {
    Ok(draw_per_class(full, spec.shots, 0, spec.seed)?
        .into_iter()
        .flat_map(|(t, _)| t)
        .collect())
}

pub fn sample_fewshot(full: &EmbeddingSet, spec: &FewShotSpec) -> Result<EmbeddingSet> {
    full.select(&sample_fewshot_indices(full, spec)?)
}

/// The K-shot sample of [`sample_fewshot`] plus a disjoint validation split
/// of `min(K, 4)` further samples per class, or `None` when some class has
/// no spare samples.
pub fn sample_fewshot_split(
    full: &EmbeddingSet,
    spec: &FewShotSpec,
) -> Result<(EmbeddingSet, Option<EmbeddingSet>)> {
    let want = spec.shots.min(MAX_VAL_PER_CLASS);
    let draws = draw_per_class(full, spec.shots, want, spec.seed)?;
    let train: Vec<usize> = draws.iter().flat_map(|(t, _)| t.iter().copied()).collect();
    let has_spares = draws.iter().all(|(_, v)| v.len() == want);
    let val = if has_spares {
        let idx: Vec<usize> = draws.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        Some(full.select(&idx)?)
    } else {
        None
    };
    Ok((full.select(&train)?, val))
}

pub fn top1_accuracy(pred: &[u32], labels: &[u32]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: labels.len(),
        });
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Top-1 accuracy of `logits` against `set`'s labels.
pub fn logits_accuracy(logits: &LogitsBatch, set: &EmbeddingSet) -> Result<f64> {
    top1_accuracy(&inference::predict(logits)?, set.labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    HeldoutVal,
    TrainSet,
}

/// α/β grid, kept sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    selection: Selection,
}

impl SweepGrid {
    pub fn new(mut alphas: Vec<f64>, mut betas: Vec<f64>, selection: Selection) -> Result<Self> {
        if alphas.is_empty() || betas.is_empty() {
            return Err(Error::InvalidConfig("sweep grid must be non-empty".into()));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidConfig(
                "alphas must be finite and >= 0".into(),
            ));
        }
        if betas.iter().any(|b| !b.is_finite() || *b <= 0.0) {
            return Err(Error::InvalidConfig("betas must be finite and > 0".into()));
        }
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        Ok(Self {
            alphas,
            betas,
            selection,
        })
    }

    /// The ablation ranges for both axes.
    pub fn standard(selection: Selection) -> Self {
        Self::new(ALPHA_GRID.to_vec(), BETA_GRID.to_vec(), selection).expect("static grid")
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub best_alpha: f64,
    pub best_beta: f64,
    /// Accuracy of the chosen pair on the selection split.
    pub selection_accuracy: f64,
    /// Which split the selection actually used.
    pub selected_on: Selection,
    pub cells: Vec<SweepCell>,
    pub report: EvalReport,
}

/// Accuracy of every (α, β) cell on `eval` using a cache built from `train`.
/// α-major order.
pub fn grid_accuracies(
    train: &EmbeddingSet,
    eval: &EmbeddingSet,
    clf: &TextClassifier,
    alphas: &[f64],
    betas: &[f64],
) -> Result<Vec<SweepCell>> {
    let base = build_cache(train, alphas[0], betas[0])?;
    let clip = inference::zero_shot_logits(eval, clf)?;
    let mut by_beta = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cache = base.with_hyperparams(0.0, beta)?;
        by_beta.push(inference::cache_logits(eval, &cache)?);
    }
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for (&beta, cache_term) in betas.iter().zip(&by_beta) {
            let values: Array2<f64> = ndarray::Zip::from(cache_term)
                .and(&clip)
                .map_collect(|&c, &z| alpha * c + z);
            let accuracy = top1_accuracy(&argmax_rows(values.view())?, eval.labels())?;
            cells.push(SweepCell {
                alpha,
                beta,
                accuracy,
            });
        }
    }
    Ok(cells)
}

/// Picks (α, β) on the selection split (ties: smaller α, then smaller β)
/// and evaluates the training-free classifier once on `test`.
///
/// With [`Selection::HeldoutVal`] and no `val`, selection falls back to the
/// training set; the report's method name carries `sel=train` and a warning
/// is logged.
pub fn sweep(
    train: &EmbeddingSet,
    val: Option<&EmbeddingSet>,
    test: &EmbeddingSet,
    clf: &TextClassifier,
    grid: &SweepGrid,
    seed: u64,
) -> Result<SweepOutcome> {
    let started = Instant::now();
    let (eval_set, selected_on) = match (grid.selection, val) {
        (Selection::HeldoutVal, Some(v)) => (v, Selection::HeldoutVal),
        (Selection::HeldoutVal, None) => {
            log::warn!(
                "no held-out split available; selecting hyperparameters on the training set"
            );
            (train, Selection::TrainSet)
        }
        (Selection::TrainSet, _) => (train, Selection::TrainSet),
    };
    let cells = grid_accuracies(train, eval_set, clf, grid.alphas(), grid.betas())?;
    let mut best = &cells[0];
    for cell in &cells[1..] {
        if cell.accuracy > best.accuracy {
            best = cell;
        }
    }
    let train_seconds = started.elapsed().as_secs_f64();

    let eval_started = Instant::now();
    let cache = build_cache(train, best.alpha, best.beta)?;
    let top1 = logits_accuracy(&inference::blended_logits(test, &cache, clf)?, test)?;
    let method = match selected_on {
        Selection::HeldoutVal => "tip-adapter[sweep,sel=val]",
        Selection::TrainSet => "tip-adapter[sweep,sel=train]",
    };
    let hash = config_hash(&json!({
        "method": method,
        "grid": grid,
        "seed": seed,
        "train": fingerprint(train),
        "val": val.map(fingerprint),
        "test": fingerprint(test),
        "clf": classifier_fingerprint(clf),
    }));
    let report = EvalReport {
        method: method.into(),
        shots: train.balanced_shots()?,
        alpha: Some(best.alpha),
        beta: Some(best.beta),
        top1,
        num_test: test.rows(),
        seed,
        train_seconds,
        eval_seconds: eval_started.elapsed().as_secs_f64(),
        config_hash: hash,
    };
    Ok(SweepOutcome {
        best_alpha: best.alpha,
        best_beta: best.beta,
        selection_accuracy: best.accuracy,
        selected_on,
        cells: cells.clone(),
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Alpha,
    Beta,
    CacheSize,
    MoreShots,
    FinetuneModules,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Alpha => "alpha",
            Ablation::Beta => "beta",
            Ablation::CacheSize => "cache_size",
            Ablation::MoreShots => "more_shots",
            Ablation::FinetuneModules => "finetune_modules",
        }
    }
}

/// Inputs shared by all ablations.
///
/// `train` is the balanced few-shot set, except for [`Ablation::MoreShots`]
/// where it is the pool that larger shot counts are sampled from.
#[derive(Debug, Clone)]
pub struct AblationInputs<'a> {
    pub train: &'a EmbeddingSet,
    pub test: &'a EmbeddingSet,
    pub clf: &'a TextClassifier,
    /// α used wherever α is not the swept quantity.
    pub alpha: f64,
    /// β used wherever β is not the swept quantity.
    pub beta: f64,
    pub seed: u64,
    pub train_cfg: TrainConfig,
}

struct RowContext<'a, 'b> {
    inputs: &'b AblationInputs<'a>,
    ablation: Ablation,
    base_hash: serde_json::Value,
}

impl RowContext<'_, '_> {
    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        method: String,
        shots: usize,
        alpha: Option<f64>,
        beta: Option<f64>,
        top1: f64,
        train_seconds: f64,
        eval_seconds: f64,
    ) -> EvalReport {
        let hash = config_hash(&json!({
            "base": self.base_hash,
            "ablation": self.ablation.name(),
            "method": method,
            "shots": shots,
            "alpha": alpha,
            "beta": beta,
        }));
        EvalReport {
            method,
            shots,
            alpha,
            beta,
            top1,
            num_test: self.inputs.test.rows(),
            seed: self.inputs.seed,
            train_seconds,
            eval_seconds,
            config_hash: hash,
        }
    }
}

fn tip_accuracy(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    clf: &TextClassifier,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let cache = build_cache(train, alpha, beta)?;
    logits_accuracy(&inference::blended_logits(test, &cache, clf)?, test)
}

fn zero_shot_accuracy(test: &EmbeddingSet, clf: &TextClassifier) -> Result<f64> {
    let logits = LogitsBatch::plain(inference::zero_shot_logits(test, clf)?);
    logits_accuracy(&logits, test)
}

/// Runs one ablation and returns a report row per setting.
pub fn run_ablation(ablation: Ablation, inputs: &AblationInputs<'_>) -> Result<Vec<EvalReport>> {
    inputs.train_cfg.validate()?;
    let ctx = RowContext {
        inputs,
        ablation,
        base_hash: json!({
            "train": fingerprint(inputs.train),
            "test": fingerprint(inputs.test),
            "clf": classifier_fingerprint(inputs.clf),
            "alpha": inputs.alpha,
            "beta": inputs.beta,
            "seed": inputs.seed,
            "train_cfg": inputs.train_cfg,
        }),
    };
    let (train, test, clf) = (inputs.train, inputs.test, inputs.clf);
    let mut rows = Vec::new();
    match ablation {
        Ablation::Alpha | Ablation::Beta => {
            let shots = train.balanced_shots()?;
            let settings: Vec<(f64, f64)> = if ablation == Ablation::Alpha {
                ALPHA_GRID.iter().map(|&a| (a, inputs.beta)).collect()
            } else {
                BETA_GRID.iter().map(|&b| (inputs.alpha, b)).collect()
            };
            for (alpha, beta) in settings {
                let t = Instant::now();
                let top1 = tip_accuracy(train, test, clf, alpha, beta)?;
                rows.push(ctx.report(
                    "tip-adapter".into(),
                    shots,
                    Some(alpha),
                    Some(beta),
                    top1,
                    0.0,
                    t.elapsed().as_secs_f64(),
                ));
            }
        }
        Ablation::CacheSize => {
            let shots = train.balanced_shots()?;
            for size in CACHE_SIZES {
                let t = Instant::now();
                if size == 0 {
                    let top1 = zero_shot_accuracy(test, clf)?;
                    rows.push(ctx.report(
                        "tip-adapter[cache=0]".into(),
                        shots,
                        None,
                        None,
                        top1,
                        0.0,
                        t.elapsed().as_secs_f64(),
                    ));
                    continue;
                }
                if size > shots || shots % size != 0 {
                    log::warn!("cache size {size} does not divide {shots} shots; skipped");
                    continue;
                }
                let mut sum = 0.0;
                for seed in REPEAT_SEEDS {
                    let (reduced, _) = prototype_reduce(train, size, seed)?;
                    sum += tip_accuracy(&reduced, test, clf, inputs.alpha, inputs.beta)?;
                }
                rows.push(ctx.report(
                    format!("tip-adapter[cache={size}]"),
                    shots,
                    Some(inputs.alpha),
                    Some(inputs.beta),
                    sum / REPEAT_SEEDS.len() as f64,
                    0.0,
                    t.elapsed().as_secs_f64(),
                ));
            }
        }
        Ablation::MoreShots => {
            for shots in MORE_SHOTS {
                let spec = FewShotSpec {
                    shots,
                    seed: inputs.seed,
                    source: "pool".into(),
                };
                let fewshot = sample_fewshot(train, &spec)?;
                let reduced = reduce_many_shots(&fewshot, FIXED_CACHE_SIZE, inputs.seed)?;
                let cache = build_cache(&reduced, inputs.alpha, inputs.beta)?;
                let t = Instant::now();
                let top1 = logits_accuracy(&inference::blended_logits(test, &cache, clf)?, test)?;
                rows.push(ctx.report(
                    format!("tip-adapter[cache={FIXED_CACHE_SIZE}]"),
                    shots,
                    Some(inputs.alpha),
                    Some(inputs.beta),
                    top1,
                    0.0,
                    t.elapsed().as_secs_f64(),
                ));
                let t = Instant::now();
                let (tuned, _) = finetune::train(&fewshot, &cache, clf, &inputs.train_cfg)?;
                let train_seconds = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let top1 = logits_accuracy(&inference::blended_logits(test, &tuned, clf)?, test)?;
                rows.push(ctx.report(
                    format!("tip-adapter-f[cache={FIXED_CACHE_SIZE}]"),
                    shots,
                    Some(inputs.alpha),
                    Some(inputs.beta),
                    top1,
                    train_seconds,
                    t.elapsed().as_secs_f64(),
                ));
            }
        }
        Ablation::FinetuneModules => {
            let shots = train.balanced_shots()?;
            let t = Instant::now();
            let top1 = tip_accuracy(train, test, clf, inputs.alpha, inputs.beta)?;
            rows.push(ctx.report(
                "tip-adapter[unfreeze=none]".into(),
                shots,
                Some(inputs.alpha),
                Some(inputs.beta),
                top1,
                0.0,
                t.elapsed().as_secs_f64(),
            ));
            let cache = build_cache(train, inputs.alpha, inputs.beta)?;
            for unfreeze in [Unfreeze::KEYS, Unfreeze::VALUES, Unfreeze::BOTH] {
                let cfg = TrainConfig {
                    unfreeze,
                    ..inputs.train_cfg.clone()
                };
                let t = Instant::now();
                let trained = finetune::train(train, &cache, clf, &cfg);
                let train_seconds = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let outcome = trained.and_then(|(tuned, _)| {
                    logits_accuracy(&inference::blended_logits(test, &tuned, clf)?, test)
                });
                let (method, top1) = match outcome {
                    Ok(acc) => (format!("tip-adapter-f[unfreeze={}]", unfreeze.label()), acc),
                    Err(Error::NonFiniteGradient(_) | Error::NonFiniteLogit(_)) => {
                        log::warn!("unfreeze={} diverged", unfreeze.label());
                        (
                            format!("tip-adapter-f[unfreeze={},collapsed]", unfreeze.label()),
                            0.0,
                        )
                    }
                    Err(e) => return Err(e),
                };
                rows.push(ctx.report(
                    method,
                    shots,
                    Some(inputs.alpha),
                    Some(inputs.beta),
                    top1,
                    train_seconds,
                    t.elapsed().as_secs_f64(),
                ));
            }
        }
    }
    Ok(rows)
}
