//! Few-shot classification over frozen embeddings with a training-free
//! key-value cache.
//!
//! The cache stores few-shot training features as keys and their one-hot
//! labels as values. A query is scored by an exponential affinity kernel
//! against every key, the retrieved label mass is blended with a zero-shot
//! text classifier, and the keys can optionally be refined by gradient
//! descent.
//!
//! ```
//! use tipcache::{build_cache, blended_logits, predict, synth_generate, SynthConfig};
//!
//! let data = synth_generate(&SynthConfig::default())?;
//! let cache = build_cache(&data.train, 1.0, 5.5)?;
//! let logits = blended_logits(&data.test, &cache, &data.clf)?;
//! let pred = predict(&logits)?;
//! assert_eq!(pred.len(), data.test.rows());
//! # Ok::<(), tipcache::Error>(())
//! ```

pub mod baselines;
pub mod cache;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod optim;
pub mod report;
pub mod store;

pub use baselines::{
    clip_adapter_logits, clip_adapter_loss_and_grad, clip_adapter_train_config, train_clip_adapter,
    train_linear_probe, AdapterConfig, AdapterGrad, LinearProbe, MlpAdapter, ProbeStats,
};
pub use cache::{
    build_cache, encode_onehot, prototype_reduce, reduce_many_shots, CacheMeta, CacheModel,
    GroupingPlan, DEFAULT_ALPHA, DEFAULT_BETA,
};
pub use error::{Error, Result};
pub use finetune::{
    cosine_lr, cross_entropy, loss_and_grad, train, LossGrad, Schedule, TrainConfig, TrainTrace,
    Unfreeze,
};
pub use harness::{
    run_ablation, sample_fewshot, sample_fewshot_indices, sample_fewshot_split, sweep,
    top1_accuracy, Ablation, AblationInputs, FewShotSpec, Selection, SweepGrid, SweepOutcome,
};
pub use inference::{
    affinities, blended_logits, cache_logits, mlp_form_logits, predict, zero_shot_logits,
    LogitsBatch,
};
pub use optim::Optimizer;
pub use report::{EvalReport, ReportFormat};
pub use store::{
    load_classifier, load_embeddings, normalize_rows, save_classifier, save_embeddings,
    synth_generate, EmbeddingSet, PromptMode, SynthConfig, SynthData, TextClassifier,
};
