//! Shared fixtures for the criterion benchmarks.

use tipcache::{build_cache, synth_generate, CacheModel, SynthConfig, SynthData};

/// A synthetic task and its training-free cache.
pub fn fixture(
    num_classes: usize,
    shots: usize,
    dim: usize,
    test_per_class: usize,
) -> (SynthData, CacheModel) {
    let data = synth_generate(&SynthConfig {
        num_classes,
        shots,
        dim,
        test_per_class,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config");
    let cache = build_cache(&data.train, 1.0, 5.5).expect("balanced train set");
    (data, cache)
}
