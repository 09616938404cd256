//! Library results checked against the scalar reference implementations.

mod common;

use common::*;
use tipcache::harness::grid_accuracies;
use tipcache::{
    blended_logits, build_cache, clip_adapter_logits, clip_adapter_loss_and_grad, loss_and_grad,
    sweep, train, zero_shot_logits, MlpAdapter, Optimizer, Schedule, Selection, SweepGrid,
    TrainConfig, Unfreeze,
};

const FD_STEP: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-12;
/// Smaller step for the adapter so no probe crosses a ReLU kink.
const ADAPTER_FD_STEP: f64 = 1e-5;

#[test]
fn blended_logits_match_scalar_loops() {
    for seed in 0..25 {
        let inst = random_instance(seed, (2, 8), (1, 6), (4, 24), 9);
        let cache = build_cache(&inst.train, inst.alpha, inst.beta).unwrap();
        let got = blended_logits(&inst.test, &cache, &inst.clf).unwrap();
        let want = blended(
            &rows_of(inst.test.features()),
            &rows_of(cache.keys()),
            &rows_of(cache.values()),
            &rows_of(inst.clf.weights()),
            inst.alpha,
            inst.beta,
        );
        let diff = max_abs_diff(&rows_of(got.values.view()), &want);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn zero_shot_logits_match_scalar_loops() {
    let inst = random_instance(7, (3, 3), (2, 2), (16, 16), 20);
    let got = zero_shot_logits(&inst.test, &inst.clf).unwrap();
    let want = zero_shot(&rows_of(inst.test.features()), &rows_of(inst.clf.weights()));
    assert!(max_abs_diff(&rows_of(got.view()), &want) < 1e-14);
}

#[test]
fn cache_gradients_match_hand_derivation() {
    for seed in 0..20 {
        let inst = random_instance(seed, (2, 5), (1, 4), (3, 10), 7);
        let cache = build_cache(&inst.train, inst.alpha, inst.beta).unwrap();
        let lg = loss_and_grad(&inst.test, &cache, &inst.clf, Unfreeze::BOTH).unwrap();
        let q = rows_of(inst.test.features());
        let (gk, gv) = cache_grads(
            &q,
            inst.test.labels(),
            &rows_of(cache.keys()),
            &rows_of(cache.values()),
            &rows_of(inst.clf.weights()),
            inst.alpha,
            inst.beta,
        );
        let ak = rows_of(lg.grad_keys.as_ref().unwrap().view());
        let av = rows_of(lg.grad_values.as_ref().unwrap().view());
        assert!(max_rel_err(&ak, &gk, REL_FLOOR) < 1e-10, "seed {seed}");
        assert!(max_rel_err(&av, &gv, REL_FLOOR) < 1e-10, "seed {seed}");
    }
}

#[test]
fn cache_gradients_match_finite_differences() {
    for seed in 100..120 {
        let inst = random_instance(seed, (2, 5), (1, 4), (3, 10), 7);
        let cache = build_cache(&inst.train, inst.alpha, inst.beta).unwrap();
        let lg = loss_and_grad(&inst.test, &cache, &inst.clf, Unfreeze::BOTH).unwrap();
        let q = rows_of(inst.test.features());
        let y = inst.test.labels();
        let keys = rows_of(cache.keys());
        let values = rows_of(cache.values());
        let w = rows_of(inst.clf.weights());
        let (a, b) = (inst.alpha, inst.beta);

        let nk = finite_diff(&keys, FD_STEP, |k| cache_loss(&q, y, k, &values, &w, a, b));
        let nv = finite_diff(&values, FD_STEP, |v| cache_loss(&q, y, &keys, v, &w, a, b));
        let ek = max_rel_err(&rows_of(lg.grad_keys.unwrap().view()), &nk, REL_FLOOR);
        let ev = max_rel_err(&rows_of(lg.grad_values.unwrap().view()), &nv, REL_FLOOR);
        assert!(ek < 1e-6, "seed {seed}: keys {ek:e}");
        assert!(ev < 1e-6, "seed {seed}: values {ev:e}");
        let loss = cache_loss(&q, y, &keys, &values, &w, a, b);
        assert!((loss - lg.loss).abs() < 1e-12);
    }
}

fn adapter_params(ad: &MlpAdapter) -> (Mat, Vec<f64>, Mat, Vec<f64>) {
    (
        rows_of(ad.w1.view()),
        ad.b1.to_vec(),
        rows_of(ad.w2.view()),
        ad.b2.to_vec(),
    )
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for seed in 0..20 {
        let inst = random_instance(seed, (2, 5), (1, 3), (4, 12), 8);
        let hidden = (inst.dim / 4).max(1);
        let adapter = MlpAdapter::init(inst.dim, hidden, inst.alpha, seed).unwrap();
        let (loss, grad) = clip_adapter_loss_and_grad(&inst.test, &adapter, &inst.clf).unwrap();
        let q = rows_of(inst.test.features());
        let y = inst.test.labels();
        let w = rows_of(inst.clf.weights());
        let (w1, b1, w2, b2) = adapter_params(&adapter);
        let a = inst.alpha;
        let f = |w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]| {
            mean_xent(&adapter_logits(&q, w1, b1, w2, b2, &w, a), y)
        };
        assert!((f(&w1, &b1, &w2, &b2) - loss).abs() < 1e-12);
        let nearest_kink = q
            .iter()
            .flat_map(|x| w1.iter().zip(&b1).map(move |(r, b)| (dot(x, r) + b).abs()))
            .fold(f64::INFINITY, f64::min);
        assert!(nearest_kink > 2.0 * ADAPTER_FD_STEP, "seed {seed}");

        let h = ADAPTER_FD_STEP;
        let n_w1 = finite_diff(&w1, h, |m| f(m, &b1, &w2, &b2));
        let n_w2 = finite_diff(&w2, h, |m| f(&w1, &b1, m, &b2));
        let n_b1 = finite_diff(&vec![b1.clone()], h, |m| f(&w1, &m[0], &w2, &b2));
        let n_b2 = finite_diff(&vec![b2.clone()], h, |m| f(&w1, &b1, &w2, &m[0]));
        let errs = [
            max_rel_err(&rows_of(grad.w1.view()), &n_w1, REL_FLOOR),
            max_rel_err(&rows_of(grad.w2.view()), &n_w2, REL_FLOOR),
            max_rel_err(&vec![grad.b1.to_vec()], &n_b1, REL_FLOOR),
            max_rel_err(&vec![grad.b2.to_vec()], &n_b2, REL_FLOOR),
        ];
        for (name, e) in ["w1", "w2", "b1", "b2"].iter().zip(errs) {
            assert!(e < 1e-6, "seed {seed}: {name} {e:e}");
        }
    }
}

#[test]
fn adapter_logits_match_scalar_loops() {
    let inst = random_instance(3, (4, 4), (2, 2), (12, 12), 10);
    let adapter = MlpAdapter::init(12, 3, 0.7, 3).unwrap();
    let got = clip_adapter_logits(&inst.test, &adapter, &inst.clf).unwrap();
    let (w1, b1, w2, b2) = adapter_params(&adapter);
    let want = adapter_logits(
        &rows_of(inst.test.features()),
        &w1,
        &b1,
        &w2,
        &b2,
        &rows_of(inst.clf.weights()),
        0.7,
    );
    assert!(max_abs_diff(&rows_of(got.values.view()), &want) < 1e-12);
}

#[test]
fn finetuned_keys_match_scalar_trainer() {
    for seed in 0..4 {
        let inst = random_instance(seed, (3, 5), (3, 6), (6, 12), 4);
        let cache = build_cache(&inst.train, inst.alpha, inst.beta).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 5,
            base_lr: 0.05,
            schedule: Schedule::Cosine,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
            seed: seed + 11,
            ..TrainConfig::default()
        };
        let (tuned, _) = train(&inst.train, &cache, &inst.clf, &cfg).unwrap();
        let want = train_keys_sgd_momentum(
            &rows_of(inst.train.features()),
            inst.train.labels(),
            rows_of(cache.keys()),
            &rows_of(cache.values()),
            &rows_of(inst.clf.weights()),
            inst.alpha,
            inst.beta,
            cfg.epochs,
            cfg.batch_size,
            cfg.base_lr,
            0.9,
            cfg.seed,
        );
        let diff = max_abs_diff(&rows_of(tuned.keys()), &want);
        assert!(diff < 1e-10, "seed {seed}: {diff:e}");
        assert_ne!(tuned.keys(), cache.keys());
    }
}

fn brute_force_best(
    inst: &Instance,
    eval: &tipcache::EmbeddingSet,
    alphas: &[f64],
    betas: &[f64],
) -> (f64, f64, f64) {
    let q = rows_of(eval.features());
    let keys = rows_of(inst.train.features());
    let values = onehot(inst.train.labels(), inst.num_classes);
    let w = rows_of(inst.clf.weights());
    let mut best = (f64::NAN, f64::NAN, -1.0);
    for &a in alphas {
        for &b in betas {
            let logits = blended(&q, &keys, &values, &w, a, b);
            let hits = logits
                .iter()
                .zip(eval.labels())
                .filter(|(row, &l)| argmax(row) == l as usize)
                .count();
            let acc = hits as f64 / q.len() as f64;
            if acc > best.2 {
                best = (a, b, acc);
            }
        }
    }
    best
}

#[test]
fn sweep_matches_brute_force_grid() {
    let alphas = [0.0, 0.5, 1.0, 2.0];
    let betas = [1.0, 3.0, 5.5, 9.0];
    for seed in 0..8 {
        let inst = random_instance(seed, (3, 5), (2, 4), (6, 10), 30);
        let val = random_instance(seed, (3, 5), (2, 4), (6, 10), 30).test;
        let grid = SweepGrid::new(alphas.to_vec(), betas.to_vec(), Selection::HeldoutVal).unwrap();
        let out = sweep(&inst.train, Some(&val), &inst.test, &inst.clf, &grid, seed).unwrap();
        let (a, b, acc) = brute_force_best(&inst, &val, &alphas, &betas);
        assert_eq!((out.best_alpha, out.best_beta), (a, b), "seed {seed}");
        assert_eq!(out.selection_accuracy, acc);

        let cells = grid_accuracies(&inst.train, &val, &inst.clf, &alphas, &betas).unwrap();
        assert_eq!(cells.len(), 16);
    }
}

#[test]
fn bundled_fixture_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/four_rows.emb");
    let set = tipcache::load_embeddings(path).unwrap();
    assert_eq!(set.rows(), 4);
    assert_eq!(set.dim(), 3);
    assert_eq!(set.labels(), &[0, 0, 1, 1]);
    assert_eq!(set.class_names(), &["cat".to_string(), "dog".to_string()]);
    assert!(set.is_normalized());
    assert_eq!(set.features()[[2, 1]], 1.0);
    // Re-encoding what was read must reproduce the file byte for byte.
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(tipcache::store::encode_embeddings(&set), bytes);
}
