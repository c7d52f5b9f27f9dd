use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stata_core::*;

fn data(seed: u64, n: usize, k: usize, d: usize) -> (EmbeddingSet, AnchorSet) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let anchors = Array2::from_shape_fn((k, d), |_| r.random::<f64>() - 0.5);
    let f = Array2::from_shape_fn((n, d), |(i, j)| anchors[[i % k, j]] + 0.2 * (r.random::<f64>() - 0.5));
    (EmbeddingSet::new(f).unwrap(), AnchorSet::new(anchors).unwrap())
}

fn batch(f: &EmbeddingSet, lo: usize, hi: usize) -> EmbeddingSet {
    EmbeddingSet::new(f.view().slice(s![lo..hi, ..]).to_owned()).unwrap()
}

#[test]
fn init_starts_at_the_anchor_with_empty_counters() {
    let (f, t) = data(1, 40, 4, 6);
    let state = stream_init(&t, &f, &StreamConfig::default()).unwrap();
    assert_eq!(state.batches_seen(), 0);
    assert_eq!(state.bank, GaussianBank::from_anchor(state.anchor()));
    assert!(state.stats.mass.iter().chain(state.stats.count.iter()).all(|&c| c == 0.0));
}

#[test]
fn steps_accumulate_masses_and_keep_a_fixed_footprint() {
    let (f, t) = data(2, 200, 5, 8);
    let cfg = StreamConfig::default();
    let mut state = stream_init(&t, &batch(&f, 0, 32), &cfg).unwrap();
    let footprint = state.footprint_bytes();
    assert_eq!(footprint, (4 * 5 * 8 + 2 * 5) * 8);
    let mut seen = 0;
    for lo in (0..200).step_by(32) {
        let hi = (lo + 32).min(200);
        let z = stream_step(&mut state, &batch(&f, lo, hi), &cfg).unwrap();
        assert_eq!(z.n(), hi - lo);
        seen += hi - lo;
        assert!((state.stats.mass.sum() - seen as f64).abs() < 1e-9);
        assert_eq!(state.stats.count.sum(), seen as f64);
        assert_eq!(state.footprint_bytes(), footprint);
    }
    assert_eq!(state.batches_seen(), 7);
}

#[test]
fn stream_learns_the_clusters() {
    let (f, t) = data(3, 400, 4, 8);
    let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let cfg = StreamConfig::default();
    let mut state = stream_init(&t, &batch(&f, 0, 50), &cfg).unwrap();
    let mut pred = Vec::new();
    for lo in (0..400).step_by(50) {
        pred.extend(stream_step(&mut state, &batch(&f, lo, lo + 50), &cfg).unwrap().argmax());
    }
    assert!(stata_core::zero_shot::accuracy(&pred, &labels) > 0.95);
}

#[test]
fn a_huge_alpha_pins_the_stream_to_the_anchor() {
    let (f, t) = data(4, 100, 3, 5);
    let mut cfg = StreamConfig::default();
    cfg.solver.anchor.alpha = 1e12;
    let mut state = stream_init(&t, &f, &cfg).unwrap();
    stream_step(&mut state, &f, &cfg).unwrap();
    let anchor = state.anchor();
    for (m, a) in state.bank.mu.iter().zip(anchor.mu_prime().iter()) {
        assert!((m - a).abs() < 1e-9);
    }
}

#[test]
fn accumulator_over_splits_equals_one_pass() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (n, k, d) = (90, 4, 3);
    let f = Array2::from_shape_fn((n, d), |_| r.random::<f64>());
    let mut z = Array2::from_shape_fn((n, k), |_| r.random::<f64>());
    // Class 3 never receives mass.
    z.column_mut(3).fill(0.0);
    for mut row in z.rows_mut() {
        let sum = row.sum();
        row /= sum;
    }
    let mu = Array2::from_shape_fn((k, d), |_| r.random::<f64>());
    let mut whole = ClassAccumulator::new(k, d);
    whole.fold(f.view(), z.view(), mu.view()).unwrap();
    let mut parts = ClassAccumulator::new(k, d);
    for (lo, hi) in [(0, 1), (1, 40), (40, 40), (40, 90)] {
        parts.fold(f.slice(s![lo..hi, ..]), z.slice(s![lo..hi, ..]), mu.view()).unwrap();
    }
    for (a, b) in whole.v.iter().chain(whole.t.iter()).zip(parts.v.iter().chain(parts.t.iter())) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert_eq!(whole.count, parts.count);
    assert_eq!(parts.mass[3], 0.0);
    assert!(parts.v.row(3).iter().all(|&v| v == 0.0));
}

#[test]
fn mismatched_batches_are_rejected() {
    let (f, t) = data(6, 20, 2, 4);
    let cfg = StreamConfig::default();
    let mut state = stream_init(&t, &f, &cfg).unwrap();
    let wrong = EmbeddingSet::new(Array2::ones((5, 3))).unwrap();
    assert!(stream_step(&mut state, &wrong, &cfg).is_err());
    assert!(stream_init(&t, &f, &StreamConfig { batch_passes: 0, ..cfg }).is_err());
}
