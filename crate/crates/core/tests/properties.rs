use ndarray::Array2;
use proptest::prelude::*;
use stata_core::embedding::{read_emb1, write_emb1, Emb1Payload};
use stata_core::zero_shot::softmax_rows;
use stata_core::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_filter("rows must be non-zero", move |v| v.chunks(cols).all(|r| r.iter().any(|x| x.abs() > 1e-3)))
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn problem() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..25, 1usize..5, 1usize..6).prop_flat_map(|(n, k, d)| (matrix(n, d), matrix(k, d)))
}

fn config() -> impl Strategy<Value = SolverConfig> {
    (0.0f64..5.0, any::<bool>(), prop_oneof![Just(AffinityMode::Full), (0usize..4).prop_map(AffinityMode::Knn)], 1.0f64..150.0, 1usize..4)
        .prop_map(|(alpha, hard, affinity, tau, outer_iters)| SolverConfig {
            outer_iters,
            affinity,
            tau,
            anchor: AnchorConfig { alpha, beta_mode: if hard { BetaMode::Hard } else { BetaMode::Soft }, ..Default::default() },
            ..Default::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn solves_stay_on_the_simplex_with_valid_gaussians((f, t) in problem(), cfg in config()) {
        let f = EmbeddingSet::new(f).unwrap();
        let t = AnchorSet::new(t).unwrap();
        let r = solve(&f, &t, &cfg).unwrap();
        for row in r.z.view().rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(r.bank.sigma.iter().all(|&s| s.is_finite() && s >= cfg.anchor.variance_floor));
        prop_assert!(r.bank.mu.iter().all(|m| m.is_finite()));
        prop_assert!(r.iterations_run >= 1 && r.iterations_run <= cfg.outer_iters);
    }

    #[test]
    fn softmax_rows_are_distributions(mut logits in matrix(4, 6).prop_map(|m| m * 800.0)) {
        softmax_rows(&mut logits);
        for row in logits.rows() {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn emb1_round_trips(m in matrix(3, 5), wide in any::<bool>()) {
        let payload = if wide { Emb1Payload::F64(m) } else { Emb1Payload::F32(m.mapv(|v| v as f32)) };
        let mut buf = Vec::new();
        write_emb1(&mut buf, &payload).unwrap();
        prop_assert_eq!(read_emb1(&buf[..]).unwrap(), payload);
    }

    #[test]
    fn truncated_emb1_is_rejected(m in matrix(2, 3), cut in 1usize..8) {
        let mut buf = Vec::new();
        write_emb1(&mut buf, &Emb1Payload::F64(m)).unwrap();
        buf.truncate(buf.len() - cut);
        prop_assert!(read_emb1(&buf[..]).is_err());
    }

    #[test]
    fn stream_keeps_assignments_on_the_simplex((f, t) in problem(), split in 1usize..5) {
        let f = EmbeddingSet::new(f).unwrap();
        let t = AnchorSet::new(t).unwrap();
        let cfg = StreamConfig::default();
        let mut state = stream_init(&t, &f, &cfg).unwrap();
        let idx: Vec<usize> = (0..f.n()).collect();
        for chunk in idx.chunks(split) {
            let z = stata_core::online::stream_step_indices(&mut state, &f, chunk, &cfg).unwrap();
            for row in z.view().rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!((state.stats.mass.sum() - f.n() as f64).abs() < 1e-9);
    }
}
