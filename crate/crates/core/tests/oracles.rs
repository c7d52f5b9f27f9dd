use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stata_core::gmm::{self, AnchorDistribution};
use stata_core::solver::{build_affinity, objective_breakdown, z_update_sweep};
use stata_core::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingSet {
    EmbeddingSet::new(Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)).unwrap()
}

fn random_z(rng: &mut ChaCha8Rng, n: usize, k: usize) -> AssignmentMatrix {
    let mut z = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() + 1e-3);
    for mut row in z.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    AssignmentMatrix::new(z).unwrap()
}

fn random_bank(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianBank {
    GaussianBank {
        mu: Array2::from_shape_fn((k, d), |_| rng.random::<f64>() - 0.5),
        sigma: Array2::from_shape_fn((k, d), |_| 0.05 + rng.random::<f64>()),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn zero_shot_is_a_tempered_softmax_of_dot_products() {
    let mut r = rng(1);
    let f = random_features(&mut r, 20, 6);
    let t = AnchorSet::new(Array2::from_shape_fn((4, 6), |_| r.random::<f64>() - 0.5)).unwrap();
    let cfg = ZeroShotConfig { tau: 7.5 };
    let y = zero_shot_predict(&f, &t, &cfg).unwrap();
    for i in 0..20 {
        let logits: Vec<f64> = (0..4).map(|k| 7.5 * (0..6).map(|j| f.view()[[i, j]] * t.view()[[k, j]]).sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..4 {
            assert!(close(y.view()[[i, k]], logits[k].exp() / z, 1e-12));
        }
    }
}

#[test]
fn log_likelihood_forms_agree_with_the_gaussian_density() {
    let mut r = rng(2);
    let f = random_features(&mut r, 30, 5);
    let bank = random_bank(&mut r, 3, 5);
    let direct = gmm::log_likelihoods(&f, &bank).unwrap();
    let design = gmm::LikelihoodDesign::new(f.view()).log_likelihoods(&bank);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for i in 0..30 {
        for k in 0..3 {
            // Log density of a diagonal Gaussian, dimension by dimension.
            let density: f64 = (0..5)
                .map(|j| {
                    let (x, m, s) = (f.view()[[i, j]], bank.mu[[k, j]], bank.sigma[[k, j]]);
                    -half_log_2pi - 0.5 * s.ln() - (x - m).powi(2) / (2.0 * s)
                })
                .sum();
            let want = density + 5.0 * half_log_2pi;
            assert!(close(direct[[i, k]], want, 1e-12));
            assert!((design[[i, k]] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn kl_term_matches_the_textbook_formula() {
    let mut r = rng(3);
    let bank = random_bank(&mut r, 4, 3);
    let sigma_prime = Array1::from_shape_fn(3, |_| 0.1 + r.random::<f64>());
    let mu_prime = Array2::from_shape_fn((4, 3), |_| r.random::<f64>());
    let anchor = AnchorDistribution::new(mu_prime.clone(), sigma_prime.clone(), 1e-12).unwrap();
    let mut want = 0.0;
    for k in 0..4 {
        for j in 0..3 {
            let (s0, s1) = (sigma_prime[j], bank.sigma[[k, j]]);
            let diff = bank.mu[[k, j]] - mu_prime[[k, j]];
            want += 0.5 * (s0 / s1 + diff * diff / s1 - 1.0 + (s1 / s0).ln());
        }
    }
    assert!(close(gmm::kl_anchor_term(&bank, &anchor).unwrap(), want, 1e-12));
    let at_anchor = GaussianBank::from_anchor(&anchor);
    assert_eq!(gmm::kl_anchor_term(&at_anchor, &anchor).unwrap(), 0.0);
}

#[test]
fn parameter_update_matches_brute_force_blend() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (n, d, k) = (r.random_range(1..40), r.random_range(1..6), r.random_range(1..5));
        let f = random_features(&mut r, n, d);
        let z = random_z(&mut r, n, k);
        let t = AnchorSet::new(Array2::from_shape_fn((k, d), |_| r.random::<f64>())).unwrap();
        let alpha = r.random::<f64>() * 3.0;
        let cfg = AnchorConfig { alpha, beta_mode: BetaMode::Soft, ..Default::default() };
        let anchor = gmm::init_anchor(&f, &t, &z, &cfg).unwrap();
        let beta = gmm::compute_beta(&z, &cfg);
        let mut bank = GaussianBank::from_anchor(&anchor);
        gmm::update_parameters(&f, &z, &anchor, beta.view(), &mut bank).unwrap();

        for c in 0..k {
            let mass: f64 = (0..n).map(|i| z.view()[[i, c]]).sum();
            let b = mass / (mass + alpha);
            assert!(close(beta[c], b, 1e-15));
            for j in 0..d {
                let v = (0..n).map(|i| z.view()[[i, c]] * f.view()[[i, j]]).sum::<f64>() / mass;
                let mu = b * v + (1.0 - b) * t.view()[[c, j]];
                let tt = (0..n).map(|i| z.view()[[i, c]] * (f.view()[[i, j]] - mu).powi(2)).sum::<f64>() / mass;
                let gap = t.view()[[c, j]] - mu;
                let sigma = (b * tt + (1.0 - b) * (anchor.sigma_prime()[j] + gap * gap)).max(anchor.variance_floor());
                assert!(close(bank.mu[[c, j]], mu, 1e-11), "seed {seed}");
                assert!(close(bank.sigma[[c, j]], sigma, 1e-11), "seed {seed}");
            }
        }
    }
}

#[test]
fn anchor_covariance_is_the_zero_shot_weighted_spread_about_the_text_means() {
    let mut r = rng(4);
    let f = random_features(&mut r, 25, 4);
    let t = AnchorSet::new(Array2::from_shape_fn((3, 4), |_| r.random::<f64>())).unwrap();
    let y = zero_shot_predict(&f, &t, &ZeroShotConfig::default()).unwrap();
    let a = gmm::init_anchor(&f, &t, &y, &AnchorConfig::default()).unwrap();
    assert_eq!(a.mu_prime(), t.view());
    for j in 0..4 {
        let num: f64 = (0..25).flat_map(|i| (0..3).map(move |k| (i, k))).map(|(i, k)| y.view()[[i, k]] * (f.view()[[i, j]] - t.view()[[k, j]]).powi(2)).sum();
        assert!(close(a.sigma_prime()[j], num / 25.0, 1e-12));
    }
}

#[test]
fn z_sweep_matches_brute_force_update() {
    let mut r = rng(5);
    let (n, d, k) = (15, 3, 4);
    let f = random_features(&mut r, n, d);
    let z = random_z(&mut r, n, k);
    let yhat = random_z(&mut r, n, k);
    let bank = random_bank(&mut r, k, d);
    let graph = build_affinity(&f, AffinityMode::Full).unwrap();
    let ll = gmm::log_likelihoods(&f, &bank).unwrap();
    let next = z_update_sweep(&z, &yhat, ll.view(), &graph).unwrap();
    let fv = f.view();
    for i in 0..n {
        let mut w = vec![0.0; k];
        for c in 0..k {
            let mut e = ll[[i, c]];
            for j in (0..n).filter(|&j| j != i) {
                let a: f64 = (0..d).map(|x| fv[[i, x]] * fv[[j, x]]).sum();
                e += a * z.view()[[j, c]];
            }
            w[c] = yhat.view()[[i, c]] * e.exp();
        }
        let s: f64 = w.iter().sum();
        for c in 0..k {
            assert!(close(next.view()[[i, c]], w[c] / s, 1e-10));
        }
    }
}

#[test]
fn objective_parts_match_brute_force() {
    let mut r = rng(6);
    let (n, d, k) = (12, 3, 3);
    let f = random_features(&mut r, n, d);
    let z = random_z(&mut r, n, k);
    let yhat = random_z(&mut r, n, k);
    let t = AnchorSet::new(Array2::from_shape_fn((k, d), |_| r.random::<f64>())).unwrap();
    let anchor = gmm::init_anchor(&f, &t, &yhat, &AnchorConfig::default()).unwrap();
    let bank = random_bank(&mut r, k, d);
    let graph = build_affinity(&f, AffinityMode::Full).unwrap();
    let b = objective_breakdown(&z, &f, &bank, &anchor, &yhat, &graph, 2.0).unwrap();
    let ll = gmm::log_likelihoods(&f, &bank).unwrap();
    let (zv, yv, fv) = (z.view(), yhat.view(), f.view());
    let fit: f64 = -(0..n).flat_map(|i| (0..k).map(move |c| (i, c))).map(|(i, c)| zv[[i, c]] * ll[[i, c]]).sum::<f64>();
    let kl: f64 = (0..n).flat_map(|i| (0..k).map(move |c| (i, c))).map(|(i, c)| zv[[i, c]] * (zv[[i, c]] / yv[[i, c]]).ln()).sum();
    let mut lap = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let w: f64 = (0..d).map(|x| fv[[i, x]] * fv[[j, x]]).sum();
            lap -= 0.5 * w * (0..k).map(|c| zv[[i, c]] * zv[[j, c]]).sum::<f64>();
        }
    }
    let anchor_kl = 2.0 * gmm::kl_anchor_term(&bank, &anchor).unwrap();
    assert!(close(b.data_fit, fit, 1e-12));
    assert!(close(b.text_kl, kl, 1e-12));
    assert!(close(b.laplacian, lap, 1e-12));
    assert!(close(b.anchor_kl, anchor_kl, 1e-12));
}

#[test]
fn knn_graph_matches_brute_force_neighbours() {
    let mut r = rng(7);
    let mut data = Array2::from_shape_fn((300, 9), |_| r.random::<f64>() - 0.5);
    // Duplicates create exact ties, broken toward the lower index.
    for i in 0..20 {
        let src = data.row(i).to_owned();
        data.row_mut(150 + i).assign(&src);
    }
    let f = EmbeddingSet::new(data).unwrap();
    let unit = f.view();
    for row in unit.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-14);
    }
    let k = 5;
    let g = build_affinity(&f, AffinityMode::Knn(k)).unwrap();
    for i in 0..300 {
        let mut sims: Vec<(f64, usize)> = (0..300).filter(|&j| j != i).map(|j| (unit.row(i).dot(&unit.row(j)), j)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let got: Vec<usize> = g.neighbors(i).map(|(j, _)| j).collect();
        let want: Vec<usize> = sims[..k].iter().map(|s| s.1).collect();
        assert_eq!(got, want, "row {i}");
        for ((_, w), s) in g.neighbors(i).zip(&sims) {
            assert!(close(w, s.0, 1e-12));
        }
    }
}

