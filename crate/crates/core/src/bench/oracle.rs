use ndarray::ArrayView1;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, StataError};

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

const MAX_DIM: usize = 8;
const MIN_SAMPLES: usize = 100_000;

/// Estimates `KL(p ‖ q) = E_p[ln p(x) − ln q(x)]` for diagonal Gaussians
/// by sampling from `p`. Independent of the closed form used by the solver.
pub fn mc_kl_oracle<R: Rng + ?Sized>(
    mu_p: ArrayView1<'_, f64>,
    sigma_p: ArrayView1<'_, f64>,
    mu_q: ArrayView1<'_, f64>,
    sigma_q: ArrayView1<'_, f64>,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let d = mu_p.len();
    if sigma_p.len() != d || mu_q.len() != d || sigma_q.len() != d {
        return Err(StataError::shape("oracle parameter lengths differ"));
    }
    if d == 0 || d > MAX_DIM {
        return Err(StataError::config(format!("oracle dimension must be in 1..={MAX_DIM}, got {d}")));
    }
    if n_samples < MIN_SAMPLES {
        return Err(StataError::config(format!("oracle needs at least {MIN_SAMPLES} samples, got {n_samples}")));
    }
    if sigma_p.iter().chain(sigma_q.iter()).any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(StataError::Numerical("degenerate oracle covariance".into()));
    }
    let log_density = |x: &[f64], mu: ArrayView1<'_, f64>, var: ArrayView1<'_, f64>| -> f64 {
        x.iter()
            .zip(mu)
            .zip(var)
            .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v))
            .sum()
    };
    let sd_p: Vec<f64> = sigma_p.iter().map(|v| v.sqrt()).collect();
    let mut x = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            x[j] = mu_p[j] + sd_p[j] * e;
        }
        let r = log_density(&x, mu_p, sigma_p) - log_density(&x, mu_q, sigma_q);
        sum += r;
        sum_sq += r * r;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate { mean, std_error: (var / n).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn unit_shift_is_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let est = mc_kl_oracle(array![0.0].view(), array![1.0].view(), array![1.0].view(), array![1.0].view(), 1_000_000, &mut rng)
            .unwrap();
        assert!((est.mean - 0.5).abs() < 0.005, "{est:?}");
    }

    #[test]
    fn guards() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = array![0.0];
        let one = array![1.0];
        assert!(mc_kl_oracle(a.view(), one.view(), a.view(), one.view(), 10, &mut rng).is_err());
        assert!(mc_kl_oracle(a.view(), array![0.0].view(), a.view(), one.view(), MIN_SAMPLES, &mut rng).is_err());
        let big = ndarray::Array1::<f64>::ones(9);
        assert!(mc_kl_oracle(big.view(), big.view(), big.view(), big.view(), MIN_SAMPLES, &mut rng).is_err());
    }
}
