//! Matrix products through the `gemm` crate, which dispatches to AVX-512
//! kernels at runtime where available.

use ndarray::{Array2, ArrayView2, LinalgScalar};

/// `a · b` for any strides.
pub(crate) fn matmul<T: LinalgScalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, &mut out);
    out
}

/// `out = a · b`, reusing a standard-layout `out` of the right shape.
pub(crate) fn matmul_into<T: LinalgScalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, out: &mut Array2<T>) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.dim(), (m, n), "output shape");
    assert!(out.is_standard_layout(), "output layout");
    if m == 0 || n == 0 || k == 0 {
        out.fill(T::zero());
        return;
    }
    let (ars, acs) = (a.strides()[0], a.strides()[1]);
    let (brs, bcs) = (b.strides()[0], b.strides()[1]);
    // SAFETY: every pointer/stride pair describes a live ndarray view of the
    // stated shape, and `out` is a standard-layout m×n array.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            out.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            acs,
            ars,
            b.as_ptr(),
            bcs,
            brs,
            T::zero(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_ndarray_for_transposed_and_sliced_operands() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Array2<f64> = Array2::from_shape_fn((37, 19), |_| rng.random_range(-1.0..1.0));
        let b: Array2<f64> = Array2::from_shape_fn((23, 19), |_| rng.random_range(-1.0..1.0));
        let got = matmul(a.view(), b.t());
        let want = a.dot(&b.t());
        assert!(got.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-13));
        let s = a.slice(ndarray::s![3..30;2, 1..]);
        let got = matmul(s.t(), s);
        assert!(got.iter().zip(s.t().dot(&s).iter()).all(|(x, y)| (x - y).abs() < 1e-13));
        let af = a.mapv(|v| v as f32);
        let got = matmul(af.view(), af.t());
        assert!(got.iter().zip(af.dot(&af.t()).iter()).all(|(x, y)| (x - y).abs() < 1e-5));
        assert_eq!(matmul(Array2::<f64>::zeros((4, 0)).view(), Array2::zeros((0, 3)).view()), Array2::<f64>::zeros((4, 3)));
    }
}
