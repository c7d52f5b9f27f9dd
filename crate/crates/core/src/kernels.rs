//! Dense kernels that dominate runtime at N=50k, K=1k, d=512.
//!
//! The expansion `Σz f² − 2μΣz f + μ²Σz` cancels catastrophically when a
//! class is tight, so weighted squared deviations are summed directly.
//! Large dense problems take the expansion through GEMM instead, about the
//! global feature mean, and any class whose cancellation would cost more
//! than two digits is recomputed directly. Assignment matrices are often
//! mostly exact zeros after the first sweep, so sparse row chunks skip
//! them; dense chunks use a register-blocked path instead.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

/// `out[k, j] = Σ_i z[i, k] (f[i, j] − c[k, j])²`.
pub(crate) fn weighted_sq_dev(f: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(c.dim(), (z.ncols(), f.ncols()));
    let c = c.as_standard_layout();
    run::<true>(f, z, c.as_slice().expect("standard layout"))
}

/// Below this many multiply-adds the direct kernel is fast enough.
const MOMENT_MIN_WORK: usize = 1 << 24;
/// The moment route is used for a class only while the centered second
/// moment stays within this factor of the variance.
const MOMENT_MAX_RATIO: f64 = 100.0;

/// [`weighted_sq_dev`] given `mass = Σ_i z[i, ·]` and `sums = zᵀ f`.
pub(crate) fn weighted_sq_dev_with_sums(
    f: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    c: ArrayView2<'_, f64>,
    mass: ArrayView1<'_, f64>,
    sums: ArrayView2<'_, f64>,
) -> Array2<f64> {
    sq_dev_by_moments(f, z, c, mass, sums, MOMENT_MIN_WORK)
}

fn sq_dev_by_moments(
    f: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    c: ArrayView2<'_, f64>,
    mass: ArrayView1<'_, f64>,
    sums: ArrayView2<'_, f64>,
    min_work: usize,
) -> Array2<f64> {
    let (n, d) = f.dim();
    let k = z.ncols();
    assert_eq!((c.dim(), sums.dim(), mass.len()), ((k, d), (k, d), k));
    let nnz = z.iter().filter(|&&w| w != 0.0).count();
    if n == 0 || n * k * d < min_work || 4 * nnz < z.len() {
        return weighted_sq_dev(f, z, c);
    }
    let m = f.mean_axis(Axis(0)).expect("non-empty");
    let centered_sq = (&f - &m).mapv_into(|v| v * v);
    let s2 = crate::linalg::matmul(z.t(), centered_sq.view());
    let mut out = Array2::<f64>::zeros((k, d));
    let mut redo = Vec::new();
    for r in 0..k {
        let w = mass[r];
        if w == 0.0 {
            continue;
        }
        if !(w >= 1e-200) {
            redo.push(r);
            continue;
        }
        let mut row = out.row_mut(r);
        for j in 0..d {
            let mean = sums[[r, j]] / w;
            let shifted = mean - m[j];
            let second = s2[[r, j]] / w;
            let var = second - shifted * shifted;
            // Rounding in `var` scales with these magnitudes.
            let scale = second + shifted.abs() * (shifted.abs() + m[j].abs());
            if !(var * MOMENT_MAX_RATIO >= scale) {
                redo.push(r);
                break;
            }
            let gap = mean - c[[r, j]];
            row[j] = w * (var + gap * gap);
        }
    }
    if !redo.is_empty() {
        let direct = weighted_sq_dev(f, z.select(Axis(1), &redo).view(), c.select(Axis(0), &redo).view());
        for (i, &r) in redo.iter().enumerate() {
            out.row_mut(r).assign(&direct.row(i));
        }
    }
    out
}

/// `out[k, j] = Σ_i z[i, k] f[i, j]`.
pub(crate) fn weighted_sum(f: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
    let nnz = z.iter().filter(|&&w| w != 0.0).count();
    if 4 * nnz >= z.len() {
        return crate::linalg::matmul(z.t(), f);
    }
    run::<false>(f, z, &[])
}

fn run<const SQ: bool>(f: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, c: &[f64]) -> Array2<f64> {
    let (n, d) = f.dim();
    let k = z.ncols();
    assert_eq!(z.nrows(), n);
    let f = f.as_standard_layout();
    let z = z.as_standard_layout();
    let mut out = Array2::<f64>::zeros((k, d));
    let args = Args {
        f: f.as_slice().expect("standard layout"),
        z: z.as_slice().expect("standard layout"),
        c,
        n,
        d,
        k,
    };
    let out_slice = out.as_slice_mut().expect("fresh array");

    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { body_avx512::<SQ>(&args, out_slice) };
            return out;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the features were detected at runtime.
            unsafe { body_avx2::<SQ>(&args, out_slice) };
            return out;
        }
    }
    body::<false, SQ, false>(&args, out_slice);
    out
}

struct Args<'a> {
    f: &'a [f64],
    z: &'a [f64],
    c: &'a [f64],
    n: usize,
    d: usize,
    k: usize,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn body_avx512<const SQ: bool>(a: &Args<'_>, out: &mut [f64]) {
    body::<true, SQ, true>(a, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn body_avx2<const SQ: bool>(a: &Args<'_>, out: &mut [f64]) {
    body::<true, SQ, false>(a, out)
}

/// Feature columns held in registers per pass.
const STRIP: usize = 32;
/// Rows whose features stay cache-resident while every class visits them.
const ROW_CHUNK: usize = 128;
/// Classes sharing each feature load in dense chunks.
const CLASS_BLOCK: usize = 4;
/// Feature columns per class held in registers in dense chunks.
const DENSE_STRIP: usize = 16;
/// The same two constants for the explicit AVX-512 block.
const WIDE_CLASSES: usize = 6;
const WIDE_STRIP: usize = 16;

#[inline(always)]
fn term<const FMA: bool, const SQ: bool>(acc: f64, w: f64, x: f64, m: f64) -> f64 {
    if SQ {
        let t = x - m;
        if FMA {
            (w * t).mul_add(t, acc)
        } else {
            acc + w * t * t
        }
    } else if FMA {
        w.mul_add(x, acc)
    } else {
        acc + w * x
    }
}

// For each row chunk the nonzero weights are bucketed per class, then each
// class sweeps its rows one register strip at a time. Every output element
// accumulates over rows in increasing order.
#[inline(always)]
fn body<const FMA: bool, const SQ: bool, const WIDE: bool>(a: &Args<'_>, out: &mut [f64]) {
    let Args { f, z, c, n, d, k } = *a;
    if d == 0 || k == 0 {
        return;
    }
    let mut bucket_rows = vec![0u32; k * ROW_CHUNK];
    let mut bucket_w = vec![0.0f64; k * ROW_CHUNK];
    let mut counts = vec![0usize; k];
    let zero_strip = [0.0f64; STRIP];

    for r0 in (0..n).step_by(ROW_CHUNK) {
        let r1 = (r0 + ROW_CHUNK).min(n);
        let nnz = z[r0 * k..r1 * k].iter().filter(|&&w| w != 0.0).count();
        if 4 * nnz >= (r1 - r0) * k {
            dense_chunk::<FMA, SQ, WIDE>(a, out, r0, r1);
            continue;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for i in r0..r1 {
            for (kk, &w) in z[i * k..(i + 1) * k].iter().enumerate() {
                if w != 0.0 {
                    let slot = kk * ROW_CHUNK + counts[kk];
                    bucket_rows[slot] = i as u32;
                    bucket_w[slot] = w;
                    counts[kk] += 1;
                }
            }
        }
        for kk in 0..k {
            let m = counts[kk];
            if m == 0 {
                continue;
            }
            let rows = &bucket_rows[kk * ROW_CHUNK..kk * ROW_CHUNK + m];
            let ws = &bucket_w[kk * ROW_CHUNK..kk * ROW_CHUNK + m];
            let acc_row = &mut out[kk * d..(kk + 1) * d];
            let c_row = if SQ { &c[kk * d..(kk + 1) * d] } else { &[][..] };

            let mut j0 = 0;
            while j0 + STRIP <= d {
                let mut acc = [0.0f64; STRIP];
                acc.copy_from_slice(&acc_row[j0..j0 + STRIP]);
                let cc: &[f64; STRIP] =
                    if SQ { c_row[j0..j0 + STRIP].try_into().expect("strip") } else { &zero_strip };
                for (&i, &w) in rows.iter().zip(ws) {
                    let start = i as usize * d + j0;
                    let fi: &[f64; STRIP] = f[start..start + STRIP].try_into().expect("strip");
                    for l in 0..STRIP {
                        acc[l] = term::<FMA, SQ>(acc[l], w, fi[l], cc[l]);
                    }
                }
                acc_row[j0..j0 + STRIP].copy_from_slice(&acc);
                j0 += STRIP;
            }
            if j0 < d {
                for (&i, &w) in rows.iter().zip(ws) {
                    let fi = &f[i as usize * d..(i as usize + 1) * d];
                    for j in j0..d {
                        let m = if SQ { c_row[j] } else { 0.0 };
                        acc_row[j] = term::<FMA, SQ>(acc_row[j], w, fi[j], m);
                    }
                }
            }
        }
    }
}

/// All weights of rows `r0..r1`, zeros included, several classes at a time.
#[inline(always)]
fn dense_chunk<const FMA: bool, const SQ: bool, const WIDE: bool>(a: &Args<'_>, out: &mut [f64], r0: usize, r1: usize) {
    let (d, k) = (a.d, a.k);
    let mut k0 = 0;
    #[cfg(target_arch = "x86_64")]
    if WIDE && SQ {
        let d_blocked = d - d % WIDE_STRIP;
        while k0 + WIDE_CLASSES <= k {
            for j0 in (0..d_blocked).step_by(WIDE_STRIP) {
                // SAFETY: `WIDE` is only set on the AVX-512 entry point, and
                // the block lies inside every slice (checked by the bounds of
                // the loops above).
                unsafe { wide_sq_block(a, out, r0, r1, k0, j0) };
            }
            for kk in k0..k0 + WIDE_CLASSES {
                dense_columns::<FMA, SQ>(a, out, r0, r1, kk, d_blocked);
            }
            k0 += WIDE_CLASSES;
        }
    }
    let d_blocked = d - d % DENSE_STRIP;
    while k0 + CLASS_BLOCK <= k {
        for j0 in (0..d_blocked).step_by(DENSE_STRIP) {
            portable_block::<FMA, SQ>(a, out, r0, r1, k0, j0);
        }
        for kk in k0..k0 + CLASS_BLOCK {
            dense_columns::<FMA, SQ>(a, out, r0, r1, kk, d_blocked);
        }
        k0 += CLASS_BLOCK;
    }
    for kk in k0..k {
        dense_columns::<FMA, SQ>(a, out, r0, r1, kk, 0);
    }
}

#[inline(always)]
fn portable_block<const FMA: bool, const SQ: bool>(
    a: &Args<'_>,
    out: &mut [f64],
    r0: usize,
    r1: usize,
    k0: usize,
    j0: usize,
) {
    let Args { f, z, c, d, k, .. } = *a;
    let mut acc = [[0.0f64; DENSE_STRIP]; CLASS_BLOCK];
    let mut cc = [[0.0f64; DENSE_STRIP]; CLASS_BLOCK];
    for b in 0..CLASS_BLOCK {
        let at = (k0 + b) * d + j0;
        acc[b].copy_from_slice(&out[at..at + DENSE_STRIP]);
        if SQ {
            cc[b].copy_from_slice(&c[at..at + DENSE_STRIP]);
        }
    }
    for i in r0..r1 {
        let w: &[f64; CLASS_BLOCK] = z[i * k + k0..i * k + k0 + CLASS_BLOCK].try_into().expect("block");
        let fi: &[f64; DENSE_STRIP] = f[i * d + j0..i * d + j0 + DENSE_STRIP].try_into().expect("strip");
        for b in 0..CLASS_BLOCK {
            for l in 0..DENSE_STRIP {
                acc[b][l] = term::<FMA, SQ>(acc[b][l], w[b], fi[l], cc[b][l]);
            }
        }
    }
    for (b, row) in acc.iter().enumerate() {
        let at = (k0 + b) * d + j0;
        out[at..at + DENSE_STRIP].copy_from_slice(row);
    }
}

/// `portable_block` for squared deviations with explicit AVX-512: six
/// classes by sixteen columns of accumulators stay in twelve registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn wide_sq_block(a: &Args<'_>, out: &mut [f64], r0: usize, r1: usize, k0: usize, j0: usize) {
    use std::arch::x86_64::*;
    let Args { f, z, c, d, k, .. } = *a;
    assert!(k0 + WIDE_CLASSES <= k && j0 + WIDE_STRIP <= d && r1 <= a.n);
    assert!(out.len() >= k * d && c.len() >= k * d);
    let (fp, zp, cp, op) = (f.as_ptr(), z.as_ptr(), c.as_ptr(), out.as_mut_ptr());
    // SAFETY: the assertions above keep every access below in bounds.
    unsafe {
        let mut lo = [_mm512_setzero_pd(); WIDE_CLASSES];
        let mut hi = [_mm512_setzero_pd(); WIDE_CLASSES];
        let mut clo = [_mm512_setzero_pd(); WIDE_CLASSES];
        let mut chi = [_mm512_setzero_pd(); WIDE_CLASSES];
        for b in 0..WIDE_CLASSES {
            let at = (k0 + b) * d + j0;
            lo[b] = _mm512_loadu_pd(op.add(at));
            hi[b] = _mm512_loadu_pd(op.add(at + 8));
            clo[b] = _mm512_loadu_pd(cp.add(at));
            chi[b] = _mm512_loadu_pd(cp.add(at + 8));
        }
        for i in r0..r1 {
            let flo = _mm512_loadu_pd(fp.add(i * d + j0));
            let fhi = _mm512_loadu_pd(fp.add(i * d + j0 + 8));
            for b in 0..WIDE_CLASSES {
                let w = _mm512_set1_pd(*zp.add(i * k + k0 + b));
                let tlo = _mm512_sub_pd(flo, clo[b]);
                let thi = _mm512_sub_pd(fhi, chi[b]);
                lo[b] = _mm512_fmadd_pd(_mm512_mul_pd(w, tlo), tlo, lo[b]);
                hi[b] = _mm512_fmadd_pd(_mm512_mul_pd(w, thi), thi, hi[b]);
            }
        }
        for b in 0..WIDE_CLASSES {
            let at = (k0 + b) * d + j0;
            _mm512_storeu_pd(op.add(at), lo[b]);
            _mm512_storeu_pd(op.add(at + 8), hi[b]);
        }
    }
}

/// Columns `j0..d` of class `kk` over rows `r0..r1`.
#[inline(always)]
fn dense_columns<const FMA: bool, const SQ: bool>(
    a: &Args<'_>,
    out: &mut [f64],
    r0: usize,
    r1: usize,
    kk: usize,
    j0: usize,
) {
    let Args { f, z, c, d, k, .. } = *a;
    if j0 == d {
        return;
    }
    let acc_row = &mut out[kk * d + j0..(kk + 1) * d];
    for i in r0..r1 {
        let w = z[i * k + kk];
        if w == 0.0 {
            continue;
        }
        let fi = &f[i * d + j0..(i + 1) * d];
        for (l, acc) in acc_row.iter_mut().enumerate() {
            let m = if SQ { c[kk * d + j0 + l] } else { 0.0 };
            *acc = term::<FMA, SQ>(*acc, w, fi[l], m);
        }
    }
}

/// `out = base + Σ w·row` over `terms`, added in order; returns the largest
/// entry of `out`.
pub(crate) fn combine_rows(out: &mut [f64], base: &[f64], terms: &[(f64, &[f64])]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { combine_rows_avx512(out, base, terms) };
        }
    }
    combine_rows_body(out, base, terms)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn combine_rows_avx512(out: &mut [f64], base: &[f64], terms: &[(f64, &[f64])]) -> f64 {
    combine_rows_body(out, base, terms)
}

#[inline(always)]
fn combine_rows_body(out: &mut [f64], base: &[f64], terms: &[(f64, &[f64])]) -> f64 {
    let k = out.len();
    let base = &base[..k];
    match terms.split_first() {
        None => out.copy_from_slice(base),
        Some((&(w, r), rest)) => {
            let r = &r[..k];
            for l in 0..k {
                out[l] = base[l] + w * r[l];
            }
            for &(w, r) in rest {
                let r = &r[..k];
                for l in 0..k {
                    out[l] += w * r[l];
                }
            }
        }
    }
    const L: usize = 8;
    let mut m = [f64::NEG_INFINITY; L];
    // f64::max ignores NaN; track it so callers see a non-finite row.
    let mut nan = [false; L];
    let mut chunks = out.chunks_exact(L);
    for c in &mut chunks {
        for l in 0..L {
            m[l] = m[l].max(c[l]);
            nan[l] |= c[l].is_nan();
        }
    }
    for &x in chunks.remainder() {
        m[0] = m[0].max(x);
        nan[0] |= x.is_nan();
    }
    if nan.iter().any(|&b| b) {
        return f64::NAN;
    }
    m.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Replaces `v` by `exp(v − max)` normalized to sum to one, where `max` is
/// the largest entry. Exponents below −708, whose exponential is subnormal,
/// give exactly zero.
pub(crate) fn exp_normalize(v: &mut [f64], max: f64) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { exp_normalize_avx512(v, max) };
            return;
        }
    }
    exp_normalize_body(v, max)
}

/// Same arithmetic as `exp_normalize_body`, eight lanes at a time; the
/// results are bitwise identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq")]
unsafe fn exp_normalize_avx512(v: &mut [f64], max: f64) {
    use std::arch::x86_64::*;
    const L: usize = 8;
    let n = v.len() / L * L;
    let ptr = v.as_mut_ptr();
    let vmax = _mm512_set1_pd(max);
    let lo = _mm512_set1_pd(EXP_NORMAL_MIN);
    let mut acc = _mm512_setzero_pd();
    let mut i = 0;
    while i < n {
        // SAFETY: i + 8 ≤ n ≤ v.len().
        let x = unsafe { _mm512_loadu_pd(ptr.add(i)) };
        let t = _mm512_sub_pd(x, vmax);
        let keep = _mm512_cmp_pd_mask::<_CMP_GE_OQ>(t, lo);
        let e = _mm512_maskz_mov_pd(keep, exp_nonpositive_x8(_mm512_max_pd(t, lo)));
        unsafe { _mm512_storeu_pd(ptr.add(i), e) };
        acc = _mm512_add_pd(acc, e);
        i += L;
    }
    let mut lanes = [0.0f64; L];
    // SAFETY: `lanes` holds eight f64.
    unsafe { _mm512_storeu_pd(lanes.as_mut_ptr(), acc) };
    for x in &mut v[n..] {
        let t = *x - max;
        let e = if t < EXP_NORMAL_MIN { 0.0 } else { exp_nonpositive(t.max(EXP_NORMAL_MIN)) };
        *x = e;
        lanes[0] += e;
    }
    let inv = 1.0 / lanes.iter().sum::<f64>();
    let vinv = _mm512_set1_pd(inv);
    let mut i = 0;
    while i < n {
        // SAFETY: as above.
        unsafe { _mm512_storeu_pd(ptr.add(i), _mm512_mul_pd(_mm512_loadu_pd(ptr.add(i)), vinv)) };
        i += L;
    }
    for x in &mut v[n..] {
        *x *= inv;
    }
}

/// `exp_nonpositive` on eight lanes, operation for operation.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq")]
fn exp_nonpositive_x8(x: std::arch::x86_64::__m512d) -> std::arch::x86_64::__m512d {
    use std::arch::x86_64::*;
    let c = _mm512_set1_pd;
    let shift = c(EXP_SHIFT);
    let k = _mm512_sub_pd(_mm512_add_pd(_mm512_mul_pd(x, c(std::f64::consts::LOG2_E)), shift), shift);
    let r = _mm512_sub_pd(_mm512_sub_pd(x, _mm512_mul_pd(k, c(EXP_LN2_HI))), _mm512_mul_pd(k, c(EXP_LN2_LO)));
    let mut p = c(EXP_COEFFS[0]);
    for &a in &EXP_COEFFS[1..] {
        p = _mm512_add_pd(_mm512_mul_pd(p, r), c(a));
    }
    let bits = _mm512_slli_epi64::<52>(_mm512_cvttpd_epi64(_mm512_add_pd(k, c(1023.0))));
    _mm512_mul_pd(p, _mm512_castsi512_pd(bits))
}

/// Below this `exp` is subnormal; such weights are flushed to zero.
const EXP_NORMAL_MIN: f64 = -708.0;

#[inline(always)]
fn exp_normalize_body(v: &mut [f64], max: f64) {
    // Eight partial sums, in the order the AVX-512 path keeps them.
    const L: usize = 8;
    let mut acc = [0.0f64; L];
    let step = |x: &mut f64, acc: &mut f64| {
        let t = *x - max;
        let e = if t < EXP_NORMAL_MIN { 0.0 } else { exp_nonpositive(t.max(EXP_NORMAL_MIN)) };
        *x = e;
        *acc += e;
    };
    let mut chunks = v.chunks_exact_mut(L);
    for c in &mut chunks {
        for l in 0..L {
            step(&mut c[l], &mut acc[l]);
        }
    }
    for x in chunks.into_remainder() {
        step(x, &mut acc[0]);
    }
    let inv = 1.0 / acc.iter().sum::<f64>();
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `exp(x)` for `EXP_NORMAL_MIN ≤ x ≤ 0`, accurate to a few ulp.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    let k = (x * std::f64::consts::LOG2_E + EXP_SHIFT) - EXP_SHIFT;
    let r = (x - k * EXP_LN2_HI) - k * EXP_LN2_LO;
    let mut p = EXP_COEFFS[0];
    for &a in &EXP_COEFFS[1..] {
        p = p * r + a;
    }
    // Biasing in floating point keeps the integer path free of overflow
    // checks.
    p * f64::from_bits(((k + 1023.0) as u64) << 52)
}

/// Adding 1.5·2⁵² rounds to an integer without a libm call.
const EXP_SHIFT: f64 = 6_755_399_441_055_744.0;
// EXP_LN2_HI has trailing zero bits, so k·EXP_LN2_HI is exact.
const EXP_LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const EXP_LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// Taylor coefficients 1/13! … 1/0!, highest first; |r| ≤ ln2/2 keeps the
/// truncation below 1e-17 relative.
const EXP_COEFFS: [f64; 14] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn naive_sq(f: &Array2<f64>, z: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(c.dim(), |(k, j)| (0..f.nrows()).map(|i| z[[i, k]] * (f[[i, j]] - c[[k, j]]).powi(2)).sum())
    }

    #[test]
    fn moment_route_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, d, k) = (400, 12, 7);
        let mut f = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 4.0 - 2.0 + 30.0);
        // Column 0 is nearly one class, at a far offset and with tiny spread,
        // so the moment route must hand it back to the direct kernel.
        let mut z = Array2::from_shape_fn((n, k), |_| rng.random::<f64>());
        for i in 0..n {
            if i % 5 == 0 {
                f.row_mut(i).fill(1e3);
                f[[i, 0]] += 1e-6 * (i % 3) as f64;
                z.row_mut(i).fill(1e-9);
                z[[i, 0]] = 1.0;
            } else {
                z[[i, 0]] = 0.0;
            }
        }
        z.column_mut(3).fill(0.0);
        let c = Array2::from_shape_fn((k, d), |_| rng.random::<f64>() * 10.0);
        let mass = z.sum_axis(Axis(0));
        let sums = z.t().dot(&f);
        let want = naive_sq(&f, &z, &c);
        let got = sq_dev_by_moments(f.view(), z.view(), c.view(), mass.view(), sums.view(), 0);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-11 * w.abs(), "{g} vs {w}");
        }
        assert!(got.row(3).iter().all(|&v| v == 0.0));
        // Small problems never leave the direct kernel.
        assert_eq!(
            weighted_sq_dev_with_sums(f.view(), z.view(), c.view(), mass.view(), sums.view()),
            weighted_sq_dev(f.view(), z.view(), c.view())
        );
    }

    #[test]
    fn exp_matches_std_to_a_few_ulp() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = EXP_NORMAL_MIN * i as f64 / 200_000.0;
            let want = x.exp();
            worst = worst.max((exp_nonpositive(x) - want).abs() / want);
        }
        assert!(worst < 1e-15, "{worst}");
    }

    #[test]
    fn exp_normalize_flushes_subnormal_weights() {
        let rows: [&[f64]; 3] = [&[0.0, -1.0, -707.5, -708.5, -745.0, -2000.0], &[3.0, 3.0], &[-5.0, -5.0 - 700.0, -5.0 - 709.0]];
        for row in rows {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut got = row.to_vec();
            exp_normalize(&mut got, max);
            let mut want: Vec<f64> = row.iter().map(|&x| if x - max < -708.0 { 0.0 } else { (x - max).exp() }).collect();
            let s: f64 = want.iter().sum();
            want.iter_mut().for_each(|w| *w /= s);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-15 * w.abs(), "{row:?}: {got:?} vs {want:?}");
            }
        }
        let mut plain = vec![-0.5, 0.0, -800.0, -708.5, -707.9];
        exp_normalize_body(&mut plain, 0.0);
        assert_eq!(&plain[2..4], &[0.0, 0.0]);
        assert!(plain[4] > 0.0);
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn exp_normalize_paths_agree_bitwise() {
        if !std::arch::is_x86_feature_detected!("avx512dq") {
            return;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for len in [1, 7, 8, 9, 64, 1003] {
            let row: Vec<f64> = (0..len).map(|_| rng.random_range(-900.0..0.0)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mut a, mut b) = (row.clone(), row);
            exp_normalize_body(&mut a, max);
            // SAFETY: the features were detected above.
            unsafe { exp_normalize_avx512(&mut b, max) };
            assert_eq!(a, b, "len {len}");
        }
    }

    #[test]
    fn matches_naive_sum() {
        let f = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let z = array![[0.2, 0.8], [1.0, 0.0], [0.3, 0.7]];
        let c = array![[0.0, 1.0], [1.0, -1.0]];
        let out = weighted_sq_dev(f.view(), z.view(), c.view());
        let want = naive_sq(&f, &z, &c);
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(weighted_sum(f.view(), z.view()), z.t().dot(&f));
    }

    #[test]
    fn random_shapes_across_strip_and_chunk_edges() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(n, d, k, zero_p) in &[(1, 1, 1, 0.4), (300, 33, 5, 0.4), (129, 64, 3, 0.4), (257, 70, 17, 0.4), (300, 37, 19, 0.0), (200, 48, 16, 0.1), (130, 16, 8, 0.9)] {
            let f = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0));
            let z = Array2::from_shape_fn((n, k), |_| if rng.random_bool(zero_p) { 0.0 } else { rng.random::<f64>() });
            let sq = weighted_sq_dev(f.view(), z.view(), c.view());
            for (a, b) in sq.iter().zip(naive_sq(&f, &z, &c).iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let sum = weighted_sum(f.view(), z.view());
            for (a, b) in sum.iter().zip(z.t().dot(&f).iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
            let mut plain = vec![0.0; k * d];
            let args = Args { f: f.as_slice().unwrap(), z: z.as_slice().unwrap(), c: c.as_slice().unwrap(), n, d, k };
            body::<false, true, false>(&args, &mut plain);
            for (a, b) in plain.iter().zip(sq.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
