//! An unpacked AVX2/FMA `f32` kernel for products whose operands are both
//! contiguous along the reduction axis (`a @ bt^T`), the layout of
//! convolution weight gradients. Other layouts go to `matrixmultiply`, whose
//! packing step is slow for a transposed right-hand side.

/// `c = alpha * a @ b + beta * c`. Returns `false` when the layout is not
/// handled here or the CPU lacks AVX2/FMA. Operands must already be bounds checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        if !(csa == 1 && rsb == 1 && csb != 1) {
            return false;
        }
        if !(std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")) {
            return false;
        }
        scale_c(m, n, beta, c, rsc as usize, csc as usize);
        if k == 0 || alpha == 0.0 {
            return true;
        }
        // SAFETY: AVX2 and FMA were detected above; the caller checked every
        // operand's extent for these strides.
        unsafe {
            x86::dot_gemm(m, k, n, alpha, a, rsa as usize, b, csb as usize, c, rsc as usize, csc as usize);
        }
        true
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = (m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        false
    }
}

#[cfg(target_arch = "x86_64")]
fn scale_c(m: usize, n: usize, beta: f32, c: &mut [f32], rsc: usize, csc: usize) {
    if beta == 1.0 {
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let v = &mut c[i * rsc + j * csc];
            *v = if beta == 0.0 { 0.0 } else { *v * beta };
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    /// `R x Q` dot products of length `k` (a multiple of 8 is handled in vector
    /// lanes, the rest scalar), accumulated into `c` with weight `alpha`.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn dot_block<const R: usize, const Q: usize>(
        k: usize,
        alpha: f32,
        ap: *const f32,
        rsa: usize,
        bp: *const f32,
        rsbt: usize,
        cp: *mut f32,
        rsc: usize,
        csc: usize,
    ) {
        let kv = k / 8 * 8;
        let mut acc = [[_mm256_setzero_ps(); Q]; R];
        let mut p = 0;
        while p < kv {
            let mut bv = [_mm256_setzero_ps(); Q];
            for q in 0..Q {
                bv[q] = _mm256_loadu_ps(bp.add(q * rsbt + p));
            }
            for r in 0..R {
                let av = _mm256_loadu_ps(ap.add(r * rsa + p));
                for q in 0..Q {
                    acc[r][q] = _mm256_fmadd_ps(av, bv[q], acc[r][q]);
                }
            }
            p += 8;
        }
        for r in 0..R {
            for q in 0..Q {
                let mut s = hsum(acc[r][q]);
                for t in kv..k {
                    s += *ap.add(r * rsa + t) * *bp.add(q * rsbt + t);
                }
                *cp.add(r * rsc + q * csc) += alpha * s;
            }
        }
    }

    /// `c[i, j] += alpha * sum_p a[i, p] * bt[j, p]` with rows of `a` and `bt` contiguous.
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn dot_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: usize,
        b: &[f32],
        rsbt: usize,
        c: &mut [f32],
        rsc: usize,
        csc: usize,
    ) {
        const DM: usize = 4;
        const DN: usize = 3;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        // `a` is the small operand (few output channels); keep it hot in L1
        // and stream `bt` once.
        let mut j0 = 0;
        while j0 < n {
            let cols = DN.min(n - j0);
            let mut i0 = 0;
            while i0 < m {
                let rows = DM.min(m - i0);
                let (a0, b0, c0) = (ap.add(i0 * rsa), bp.add(j0 * rsbt), cp.add(i0 * rsc + j0 * csc));
                macro_rules! go {
                    ($r:literal, $q:literal) => {
                        dot_block::<$r, $q>(k, alpha, a0, rsa, b0, rsbt, c0, rsc, csc)
                    };
                }
                match (rows, cols) {
                    (4, 3) => go!(4, 3),
                    (4, 2) => go!(4, 2),
                    (4, _) => go!(4, 1),
                    (3, 3) => go!(3, 3),
                    (3, 2) => go!(3, 2),
                    (3, _) => go!(3, 1),
                    (2, 3) => go!(2, 3),
                    (2, 2) => go!(2, 2),
                    (2, _) => go!(2, 1),
                    (_, 3) => go!(1, 3),
                    (_, 2) => go!(1, 2),
                    _ => go!(1, 1),
                }
                i0 += DM;
            }
            j0 += DN;
        }
    }
}
