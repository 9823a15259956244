//! Hot numeric loops: a branch-free `exp` that the compiler can vectorize,
//! the activations built on it, the LSTM gate kernels and `dgemm` wrappers.
//! All activations stay within a few ulp of libm.

/// `exp(x)` via Cody-Waite reduction and a degree-12 Taylor polynomial on
/// `|r| <= ln(2)/2`, evaluated with Estrin's scheme. Inputs are clamped to
/// `[-708, 709]`.
#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5 * 2^52: adding it rounds to the nearest integer and leaves that
    // integer in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;

    let x = x.clamp(-708.0, 709.0);
    let kf = x * LOG2E + SHIFT;
    let n = kf - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = 1.0 + r;
    let q1 = 0.5 + r * (1.0 / 6.0);
    let q2 = 1.0 / 24.0 + r * (1.0 / 120.0);
    let q3 = 1.0 / 720.0 + r * (1.0 / 5_040.0);
    let q4 = 1.0 / 40_320.0 + r * (1.0 / 362_880.0);
    let q5 = 1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0);
    let q6 = 1.0 / 479_001_600.0;
    let s0 = q0 + r2 * q1;
    let s1 = q2 + r2 * q3;
    let s2 = q4 + r2 * q5;
    let t0 = s0 + r4 * s1;
    let t1 = s2 + r4 * q6;
    let p = t0 + r8 * t1;
    let scale = f64::from_bits(kf.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// `tanh` with an odd Taylor polynomial near zero, where `1 - 2/(e^{2x}+1)`
/// would lose relative precision.
#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let far = 1.0 - 2.0 / (exp(2.0 * x) + 1.0);
    let x2 = x * x;
    let mut p = 21_844.0 / 6_081_075.0;
    p = p * x2 - 1_382.0 / 155_925.0;
    p = p * x2 + 62.0 / 2_835.0;
    p = p * x2 - 17.0 / 315.0;
    p = p * x2 + 2.0 / 15.0;
    p = p * x2 - 1.0 / 3.0;
    p = p * x2 + 1.0;
    let near = x * p;
    if x2 < 0.0625 * 0.0625 {
        near
    } else {
        far
    }
}

/// Defines a slice kernel with a runtime-dispatched AVX2+FMA copy of its
/// body. Plain multiplies and adds are never fused, so both copies produce
/// bit-identical results.
macro_rules! dispatched {
    ($(#[$meta:meta])* fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$meta])*
        pub(crate) fn $name($($arg: $ty),*) {
            #[inline(always)]
            fn body($($arg: $ty),*) $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx512dq,avx512vl,avx2,fma")]
                unsafe fn avx512($($arg: $ty),*) {
                    body($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2($($arg: $ty),*) {
                    body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f")
                    && std::arch::is_x86_feature_detected!("avx512dq")
                    && std::arch::is_x86_feature_detected!("avx512vl")
                {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { avx512($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2")
                    && std::arch::is_x86_feature_detected!("fma")
                {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { avx2($($arg),*) };
                }
            }
            body($($arg),*)
        }
    };
}

/// `exp(x) - 1` with a Taylor polynomial near zero.
#[inline(always)]
pub(crate) fn expm1(x: f64) -> f64 {
    let far = exp(x) - 1.0;
    let mut p = 1.0 / 362_880.0;
    p = p * x + 1.0 / 40_320.0;
    p = p * x + 1.0 / 5_040.0;
    p = p * x + 1.0 / 720.0;
    p = p * x + 1.0 / 120.0;
    p = p * x + 1.0 / 24.0;
    p = p * x + 1.0 / 6.0;
    p = p * x + 0.5;
    p = p * x + 1.0;
    let near = x * p;
    if x * x < 0.0625 * 0.0625 {
        near
    } else {
        far
    }
}

/// ELU with `alpha = 1`.
#[inline(always)]
pub(crate) fn elu(x: f64) -> f64 {
    let neg = expm1(x.min(0.0));
    if x > 0.0 {
        x
    } else {
        neg
    }
}

dispatched! {
    fn sigmoid_slice(xs: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = sigmoid(x);
        }
    }
}

dispatched! {
    fn tanh_slice(xs: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = tanh(x);
        }
    }
}

dispatched! {
    fn elu_slice(xs: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = elu(x);
        }
    }
}

dispatched! {
    /// Gate nonlinearities and state update of an LSTM cell.
    ///
    /// `gates` holds pre-activations laid out `[i | f | g | o]` per row and
    /// is overwritten with the activations. `state` and `out` are `[h | c]`
    /// rows; the previous `c` is read from `state`, the new `h` and `c` are
    /// written to `out` and `tanh(c)` to `tanh_c`.
    ///
    /// The cell gate uses `tanh(x) = 2 sigmoid(2x) - 1` so that every gate
    /// column goes through one contiguous pass.
    fn lstm_gates(hidden: usize, gates: &mut [f64], state: &[f64], out: &mut [f64], tanh_c: &mut [f64]) {
        let h = hidden;
        let mut m = vec![1.0; 4 * h];
        m[2 * h..3 * h].fill(2.0);
        for row in gates.chunks_exact_mut(4 * h) {
            for (v, &m) in row.iter_mut().zip(&m) {
                *v = m * sigmoid(m * *v) + (1.0 - m);
            }
        }
        let rows = tanh_c.len() / h;
        for r in 0..rows {
            let a = &gates[r * 4 * h..(r + 1) * 4 * h];
            let cp = &state[r * 2 * h + h..(r + 1) * 2 * h];
            let c = &mut out[r * 2 * h + h..(r + 1) * 2 * h];
            for j in 0..h {
                c[j] = a[h + j] * cp[j] + a[j] * a[2 * h + j];
            }
            tanh_c[r * h..(r + 1) * h].copy_from_slice(c);
        }
        for v in tanh_c.iter_mut() {
            *v = tanh(*v);
        }
        for r in 0..rows {
            let o = &gates[r * 4 * h + 3 * h..(r + 1) * 4 * h];
            let tc = &tanh_c[r * h..(r + 1) * h];
            let h_out = &mut out[r * 2 * h..r * 2 * h + h];
            for j in 0..h {
                h_out[j] = o[j] * tc[j];
            }
        }
    }
}

dispatched! {
    /// Backward of [`lstm_gates`]: fills `d_pre` with the gradient w.r.t. the
    /// gate pre-activations and writes `dc * f` into the `c` half of the
    /// `d_state` rows. `g` is the gradient w.r.t. the `[h | c]` output.
    fn lstm_gates_backward(
        hidden: usize,
        acts: &[f64],
        tanh_c: &[f64],
        state: &[f64],
        g: &[f64],
        d_pre: &mut [f64],
        d_state: &mut [f64],
    ) {
        let h = hidden;
        let rows = tanh_c.len() / h;
        for r in 0..rows {
            let a = &acts[r * 4 * h..(r + 1) * 4 * h];
            let d = &mut d_pre[r * 4 * h..(r + 1) * 4 * h];
            let cp = &state[r * 2 * h + h..(r + 1) * 2 * h];
            let tc = &tanh_c[r * h..(r + 1) * h];
            let gr = &g[r * 2 * h..(r + 1) * 2 * h];
            let ds = &mut d_state[r * 2 * h + h..(r + 1) * 2 * h];
            for j in 0..h {
                let (ig, fg, cg, og) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                let dh = gr[j];
                let dc = gr[h + j] + dh * og * (1.0 - tc[j] * tc[j]);
                d[j] = dc * cg * ig * (1.0 - ig);
                d[h + j] = dc * cp[j] * fg * (1.0 - fg);
                d[2 * h + j] = dc * ig * (1.0 - cg * cg);
                d[3 * h + j] = dh * tc[j] * og * (1.0 - og);
                ds[j] = dc * fg;
            }
        }
    }
}

/// A strided row-major view: element `(r, c)` is `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        View { data, rs, cs }
    }

    /// Contiguous `rows x cols` matrix, optionally read transposed.
    pub fn matrix(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            View::new(data, 1, cols)
        } else {
            View::new(data, cols, 1)
        }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` with `a` `m x k`, `b` `k x n` and `c`
/// `m x n` stored with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], rsc: usize) {
    assert!(a.covers(m, k) && b.covers(k, n));
    assert!(m == 0 || n == 0 || (m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts above guarantee every strided access is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Row-major operand of [`affine2`]: `k` columns read with row stride `rs`.
#[derive(Clone, Copy)]
pub(crate) struct Rows<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub k: usize,
}

/// `out = bias + a1 w1 + a2 w2` over `rows` rows, with `w1` `a1.k x n`,
/// `w2` `a2.k x n` and `n = bias.len()`; `out` is contiguous `rows x n`.
pub(crate) fn affine2(rows: usize, bias: &[f64], a1: Rows<'_>, w1: &[f64], a2: Rows<'_>, w2: &[f64], out: &mut [f64]) {
    let n = bias.len();
    for (a, w) in [(&a1, w1), (&a2, w2)] {
        assert!(rows == 0 || a.k == 0 || (rows - 1) * a.rs + a.k <= a.data.len());
        assert_eq!(w.len(), a.k * n);
    }
    assert_eq!(out.len(), rows * n);
    #[cfg(target_arch = "x86_64")]
    {
        if n % 8 == 0 && std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: avx512f was detected and the asserts above bound every access.
            unsafe { avx512_affine::affine2(rows, bias, a1, w1, a2, w2, out) };
            return;
        }
    }
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm_view(rows, a1.k, n, 1.0, View::new(a1.data, a1.rs, 1), View::new(w1, n, 1), 1.0, out, n);
    gemm_view(rows, a2.k, n, 1.0, View::new(a2.data, a2.rs, 1), View::new(w2, n, 1), 1.0, out, n);
}

#[cfg(target_arch = "x86_64")]
mod avx512_affine {
    use super::Rows;
    use std::arch::x86_64::*;

    const LANES: usize = 8;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn affine2(rows: usize, bias: &[f64], a1: Rows<'_>, w1: &[f64], a2: Rows<'_>, w2: &[f64], out: &mut [f64]) {
        let n = bias.len();
        let mut c0 = 0;
        while c0 < n {
            let vecs = ((n - c0) / LANES).min(5);
            let mut r0 = 0;
            while r0 + 4 <= rows {
                match vecs {
                    5 => tile::<4, 5>(r0, c0, bias, a1, w1, a2, w2, out),
                    4 => tile::<4, 4>(r0, c0, bias, a1, w1, a2, w2, out),
                    3 => tile::<4, 3>(r0, c0, bias, a1, w1, a2, w2, out),
                    2 => tile::<4, 2>(r0, c0, bias, a1, w1, a2, w2, out),
                    _ => tile::<4, 1>(r0, c0, bias, a1, w1, a2, w2, out),
                }
                r0 += 4;
            }
            while r0 < rows {
                match vecs {
                    5 => tile::<1, 5>(r0, c0, bias, a1, w1, a2, w2, out),
                    4 => tile::<1, 4>(r0, c0, bias, a1, w1, a2, w2, out),
                    3 => tile::<1, 3>(r0, c0, bias, a1, w1, a2, w2, out),
                    2 => tile::<1, 2>(r0, c0, bias, a1, w1, a2, w2, out),
                    _ => tile::<1, 1>(r0, c0, bias, a1, w1, a2, w2, out),
                }
                r0 += 1;
            }
            c0 += vecs * LANES;
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn tile<const MR: usize, const NV: usize>(
        r0: usize,
        c0: usize,
        bias: &[f64],
        a1: Rows<'_>,
        w1: &[f64],
        a2: Rows<'_>,
        w2: &[f64],
        out: &mut [f64],
    ) {
        let n = bias.len();
        let mut acc = [[_mm512_setzero_pd(); NV]; MR];
        for row in acc.iter_mut() {
            for (v, a) in row.iter_mut().enumerate() {
                *a = _mm512_loadu_pd(bias.as_ptr().add(c0 + v * LANES));
            }
        }
        for (a, w) in [(a1, w1), (a2, w2)] {
            for k in 0..a.k {
                let mut b = [_mm512_setzero_pd(); NV];
                for (v, b) in b.iter_mut().enumerate() {
                    *b = _mm512_loadu_pd(w.as_ptr().add(k * n + c0 + v * LANES));
                }
                for (i, row) in acc.iter_mut().enumerate() {
                    let x = _mm512_set1_pd(*a.data.get_unchecked((r0 + i) * a.rs + k));
                    for (acc, b) in row.iter_mut().zip(&b) {
                        *acc = _mm512_fmadd_pd(x, *b, *acc);
                    }
                }
            }
        }
        for (i, row) in acc.iter().enumerate() {
            for (v, a) in row.iter().enumerate() {
                _mm512_storeu_pd(out.as_mut_ptr().add((r0 + i) * n + c0 + v * LANES), *a);
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op` optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let a = View::matrix(a, if trans_a { m } else { k }, trans_a);
    let b = View::matrix(b, if trans_b { k } else { n }, trans_b);
    gemm_view(m, k, n, alpha, a, b, beta, c, n);
}
