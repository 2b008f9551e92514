//! Packed matrix multiply used by the convolution kernels.
//!
//! Every output element is accumulated strictly in increasing `k` order with a
//! separate multiply and add (no fused multiply-add, no split partial sums), so
//! results are bit-identical to a naive triple loop that starts from zero and
//! are independent of the SIMD width selected at runtime.

use std::cell::RefCell;

use crate::tensor::Scalar;

const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 2048;

/// Strided read-only matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// View of a row-major `rows x cols` matrix as its transpose.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `C = A·B` (or `C += A·B` when `accumulate`), with A `m x k`, B `k x n`,
/// and C row-major with leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    T::gemm_dispatch(&GemmArgs { m, n, k, a, b, ldc, accumulate }, c);
}

pub struct GemmArgs<'a, T> {
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'a, T>,
    b: MatRef<'a, T>,
    ldc: usize,
    accumulate: bool,
}

/// Per-type microkernel selection. Sealed: only `f32` and `f64` implement it.
pub trait GemmKernel: Sized {
    fn gemm_dispatch(args: &GemmArgs<'_, Self>, c: &mut [Self]);
}

/// Packing buffers (B panel, A panel), kept per thread between calls.
struct Packs<T>(Vec<T>, Vec<T>);

thread_local! {
    static PACKS_F32: RefCell<Packs<f32>> = const { RefCell::new(Packs(Vec::new(), Vec::new())) };
    static PACKS_F64: RefCell<Packs<f64>> = const { RefCell::new(Packs(Vec::new(), Vec::new())) };
}

fn with_packs<T: Scalar>(
    key: &'static std::thread::LocalKey<RefCell<Packs<T>>>,
    f: impl FnOnce(&mut Packs<T>),
) {
    key.with(|cell| match cell.try_borrow_mut() {
        Ok(mut p) => f(&mut p),
        Err(_) => f(&mut Packs(Vec::new(), Vec::new())),
    })
}

/// Computes `acc[i][j] += sum_p a[p][i] * b[p][j]` over packed panels, `acc`
/// being an `MR x NR` row-major tile.
type MicroFn<T> = unsafe fn(kc: usize, a: *const T, b: *const T, acc: *mut T);

impl GemmKernel for f32 {
    fn gemm_dispatch(args: &GemmArgs<'_, Self>, c: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                return with_packs(&PACKS_F32, |p| gemm_body::<f32, 8, 32>(args, c, p, x86::f32_avx512));
            }
            if std::arch::is_x86_feature_detected!("avx") {
                return with_packs(&PACKS_F32, |p| gemm_body::<f32, 6, 16>(args, c, p, x86::f32_avx));
            }
        }
        with_packs(&PACKS_F32, |p| gemm_body::<f32, 4, 8>(args, c, p, micro_generic::<f32, 4, 8>))
    }
}

impl GemmKernel for f64 {
    fn gemm_dispatch(args: &GemmArgs<'_, Self>, c: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                return with_packs(&PACKS_F64, |p| gemm_body::<f64, 8, 16>(args, c, p, x86::f64_avx512));
            }
            if std::arch::is_x86_feature_detected!("avx") {
                return with_packs(&PACKS_F64, |p| gemm_body::<f64, 6, 8>(args, c, p, x86::f64_avx));
            }
        }
        with_packs(&PACKS_F64, |p| gemm_body::<f64, 4, 4>(args, c, p, micro_generic::<f64, 4, 4>))
    }
}

fn gemm_body<T: Scalar, const MR: usize, const NR: usize>(
    args: &GemmArgs<'_, T>,
    c: &mut [T],
    packs: &mut Packs<T>,
    micro: MicroFn<T>,
) {
    let GemmArgs { m, n, k, a, b, ldc, accumulate } = *args;
    let kmax = KC.min(k);
    let Packs(bpack, apack) = packs;
    grow(bpack, kmax * NC.min(n.div_ceil(NR) * NR));
    grow(apack, kmax * MC.min(m.div_ceil(MR) * MR));
    let mut tile = [T::zero(); 256];
    let tile = &mut tile[..MR * NR];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b::<T, NR>(bpack, b, pc, kc, jc, nc);
            let load = accumulate || pc > 0;
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a::<T, MR>(apack, a, ic, mc, pc, kc);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bp = &bpack[jr * kc..jr * kc + kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let ap = &apack[ir * kc..ir * kc + kc * MR];
                        let off = (ic + ir) * ldc + jc + jr;
                        tile.fill(T::zero());
                        if load {
                            for i in 0..mr {
                                tile[i * NR..i * NR + nr]
                                    .copy_from_slice(&c[off + i * ldc..off + i * ldc + nr]);
                            }
                        }
                        // SAFETY: panels hold kc*MR and kc*NR elements, tile MR*NR.
                        unsafe { micro(kc, ap.as_ptr(), bp.as_ptr(), tile.as_mut_ptr()) };
                        for i in 0..mr {
                            c[off + i * ldc..off + i * ldc + nr]
                                .copy_from_slice(&tile[i * NR..i * NR + nr]);
                        }
                    }
                }
            }
        }
    }
}

fn grow<T: Scalar>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

fn pack_b<T: Scalar, const NR: usize>(
    buf: &mut [T],
    b: MatRef<'_, T>,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
) {
    for jr in (0..nc).step_by(NR) {
        let nr = NR.min(nc - jr);
        let panel = &mut buf[jr * kc..jr * kc + kc * NR];
        for p in 0..kc {
            let dst = &mut panel[p * NR..p * NR + NR];
            if b.cs == 1 {
                let start = (pc + p) * b.rs + jc + jr;
                dst[..nr].copy_from_slice(&b.data[start..start + nr]);
            } else {
                for (j, d) in dst.iter_mut().enumerate().take(nr) {
                    *d = b.at(pc + p, jc + jr + j);
                }
            }
            dst[nr..].fill(T::zero());
        }
    }
}

fn pack_a<T: Scalar, const MR: usize>(
    buf: &mut [T],
    a: MatRef<'_, T>,
    ic: usize,
    mc: usize,
    pc: usize,
    kc: usize,
) {
    for ir in (0..mc).step_by(MR) {
        let mr = MR.min(mc - ir);
        let panel = &mut buf[ir * kc..ir * kc + kc * MR];
        for p in 0..kc {
            let dst = &mut panel[p * MR..p * MR + MR];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = if i < mr { a.at(ic + ir + i, pc + p) } else { T::zero() };
            }
        }
    }
}

unsafe fn micro_generic<T: Scalar, const MR: usize, const NR: usize>(
    kc: usize,
    a: *const T,
    b: *const T,
    acc: *mut T,
) {
    let a = std::slice::from_raw_parts(a, kc * MR);
    let b = std::slice::from_raw_parts(b, kc * NR);
    let acc = std::slice::from_raw_parts_mut(acc, MR * NR);
    for p in 0..kc {
        for i in 0..MR {
            let av = a[p * MR + i];
            for j in 0..NR {
                acc[i * NR + j] = acc[i * NR + j] + av * b[p * NR + j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    /// Expands to a microkernel over `$mr` rows and `$nv` vectors per row, using
    /// separate multiply and add instructions.
    macro_rules! kernel {
        ($name:ident, $t:ty, $feat:literal, $vec:ty, $lanes:expr, $mr:expr, $nv:expr,
         $load:ident, $store:ident, $set1:ident, $mul:ident, $add:ident) => {
            #[target_feature(enable = $feat)]
            pub(super) unsafe fn $name(kc: usize, a: *const $t, b: *const $t, acc: *mut $t) {
                const NR: usize = $lanes * $nv;
                let mut r: [[$vec; $nv]; $mr] = [[$set1(0.0); $nv]; $mr];
                for i in 0..$mr {
                    for v in 0..$nv {
                        r[i][v] = $load(acc.add(i * NR + v * $lanes));
                    }
                }
                for p in 0..kc {
                    let bp = b.add(p * NR);
                    let mut bv: [$vec; $nv] = [$set1(0.0); $nv];
                    for v in 0..$nv {
                        bv[v] = $load(bp.add(v * $lanes));
                    }
                    let ap = a.add(p * $mr);
                    for i in 0..$mr {
                        let av = $set1(*ap.add(i));
                        for v in 0..$nv {
                            r[i][v] = $add(r[i][v], $mul(av, bv[v]));
                        }
                    }
                }
                for i in 0..$mr {
                    for v in 0..$nv {
                        $store(acc.add(i * NR + v * $lanes), r[i][v]);
                    }
                }
            }
        };
    }

    kernel!(f32_avx512, f32, "avx512f", __m512, 16, 8, 2,
        _mm512_loadu_ps, _mm512_storeu_ps, _mm512_set1_ps, _mm512_mul_ps, _mm512_add_ps);
    kernel!(f32_avx, f32, "avx", __m256, 8, 6, 2,
        _mm256_loadu_ps, _mm256_storeu_ps, _mm256_set1_ps, _mm256_mul_ps, _mm256_add_ps);
    kernel!(f64_avx512, f64, "avx512f", __m512d, 8, 8, 2,
        _mm512_loadu_pd, _mm512_storeu_pd, _mm512_set1_pd, _mm512_mul_pd, _mm512_add_pd);
    kernel!(f64_avx, f64, "avx", __m256d, 4, 6, 2,
        _mm256_loadu_pd, _mm256_storeu_pd, _mm256_set1_pd, _mm256_mul_pd, _mm256_add_pd);
}
