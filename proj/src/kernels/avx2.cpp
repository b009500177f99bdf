// Compiled with -mavx2 -mfma. Only reached through the dispatch table after a
// CPUID check, so nothing here may run on a CPU without AVX2/FMA.

#include "sdiff/kernels/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#define SDIFF_HAVE_AVX2 1
#include <immintrin.h>
#else
#define SDIFF_HAVE_AVX2 0
#endif

#include <vector>

namespace sdiff::kernels::avx2 {

#if SDIFF_HAVE_AVX2
namespace {

struct VF {
    using T = float;
    using V = __m256;
    static constexpr int W = 8;
    static V zero() { return _mm256_setzero_ps(); }
    static V load(const T* p) { return _mm256_loadu_ps(p); }
    static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
    static V set1(T x) { return _mm256_set1_ps(x); }
    static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
    static V add(V a, V b) { return _mm256_add_ps(a, b); }
    static V sub(V a, V b) { return _mm256_sub_ps(a, b); }
    static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
    static T hsum(V v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 sh = _mm_movehdup_ps(lo);
        __m128 s = _mm_add_ps(lo, sh);
        sh = _mm_movehl_ps(sh, s);
        s = _mm_add_ss(s, sh);
        return _mm_cvtss_f32(s);
    }
};

struct VD {
    using T = double;
    using V = __m256d;
    static constexpr int W = 4;
    static V zero() { return _mm256_setzero_pd(); }
    static V load(const T* p) { return _mm256_loadu_pd(p); }
    static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
    static V set1(T x) { return _mm256_set1_pd(x); }
    static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
    static V add(V a, V b) { return _mm256_add_pd(a, b); }
    static V sub(V a, V b) { return _mm256_sub_pd(a, b); }
    static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
    static T hsum(V v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d h = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, h));
    }
};

template <class S>
using T_of = typename S::T;

// C[m,n] += alpha * A[m,k] * B[k,n], all row-major, no transposes.
// Register tile: 4 rows x 2 vectors.
template <class S>
void gemm_nn_acc(std::int64_t m, std::int64_t n, std::int64_t k, T_of<S> alpha,
                 const T_of<S>* a, std::int64_t lda, const T_of<S>* b, std::int64_t ldb,
                 T_of<S>* c, std::int64_t ldc) {
    using T = T_of<S>;
    using V = typename S::V;
    constexpr int W = S::W;
    const V va = S::set1(alpha);
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* a0 = a + (i + 0) * lda;
        const T* a1 = a + (i + 1) * lda;
        const T* a2 = a + (i + 2) * lda;
        const T* a3 = a + (i + 3) * lda;
        std::int64_t j = 0;
        for (; j + 2 * W <= n; j += 2 * W) {
            V c00 = S::zero(), c01 = S::zero(), c10 = S::zero(), c11 = S::zero();
            V c20 = S::zero(), c21 = S::zero(), c30 = S::zero(), c31 = S::zero();
            for (std::int64_t p = 0; p < k; ++p) {
                const T* bp = b + p * ldb + j;
                const V b0 = S::load(bp);
                const V b1 = S::load(bp + W);
                V x = S::set1(a0[p]);
                c00 = S::fma(x, b0, c00);
                c01 = S::fma(x, b1, c01);
                x = S::set1(a1[p]);
                c10 = S::fma(x, b0, c10);
                c11 = S::fma(x, b1, c11);
                x = S::set1(a2[p]);
                c20 = S::fma(x, b0, c20);
                c21 = S::fma(x, b1, c21);
                x = S::set1(a3[p]);
                c30 = S::fma(x, b0, c30);
                c31 = S::fma(x, b1, c31);
            }
            T* r0 = c + (i + 0) * ldc + j;
            T* r1 = c + (i + 1) * ldc + j;
            T* r2 = c + (i + 2) * ldc + j;
            T* r3 = c + (i + 3) * ldc + j;
            S::store(r0, S::fma(va, c00, S::load(r0)));
            S::store(r0 + W, S::fma(va, c01, S::load(r0 + W)));
            S::store(r1, S::fma(va, c10, S::load(r1)));
            S::store(r1 + W, S::fma(va, c11, S::load(r1 + W)));
            S::store(r2, S::fma(va, c20, S::load(r2)));
            S::store(r2 + W, S::fma(va, c21, S::load(r2 + W)));
            S::store(r3, S::fma(va, c30, S::load(r3)));
            S::store(r3 + W, S::fma(va, c31, S::load(r3 + W)));
        }
        for (; j + W <= n; j += W) {
            V c0 = S::zero(), c1 = S::zero(), c2 = S::zero(), c3 = S::zero();
            for (std::int64_t p = 0; p < k; ++p) {
                const V bv = S::load(b + p * ldb + j);
                c0 = S::fma(S::set1(a0[p]), bv, c0);
                c1 = S::fma(S::set1(a1[p]), bv, c1);
                c2 = S::fma(S::set1(a2[p]), bv, c2);
                c3 = S::fma(S::set1(a3[p]), bv, c3);
            }
            T* r0 = c + (i + 0) * ldc + j;
            T* r1 = c + (i + 1) * ldc + j;
            T* r2 = c + (i + 2) * ldc + j;
            T* r3 = c + (i + 3) * ldc + j;
            S::store(r0, S::fma(va, c0, S::load(r0)));
            S::store(r1, S::fma(va, c1, S::load(r1)));
            S::store(r2, S::fma(va, c2, S::load(r2)));
            S::store(r3, S::fma(va, c3, S::load(r3)));
        }
        for (; j < n; ++j) {
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            for (std::int64_t p = 0; p < k; ++p) {
                const T bv = b[p * ldb + j];
                s0 += a0[p] * bv;
                s1 += a1[p] * bv;
                s2 += a2[p] * bv;
                s3 += a3[p] * bv;
            }
            c[(i + 0) * ldc + j] += alpha * s0;
            c[(i + 1) * ldc + j] += alpha * s1;
            c[(i + 2) * ldc + j] += alpha * s2;
            c[(i + 3) * ldc + j] += alpha * s3;
        }
    }
    for (; i < m; ++i) {
        const T* ar = a + i * lda;
        T* cr = c + i * ldc;
        std::int64_t j = 0;
        for (; j + 2 * W <= n; j += 2 * W) {
            V c0 = S::zero(), c1 = S::zero();
            for (std::int64_t p = 0; p < k; ++p) {
                const V x = S::set1(ar[p]);
                c0 = S::fma(x, S::load(b + p * ldb + j), c0);
                c1 = S::fma(x, S::load(b + p * ldb + j + W), c1);
            }
            S::store(cr + j, S::fma(va, c0, S::load(cr + j)));
            S::store(cr + j + W, S::fma(va, c1, S::load(cr + j + W)));
        }
        for (; j + W <= n; j += W) {
            V c0 = S::zero();
            for (std::int64_t p = 0; p < k; ++p) c0 = S::fma(S::set1(ar[p]), S::load(b + p * ldb + j), c0);
            S::store(cr + j, S::fma(va, c0, S::load(cr + j)));
        }
        for (; j < n; ++j) {
            T s = 0;
            for (std::int64_t p = 0; p < k; ++p) s += ar[p] * b[p * ldb + j];
            cr[j] += alpha * s;
        }
    }
}

template <class T>
void transpose_into(std::vector<T>& dst, const T* src, std::int64_t rows, std::int64_t cols,
                    std::int64_t ld) {
    // src is rows x cols with leading dimension ld; dst becomes cols x rows, dense.
    dst.resize(static_cast<std::size_t>(rows * cols));
    constexpr std::int64_t B = 32;
    for (std::int64_t r0 = 0; r0 < rows; r0 += B) {
        const std::int64_t r1 = r0 + B < rows ? r0 + B : rows;
        for (std::int64_t c0 = 0; c0 < cols; c0 += B) {
            const std::int64_t c1 = c0 + B < cols ? c0 + B : cols;
            for (std::int64_t r = r0; r < r1; ++r)
                for (std::int64_t cc = c0; cc < c1; ++cc) dst[cc * rows + r] = src[r * ld + cc];
        }
    }
}

template <class S>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          T_of<S> alpha, const T_of<S>* a, std::int64_t lda, const T_of<S>* b,
          std::int64_t ldb, T_of<S> beta, T_of<S>* c, std::int64_t ldc) {
    using T = T_of<S>;
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (beta == T(0)) {
            for (std::int64_t j = 0; j < n; ++j) crow[j] = T(0);
        } else if (beta != T(1)) {
            for (std::int64_t j = 0; j < n; ++j) crow[j] *= beta;
        }
    }
    if (m == 0 || n == 0 || k == 0) return;
    thread_local std::vector<T> ta_buf;
    thread_local std::vector<T> tb_buf;
    const T* ap = a;
    std::int64_t a_ld = lda;
    if (trans_a) {
        // stored as k x m
        transpose_into(ta_buf, a, k, m, lda);
        ap = ta_buf.data();
        a_ld = k;
    }
    const T* bp = b;
    std::int64_t b_ld = ldb;
    if (trans_b) {
        // stored as n x k
        transpose_into(tb_buf, b, n, k, ldb);
        bp = tb_buf.data();
        b_ld = n;
    }
    gemm_nn_acc<S>(m, n, k, alpha, ap, a_ld, bp, b_ld, c, ldc);
}

template <class S>
void axpy(std::int64_t n, T_of<S> alpha, const T_of<S>* x, T_of<S>* y) {
    const auto va = S::set1(alpha);
    std::int64_t i = 0;
    for (; i + S::W <= n; i += S::W) S::store(y + i, S::fma(va, S::load(x + i), S::load(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

template <class S>
T_of<S> dot(std::int64_t n, const T_of<S>* x, const T_of<S>* y) {
    auto acc0 = S::zero();
    auto acc1 = S::zero();
    std::int64_t i = 0;
    for (; i + 2 * S::W <= n; i += 2 * S::W) {
        acc0 = S::fma(S::load(x + i), S::load(y + i), acc0);
        acc1 = S::fma(S::load(x + i + S::W), S::load(y + i + S::W), acc1);
    }
    for (; i + S::W <= n; i += S::W) acc0 = S::fma(S::load(x + i), S::load(y + i), acc0);
    T_of<S> s = S::hsum(S::add(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <class S>
void add(std::int64_t n, const T_of<S>* x, const T_of<S>* y, T_of<S>* out) {
    std::int64_t i = 0;
    for (; i + S::W <= n; i += S::W) S::store(out + i, S::add(S::load(x + i), S::load(y + i)));
    for (; i < n; ++i) out[i] = x[i] + y[i];
}

template <class S>
void mul(std::int64_t n, const T_of<S>* x, const T_of<S>* y, T_of<S>* out) {
    std::int64_t i = 0;
    for (; i + S::W <= n; i += S::W) S::store(out + i, S::mul(S::load(x + i), S::load(y + i)));
    for (; i < n; ++i) out[i] = x[i] * y[i];
}

template <class S>
void scale(std::int64_t n, T_of<S> alpha, const T_of<S>* x, T_of<S>* out) {
    const auto va = S::set1(alpha);
    std::int64_t i = 0;
    for (; i + S::W <= n; i += S::W) S::store(out + i, S::mul(va, S::load(x + i)));
    for (; i < n; ++i) out[i] = alpha * x[i];
}

template <class S>
T_of<S> sum(std::int64_t n, const T_of<S>* x) {
    auto acc0 = S::zero();
    auto acc1 = S::zero();
    std::int64_t i = 0;
    for (; i + 2 * S::W <= n; i += 2 * S::W) {
        acc0 = S::add(acc0, S::load(x + i));
        acc1 = S::add(acc1, S::load(x + i + S::W));
    }
    for (; i + S::W <= n; i += S::W) acc0 = S::add(acc0, S::load(x + i));
    T_of<S> s = S::hsum(S::add(acc0, acc1));
    for (; i < n; ++i) s += x[i];
    return s;
}

template <class S>
T_of<S> sum_sq_dev(std::int64_t n, const T_of<S>* x, T_of<S> shift) {
    const auto vs = S::set1(shift);
    auto acc = S::zero();
    std::int64_t i = 0;
    for (; i + S::W <= n; i += S::W) {
        const auto d = S::sub(S::load(x + i), vs);
        acc = S::fma(d, d, acc);
    }
    T_of<S> s = S::hsum(acc);
    for (; i < n; ++i) {
        const T_of<S> d = x[i] - shift;
        s += d * d;
    }
    return s;
}

template <class S>
const Table<T_of<S>> kTable{&gemm<S>, &axpy<S>, &dot<S>, &add<S>, &mul<S>,
                            &scale<S>, &sum<S>, &sum_sq_dev<S>};

}  // namespace

template <>
const Table<float>* table<float>() {
    return &kTable<VF>;
}
template <>
const Table<double>* table<double>() {
    return &kTable<VD>;
}

#else

template <>
const Table<float>* table<float>() {
    return nullptr;
}
template <>
const Table<double>* table<double>() {
    return nullptr;
}

#endif

}  // namespace sdiff::kernels::avx2
