#pragma once
// Dense arithmetic kernels with a scalar reference path and SIMD variants.
//
// Every kernel exists once in `scalar` (plain loops, the reference) and once per
// vector ISA. The active table is picked at startup from CPUID and can be
// pinned with SDIFF_ISA=scalar|avx2 or set_isa().

#include <cstdint>
#include <string_view>

namespace sdiff::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);

/// Best ISA available on this CPU.
Isa detect_isa();
Isa active_isa();
/// Throws std::invalid_argument if the ISA is not supported here.
void set_isa(Isa isa);

template <class T>
struct Table {
    // C = alpha * op(A) * op(B) + beta * C, row-major, op = transpose when flagged.
    // beta == 0 overwrites C without reading it.
    void (*gemm)(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 T alpha, const T* a, std::int64_t lda, const T* b, std::int64_t ldb,
                 T beta, T* c, std::int64_t ldc);
    // y += alpha * x
    void (*axpy)(std::int64_t n, T alpha, const T* x, T* y);
    T (*dot)(std::int64_t n, const T* x, const T* y);
    void (*add)(std::int64_t n, const T* x, const T* y, T* out);
    void (*mul)(std::int64_t n, const T* x, const T* y, T* out);
    // out = alpha * x
    void (*scale)(std::int64_t n, T alpha, const T* x, T* out);
    T (*sum)(std::int64_t n, const T* x);
    // sum of (x - shift)^2
    T (*sum_sq_dev)(std::int64_t n, const T* x, T shift);
};

template <class T>
const Table<T>& table(Isa isa);

template <class T>
const Table<T>& active();

namespace scalar {
template <class T>
const Table<T>& table();
}

namespace avx2 {
// Returns nullptr when the build has no AVX2 path.
template <class T>
const Table<T>* table();
}

}  // namespace sdiff::kernels
