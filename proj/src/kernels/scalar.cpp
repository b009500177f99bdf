#include "sdiff/kernels/kernels.hpp"

namespace sdiff::kernels::scalar {
namespace {

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (beta == T(0)) {
            for (std::int64_t j = 0; j < n; ++j) crow[j] = T(0);
        } else if (beta != T(1)) {
            for (std::int64_t j = 0; j < n; ++j) crow[j] *= beta;
        }
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
            if (trans_b) {
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
            } else {
                const T* brow = b + p * ldb;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <class T>
void axpy(std::int64_t n, T alpha, const T* x, T* y) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
T dot(std::int64_t n, const T* x, const T* y) {
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <class T>
void add(std::int64_t n, const T* x, const T* y, T* out) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

template <class T>
void mul(std::int64_t n, const T* x, const T* y, T* out) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

template <class T>
void scale(std::int64_t n, T alpha, const T* x, T* out) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
T sum(std::int64_t n, const T* x) {
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += x[i];
    return s;
}

template <class T>
T sum_sq_dev(std::int64_t n, const T* x, T shift) {
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = x[i] - shift;
        s += d * d;
    }
    return s;
}

template <class T>
constexpr Table<T> kTable{&gemm<T>, &axpy<T>, &dot<T>, &add<T>, &mul<T>,
                          &scale<T>, &sum<T>, &sum_sq_dev<T>};

}  // namespace

template <class T>
const Table<T>& table() {
    return kTable<T>;
}

template const Table<float>& table<float>();
template const Table<double>& table<double>();

}  // namespace sdiff::kernels::scalar
