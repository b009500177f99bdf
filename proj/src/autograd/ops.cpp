#include "sdiff/autograd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "sdiff/kernels/kernels.hpp"

namespace sdiff::ag {
namespace {

template <class T>
const kernels::Table<T>& K() {
    return kernels::active<T>();
}

template <class T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
    Node<T>& p = *n.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

// Broadcast geometry: output shape and per-input strides in output rank
// (stride 0 along broadcast axes).
struct Bcast {
    Shape out;
    std::vector<std::int64_t> sa, sb;
};

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

Bcast broadcast(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Bcast g;
    g.out.assign(r, 1);
    g.sa.assign(r, 0);
    g.sb.assign(r, 0);
    const auto sta = contiguous_strides(a);
    const auto stb = contiguous_strides(b);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t ia = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - a.size());
        const std::int64_t ib = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - b.size());
        const std::int64_t da = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
        const std::int64_t db = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
        g.out[i] = std::max(da, db);
        if (da != 1) g.sa[i] = sta[static_cast<std::size_t>(ia)];
        if (db != 1) g.sb[i] = stb[static_cast<std::size_t>(ib)];
    }
    return g;
}

// Calls fn(out_offset, a_offset, b_offset, n, inc_a, inc_b) for each innermost row.
template <class F>
void for_each_row(const Bcast& g, F&& fn) {
    const std::size_t r = g.out.size();
    if (r == 0) {
        fn(0, 0, 0, 1, 0, 0);
        return;
    }
    const std::int64_t n = g.out[r - 1];
    const std::int64_t total = numel_of(g.out);
    if (total == 0) return;
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t o = 0; o < total; o += n) {
        fn(o, oa, ob, n, g.sa[r - 1], g.sb[r - 1]);
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            oa += g.sa[d];
            ob += g.sb[d];
            if (idx[d] < g.out[d]) break;
            oa -= g.sa[d] * idx[d];
            ob -= g.sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { add, sub, mul, div };

template <class T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (A.shape() == B.shape()) {
        Tensor<T> out(A.shape());
        const std::int64_t n = A.numel();
        switch (op) {
            case BinOp::add: K<T>().add(n, A.ptr(), B.ptr(), out.ptr()); break;
            case BinOp::mul: K<T>().mul(n, A.ptr(), B.ptr(), out.ptr()); break;
            case BinOp::sub:
                for (std::int64_t i = 0; i < n; ++i) out[i] = A[i] - B[i];
                break;
            case BinOp::div:
                for (std::int64_t i = 0; i < n; ++i) out[i] = A[i] / B[i];
                break;
        }
        return make_result<T>(std::move(out), {a, b}, [op](Node<T>& nd) {
            const Tensor<T>& g = nd.grad;
            const Tensor<T>& A = nd.parents[0]->value;
            const Tensor<T>& B = nd.parents[1]->value;
            const std::int64_t n = g.numel();
            if (Tensor<T>* ga = grad_of(nd, 0)) {
                switch (op) {
                    case BinOp::add:
                    case BinOp::sub: K<T>().axpy(n, T(1), g.ptr(), ga->ptr()); break;
                    case BinOp::mul:
                        for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += g[i] * B[i];
                        break;
                    case BinOp::div:
                        for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += g[i] / B[i];
                        break;
                }
            }
            if (Tensor<T>* gb = grad_of(nd, 1)) {
                switch (op) {
                    case BinOp::add: K<T>().axpy(n, T(1), g.ptr(), gb->ptr()); break;
                    case BinOp::sub: K<T>().axpy(n, T(-1), g.ptr(), gb->ptr()); break;
                    case BinOp::mul:
                        for (std::int64_t i = 0; i < n; ++i) (*gb)[i] += g[i] * A[i];
                        break;
                    case BinOp::div:
                        for (std::int64_t i = 0; i < n; ++i) (*gb)[i] -= g[i] * A[i] / (B[i] * B[i]);
                        break;
                }
            }
        });
    }

    auto geo = std::make_shared<Bcast>(broadcast(A.shape(), B.shape()));
    Tensor<T> out(geo->out);
    const T* pa = A.ptr();
    const T* pb = B.ptr();
    T* po = out.ptr();
    for_each_row(*geo, [&](std::int64_t o, std::int64_t ia, std::int64_t ib, std::int64_t n,
                           std::int64_t inca, std::int64_t incb) {
        for (std::int64_t j = 0; j < n; ++j) {
            const T x = pa[ia + j * inca];
            const T y = pb[ib + j * incb];
            T r;
            switch (op) {
                case BinOp::add: r = x + y; break;
                case BinOp::sub: r = x - y; break;
                case BinOp::mul: r = x * y; break;
                default: r = x / y; break;
            }
            po[o + j] = r;
        }
    });
    return make_result<T>(std::move(out), {a, b}, [op, geo](Node<T>& nd) {
        const T* g = nd.grad.ptr();
        const T* pa = nd.parents[0]->value.ptr();
        const T* pb = nd.parents[1]->value.ptr();
        Tensor<T>* ga = grad_of(nd, 0);
        Tensor<T>* gb = grad_of(nd, 1);
        T* qa = ga ? ga->ptr() : nullptr;
        T* qb = gb ? gb->ptr() : nullptr;
        for_each_row(*geo, [&](std::int64_t o, std::int64_t ia, std::int64_t ib, std::int64_t n,
                               std::int64_t inca, std::int64_t incb) {
            for (std::int64_t j = 0; j < n; ++j) {
                const T gg = g[o + j];
                const std::int64_t xa = ia + j * inca;
                const std::int64_t xb = ib + j * incb;
                switch (op) {
                    case BinOp::add:
                        if (qa) qa[xa] += gg;
                        if (qb) qb[xb] += gg;
                        break;
                    case BinOp::sub:
                        if (qa) qa[xa] += gg;
                        if (qb) qb[xb] -= gg;
                        break;
                    case BinOp::mul:
                        if (qa) qa[xa] += gg * pb[xb];
                        if (qb) qb[xb] += gg * pa[xa];
                        break;
                    case BinOp::div:
                        if (qa) qa[xa] += gg / pb[xb];
                        if (qb) qb[xb] -= gg * pa[xa] / (pb[xb] * pb[xb]);
                        break;
                }
            }
        });
    });
}

// Unary elementwise op with derivative expressed from (x, y).
template <class T, class F, class D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
    const Tensor<T>& A = a.value();
    Tensor<T> out(A.shape());
    for (std::int64_t i = 0; i < A.numel(); ++i) out[i] = f(A[i]);
    return make_result<T>(std::move(out), {a}, [dfdx](Node<T>& nd) {
        Tensor<T>* ga = grad_of(nd, 0);
        if (!ga) return;
        const Tensor<T>& x = nd.parents[0]->value;
        const Tensor<T>& y = nd.value;
        for (std::int64_t i = 0; i < x.numel(); ++i) (*ga)[i] += nd.grad[i] * dfdx(x[i], y[i]);
    });
}

int norm_axis(int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
    return axis;
}

// Shared row normalization: rows of length `len`, returns xhat and stores rstd.
template <class T>
void normalize_rows(const T* x, T* y, std::int64_t rows, std::int64_t len, T eps, T* rstd) {
    const auto& k = K<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * len;
        T* yr = y + r * len;
        const T mu = k.sum(len, xr) / static_cast<T>(len);
        const T var = k.sum_sq_dev(len, xr, mu) / static_cast<T>(len);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::int64_t j = 0; j < len; ++j) yr[j] = (xr[j] - mu) * rs;
    }
}

// dx = rstd * (g - mean(g) - y * mean(g * y)), accumulated.
template <class T>
void normalize_rows_backward(const T* g, const T* y, const T* rstd, T* dx, std::int64_t rows,
                             std::int64_t len) {
    const auto& k = K<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * len;
        const T* yr = y + r * len;
        T* dr = dx + r * len;
        const T mg = k.sum(len, gr) / static_cast<T>(len);
        const T mgy = k.dot(len, gr, yr) / static_cast<T>(len);
        const T rs = rstd[r];
        for (std::int64_t j = 0; j < len; ++j) dr[j] += rs * (gr[j] - mg - yr[j] * mgy);
    }
}

template <class T>
Var<T> row_norm(const Var<T>& x, std::int64_t rows, std::int64_t len, T eps) {
    const Tensor<T>& X = x.value();
    Tensor<T> out(X.shape());
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    normalize_rows(X.ptr(), out.ptr(), rows, len, eps, rstd->data());
    return make_result<T>(std::move(out), {x}, [rstd, rows, len](Node<T>& nd) {
        if (Tensor<T>* gx = grad_of(nd, 0))
            normalize_rows_backward(nd.grad.ptr(), nd.value.ptr(), rstd->data(), gx->ptr(), rows, len);
    });
}

template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, int k, int stride, int pad,
            std::int64_t Ho, std::int64_t Wo, T* cols) {
    for (std::int64_t c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        row[oy * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* cols, std::int64_t C, std::int64_t H, std::int64_t W, int k, int stride, int pad,
            std::int64_t Ho, std::int64_t Wo, T* dx) {
    for (std::int64_t c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) dx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinOp::add);
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinOp::sub);
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinOp::mul);
}
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinOp::div);
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    Tensor<T> out(a.shape());
    K<T>().scale(a.numel(), s, a.value().ptr(), out.ptr());
    return make_result<T>(std::move(out), {a}, [s](Node<T>& nd) {
        if (Tensor<T>* ga = grad_of(nd, 0)) K<T>().axpy(nd.grad.numel(), s, nd.grad.ptr(), ga->ptr());
    });
}

template <class T>
Var<T> exp(const Var<T>& a) {
    return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
    return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    return unary<T>(
        a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Var<T> gelu_tanh(const Var<T>& a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    return unary<T>(
        a, [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
        [](T x, T) {
            const T u = c * (x + k * x * x * x);
            const T th = std::tanh(u);
            const T du = c * (T(1) + T(3) * k * x * x);
            return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
        });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> square(const Var<T>& a) {
    return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(K<T>().sum(a.numel(), a.value().ptr()));
    return make_result<T>(std::move(out), {a}, [](Node<T>& nd) {
        if (Tensor<T>* ga = grad_of(nd, 0)) {
            const T g = nd.grad[0];
            for (auto& v : ga->storage()) v += g;
        }
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    const auto n = a.numel();
    if (n == 0) throw ShapeError("mean of empty tensor");
    return mul_scalar(sum(a), T(1) / static_cast<T>(n));
}

template <class T>
Var<T> sum_axis(const Var<T>& a, int axis, bool keepdim) {
    const Shape& s = a.shape();
    axis = norm_axis(axis, static_cast<int>(s.size()));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t len = s[static_cast<std::size_t>(axis)];
    Shape os = s;
    if (keepdim) os[static_cast<std::size_t>(axis)] = 1;
    else os.erase(os.begin() + axis);
    Tensor<T> out(os);
    const T* x = a.value().ptr();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t l = 0; l < len; ++l)
            K<T>().axpy(inner, T(1), x + (o * len + l) * inner, out.ptr() + o * inner);
    return make_result<T>(std::move(out), {a}, [outer, inner, len](Node<T>& nd) {
        if (Tensor<T>* ga = grad_of(nd, 0))
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t l = 0; l < len; ++l)
                    K<T>().axpy(inner, T(1), nd.grad.ptr() + o * inner, ga->ptr() + (o * len + l) * inner);
    });
}

template <class T>
Var<T> mean_axis(const Var<T>& a, int axis, bool keepdim) {
    const std::int64_t len = a.value().dim(axis);
    if (len == 0) throw ShapeError("mean over empty axis");
    return mul_scalar(sum_axis(a, axis, keepdim), T(1) / static_cast<T>(len));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {a}, [](Node<T>& nd) {
        if (Tensor<T>* ga = grad_of(nd, 0)) K<T>().axpy(nd.grad.numel(), T(1), nd.grad.ptr(), ga->ptr());
    });
}

template <class T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (perm.size() != r) throw ShapeError("permute rank mismatch");
    const auto st = contiguous_strides(s);
    Shape os(r);
    auto src = std::make_shared<std::vector<std::int64_t>>(r);  // input stride per output axis
    for (std::size_t i = 0; i < r; ++i) {
        const int p = perm[i];
        if (p < 0 || static_cast<std::size_t>(p) >= r) throw ShapeError("bad permutation");
        os[i] = s[static_cast<std::size_t>(p)];
        (*src)[i] = st[static_cast<std::size_t>(p)];
    }
    Bcast geo{os, *src, std::vector<std::int64_t>(r, 0)};
    auto pgeo = std::make_shared<Bcast>(std::move(geo));
    Tensor<T> out(os);
    const T* x = a.value().ptr();
    T* y = out.ptr();
    for_each_row(*pgeo, [&](std::int64_t o, std::int64_t ia, std::int64_t, std::int64_t n, std::int64_t inca,
                            std::int64_t) {
        for (std::int64_t j = 0; j < n; ++j) y[o + j] = x[ia + j * inca];
    });
    return make_result<T>(std::move(out), {a}, [pgeo](Node<T>& nd) {
        Tensor<T>* ga = grad_of(nd, 0);
        if (!ga) return;
        const T* g = nd.grad.ptr();
        T* d = ga->ptr();
        for_each_row(*pgeo, [&](std::int64_t o, std::int64_t ia, std::int64_t, std::int64_t n,
                                std::int64_t inca, std::int64_t) {
            for (std::int64_t j = 0; j < n; ++j) d[ia + j * inca] += g[o + j];
        });
    });
}

template <class T>
Var<T> slice(const Var<T>& a, int axis, std::int64_t start, std::int64_t len) {
    const Shape& s = a.shape();
    axis = norm_axis(axis, static_cast<int>(s.size()));
    const std::int64_t full = s[static_cast<std::size_t>(axis)];
    if (start < 0 || len < 0 || start + len > full) throw ShapeError("slice out of range");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    Shape os = s;
    os[static_cast<std::size_t>(axis)] = len;
    Tensor<T> out(os);
    const T* x = a.value().ptr();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(x + (o * full + start) * inner, len * inner, out.ptr() + o * len * inner);
    return make_result<T>(std::move(out), {a}, [outer, inner, full, start, len](Node<T>& nd) {
        if (Tensor<T>* ga = grad_of(nd, 0))
            for (std::int64_t o = 0; o < outer; ++o)
                K<T>().axpy(len * inner, T(1), nd.grad.ptr() + o * len * inner,
                            ga->ptr() + (o * full + start) * inner);
    });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    const Shape& s0 = parts[0].shape();
    axis = norm_axis(axis, static_cast<int>(s0.size()));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
    auto lens = std::make_shared<std::vector<std::int64_t>>();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != s0[i])
                throw ShapeError("concat shape mismatch: " + to_string(s) + " vs " + to_string(s0));
        lens->push_back(s[static_cast<std::size_t>(axis)]);
        total += s[static_cast<std::size_t>(axis)];
    }
    Shape os = s0;
    os[static_cast<std::size_t>(axis)] = total;
    Tensor<T> out(os);
    std::int64_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::int64_t l = (*lens)[k];
        const T* x = parts[k].value().ptr();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(x + o * l * inner, l * inner, out.ptr() + (o * total + off) * inner);
        off += l;
    }
    return make_result<T>(std::move(out), parts, [lens, outer, inner, total](Node<T>& nd) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < lens->size(); ++k) {
            const std::int64_t l = (*lens)[k];
            if (Tensor<T>* gk = grad_of(nd, k))
                for (std::int64_t o = 0; o < outer; ++o)
                    K<T>().axpy(l * inner, T(1), nd.grad.ptr() + (o * total + off) * inner,
                                gk->ptr() + o * l * inner);
            off += l;
        }
    });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& xs = x.shape();
    if (w.value().rank() != 2 || xs.empty() || xs.back() != w.dim(0))
        throw ShapeError("linear: input " + to_string(xs) + " vs weight " + to_string(w.shape()));
    const std::int64_t in = w.dim(0), outf = w.dim(1);
    const std::int64_t m = x.numel() / std::max<std::int64_t>(in, 1);
    if (b.defined() && (b.value().rank() != 1 || b.dim(0) != outf)) throw ShapeError("linear: bias shape");
    Shape os = xs;
    os.back() = outf;
    Tensor<T> out(os);
    if (m > 0) {
        K<T>().gemm(false, false, m, outf, in, T(1), x.value().ptr(), in, w.value().ptr(), outf, T(0), out.ptr(),
                    outf);
        if (b.defined())
            for (std::int64_t r = 0; r < m; ++r) K<T>().add(outf, out.ptr() + r * outf, b.value().ptr(), out.ptr() + r * outf);
    }
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    const bool has_b = b.defined();
    return make_result<T>(std::move(out), std::move(inputs), [m, in, outf, has_b](Node<T>& nd) {
        if (m == 0) return;
        const T* g = nd.grad.ptr();
        const T* X = nd.parents[0]->value.ptr();
        const T* W = nd.parents[1]->value.ptr();
        if (Tensor<T>* gx = grad_of(nd, 0))
            K<T>().gemm(false, true, m, in, outf, T(1), g, outf, W, outf, T(1), gx->ptr(), in);
        if (Tensor<T>* gw = grad_of(nd, 1))
            K<T>().gemm(true, false, in, outf, m, T(1), X, in, g, outf, T(1), gw->ptr(), outf);
        if (has_b)
            if (Tensor<T>* gb = grad_of(nd, 2))
                for (std::int64_t r = 0; r < m; ++r) K<T>().axpy(outf, T(1), g + r * outf, gb->ptr());
    });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, T eps) {
    const std::int64_t len = x.shape().empty() ? 1 : x.shape().back();
    return row_norm(x, len ? x.numel() / len : 0, len, eps);
}

template <class T>
Var<T> group_norm(const Var<T>& x, int groups, T eps) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("group_norm expects NCHW, got " + to_string(s));
    if (groups <= 0 || s[1] % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const std::int64_t rows = s[0] * groups;
    return row_norm(x, rows, x.numel() / rows, eps);
}

template <class T>
Var<T> batch_standardize(const Var<T>& x, T eps) {
    if (x.value().rank() != 2) throw ShapeError("batch_standardize expects [B, F]");
    return permute(layer_norm(permute(x, {1, 0}), eps), {1, 0});
}

template <class T>
Var<T> l2_normalize(const Var<T>& x, T eps) {
    const std::int64_t len = x.shape().back();
    const std::int64_t rows = x.numel() / len;
    Tensor<T> out(x.shape());
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* X = x.value().ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T nrm = std::max(std::sqrt(K<T>().dot(len, X + r * len, X + r * len)), eps);
        (*norms)[static_cast<std::size_t>(r)] = nrm;
        K<T>().scale(len, T(1) / nrm, X + r * len, out.ptr() + r * len);
    }
    return make_result<T>(std::move(out), {x}, [norms, rows, len, eps](Node<T>& nd) {
        Tensor<T>* gx = grad_of(nd, 0);
        if (!gx) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* g = nd.grad.ptr() + r * len;
            const T* y = nd.value.ptr() + r * len;
            T* d = gx->ptr() + r * len;
            const T nrm = (*norms)[static_cast<std::size_t>(r)];
            const T yg = nrm > eps ? K<T>().dot(len, y, g) : T(0);
            for (std::int64_t j = 0; j < len; ++j) d[j] += (g[j] - y[j] * yg) / nrm;
        }
    });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3])
        throw ShapeError("conv2d: input " + to_string(xs) + " weight " + to_string(ws));
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::int64_t Co = ws[0];
    const int k = static_cast<int>(ws[2]);
    const std::int64_t Ho = (H + 2 * pad - k) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - k) / stride + 1;
    const std::int64_t Kd = C * k * k, P = Ho * Wo;
    const bool direct = k == 1 && stride == 1 && pad == 0;
    Tensor<T> out(Shape{B, Co, Ho, Wo});
    std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(Kd * P));
    for (std::int64_t n = 0; n < B; ++n) {
        const T* xn = x.value().ptr() + n * C * H * W;
        const T* src = xn;
        if (!direct) {
            im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
            src = cols.data();
        }
        T* yn = out.ptr() + n * Co * P;
        K<T>().gemm(false, false, Co, P, Kd, T(1), w.value().ptr(), Kd, src, P, T(0), yn, P);
        if (b.defined())
            for (std::int64_t c = 0; c < Co; ++c) {
                const T bc = b.value()[c];
                for (std::int64_t p = 0; p < P; ++p) yn[c * P + p] += bc;
            }
    }
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    const bool has_b = b.defined();
    return make_result<T>(std::move(out), std::move(inputs),
                          [=](Node<T>& nd) {
                              Tensor<T>* gx = grad_of(nd, 0);
                              Tensor<T>* gw = grad_of(nd, 1);
                              Tensor<T>* gb = has_b ? grad_of(nd, 2) : nullptr;
                              const T* X = nd.parents[0]->value.ptr();
                              const T* Wt = nd.parents[1]->value.ptr();
                              std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(Kd * P));
                              std::vector<T> dcols(direct ? 0 : static_cast<std::size_t>(Kd * P));
                              for (std::int64_t n = 0; n < B; ++n) {
                                  const T* g = nd.grad.ptr() + n * Co * P;
                                  const T* xn = X + n * C * H * W;
                                  if (gw) {
                                      const T* src = xn;
                                      if (!direct) {
                                          im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
                                          src = cols.data();
                                      }
                                      K<T>().gemm(false, true, Co, Kd, P, T(1), g, P, src, P, T(1), gw->ptr(), Kd);
                                  }
                                  if (gx) {
                                      T* dxn = gx->ptr() + n * C * H * W;
                                      if (direct) {
                                          K<T>().gemm(true, false, Kd, P, Co, T(1), Wt, Kd, g, P, T(1), dxn, P);
                                      } else {
                                          K<T>().gemm(true, false, Kd, P, Co, T(1), Wt, Kd, g, P, T(0), dcols.data(), P);
                                          col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, dxn);
                                      }
                                  }
                                  if (gb)
                                      for (std::int64_t c = 0; c < Co; ++c) (*gb)[c] += K<T>().sum(P, g + c * P);
                              }
                          });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("upsample expects NCHW");
    const std::int64_t BC = s[0] * s[1], H = s[2], W = s[3];
    Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
    const T* X = x.value().ptr();
    for (std::int64_t c = 0; c < BC; ++c)
        for (std::int64_t i = 0; i < 2 * H; ++i)
            for (std::int64_t j = 0; j < 2 * W; ++j)
                out[(c * 2 * H + i) * 2 * W + j] = X[(c * H + i / 2) * W + j / 2];
    return make_result<T>(std::move(out), {x}, [BC, H, W](Node<T>& nd) {
        Tensor<T>* gx = grad_of(nd, 0);
        if (!gx) return;
        for (std::int64_t c = 0; c < BC; ++c)
            for (std::int64_t i = 0; i < 2 * H; ++i)
                for (std::int64_t j = 0; j < 2 * W; ++j)
                    (*gx)[(c * H + i / 2) * W + j / 2] += nd.grad[(c * 2 * H + i) * 2 * W + j];
    });
}

template <class T>
Var<T> avg_pool2x(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2x expects NCHW with even H, W");
    const std::int64_t BC = s[0] * s[1], Ho = s[2] / 2, Wo = s[3] / 2;
    Tensor<T> out(Shape{s[0], s[1], Ho, Wo});
    const T* X = x.value().ptr();
    for (std::int64_t c = 0; c < BC; ++c)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j) {
                const T* p = X + (c * 2 * Ho + 2 * i) * 2 * Wo + 2 * j;
                out[(c * Ho + i) * Wo + j] = T(0.25) * (p[0] + p[1] + p[2 * Wo] + p[2 * Wo + 1]);
            }
    return make_result<T>(std::move(out), {x}, [BC, Ho, Wo](Node<T>& nd) {
        Tensor<T>* gx = grad_of(nd, 0);
        if (!gx) return;
        for (std::int64_t c = 0; c < BC; ++c)
            for (std::int64_t i = 0; i < Ho; ++i)
                for (std::int64_t j = 0; j < Wo; ++j) {
                    const T g = T(0.25) * nd.grad[(c * Ho + i) * Wo + j];
                    T* p = gx->ptr() + (c * 2 * Ho + 2 * i) * 2 * Wo + 2 * j;
                    p[0] += g;
                    p[1] += g;
                    p[2 * Wo] += g;
                    p[2 * Wo + 1] += g;
                }
    });
}

template <class T>
Var<T> attention(const Var<T>& qkv, int heads, const AttentionOptions<T>& opt) {
    const Shape& s = qkv.shape();
    if (s.size() != 3 || s[2] % 3 != 0) throw ShapeError("attention expects packed qkv [B, N, 3D]");
    const std::int64_t B = s[0], N = s[1], D = s[2] / 3;
    if (heads <= 0 || D % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const std::int64_t dh = D / heads;
    const std::int64_t ld = 3 * D;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    if (opt.mask && static_cast<std::int64_t>(opt.mask->size()) != N * N)
        throw ShapeError("attention mask size mismatch");
    const bool gated = opt.gate.defined();
    const T gate = gated ? opt.gate.value().item() : T(1);
    const std::int64_t gk = opt.gated_key;
    if (gated && (gk < 0 || gk >= N)) throw ShapeError("attention: gated key out of range");
    if (gated && gate < T(0)) throw DomainError("attention gate must be non-negative");

    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * heads * N * N));
    // Unweighted ratio exp(s_ic)/Z_i, needed for the gate gradient.
    auto ratio = std::make_shared<std::vector<T>>(gated ? static_cast<std::size_t>(B * heads * N) : 0);
    auto mask = opt.mask ? std::make_shared<std::vector<std::uint8_t>>(*opt.mask) : nullptr;
    Tensor<T> out(Shape{B, N, D});
    const T* X = qkv.value().ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < heads; ++h) {
            const T* q = X + b * N * ld + h * dh;
            const T* k = q + D;
            const T* v = q + 2 * D;
            T* P = probs->data() + (b * heads + h) * N * N;
            K<T>().gemm(false, true, N, N, dh, scale, q, ld, k, ld, T(0), P, N);
            for (std::int64_t i = 0; i < N; ++i) {
                T* row = P + i * N;
                const std::uint8_t* mrow = mask ? mask->data() + i * N : nullptr;
                auto weight = [&](std::int64_t j) -> T {
                    if (mrow && !mrow[j]) return T(0);
                    if (gated && j == gk && i != gk) return gate;
                    return T(1);
                };
                T mx = -std::numeric_limits<T>::infinity();
                for (std::int64_t j = 0; j < N; ++j)
                    if (weight(j) > T(0)) mx = std::max(mx, row[j]);
                T z = 0;
                T ec = 0;
                for (std::int64_t j = 0; j < N; ++j) {
                    const T w = weight(j);
                    const T e = w > T(0) ? std::exp(row[j] - mx) : T(0);
                    if (gated && j == gk && i != gk && (!mrow || mrow[j])) ec = std::exp(std::min(row[j] - mx, T(60)));
                    row[j] = w * e;
                    z += row[j];
                }
                const T iz = T(1) / z;
                for (std::int64_t j = 0; j < N; ++j) row[j] *= iz;
                if (gated) (*ratio)[static_cast<std::size_t>((b * heads + h) * N + i)] = i != gk ? ec * iz : T(0);
            }
            K<T>().gemm(false, false, N, dh, N, T(1), P, N, v, ld, T(0), out.ptr() + b * N * D + h * dh, D);
        }
    if (opt.record) *opt.record = Tensor<T>(Shape{B, heads, N, N}, *probs);

    std::vector<Var<T>> inputs{qkv};
    if (gated) inputs.push_back(opt.gate);
    return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& nd) {
        Tensor<T>* gq = grad_of(nd, 0);
        Tensor<T>* gg = gated ? grad_of(nd, 1) : nullptr;
        const T* X = nd.parents[0]->value.ptr();
        std::vector<T> dP(static_cast<std::size_t>(N * N));
        T gate_grad = 0;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t h = 0; h < heads; ++h) {
                const T* q = X + b * N * ld + h * dh;
                const T* k = q + D;
                const T* v = q + 2 * D;
                const T* P = probs->data() + (b * heads + h) * N * N;
                const T* g = nd.grad.ptr() + b * N * D + h * dh;
                K<T>().gemm(false, true, N, N, dh, T(1), g, D, v, ld, T(0), dP.data(), N);
                if (gq) {
                    T* dv = gq->ptr() + b * N * ld + h * dh + 2 * D;
                    K<T>().gemm(true, false, N, dh, N, T(1), P, N, g, D, T(1), dv, ld);
                }
                for (std::int64_t i = 0; i < N; ++i) {
                    T* dr = dP.data() + i * N;
                    const T* pr = P + i * N;
                    const T rd = K<T>().dot(N, pr, dr);
                    if (gated && i != gk)
                        gate_grad += (*ratio)[static_cast<std::size_t>((b * heads + h) * N + i)] * (dr[gk] - rd);
                    for (std::int64_t j = 0; j < N; ++j) dr[j] = pr[j] * (dr[j] - rd);
                }
                if (gq) {
                    T* dq = gq->ptr() + b * N * ld + h * dh;
                    T* dk = dq + D;
                    K<T>().gemm(false, false, N, dh, N, scale, dP.data(), N, k, ld, T(1), dq, ld);
                    K<T>().gemm(true, false, N, dh, N, scale, dP.data(), N, q, ld, T(1), dk, ld);
                }
            }
        if (gg) (*gg)[0] += gate_grad;
    });
}

template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& idx) {
    if (table.value().rank() != 2) throw ShapeError("embedding table must be 2-D");
    const std::int64_t V = table.dim(0), D = table.dim(1);
    const std::int64_t B = static_cast<std::int64_t>(idx.size());
    Tensor<T> out(Shape{B, D});
    for (std::int64_t i = 0; i < B; ++i) {
        const int r = idx[static_cast<std::size_t>(i)];
        if (r < 0 || r >= V) throw DomainError("embedding index " + std::to_string(r) + " out of range");
        std::copy_n(table.value().ptr() + r * D, D, out.ptr() + i * D);
    }
    auto ids = std::make_shared<std::vector<int>>(idx);
    return make_result<T>(std::move(out), {table}, [ids, D](Node<T>& nd) {
        if (Tensor<T>* gt = grad_of(nd, 0))
            for (std::size_t i = 0; i < ids->size(); ++i)
                K<T>().axpy(D, T(1), nd.grad.ptr() + static_cast<std::int64_t>(i) * D,
                            gt->ptr() + static_cast<std::int64_t>((*ids)[i]) * D);
    });
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch");
    return mean(square(sub(a, b)));
}

template <class T>
Var<T> mse_per_sample(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape() || a.shape().empty()) throw ShapeError("mse_per_sample shape mismatch");
    const std::int64_t B = a.dim(0);
    return mean_axis(reshape(square(sub(a, b)), Shape{B, -1}), 1);
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    if (logits.value().rank() != 2) throw ShapeError("cross_entropy expects [B, K]");
    const std::int64_t B = logits.dim(0), C = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B) throw ShapeError("cross_entropy label count");
    if (B == 0) throw DomainError("cross_entropy on empty batch");
    auto sm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * C));
    T loss = 0;
    const T* L = logits.value().ptr();
    for (std::int64_t i = 0; i < B; ++i) {
        const T* row = L + i * C;
        const T mx = *std::max_element(row, row + C);
        T z = 0;
        for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= C) throw DomainError("cross_entropy label out of range");
        loss += std::log(z) + mx - row[y];
        for (std::int64_t j = 0; j < C; ++j) (*sm)[static_cast<std::size_t>(i * C + j)] = std::exp(row[j] - mx) / z;
    }
    auto ys = std::make_shared<std::vector<int>>(labels);
    return make_result<T>(Tensor<T>::scalar(loss / static_cast<T>(B)), {logits}, [sm, ys, B, C](Node<T>& nd) {
        Tensor<T>* gl = grad_of(nd, 0);
        if (!gl) return;
        const T g = nd.grad[0] / static_cast<T>(B);
        for (std::int64_t i = 0; i < B; ++i)
            for (std::int64_t j = 0; j < C; ++j) {
                const T p = (*sm)[static_cast<std::size_t>(i * C + j)];
                (*gl)[i * C + j] += g * (p - (j == (*ys)[static_cast<std::size_t>(i)] ? T(1) : T(0)));
            }
    });
}

template <class T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw DomainError("dropout probability must be < 1");
    auto keep = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    const T s = static_cast<T>(1.0 / (1.0 - p));
    for (auto& k : *keep) k = rng.bernoulli(p) ? T(0) : s;
    Tensor<T> out(x.shape());
    K<T>().mul(x.numel(), x.value().ptr(), keep->data(), out.ptr());
    return make_result<T>(std::move(out), {x}, [keep](Node<T>& nd) {
        if (Tensor<T>* gx = grad_of(nd, 0))
            for (std::int64_t i = 0; i < nd.grad.numel(); ++i) (*gx)[i] += nd.grad[i] * (*keep)[static_cast<std::size_t>(i)];
    });
}

#define SDIFF_INSTANTIATE(T)                                                                    \
    template Var<T> add(const Var<T>&, const Var<T>&);                                          \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                          \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
    template Var<T> div(const Var<T>&, const Var<T>&);                                          \
    template Var<T> add_scalar(const Var<T>&, T);                                               \
    template Var<T> mul_scalar(const Var<T>&, T);                                               \
    template Var<T> exp(const Var<T>&);                                                         \
    template Var<T> log(const Var<T>&);                                                         \
    template Var<T> silu(const Var<T>&);                                                        \
    template Var<T> gelu_tanh(const Var<T>&);                                                   \
    template Var<T> relu(const Var<T>&);                                                        \
    template Var<T> square(const Var<T>&);                                                      \
    template Var<T> sum(const Var<T>&);                                                         \
    template Var<T> mean(const Var<T>&);                                                        \
    template Var<T> sum_axis(const Var<T>&, int, bool);                                         \
    template Var<T> mean_axis(const Var<T>&, int, bool);                                        \
    template Var<T> reshape(const Var<T>&, Shape);                                              \
    template Var<T> permute(const Var<T>&, const std::vector<int>&);                            \
    template Var<T> slice(const Var<T>&, int, std::int64_t, std::int64_t);                      \
    template Var<T> concat(const std::vector<Var<T>>&, int);                                    \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                        \
    template Var<T> layer_norm(const Var<T>&, T);                                               \
    template Var<T> group_norm(const Var<T>&, int, T);                                          \
    template Var<T> batch_standardize(const Var<T>&, T);                                        \
    template Var<T> l2_normalize(const Var<T>&, T);                                             \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);              \
    template Var<T> upsample_nearest2x(const Var<T>&);                                          \
    template Var<T> avg_pool2x(const Var<T>&);                                                  \
    template Var<T> attention(const Var<T>&, int, const AttentionOptions<T>&);                  \
    template Var<T> embedding(const Var<T>&, const std::vector<int>&);                          \
    template Var<T> mse(const Var<T>&, const Var<T>&);                                          \
    template Var<T> mse_per_sample(const Var<T>&, const Var<T>&);                               \
    template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&);                      \
    template Var<T> dropout(const Var<T>&, double, Rng&);

SDIFF_INSTANTIATE(float)
SDIFF_INSTANTIATE(double)

#undef SDIFF_INSTANTIATE

}  // namespace sdiff::ag
