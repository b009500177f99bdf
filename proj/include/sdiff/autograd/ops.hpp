#pragma once
// Differentiable tensor ops. Elementwise binaries broadcast numpy-style.
// All ops are instantiated for float (training) and double (gradient checks).

#include <cstdint>
#include <vector>

#include "sdiff/autograd/var.hpp"
#include "sdiff/core/rng.hpp"

namespace sdiff::ag {

template <class T>
Var<T> constant(Tensor<T> t) {
    return Var<T>(std::move(t), false);
}

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> add_scalar(const Var<T>& a, T s);
template <class T> Var<T> mul_scalar(const Var<T>& a, T s);

template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);
template <class T> Var<T> silu(const Var<T>& a);
template <class T> Var<T> gelu_tanh(const Var<T>& a);
template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> square(const Var<T>& a);

template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
template <class T> Var<T> sum_axis(const Var<T>& a, int axis, bool keepdim = false);
template <class T> Var<T> mean_axis(const Var<T>& a, int axis, bool keepdim = false);

template <class T> Var<T> reshape(const Var<T>& a, Shape shape);
template <class T> Var<T> permute(const Var<T>& a, const std::vector<int>& perm);
template <class T> Var<T> slice(const Var<T>& a, int axis, std::int64_t start, std::int64_t len);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);

/// x[..., in] @ w[in, out] (+ b[out]).
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {});

/// Normalizes over the last dimension, no affine.
template <class T> Var<T> layer_norm(const Var<T>& x, T eps);
/// NCHW group normalization, no affine.
template <class T> Var<T> group_norm(const Var<T>& x, int groups, T eps);
/// Per-column standardization over the batch (parameter-free batch norm).
template <class T> Var<T> batch_standardize(const Var<T>& x, T eps);
/// Rows of the last dimension scaled to unit L2 norm.
template <class T> Var<T> l2_normalize(const Var<T>& x, T eps = T(1e-12));

/// x[B,Cin,H,W], w[Cout,Cin,k,k], b[Cout] (optional).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <class T> Var<T> upsample_nearest2x(const Var<T>& x);
template <class T> Var<T> avg_pool2x(const Var<T>& x);

template <class T>
struct AttentionOptions {
    // N x N, nonzero = allowed. Shared across batch and heads.
    const std::vector<std::uint8_t>* mask = nullptr;
    // Optional scalar presence weight applied to key `gated_key` for every
    // other query: that key contributes gate * exp(s) to numerator and
    // denominator. gate = 0 makes the key invisible.
    Var<T> gate;
    int gated_key = 0;
    // If set, receives post-softmax probabilities [B, heads, N, N].
    Tensor<T>* record = nullptr;
};

/// Multi-head self-attention over packed qkv[B, N, 3D]; returns [B, N, D].
template <class T>
Var<T> attention(const Var<T>& qkv, int heads, const AttentionOptions<T>& opt = {});

/// Rows of table[V, D] selected by idx; returns [idx.size(), D].
template <class T> Var<T> embedding(const Var<T>& table, const std::vector<int>& idx);

template <class T> Var<T> mse(const Var<T>& a, const Var<T>& b);
/// Mean squared error per leading index; returns [B].
template <class T> Var<T> mse_per_sample(const Var<T>& a, const Var<T>& b);
/// Mean softmax cross-entropy of logits[B, K] against integer labels.
template <class T> Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

template <class T> Var<T> dropout(const Var<T>& x, double p, Rng& rng);

}  // namespace sdiff::ag
