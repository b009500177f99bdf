#pragma once

#include <optional>
#include <span>
#include <vector>

#include "sdiff/autograd/ops.hpp"
#include "sdiff/nn/params.hpp"

namespace sdiff::nn {

/// Raw sinusoidal embedding [B, dim], layout [cos | sin] with frequencies
/// exp(-ln(max_period) * i / half). Odd dims are rejected.
Tensor<double> sinusoid(std::span<const double> t, int dim, double max_period = 10000.0);

template <class T>
Var<T> sinusoid_var(std::span<const double> t, int dim) {
    return ag::constant(sinusoid(t, dim).cast<T>());
}

enum class Act { silu, gelu_tanh, relu, none };

template <class T>
Var<T> activate(const Var<T>& x, Act a) {
    switch (a) {
        case Act::silu: return ag::silu(x);
        case Act::gelu_tanh: return ag::gelu_tanh(x);
        case Act::relu: return ag::relu(x);
        case Act::none: break;
    }
    return x;
}

template <class T>
struct Linear {
    Var<T> w, b;
    std::int64_t in = 0, out = 0;

    Linear() = default;
    // Weight defaults to Xavier-uniform.
    Linear(const Scope<T>& s, std::int64_t in_f, std::int64_t out_f, bool bias = true,
           std::optional<Init> wi = std::nullopt, Init bi = Init::Zeros())
        : in(in_f), out(out_f) {
        w = s.add("weight", Shape{in_f, out_f}, Role::weight, wi.value_or(Init::Xavier(in_f, out_f)));
        if (bias) b = s.add("bias", Shape{out_f}, Role::bias, bi);
    }
    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, w, b); }
};

template <class T>
struct LayerNorm {
    Var<T> g, b;
    T eps = T(1e-6);

    LayerNorm() = default;
    LayerNorm(const Scope<T>& s, std::int64_t dim, bool affine, T eps_ = T(1e-6)) : eps(eps_) {
        if (affine) {
            g = s.add("weight", Shape{dim}, Role::norm, Init::Ones());
            b = s.add("bias", Shape{dim}, Role::bias, Init::Zeros());
        }
    }
    Var<T> operator()(const Var<T>& x) const {
        Var<T> y = ag::layer_norm(x, eps);
        if (g.defined()) y = ag::add(ag::mul(y, g), b);
        return y;
    }
};

template <class T>
struct GroupNorm {
    Var<T> g, b;
    int groups = 32;
    std::int64_t channels = 0;
    T eps = T(1e-5);

    GroupNorm() = default;
    GroupNorm(const Scope<T>& s, std::int64_t c, int groups_, bool affine = true, T eps_ = T(1e-5))
        : groups(groups_), channels(c), eps(eps_) {
        if (affine) {
            g = s.add("weight", Shape{c}, Role::norm, Init::Ones());
            b = s.add("bias", Shape{c}, Role::bias, Init::Zeros());
        }
    }
    Var<T> operator()(const Var<T>& x) const {
        Var<T> y = ag::group_norm(x, groups, eps);
        if (g.defined())
            y = ag::add(ag::mul(y, ag::reshape(g, Shape{1, channels, 1, 1})), ag::reshape(b, Shape{1, channels, 1, 1}));
        return y;
    }
};

template <class T>
struct Conv2d {
    Var<T> w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(const Scope<T>& s, std::int64_t cin, std::int64_t cout, int k, int stride_ = 1, int pad_ = 0,
           bool bias = true, double gain = 1.0)
        : stride(stride_), pad(pad_) {
        w = s.add("weight", Shape{cout, cin, k, k}, Role::weight, Init::Xavier(cin * k * k, cout * k * k, gain));
        if (bias) b = s.add("bias", Shape{cout}, Role::bias, Init::Zeros());
    }
    Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

template <class T>
struct Mlp {
    Linear<T> fc1, fc2;
    Act act = Act::gelu_tanh;

    Mlp() = default;
    Mlp(const Scope<T>& s, std::int64_t in, std::int64_t hidden, std::int64_t out, Act a, bool bias = true)
        : fc1(s.sub("fc1"), in, hidden, bias), fc2(s.sub("fc2"), hidden, out, bias), act(a) {}
    Var<T> operator()(const Var<T>& x) const { return fc2(activate(fc1(x), act)); }
};

/// sinusoid(freq) -> Linear -> SiLU -> Linear.
template <class T>
struct TimestepEmbedder {
    Linear<T> fc1, fc2;
    int freq = 256;

    TimestepEmbedder() = default;
    TimestepEmbedder(const Scope<T>& s, int freq_dim, std::int64_t hidden, std::int64_t out,
                     std::optional<Init> w1 = std::nullopt, std::optional<Init> w2 = std::nullopt)
        : fc1(s.sub("fc1"), freq_dim, hidden, true, w1), fc2(s.sub("fc2"), hidden, out, true, w2), freq(freq_dim) {}
    Var<T> operator()(std::span<const double> t) const { return fc2(ag::silu(fc1(sinusoid_var<T>(t, freq)))); }
};

/// Self-attention with packed qkv projection.
template <class T>
struct Attention {
    Linear<T> qkv, proj;
    int heads = 1;

    Attention() = default;
    Attention(const Scope<T>& s, std::int64_t dim, int heads_, bool qkv_bias)
        : qkv(s.sub("qkv"), dim, 3 * dim, qkv_bias), proj(s.sub("proj"), dim, dim), heads(heads_) {}
    Var<T> operator()(const Var<T>& x, const ag::AttentionOptions<T>& opt = {}) const {
        return proj(ag::attention(qkv(x), heads, opt));
    }
};

}  // namespace sdiff::nn
