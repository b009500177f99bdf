#pragma once
// Self-conditioning: an intermediate feature is pooled, projected, scaled by a
// function of time and added back into the conditioning embedding consumed by
// every later block. Token backbones can instead carry a learnable summary
// token through all attention layers.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdiff/nn/layers.hpp"

namespace sdiff {

enum class SelfCondMode { off, adaptive, additive, cls_token };
enum class InitPolicy { zero_scale, standard };

struct SelfCondConfig {
    int tap_layer = 0;  // 1-based tap index; 0 = none
    SelfCondMode mode = SelfCondMode::off;
    InitPolicy init_policy = InitPolicy::zero_scale;
    bool mask_cls_aug = true;
};

std::string to_string(SelfCondMode m);
SelfCondMode parse_selfcond_mode(const std::string& s);
std::string to_string(InitPolicy p);
InitPolicy parse_init_policy(const std::string& s);

/// Mean over spatial positions ([B,C,H,W] -> [B,C]) or tokens ([B,N,D] -> [B,D]).
template <class T>
Var<T> pool_feature(const Var<T>& tap) {
    if (!tap.defined() || tap.numel() == 0) throw ShapeError("pool_feature on empty tap");
    const Shape& s = tap.shape();
    if (s.size() == 4) return ag::mean_axis(ag::reshape(tap, Shape{s[0], s[1], -1}), 2);
    if (s.size() == 3) return ag::mean_axis(tap, 1);
    throw ShapeError("pool_feature expects a spatial map or token matrix, got " + to_string(s));
}

/// Projection W (bias-free, tap width -> cond width) and, for adaptive mode,
/// a time-conditioned scale map s(t): sinusoid -> Linear -> SiLU -> Linear.
/// Under zero_scale the last layer of s (adaptive) or W itself (additive) is
/// zero, so the injection starts as the identity.
template <class T>
struct InjectionHead {
    SelfCondMode mode = SelfCondMode::off;
    nn::Linear<T> proj;
    nn::TimestepEmbedder<T> scale;

    InjectionHead() = default;
    InjectionHead(const Scope<T>& s, SelfCondMode m, InitPolicy policy, std::int64_t tap_width,
                  std::int64_t cond_width, int freq_dim)
        : mode(m) {
        const bool zero = policy == InitPolicy::zero_scale;
        if (m == SelfCondMode::adaptive) {
            proj = nn::Linear<T>(s.sub("proj"), tap_width, cond_width, false);
            scale = nn::TimestepEmbedder<T>(s.sub("scale"), freq_dim, cond_width, cond_width, std::nullopt,
                                            zero ? std::optional<Init>(Init::Zeros()) : std::nullopt);
        } else if (m == SelfCondMode::additive) {
            proj = nn::Linear<T>(s.sub("proj"), tap_width, cond_width, false,
                                 zero ? std::optional<Init>(Init::Zeros()) : std::nullopt);
        }
    }
    bool active() const { return mode == SelfCondMode::adaptive || mode == SelfCondMode::additive; }
};

/// e' = e + s(t) * W pooled (adaptive) or e + W pooled (additive); identity when off.
template <class T>
Var<T> inject(const Var<T>& e, const Var<T>& pooled, std::span<const double> t, const InjectionHead<T>& head) {
    switch (head.mode) {
        case SelfCondMode::adaptive: return ag::add(e, ag::mul(head.scale(t), head.proj(pooled)));
        case SelfCondMode::additive: return ag::add(e, head.proj(pooled));
        default: return e;
    }
}

/// Token layout [cls?, aug?, ...]. Everything may attend to everything except
/// cls <-> aug when both are present. Returned row-major N x N, 1 = allowed.
std::vector<std::uint8_t> build_attention_mask(bool has_cls, bool has_aug, std::int64_t n_tokens);

/// Prepends the summary token (param [1, 1, D]) to tokens [B, N, D].
template <class T>
Var<T> attach_summary_token(const Var<T>& tokens, const Var<T>& cls) {
    if (!cls.defined()) throw ConfigError("summary token requires a token backbone", "selfcond.mode");
    const Shape& s = tokens.shape();
    if (s.size() != 3 || cls.shape() != Shape{1, 1, s[2]})
        throw ShapeError("summary token width mismatch: " + to_string(cls.shape()) + " vs " + to_string(s));
    // Broadcast the token over the batch by adding it to a zero block.
    Var<T> rows = ag::add(ag::constant(Tensor<T>(Shape{s[0], 1, s[2]})), cls);
    return ag::concat<T>({rows, tokens}, 1);
}

}  // namespace sdiff
