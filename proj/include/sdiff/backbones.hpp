#pragma once
// Denoiser backbones: UNet (ddpm / ddpm++ layouts), UViT (everything as
// tokens, long skips) and DiT (adaLN-Zero). Each exposes numbered feature taps
// and routes its conditioning embedding through an optional self-conditioning
// head.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sdiff/nn/layers.hpp"
#include "sdiff/selfcond.hpp"

namespace sdiff {

enum class Family { unet_ddpm, unet_ddpmpp, uvit, dit };

std::string to_string(Family f);
Family parse_family(const std::string& s);

inline constexpr int kAugDim = 9;

struct BackboneSpec {
    Family family = Family::dit;
    int image_size = 16;
    int in_channels = 3;
    int hidden = 64;  // DiT / UViT width, UNet base channels
    int depth = 6;    // transformer blocks
    std::vector<int> channel_mult{1, 2};
    int blocks_per_res = 1;
    std::vector<int> attn_resolutions{8};
    int heads = 4;
    int patch = 4;
    double mlp_ratio = 4.0;
    double dropout = 0.0;
    int num_classes = 0;  // 0 = unconditional; otherwise row num_classes is the null label
    bool aug_cond = false;
    int freq_dim = 256;  // DiT sinusoid width
    int norm_groups = 32;
    bool ada_gn = false;  // UNet: scale-shift instead of additive time injection
    // Planted-signal construction for profiler validation: the readout of tap
    // `planted_layer` (not the residual stream) carries a class embedding.
    int planted_layer = 0;
    double planted_strength = 0.0;
    int planted_classes = 2;
};

/// Published configurations: ddpm, ddpmpp, uvit-s, dit-b, dit-l, dit-xl.
BackboneSpec paper_spec(const std::string& name);
std::vector<std::string> paper_spec_names();

struct Conditioning {
    std::vector<double> t;     // network time input per sample
    std::vector<int> labels;   // class ids (num_classes = null); empty = unconditional
    Tensor<double> aug;        // [B, 9]; empty means the zero label
    std::vector<int> planted;  // classes for the planted-signal readout
};

struct ForwardOptions {
    std::vector<int> taps;  // requested tap indices (1-based)
    bool train = false;     // enables dropout
    Rng* rng = nullptr;     // dropout stream
    bool record_attention = false;
    bool sampling = false;  // enforces the zero augmentation label
};

template <class T>
struct ForwardOutput {
    Var<T> pred;
    std::vector<std::pair<int, Var<T>>> taps;
    Var<T> selfcond_pooled;  // pooled tap at the self-conditioning layer
    Var<T> cls_state;        // summary token at the tap layer (token mode)
    std::vector<Tensor<T>> attention;

    const Var<T>& tap(int layer) const {
        for (const auto& [l, v] : taps)
            if (l == layer) return v;
        throw ConfigError("tap " + std::to_string(layer) + " was not requested");
    }
};

/// normalize(x) * (1 + scale) + shift. Layer-norm over the last dim for
/// [B, N, D] (scale/shift [B, D]); group-norm for [B, C, H, W] (scale/shift [B, C]).
template <class T>
Var<T> adaptive_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, int groups = 32, T eps = T(1e-6));

template <class T>
class Backbone {
public:
    Backbone(BackboneSpec spec, SelfCondConfig sc, std::uint64_t seed, bool dry)
        : spec_(std::move(spec)), sc_(sc), store_(seed, dry) {}
    virtual ~Backbone() = default;
    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;

    virtual ForwardOutput<T> forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o = {}) const = 0;
    virtual int num_taps() const = 0;
    virtual std::int64_t tap_width(int layer) const = 0;
    /// Declared tap shape for batch size B.
    virtual Shape tap_shape(int layer, std::int64_t batch) const = 0;
    virtual std::int64_t cond_width() const = 0;
    virtual bool token_based() const = 0;

    std::vector<int> tap_layers() const {
        std::vector<int> v;
        for (int i = 1; i <= num_taps(); ++i) v.push_back(i);
        return v;
    }
    ParamStore<T>& params() noexcept { return store_; }
    const ParamStore<T>& params() const noexcept { return store_; }
    const BackboneSpec& spec() const noexcept { return spec_; }
    const SelfCondConfig& selfcond() const noexcept { return sc_; }

protected:
    void check_taps(const ForwardOptions& o) const;
    void check_input(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const;
    /// Tap readout: the block output, plus the planted class signal if this is the planted layer.
    Var<T> readout(int layer, const Var<T>& h, const Conditioning& c) const;
    /// Checks the self-conditioning config; `last_injectable_tap` is the
    /// deepest tap that still has a conditioned block after it.
    void validate_selfcond(int last_injectable_tap) const;
    void init_planted(std::int64_t width);

    BackboneSpec spec_;
    SelfCondConfig sc_;
    ParamStore<T> store_;
    Tensor<T> planted_table_;  // [planted_classes, width]
};

template <class T>
std::unique_ptr<Backbone<T>> make_backbone(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed,
                                           bool dry = false);

/// Exact trainable parameter count; builds nothing.
std::int64_t param_count(const BackboneSpec& spec, const SelfCondConfig& sc = {});

/// Copies parameter values by name. Strict mode requires identical name/shape
/// sets; otherwise `to` may hold extra parameters, which are left untouched.
template <class T>
void copy_params(const ParamStore<T>& from, ParamStore<T>& to, bool strict = true);

/// Patch rows [B, (H/p)(W/p), C p p] from an image batch, and the inverse.
template <class T>
Var<T> patchify(const Var<T>& x, int p);
template <class T>
Var<T> unpatchify(const Var<T>& tokens, int channels, int height, int width, int p);

}  // namespace sdiff
