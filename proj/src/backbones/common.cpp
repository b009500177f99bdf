#include <cmath>

#include "backbones_impl.hpp"

namespace sdiff {

std::string to_string(Family f) {
    switch (f) {
        case Family::unet_ddpm: return "unet_ddpm";
        case Family::unet_ddpmpp: return "unet_ddpmpp";
        case Family::uvit: return "uvit";
        case Family::dit: return "dit";
    }
    return "?";
}

Family parse_family(const std::string& s) {
    if (s == "unet_ddpm" || s == "ddpm") return Family::unet_ddpm;
    if (s == "unet_ddpmpp" || s == "ddpmpp") return Family::unet_ddpmpp;
    if (s == "uvit") return Family::uvit;
    if (s == "dit") return Family::dit;
    throw ConfigError("unknown backbone family '" + s + "'", "backbone.family");
}

std::string to_string(SelfCondMode m) {
    switch (m) {
        case SelfCondMode::off: return "off";
        case SelfCondMode::adaptive: return "adaptive";
        case SelfCondMode::additive: return "additive";
        case SelfCondMode::cls_token: return "cls_token";
    }
    return "?";
}

SelfCondMode parse_selfcond_mode(const std::string& s) {
    if (s == "off") return SelfCondMode::off;
    if (s == "adaptive") return SelfCondMode::adaptive;
    if (s == "additive") return SelfCondMode::additive;
    if (s == "cls_token" || s == "cls") return SelfCondMode::cls_token;
    throw ConfigError("unknown self-conditioning mode '" + s + "'", "selfcond.mode");
}

std::string to_string(InitPolicy p) { return p == InitPolicy::zero_scale ? "zero_scale" : "standard"; }

InitPolicy parse_init_policy(const std::string& s) {
    if (s == "zero_scale") return InitPolicy::zero_scale;
    if (s == "standard") return InitPolicy::standard;
    throw ConfigError("unknown init policy '" + s + "'", "selfcond.init_policy");
}

std::vector<std::uint8_t> build_attention_mask(bool has_cls, bool has_aug, std::int64_t n_tokens) {
    const std::int64_t need = (has_cls ? 1 : 0) + (has_aug ? 1 : 0);
    if (n_tokens < need) throw ShapeError("attention mask: too few tokens for declared layout");
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n_tokens * n_tokens), 1);
    if (has_cls && has_aug) {
        m[static_cast<std::size_t>(0 * n_tokens + 1)] = 0;
        m[static_cast<std::size_t>(1 * n_tokens + 0)] = 0;
    }
    return m;
}

std::vector<std::string> paper_spec_names() { return {"ddpm", "ddpmpp", "uvit-s", "dit-b", "dit-l", "dit-xl"}; }

BackboneSpec paper_spec(const std::string& name) {
    BackboneSpec s;
    s.norm_groups = 32;
    if (name == "ddpm" || name == "ddpmpp") {
        s.family = name == "ddpm" ? Family::unet_ddpm : Family::unet_ddpmpp;
        s.image_size = 32;
        s.hidden = 128;
        s.channel_mult = name == "ddpm" ? std::vector<int>{1, 2, 2, 2} : std::vector<int>{2, 2, 2};
        s.blocks_per_res = name == "ddpm" ? 2 : 4;
        s.attn_resolutions = {16};
        s.dropout = 0.1;
        return s;
    }
    if (name == "uvit-s") {
        s.family = Family::uvit;
        s.image_size = 32;
        s.hidden = 512;
        s.depth = 13;
        s.heads = 8;
        s.patch = 2;
        return s;
    }
    if (name == "dit-b" || name == "dit-l" || name == "dit-xl") {
        // Latent-space configs: 16x16x32 latents, patch 1, class-conditional.
        s.family = Family::dit;
        s.image_size = 16;
        s.in_channels = 32;
        s.patch = 1;
        s.num_classes = 1000;
        s.freq_dim = 256;
        if (name == "dit-b") s.hidden = 768, s.depth = 12, s.heads = 12;
        if (name == "dit-l") s.hidden = 1024, s.depth = 24, s.heads = 16;
        if (name == "dit-xl") s.hidden = 1152, s.depth = 28, s.heads = 16;
        return s;
    }
    throw ConfigError("unknown preset '" + name + "'", "backbone.preset");
}

template <class T>
Var<T> adaptive_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, int groups, T eps) {
    const Shape& s = x.shape();
    const std::int64_t B = s.empty() ? 0 : s[0];
    if (s.size() == 3) {
        const Shape want{B, s[2]};
        if (scale.shape() != want || shift.shape() != want)
            throw ShapeError("adaptive_norm: modulation " + to_string(scale.shape()) + "/" + to_string(shift.shape()) +
                             " vs features " + to_string(s));
        const Shape b{B, 1, s[2]};
        Var<T> y = ag::layer_norm(x, eps);
        return ag::add(ag::mul(y, ag::add_scalar(ag::reshape(scale, b), T(1))), ag::reshape(shift, b));
    }
    if (s.size() == 4) {
        const Shape want{B, s[1]};
        if (scale.shape() != want || shift.shape() != want)
            throw ShapeError("adaptive_norm: modulation " + to_string(scale.shape()) + "/" + to_string(shift.shape()) +
                             " vs channels " + to_string(s));
        const Shape b{B, s[1], 1, 1};
        Var<T> y = ag::group_norm(x, groups, eps);
        return ag::add(ag::mul(y, ag::add_scalar(ag::reshape(scale, b), T(1))), ag::reshape(shift, b));
    }
    throw ShapeError("adaptive_norm expects [B,N,D] or [B,C,H,W], got " + to_string(s));
}

template <class T>
Var<T> patchify(const Var<T>& x, int p) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[2] % p || s[3] % p) throw ShapeError("patchify: bad input " + to_string(s));
    const std::int64_t gh = s[2] / p, gw = s[3] / p;
    Var<T> y = ag::reshape(x, Shape{s[0], s[1], gh, p, gw, p});
    y = ag::permute(y, {0, 2, 4, 1, 3, 5});
    return ag::reshape(y, Shape{s[0], gh * gw, s[1] * p * p});
}

template <class T>
Var<T> unpatchify(const Var<T>& tokens, int channels, int height, int width, int p) {
    const std::int64_t B = tokens.dim(0);
    const std::int64_t gh = height / p, gw = width / p;
    Var<T> y = ag::reshape(tokens, Shape{B, gh, gw, channels, p, p});
    y = ag::permute(y, {0, 3, 1, 4, 2, 5});
    return ag::reshape(y, Shape{B, channels, height, width});
}

template <class T>
void Backbone<T>::check_taps(const ForwardOptions& o) const {
    for (int t : o.taps)
        if (t < 1 || t > num_taps())
            throw ConfigError("unknown tap index " + std::to_string(t) + " (declared 1.." + std::to_string(num_taps()) +
                                  ")",
                              "taps");
}

template <class T>
void Backbone<T>::check_input(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const {
    if (store_.dry()) throw ConfigError("forward on a dry (count-only) model");
    const Shape want{x.shape().empty() ? 0 : x.dim(0), spec_.in_channels, spec_.image_size, spec_.image_size};
    if (x.shape() != want) throw ShapeError("input " + to_string(x.shape()) + " does not match spec " + to_string(want));
    const auto B = static_cast<std::size_t>(want[0]);
    if (c.t.size() != B) throw ShapeError("conditioning time count does not match batch");
    if (spec_.num_classes > 0 && !c.labels.empty() && c.labels.size() != B)
        throw ShapeError("label count does not match batch");
    if (!c.aug.empty() && c.aug.shape() != Shape{want[0], kAugDim}) throw ShapeError("augmentation labels must be [B, 9]");
    if (o.sampling && !c.aug.empty())
        for (double v : c.aug.storage())
            if (v != 0.0) throw ContractError("nonzero augmentation label supplied at sampling time");
    if (spec_.planted_layer > 0 && c.planted.size() != B && !c.planted.empty())
        throw ShapeError("planted class count does not match batch");
    check_taps(o);
}

template <class T>
Var<T> Backbone<T>::readout(int layer, const Var<T>& h, const Conditioning& c) const {
    if (layer != spec_.planted_layer || spec_.planted_strength == 0.0 || c.planted.empty()) return h;
    const Shape& s = h.shape();
    const std::int64_t B = s[0], W = planted_table_.dim(1);
    Tensor<T> add(s.size() == 4 ? Shape{B, W, 1, 1} : Shape{B, 1, W});
    for (std::int64_t b = 0; b < B; ++b) {
        const int k = c.planted[static_cast<std::size_t>(b)];
        for (std::int64_t j = 0; j < W; ++j) add[b * W + j] = planted_table_[k * W + j];
    }
    return ag::add(h, ag::constant(std::move(add)));
}

template <class T>
void Backbone<T>::init_planted(std::int64_t width) {
    if (spec_.planted_layer <= 0 || store_.dry()) return;
    Rng rng = Rng::substream(store_.seed(), "planted");
    planted_table_ = Tensor<T>(Shape{spec_.planted_classes, width});
    for (int k = 0; k < spec_.planted_classes; ++k) {
        double n2 = 0;
        std::vector<double> v(static_cast<std::size_t>(width));
        for (auto& x : v) {
            x = rng.normal();
            n2 += x * x;
        }
        const double s = spec_.planted_strength / std::sqrt(n2);
        for (std::int64_t j = 0; j < width; ++j) planted_table_[k * width + j] = static_cast<T>(v[static_cast<std::size_t>(j)] * s);
    }
}

template <class T>
void Backbone<T>::validate_selfcond(int last_injectable_tap) const {
    const int tap = sc_.tap_layer;
    if (tap != 0 && (tap < 1 || tap > num_taps()))
        throw ConfigError("tap layer " + std::to_string(tap) + " is not a declared tap", "selfcond.tap_layer");
    switch (sc_.mode) {
        case SelfCondMode::off: break;
        case SelfCondMode::adaptive:
        case SelfCondMode::additive:
            if (tap < 1) throw ConfigError("self-conditioning requires a tap layer", "selfcond.tap_layer");
            if (tap > last_injectable_tap)
                throw ConfigError("tap layer must precede at least one decoding layer", "selfcond.tap_layer");
            break;
        case SelfCondMode::cls_token:
            if (!token_based()) throw ConfigError("cls_token mode needs a token backbone", "selfcond.mode");
            break;
    }
}

template <class T>
std::unique_ptr<Backbone<T>> make_backbone(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed,
                                           bool dry) {
    switch (spec.family) {
        case Family::dit: return std::make_unique<DiT<T>>(spec, sc, seed, dry);
        case Family::uvit: return std::make_unique<UViT<T>>(spec, sc, seed, dry);
        case Family::unet_ddpm:
        case Family::unet_ddpmpp: return std::make_unique<UNet<T>>(spec, sc, seed, dry);
    }
    throw ConfigError("unknown family");
}

std::int64_t param_count(const BackboneSpec& spec, const SelfCondConfig& sc) {
    return make_backbone<float>(spec, sc, 0, true)->params().count();
}

template <class T>
void copy_params(const ParamStore<T>& from, ParamStore<T>& to, bool strict) {
    if (strict && from.list().size() != to.list().size())
        throw StructureError("parameter sets differ in size: " + std::to_string(from.list().size()) + " vs " +
                             std::to_string(to.list().size()));
    for (const auto& p : from.list()) {
        Param<T>* q = to.find(p.name);
        if (!q) throw StructureError("parameter '" + p.name + "' missing in destination");
        if (q->shape != p.shape) throw StructureError("parameter '" + p.name + "' shape mismatch");
        q->var.mutable_value() = p.var.value();
    }
}

#define SDIFF_INSTANTIATE(T)                                                                                \
    template class Backbone<T>;                                                                             \
    template Var<T> adaptive_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                     \
    template Var<T> patchify(const Var<T>&, int);                                                           \
    template Var<T> unpatchify(const Var<T>&, int, int, int, int);                                          \
    template std::unique_ptr<Backbone<T>> make_backbone(const BackboneSpec&, const SelfCondConfig&, std::uint64_t, bool); \
    template void copy_params(const ParamStore<T>&, ParamStore<T>&, bool);

SDIFF_INSTANTIATE(float)
SDIFF_INSTANTIATE(double)

#undef SDIFF_INSTANTIATE

}  // namespace sdiff
