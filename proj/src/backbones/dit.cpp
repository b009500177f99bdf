#include <algorithm>
#include <cmath>

#include "backbones_impl.hpp"

namespace sdiff {
namespace {

// Fixed 2-D sin-cos positional table [L, D]: half the width encodes rows, half columns.
template <class T>
Tensor<T> sincos_2d(std::int64_t grid, std::int64_t dim) {
    if (dim % 4 != 0) throw ConfigError("hidden size must be divisible by 4 for 2-D positional embedding", "backbone.hidden");
    Tensor<T> pos(Shape{grid * grid, dim});
    const std::int64_t quarter = dim / 4;
    for (std::int64_t i = 0; i < grid; ++i)
        for (std::int64_t j = 0; j < grid; ++j) {
            T* row = pos.ptr() + (i * grid + j) * dim;
            for (std::int64_t k = 0; k < quarter; ++k) {
                const double w = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
                row[k] = static_cast<T>(std::sin(static_cast<double>(i) * w));
                row[quarter + k] = static_cast<T>(std::cos(static_cast<double>(i) * w));
                row[2 * quarter + k] = static_cast<T>(std::sin(static_cast<double>(j) * w));
                row[3 * quarter + k] = static_cast<T>(std::cos(static_cast<double>(j) * w));
            }
        }
    return pos;
}

template <class T>
Var<T> chunk(const Var<T>& m, int i, std::int64_t d) {
    return ag::slice(m, 1, i * d, d);
}

}  // namespace

template <class T>
DiT<T>::DiT(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry)
    : Backbone<T>(spec, sc, seed, dry) {
    const auto& s = this->spec_;
    if (s.image_size % s.patch) throw ConfigError("image size not divisible by patch", "backbone.patch");
    if (s.hidden % s.heads) throw ConfigError("hidden size not divisible by heads", "backbone.heads");
    const std::int64_t D = s.hidden;
    const std::int64_t grid = s.image_size / s.patch;
    tokens_ = grid * grid;
    Scope<T> root(&this->store_);
    const std::int64_t pdim = static_cast<std::int64_t>(s.in_channels) * s.patch * s.patch;
    x_embed_ = nn::Linear<T>(root.sub("x_embedder"), pdim, D);
    if (!dry) pos_ = sincos_2d<T>(grid, D);
    t_embed_ = nn::TimestepEmbedder<T>(root.sub("t_embedder"), s.freq_dim, D, D, Init::Normal(0.02), Init::Normal(0.02));
    if (s.num_classes > 0)
        y_table_ = root.add("y_embedder.table", Shape{s.num_classes + 1, D}, Role::embedding, Init::Normal(0.02));
    if (s.aug_cond) aug_proj_ = nn::Linear<T>(root.sub("aug_embedder"), kAugDim, D, false, Init::Zeros());

    const bool cls = sc.mode == SelfCondMode::cls_token;
    if (cls) cls_ = root.add("cls_token", Shape{1, 1, D}, Role::cls_token, Init::Normal(0.02));
    const auto hidden = static_cast<std::int64_t>(std::llround(D * s.mlp_ratio));
    for (int i = 0; i < s.depth; ++i) {
        Scope<T> b = root.sub("blocks").sub(static_cast<std::size_t>(i));
        Block blk;
        blk.norm1 = nn::LayerNorm<T>(b.sub("norm1"), D, false);
        blk.norm2 = nn::LayerNorm<T>(b.sub("norm2"), D, false);
        blk.attn = nn::Attention<T>(b.sub("attn"), D, s.heads, true);
        blk.mlp = nn::Mlp<T>(b.sub("mlp"), D, hidden, D, nn::Act::gelu_tanh);
        blk.ada = nn::Linear<T>(b.sub("adaLN_modulation"), D, 6 * D, true, Init::Zeros());
        blocks_.push_back(std::move(blk));
        if (cls && sc.init_policy == InitPolicy::zero_scale)
            gates_.push_back(b.add("cls_gate", Shape{}, Role::gate, Init::Zeros(), true));
    }
    final_ada_ = nn::Linear<T>(root.sub("final_layer.adaLN_modulation"), D, 2 * D, true, Init::Zeros());
    final_linear_ = nn::Linear<T>(root.sub("final_layer.linear"), D, pdim, true, Init::Zeros());
    head_ = InjectionHead<T>(root.sub("selfcond"), sc.mode, sc.init_policy, D, D, s.freq_dim);
    this->validate_selfcond(s.depth);
    this->init_planted(D);
}

template <class T>
ForwardOutput<T> DiT<T>::forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const {
    this->check_input(x, c, o);
    const auto& s = this->spec_;
    const auto& sc = this->sc_;
    const std::int64_t B = x.dim(0), D = s.hidden;
    const bool cls = cls_.defined();

    Var<T> h = ag::add(x_embed_(patchify(x, s.patch)), ag::constant(pos_));
    Var<T> e = t_embed_(c.t);
    if (y_table_.defined() && !c.labels.empty()) e = ag::add(e, ag::embedding(y_table_, c.labels));
    if (aug_proj_.w.defined()) e = condition_with_label(e, c.aug, aug_proj_);
    if (cls) h = attach_summary_token(h, cls_);

    ForwardOutput<T> out;
    Var<T> cond = e;
    for (int i = 1; i <= s.depth; ++i) {
        const Block& blk = blocks_[static_cast<std::size_t>(i - 1)];
        const Var<T> mod = blk.ada(ag::silu(cond));
        ag::AttentionOptions<T> opt;
        Tensor<T> probs;
        if (o.record_attention) opt.record = &probs;
        if (!gates_.empty()) {
            opt.gate = gates_[static_cast<std::size_t>(i - 1)];
            opt.gated_key = 0;
        }
        const auto gate_b = [&](int k) { return ag::reshape(chunk(mod, k, D), Shape{B, 1, D}); };
        Var<T> a = blk.attn(adaptive_norm(h, chunk(mod, 1, D), chunk(mod, 0, D), 1, T(1e-6)), opt);
        h = ag::add(h, ag::mul(gate_b(2), a));
        Var<T> m = blk.mlp(adaptive_norm(h, chunk(mod, 4, D), chunk(mod, 3, D), 1, T(1e-6)));
        h = ag::add(h, ag::mul(gate_b(5), m));
        if (o.record_attention) out.attention.push_back(std::move(probs));

        const bool want = std::find(o.taps.begin(), o.taps.end(), i) != o.taps.end();
        if (want || i == sc.tap_layer) {
            Var<T> patches = cls ? ag::slice(h, 1, 1, tokens_) : h;
            Var<T> r = this->readout(i, patches, c);
            if (want) out.taps.emplace_back(i, r);
            if (i == sc.tap_layer) {
                out.selfcond_pooled = pool_feature(r);
                if (cls) out.cls_state = ag::reshape(ag::slice(h, 1, 0, 1), Shape{B, D});
                if (head_.active()) cond = inject(e, out.selfcond_pooled, c.t, head_);
            }
        }
    }
    if (cls && !out.cls_state.defined()) out.cls_state = ag::reshape(ag::slice(h, 1, 0, 1), Shape{B, D});
    if (cls) h = ag::slice(h, 1, 1, tokens_);
    const Var<T> fm = final_ada_(ag::silu(cond));
    Var<T> y = adaptive_norm(h, chunk(fm, 1, D), chunk(fm, 0, D), 1, T(1e-6));
    out.pred = unpatchify(final_linear_(y), s.in_channels, s.image_size, s.image_size, s.patch);
    return out;
}

template class DiT<float>;
template class DiT<double>;

}  // namespace sdiff
