#include <algorithm>
#include <cmath>

#include "backbones_impl.hpp"

namespace sdiff {

template <class T>
UViT<T>::UViT(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry)
    : Backbone<T>(spec, sc, seed, dry) {
    const auto& s = this->spec_;
    if (s.image_size % s.patch) throw ConfigError("image size not divisible by patch", "backbone.patch");
    if (s.hidden % s.heads) throw ConfigError("hidden size not divisible by heads", "backbone.heads");
    if (s.depth < 3 || s.depth % 2 == 0)
        throw ConfigError("UViT depth must be odd (in-blocks, one mid block, out-blocks)", "backbone.depth");
    if (sc.mode == SelfCondMode::adaptive || sc.mode == SelfCondMode::additive)
        throw ConfigError("UViT has no adaptive-norm pathway; use cls_token", "selfcond.mode");
    const std::int64_t D = s.hidden;
    const std::int64_t grid = s.image_size / s.patch;
    tokens_ = grid * grid;
    extras_ = 1 + (s.num_classes > 0 ? 1 : 0) + (s.aug_cond ? 1 : 0);
    n_in_ = (s.depth - 1) / 2;
    Scope<T> root(&this->store_);
    const std::int64_t pdim = static_cast<std::int64_t>(s.in_channels) * s.patch * s.patch;
    patch_embed_ = nn::Linear<T>(root.sub("patch_embed"), pdim, D);
    pos_embed_ = root.add("pos_embed", Shape{1, extras_ + tokens_, D}, Role::pos_embed, Init::Normal(0.02));
    if (s.num_classes > 0)
        y_table_ = root.add("label_emb.table", Shape{s.num_classes + 1, D}, Role::embedding, Init::Normal(0.02));
    if (s.aug_cond) aug_proj_ = nn::Linear<T>(root.sub("aug_emb"), kAugDim, D, false, Init::Zeros());
    const bool cls = sc.mode == SelfCondMode::cls_token;
    if (cls) cls_ = root.add("cls_token", Shape{1, 1, D}, Role::cls_token, Init::Normal(0.02));

    const auto hidden = static_cast<std::int64_t>(std::llround(D * s.mlp_ratio));
    for (int i = 0; i < s.depth; ++i) {
        Scope<T> b = root.sub("blocks").sub(static_cast<std::size_t>(i));
        Block blk;
        blk.norm1 = nn::LayerNorm<T>(b.sub("norm1"), D, true, T(1e-5));
        blk.attn = nn::Attention<T>(b.sub("attn"), D, s.heads, false);
        blk.norm2 = nn::LayerNorm<T>(b.sub("norm2"), D, true, T(1e-5));
        blk.mlp = nn::Mlp<T>(b.sub("mlp"), D, hidden, D, nn::Act::gelu_tanh);
        if (i > n_in_) blk.skip = nn::Linear<T>(b.sub("skip_linear"), 2 * D, D);
        blocks_.push_back(std::move(blk));
        if (cls && sc.init_policy == InitPolicy::zero_scale)
            gates_.push_back(b.add("cls_gate", Shape{}, Role::gate, Init::Zeros(), true));
    }
    norm_ = nn::LayerNorm<T>(root.sub("norm"), D, true, T(1e-5));
    decoder_pred_ = nn::Linear<T>(root.sub("decoder_pred"), D, pdim);
    final_conv_ = nn::Conv2d<T>(root.sub("final_layer"), s.in_channels, s.in_channels, 3, 1, 1);
    this->validate_selfcond(s.depth);
    this->init_planted(D);
}

template <class T>
ForwardOutput<T> UViT<T>::forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const {
    this->check_input(x, c, o);
    const auto& s = this->spec_;
    const auto& sc = this->sc_;
    const std::int64_t B = x.dim(0), D = s.hidden;
    const bool cls = cls_.defined();
    const bool has_aug_tok = aug_proj_.w.defined();

    // Layout: [cls?, aug?, label?, time, patches].
    std::vector<Var<T>> parts;
    if (has_aug_tok) {
        parts.push_back(label_token(c.aug, aug_proj_, B));
    }
    if (y_table_.defined()) {
        std::vector<int> labels = c.labels;
        if (labels.empty()) labels.assign(static_cast<std::size_t>(B), s.num_classes);
        parts.push_back(ag::reshape(ag::embedding(y_table_, labels), Shape{B, 1, D}));
    }
    parts.push_back(ag::reshape(nn::sinusoid_var<T>(c.t, static_cast<int>(D)), Shape{B, 1, D}));
    parts.push_back(patch_embed_(patchify(x, s.patch)));
    Var<T> h = ag::add(ag::concat(parts, 1), pos_embed_);
    if (cls) h = attach_summary_token(h, cls_);
    const std::int64_t lead = extras_ + (cls ? 1 : 0);
    const std::int64_t n = lead + tokens_;
    const std::vector<std::uint8_t> mask = build_attention_mask(cls && sc.mask_cls_aug, has_aug_tok && sc.mask_cls_aug && cls, n);

    ForwardOutput<T> out;
    std::vector<Var<T>> skips;
    for (int i = 1; i <= s.depth; ++i) {
        const Block& blk = blocks_[static_cast<std::size_t>(i - 1)];
        if (blk.skip.w.defined()) {
            h = blk.skip(ag::concat<T>({h, skips.back()}, 2));
            skips.pop_back();
        }
        ag::AttentionOptions<T> opt;
        Tensor<T> probs;
        opt.mask = &mask;
        if (o.record_attention) opt.record = &probs;
        if (!gates_.empty()) {
            opt.gate = gates_[static_cast<std::size_t>(i - 1)];
            opt.gated_key = 0;
        }
        h = ag::add(h, blk.attn(blk.norm1(h), opt));
        h = ag::add(h, blk.mlp(blk.norm2(h)));
        if (o.record_attention) out.attention.push_back(std::move(probs));
        if (i <= n_in_) skips.push_back(h);

        const bool want = std::find(o.taps.begin(), o.taps.end(), i) != o.taps.end();
        if (want || i == sc.tap_layer) {
            Var<T> r = this->readout(i, ag::slice(h, 1, lead, tokens_), c);
            if (want) out.taps.emplace_back(i, r);
            if (i == sc.tap_layer) {
                out.selfcond_pooled = pool_feature(r);
                if (cls) out.cls_state = ag::reshape(ag::slice(h, 1, 0, 1), Shape{B, D});
            }
        }
    }
    if (cls && !out.cls_state.defined()) out.cls_state = ag::reshape(ag::slice(h, 1, 0, 1), Shape{B, D});
    Var<T> y = decoder_pred_(norm_(h));
    y = ag::slice(y, 1, lead, tokens_);
    y = unpatchify(y, s.in_channels, s.image_size, s.image_size, s.patch);
    out.pred = final_conv_(y);
    return out;
}

template class UViT<float>;
template class UViT<double>;

}  // namespace sdiff
