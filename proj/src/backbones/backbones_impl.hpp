#pragma once

#include <vector>

#include "sdiff/augment.hpp"
#include "sdiff/backbones.hpp"

namespace sdiff {

template <class T>
class DiT final : public Backbone<T> {
public:
    DiT(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry);
    ForwardOutput<T> forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const override;
    int num_taps() const override { return this->spec_.depth; }
    std::int64_t tap_width(int) const override { return this->spec_.hidden; }
    Shape tap_shape(int, std::int64_t batch) const override { return {batch, tokens_, this->spec_.hidden}; }
    std::int64_t cond_width() const override { return this->spec_.hidden; }
    bool token_based() const override { return true; }

private:
    struct Block {
        nn::LayerNorm<T> norm1, norm2;
        nn::Attention<T> attn;
        nn::Mlp<T> mlp;
        nn::Linear<T> ada;
    };
    std::int64_t tokens_ = 0;
    nn::Linear<T> x_embed_, aug_proj_, final_ada_, final_linear_;
    nn::TimestepEmbedder<T> t_embed_;
    Var<T> y_table_, cls_;
    Tensor<T> pos_;
    std::vector<Block> blocks_;
    std::vector<Var<T>> gates_;
    InjectionHead<T> head_;
};

template <class T>
class UViT final : public Backbone<T> {
public:
    UViT(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry);
    ForwardOutput<T> forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const override;
    int num_taps() const override { return this->spec_.depth; }
    std::int64_t tap_width(int) const override { return this->spec_.hidden; }
    Shape tap_shape(int, std::int64_t batch) const override { return {batch, tokens_, this->spec_.hidden}; }
    std::int64_t cond_width() const override { return this->spec_.hidden; }
    bool token_based() const override { return true; }
    /// Tokens placed before the patches, excluding the summary token.
    std::int64_t extras() const { return extras_; }

private:
    struct Block {
        nn::LayerNorm<T> norm1, norm2;
        nn::Attention<T> attn;
        nn::Mlp<T> mlp;
        nn::Linear<T> skip;  // out-blocks only
    };
    std::int64_t tokens_ = 0, extras_ = 1;
    int n_in_ = 0;
    nn::Linear<T> patch_embed_, aug_proj_, decoder_pred_;
    nn::LayerNorm<T> norm_;
    nn::Conv2d<T> final_conv_;
    Var<T> pos_embed_, y_table_, cls_;
    std::vector<Block> blocks_;
    std::vector<Var<T>> gates_;
};

template <class T>
class UNet final : public Backbone<T> {
public:
    UNet(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry);
    ForwardOutput<T> forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const override;
    int num_taps() const override { return static_cast<int>(dec_.size()); }
    std::int64_t tap_width(int layer) const override { return dec_.at(static_cast<std::size_t>(layer - 1)).out; }
    Shape tap_shape(int layer, std::int64_t batch) const override;
    std::int64_t cond_width() const override { return tdim_; }
    bool token_based() const override { return false; }

private:
    struct ResBlock {
        nn::GroupNorm<T> norm1, norm2;
        nn::Conv2d<T> conv1, conv2, shortcut;
        nn::Linear<T> temb;
        bool has_shortcut = false, up = false, down = false, attn = false, ada = false;
        nn::GroupNorm<T> anorm;
        nn::Linear<T> qkv, proj;
        std::int64_t out = 0;
        int res = 0;  // output resolution
    };
    // Encoder entries: resblock, or a plain strided-conv downsample (ddpm).
    struct Stage {
        ResBlock block;
        nn::Conv2d<T> conv;
        enum Kind { res, down_conv, up_conv } kind = res;
    };

    ResBlock make_res(const Scope<T>& s, std::int64_t in, std::int64_t out, bool attn, int res, bool up, bool down);
    Var<T> run_res(const ResBlock& b, const Var<T>& x, const Var<T>& temb_act, const ForwardOptions& o) const;

    std::int64_t tdim_ = 0;
    nn::TimestepEmbedder<T> t_embed_;
    Var<T> y_table_;
    nn::Linear<T> aug_proj_;
    nn::Conv2d<T> head_, tail_conv_;
    nn::GroupNorm<T> tail_norm_;
    std::vector<Stage> enc_;
    ResBlock mid1_, mid2_;
    std::vector<ResBlock> dec_;           // decoder res blocks = taps, in forward order
    std::vector<std::size_t> dec_level_;  // level of each decoder block
    std::vector<Stage> ups_;              // one per level transition, in forward order
    InjectionHead<T> head_sc_;
};

}  // namespace sdiff
