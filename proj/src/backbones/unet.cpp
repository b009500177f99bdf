#include <algorithm>

#include "backbones_impl.hpp"

namespace sdiff {

template <class T>
typename UNet<T>::ResBlock UNet<T>::make_res(const Scope<T>& s, std::int64_t in, std::int64_t out, bool attn, int res,
                                             bool up, bool down) {
    const int g = this->spec_.norm_groups;
    ResBlock b;
    b.out = out;
    b.res = res;
    b.up = up;
    b.down = down;
    b.attn = attn;
    b.ada = this->spec_.ada_gn;
    b.norm1 = nn::GroupNorm<T>(s.sub("norm1"), in, g);
    b.conv1 = nn::Conv2d<T>(s.sub("conv1"), in, out, 3, 1, 1);
    b.temb = nn::Linear<T>(s.sub("temb_proj"), tdim_, b.ada ? 2 * out : out);
    // AdaGN modulates a parameter-free norm; the additive form keeps the affine.
    b.norm2 = nn::GroupNorm<T>(s.sub("norm2"), out, g, !b.ada);
    b.conv2 = nn::Conv2d<T>(s.sub("conv2"), out, out, 3, 1, 1, true, 1e-5);
    if (in != out) {
        b.has_shortcut = true;
        b.shortcut = nn::Conv2d<T>(s.sub("shortcut"), in, out, 1);
    }
    if (attn) {
        b.anorm = nn::GroupNorm<T>(s.sub("attn.norm"), out, g);
        b.qkv = nn::Linear<T>(s.sub("attn.qkv"), out, 3 * out);
        b.proj = nn::Linear<T>(s.sub("attn.proj"), out, out, true, Init::Xavier(out, out, 1e-5));
    }
    return b;
}

template <class T>
Var<T> UNet<T>::run_res(const ResBlock& b, const Var<T>& x, const Var<T>& temb_act, const ForwardOptions& o) const {
    Var<T> h = ag::silu(b.norm1(x));
    Var<T> skip = x;
    if (b.up) {
        h = ag::upsample_nearest2x(h);
        skip = ag::upsample_nearest2x(skip);
    } else if (b.down) {
        h = ag::avg_pool2x(h);
        skip = ag::avg_pool2x(skip);
    }
    h = b.conv1(h);
    const Var<T> t = b.temb(temb_act);
    const std::int64_t B = h.dim(0);
    if (b.ada) {
        h = adaptive_norm(h, ag::slice(t, 1, 0, b.out), ag::slice(t, 1, b.out, b.out), b.norm2.groups, b.norm2.eps);
    } else {
        h = ag::add(h, ag::reshape(t, Shape{B, b.out, 1, 1}));
        h = b.norm2(h);
    }
    h = ag::silu(h);
    if (o.train && this->spec_.dropout > 0 && o.rng) h = ag::dropout(h, this->spec_.dropout, *o.rng);
    h = b.conv2(h);
    h = ag::add(h, b.has_shortcut ? b.shortcut(skip) : skip);
    if (!b.attn) return h;

    const Shape s = h.shape();
    Var<T> a = ag::permute(ag::reshape(b.anorm(h), Shape{s[0], s[1], s[2] * s[3]}), {0, 2, 1});
    a = b.proj(ag::attention(b.qkv(a), 1));
    a = ag::reshape(ag::permute(a, {0, 2, 1}), s);
    return ag::add(h, a);
}

template <class T>
UNet<T>::UNet(const BackboneSpec& spec, const SelfCondConfig& sc, std::uint64_t seed, bool dry)
    : Backbone<T>(spec, sc, seed, dry) {
    const auto& s = this->spec_;
    const bool biggan = s.family == Family::unet_ddpmpp;
    const std::int64_t ch = s.hidden;
    const auto levels = s.channel_mult.size();
    if (levels == 0) throw ConfigError("channel multipliers must be non-empty", "backbone.channel_mult");
    if (s.image_size % (1 << (levels - 1)))
        throw ConfigError("image size not divisible by the downsampling factor", "backbone.image_size");
    if (sc.mode == SelfCondMode::cls_token) throw ConfigError("cls_token mode needs a token backbone", "selfcond.mode");
    for (int m : s.channel_mult)
        if ((ch * m) % s.norm_groups) throw ConfigError("channels not divisible by norm groups", "backbone.norm_groups");
    const auto has_attn = [&](int res) {
        return std::find(s.attn_resolutions.begin(), s.attn_resolutions.end(), res) != s.attn_resolutions.end();
    };

    tdim_ = 4 * ch;
    Scope<T> root(&this->store_);
    t_embed_ = nn::TimestepEmbedder<T>(root.sub("temb"), static_cast<int>(ch), tdim_, tdim_);
    if (s.num_classes > 0)
        y_table_ = root.add("label_emb.table", Shape{s.num_classes + 1, tdim_}, Role::embedding, Init::Normal(0.02));
    if (s.aug_cond) aug_proj_ = nn::Linear<T>(root.sub("aug_emb"), kAugDim, tdim_, false, Init::Zeros());
    head_ = nn::Conv2d<T>(root.sub("head"), s.in_channels, ch, 3, 1, 1);

    std::vector<std::int64_t> chs{ch};
    std::int64_t now = ch;
    int res = s.image_size;
    Scope<T> down = root.sub("down");
    std::size_t k = 0;
    for (std::size_t i = 0; i < levels; ++i) {
        const std::int64_t out = ch * s.channel_mult[i];
        for (int j = 0; j < s.blocks_per_res; ++j, ++k) {
            Stage st;
            st.block = make_res(down.sub(k), now, out, has_attn(res), res, false, false);
            enc_.push_back(std::move(st));
            now = out;
            chs.push_back(now);
        }
        if (i + 1 != levels) {
            Stage st;
            res /= 2;
            if (biggan) {
                st.block = make_res(down.sub(k), now, now, false, res, false, true);
            } else {
                st.kind = Stage::down_conv;
                st.conv = nn::Conv2d<T>(down.sub(k), now, now, 3, 2, 1);
            }
            ++k;
            enc_.push_back(std::move(st));
            chs.push_back(now);
        }
    }
    mid1_ = make_res(root.sub("mid.0"), now, now, true, res, false, false);
    mid2_ = make_res(root.sub("mid.1"), now, now, false, res, false, false);

    Scope<T> up = root.sub("up");
    k = 0;
    for (std::size_t i = levels; i-- > 0;) {
        const std::int64_t out = ch * s.channel_mult[i];
        for (int j = 0; j <= s.blocks_per_res; ++j, ++k) {
            const std::int64_t skip = chs.back();
            chs.pop_back();
            dec_.push_back(make_res(up.sub(k), skip + now, out, has_attn(res), res, false, false));
            dec_level_.push_back(i);
            now = out;
        }
        if (i != 0) {
            Stage st;
            res *= 2;
            if (biggan) {
                st.block = make_res(up.sub(k), now, now, false, res, true, false);
            } else {
                st.kind = Stage::up_conv;
                st.conv = nn::Conv2d<T>(up.sub(k), now, now, 3, 1, 1);
            }
            ++k;
            ups_.push_back(std::move(st));
        }
    }
    tail_norm_ = nn::GroupNorm<T>(root.sub("tail.norm"), now, s.norm_groups);
    tail_conv_ = nn::Conv2d<T>(root.sub("tail.conv"), now, s.in_channels, 3, 1, 1, true, 1e-5);

    const int tap = sc.tap_layer;
    if (tap >= 1 && tap <= num_taps())
        head_sc_ = InjectionHead<T>(root.sub("selfcond"), sc.mode, sc.init_policy, tap_width(tap), tdim_,
                                    static_cast<int>(ch));
    this->validate_selfcond(num_taps() - 1);
    if (s.planted_layer >= 1 && s.planted_layer <= num_taps()) this->init_planted(tap_width(s.planted_layer));
}

template <class T>
Shape UNet<T>::tap_shape(int layer, std::int64_t batch) const {
    const ResBlock& b = dec_.at(static_cast<std::size_t>(layer - 1));
    return {batch, b.out, b.res, b.res};
}

template <class T>
ForwardOutput<T> UNet<T>::forward(const Var<T>& x, const Conditioning& c, const ForwardOptions& o) const {
    this->check_input(x, c, o);
    const auto& sc = this->sc_;
    Var<T> e = t_embed_(c.t);
    if (y_table_.defined() && !c.labels.empty()) e = ag::add(e, ag::embedding(y_table_, c.labels));
    if (aug_proj_.w.defined()) e = condition_with_label(e, c.aug, aug_proj_);
    Var<T> temb = ag::silu(e);

    std::vector<Var<T>> hs;
    Var<T> h = head_(x);
    hs.push_back(h);
    for (const Stage& st : enc_) {
        h = st.kind == Stage::down_conv ? st.conv(h) : run_res(st.block, h, temb, o);
        hs.push_back(h);
    }
    h = run_res(mid1_, h, temb, o);
    h = run_res(mid2_, h, temb, o);

    ForwardOutput<T> out;
    std::size_t up = 0;
    for (std::size_t k = 0; k < dec_.size(); ++k) {
        h = run_res(dec_[k], ag::concat<T>({h, hs.back()}, 1), temb, o);
        hs.pop_back();
        const int layer = static_cast<int>(k) + 1;
        const bool want = std::find(o.taps.begin(), o.taps.end(), layer) != o.taps.end();
        if (want || layer == sc.tap_layer) {
            Var<T> r = this->readout(layer, h, c);
            if (want) out.taps.emplace_back(layer, r);
            if (layer == sc.tap_layer) {
                out.selfcond_pooled = pool_feature(r);
                if (head_sc_.active()) temb = ag::silu(inject(e, out.selfcond_pooled, c.t, head_sc_));
            }
        }
        const bool level_end = k + 1 == dec_.size() || dec_level_[k + 1] != dec_level_[k];
        if (level_end && dec_level_[k] != 0) {
            const Stage& st = ups_[up++];
            h = st.kind == Stage::up_conv ? st.conv(ag::upsample_nearest2x(h)) : run_res(st.block, h, temb, o);
        }
    }
    out.pred = tail_conv_(ag::silu(tail_norm_(h)));
    return out;
}

template class UNet<float>;
template class UNet<double>;

}  // namespace sdiff
