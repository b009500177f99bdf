#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sdiff/backbones.hpp"

using namespace sdiff;

namespace {

BackboneSpec toy(Family f) {
    BackboneSpec s;
    s.family = f;
    s.image_size = 8;
    s.in_channels = 3;
    s.heads = 4;
    switch (f) {
        case Family::dit: s.hidden = 64, s.depth = 4, s.patch = 2; break;
        case Family::uvit: s.hidden = 32, s.depth = 5, s.patch = 2; break;
        case Family::unet_ddpm:
        case Family::unet_ddpmpp:
            s.hidden = 16, s.channel_mult = {1, 2}, s.blocks_per_res = 1, s.attn_resolutions = {4}, s.norm_groups = 4;
            break;
    }
    return s;
}

template <class T>
Var<T> input(const BackboneSpec& s, std::int64_t B, std::uint64_t seed) {
    Rng rng(seed);
    return ag::constant(Tensor<T>::randn(Shape{B, s.in_channels, s.image_size, s.image_size}, rng));
}

Conditioning cond(std::int64_t B, double t0 = 0.3) {
    Conditioning c;
    for (std::int64_t i = 0; i < B; ++i) c.t.push_back(t0 * 1000 + 37.0 * static_cast<double>(i));
    return c;
}

template <class T>
void perturb(Backbone<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : m.params().list())
        for (auto& v : p.var.mutable_value().storage()) {
            v += static_cast<T>(0.05 * rng.normal());
            if (p.nonneg) v = std::abs(v);
        }
}

}  // namespace

TEST_CASE("published configurations match reported sizes") {
    const std::vector<std::pair<std::string, double>> want{{"ddpm", 35.7e6},   {"ddpmpp", 56.5e6}, {"uvit-s", 44.3e6},
                                                           {"dit-b", 130e6},   {"dit-l", 457e6},   {"dit-xl", 675e6}};
    for (const auto& [name, n] : want) {
        const auto got = static_cast<double>(param_count(paper_spec(name)));
        CHECK_MESSAGE(std::abs(got - n) / n <= 0.01, name << ": " << got);
    }
    CHECK(param_count(paper_spec("ddpm")) == 35746307);
    CHECK(param_count(paper_spec("ddpmpp")) == 56524291);
    CHECK(param_count(paper_spec("uvit-s")) == 44255328);
}

TEST_CASE("adaptive injection overhead") {
    const auto overhead = [](const std::string& name, SelfCondConfig sc) {
        return param_count(paper_spec(name), sc) - param_count(paper_spec(name));
    };
    SelfCondConfig sc;
    sc.mode = SelfCondMode::adaptive;
    sc.tap_layer = 8;
    CHECK(overhead("dit-b", sc) == 1377792);
    CHECK(overhead("dit-l", sc) == 2361344);
    CHECK(overhead("dit-xl", sc) == 2951424);
    sc.tap_layer = 6;
    CHECK(overhead("ddpmpp", sc) == 459776);
    SelfCondConfig cls;
    cls.mode = SelfCondMode::cls_token;
    cls.tap_layer = 6;
    cls.init_policy = InitPolicy::standard;
    CHECK(overhead("uvit-s", cls) == 512);
}

TEST_CASE("linear-only scaling is quadratic") {
    BackboneSpec a = toy(Family::dit), b = toy(Family::dit);
    b.hidden = 128;
    const auto wa = make_backbone<float>(a, {}, 0, true), wb = make_backbone<float>(b, {}, 0, true);
    std::int64_t na = 0, nb = 0;
    for (const auto& p : wa->params().list())
        if (p.name.find("blocks.") == 0 && p.role == Role::weight) na += numel_of(p.shape);
    for (const auto& p : wb->params().list())
        if (p.name.find("blocks.") == 0 && p.role == Role::weight) nb += numel_of(p.shape);
    CHECK(static_cast<double>(nb) / static_cast<double>(na) == doctest::Approx(4.0));
}

TEST_CASE("DiT toy shape contract and read-only taps") {
    const BackboneSpec s = toy(Family::dit);
    auto m = make_backbone<float>(s, {}, 3);
    perturb(*m, 4);
    CHECK(m->num_taps() == 4);
    const auto x = input<float>(s, 2, 5);
    const auto c = cond(2);
    ForwardOptions all;
    all.taps = m->tap_layers();
    const auto a = m->forward(x, c);
    const auto b = m->forward(x, c, all);
    CHECK(a.pred.shape() == x.shape());
    REQUIRE(b.taps.size() == 4);
    for (const auto& [l, v] : b.taps) {
        CHECK(v.shape() == Shape{2, 16, 64});
        CHECK(v.shape() == m->tap_shape(l, 2));
    }
    CHECK(a.pred.value().storage() == b.pred.value().storage());
    ForwardOptions bad;
    bad.taps = {5};
    CHECK_THROWS_AS(m->forward(x, c, bad), ConfigError);
}

TEST_CASE("all families: shapes, determinism, read-only taps") {
    for (Family f : {Family::unet_ddpm, Family::unet_ddpmpp, Family::uvit, Family::dit}) {
        CAPTURE(to_string(f));
        const BackboneSpec s = toy(f);
        auto m1 = make_backbone<float>(s, {}, 11);
        auto m2 = make_backbone<float>(s, {}, 11);
        const auto x = input<float>(s, 2, 1);
        const auto c = cond(2);
        ForwardOptions all;
        all.taps = m1->tap_layers();
        const auto a = m1->forward(x, c);
        const auto b = m2->forward(x, c, all);
        CHECK(a.pred.shape() == x.shape());
        CHECK(a.pred.value().storage() == b.pred.value().storage());
        for (const auto& [l, v] : b.taps) CHECK(v.shape() == m1->tap_shape(l, 2));
    }
}

TEST_CASE("UNet decoder taps are named in forward order") {
    auto m = make_backbone<float>(paper_spec("ddpm"), {}, 0, true);
    CHECK(m->num_taps() == 12);
    auto pp = make_backbone<float>(paper_spec("ddpmpp"), {}, 0, true);
    CHECK(pp->num_taps() == 15);
    CHECK(m->tap_shape(1, 1) == Shape{1, 256, 4, 4});
    CHECK(m->tap_shape(12, 1) == Shape{1, 128, 32, 32});
}

TEST_CASE("token count includes special tokens") {
    BackboneSpec s = toy(Family::uvit);
    s.num_classes = 3;
    s.aug_cond = true;
    SelfCondConfig sc;
    sc.mode = SelfCondMode::cls_token;
    sc.tap_layer = 2;
    auto m = make_backbone<float>(s, sc, 2);
    ForwardOptions o;
    o.record_attention = true;
    const auto out = m->forward(input<float>(s, 1, 3), cond(1), o);
    // 16 patches + time + label + aug + cls
    REQUIRE(!out.attention.empty());
    CHECK(out.attention[0].dim(2) == 20);
}

TEST_CASE("zero-init self-conditioning is a no-op") {
    struct Case {
        Family f;
        SelfCondMode mode;
        int tap;
    };
    for (const Case& k : {Case{Family::dit, SelfCondMode::adaptive, 2}, Case{Family::dit, SelfCondMode::additive, 3},
                          Case{Family::dit, SelfCondMode::cls_token, 2}, Case{Family::uvit, SelfCondMode::cls_token, 2},
                          Case{Family::unet_ddpm, SelfCondMode::adaptive, 1},
                          Case{Family::unet_ddpmpp, SelfCondMode::adaptive, 2}}) {
        CAPTURE(to_string(k.f));
        CAPTURE(to_string(k.mode));
        BackboneSpec s = toy(k.f);
        s.aug_cond = true;
        SelfCondConfig sc;
        sc.mode = k.mode;
        sc.tap_layer = k.tap;
        // Double precision: in float the extra token shifts SIMD lane alignment
        // in the attention reductions, which alone moves outputs by a few ulp.
        auto base = make_backbone<double>(s, {}, 21);
        auto self = make_backbone<double>(s, sc, 21);
        perturb(*base, 9);
        copy_params(base->params(), self->params(), false);
        const auto x = input<double>(s, 3, 2);
        Conditioning c = cond(3);
        Rng rng(4);
        c.aug = Tensor<double>::randn(Shape{3, kAugDim}, rng);
        const auto a = base->forward(x, c).pred.value();
        const auto b = self->forward(x, c).pred.value();
        CHECK(max_abs_diff(a, b) <= 1e-6);
    }
}

TEST_CASE("self-conditioning changes the output once trained away from zero") {
    BackboneSpec s = toy(Family::dit);
    SelfCondConfig sc;
    sc.mode = SelfCondMode::adaptive;
    sc.tap_layer = 2;
    auto base = make_backbone<float>(s, {}, 21);
    auto self = make_backbone<float>(s, sc, 21);
    perturb(*base, 9);
    perturb(*self, 9);
    copy_params(base->params(), self->params(), false);
    const auto x = input<float>(s, 2, 2);
    const auto a = base->forward(x, cond(2)).pred.value();
    const auto b = self->forward(x, cond(2)).pred.value();
    CHECK(max_abs_diff(a, b) > 1e-4f);
}

TEST_CASE("self-conditioning config validation") {
    SelfCondConfig sc;
    sc.mode = SelfCondMode::adaptive;
    sc.tap_layer = 0;
    CHECK_THROWS_AS(make_backbone<float>(toy(Family::dit), sc, 0), ConfigError);
    sc.tap_layer = 5;
    CHECK_THROWS_AS(make_backbone<float>(toy(Family::dit), sc, 0), ConfigError);
    sc.tap_layer = 4;  // the final layer still consumes the embedding
    CHECK_NOTHROW(make_backbone<float>(toy(Family::dit), sc, 0));
    CHECK_THROWS_AS(make_backbone<float>(toy(Family::uvit), sc, 0), ConfigError);
    const int n = make_backbone<float>(toy(Family::unet_ddpm), {}, 0)->num_taps();
    sc.tap_layer = n;
    CHECK_THROWS_AS(make_backbone<float>(toy(Family::unet_ddpm), sc, 0), ConfigError);
    sc.mode = SelfCondMode::cls_token;
    sc.tap_layer = 1;
    CHECK_THROWS_AS(make_backbone<float>(toy(Family::unet_ddpm), sc, 0), ConfigError);
    BackboneSpec even = toy(Family::uvit);
    even.depth = 4;
    CHECK_THROWS_AS(make_backbone<float>(even, {}, 0), ConfigError);
}

TEST_CASE("attention between summary and augmentation tokens is exactly zero") {
    for (Family f : {Family::uvit, Family::dit}) {
        BackboneSpec s = toy(f);
        s.aug_cond = true;
        SelfCondConfig sc;
        sc.mode = SelfCondMode::cls_token;
        sc.tap_layer = 2;
        auto m = make_backbone<float>(s, sc, 5);
        perturb(*m, 6);
        ForwardOptions o;
        o.record_attention = true;
        Conditioning c = cond(2);
        Rng rng(1);
        c.aug = Tensor<double>::randn(Shape{2, kAugDim}, rng);
        const auto out = m->forward(input<float>(s, 2, 8), c, o);
        REQUIRE(static_cast<int>(out.attention.size()) == s.depth);
        if (f == Family::uvit) {
            for (const auto& p : out.attention) {
                const std::int64_t n = p.dim(2);
                for (std::int64_t b = 0; b < p.dim(0); ++b) {
                    const float* a = p.ptr() + b * n * n;
                    CHECK(a[0 * n + 1] == 0.0f);
                    CHECK(a[1 * n + 0] == 0.0f);
                }
            }
        }
    }
}

TEST_CASE("attention mask layout") {
    const auto all = build_attention_mask(false, false, 5);
    CHECK(std::count(all.begin(), all.end(), 0) == 0);
    CHECK(std::count(all.begin(), all.end(), 1) == 25);
    const auto one = build_attention_mask(true, false, 5);
    CHECK(std::count(one.begin(), one.end(), 0) == 0);
    const auto m = build_attention_mask(true, true, 6);
    CHECK(std::count(m.begin(), m.end(), 0) == 2);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) CHECK(m[i * 6 + j] == m[j * 6 + i]);
}

TEST_CASE("adaptive_norm contract and gradient") {
    Rng rng(3);
    auto x = Var<double>(Tensor<double>::randn(Shape{2, 5, 8}, rng), true);
    auto sc = Var<double>(Tensor<double>::randn(Shape{2, 8}, rng), true);
    auto sh = Var<double>(Tensor<double>::randn(Shape{2, 8}, rng), true);
    const auto zero = ag::constant(Tensor<double>(Shape{2, 8}));
    CHECK(max_abs_diff(adaptive_norm(x, zero, zero, 1, 1e-6).value(), ag::layer_norm(x, 1e-6).value()) == 0.0);
    auto cst = ag::constant(Tensor<double>::full(Shape{2, 5, 8}, 3.0));
    const auto y = adaptive_norm(cst, sc, sh, 1, 1e-6).value();
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t n = 0; n < 5; ++n)
            for (std::int64_t d = 0; d < 8; ++d) CHECK(y[(b * 5 + n) * 8 + d] == doctest::Approx(sh.value()[b * 8 + d]));
    auto r = testing::check_gradients([&] { return ag::sum(ag::square(adaptive_norm(x, sc, sh, 1, 1e-6))); }, {x, sc, sh});
    CHECK(r.max_rel < 1e-4);
    auto g = Var<double>(Tensor<double>::randn(Shape{2, 8, 3, 3}, rng), true);
    auto gs = Var<double>(Tensor<double>::randn(Shape{2, 8}, rng), true);
    auto r2 = testing::check_gradients([&] { return ag::sum(ag::square(adaptive_norm(g, gs, sh, 4, 1e-5))); }, {g, gs, sh});
    CHECK(r2.max_rel < 1e-4);
    CHECK_THROWS_AS(adaptive_norm(x, ag::constant(Tensor<double>(Shape{2, 7})), sh, 1, 1e-6), ShapeError);
}

TEST_CASE("time embedding") {
    const std::vector<double> t0{0.0};
    const auto e = nn::sinusoid(t0, 512);
    CHECK(e.shape() == Shape{1, 512});
    for (int i = 0; i < 256; ++i) {
        CHECK(e[i] == 1.0);
        CHECK(e[256 + i] == 0.0);
    }
    CHECK_THROWS_AS(nn::sinusoid(t0, 7), ConfigError);
    std::vector<double> grid;
    for (int i = 0; i < 1000; ++i) grid.push_back(i);
    const auto g = nn::sinusoid(grid, 64);
    for (int i = 1; i < 1000; ++i) {
        double d = 0;
        for (int j = 0; j < 64; ++j) d = std::max(d, std::abs(g[i * 64 + j] - g[(i - 1) * 64 + j]));
        CHECK(d > 1e-6);
    }
}

TEST_CASE("patchify round trip") {
    Rng rng(2);
    const auto x = ag::constant(Tensor<double>::randn(Shape{2, 3, 8, 8}, rng));
    const auto p = patchify(x, 2);
    CHECK(p.shape() == Shape{2, 16, 12});
    CHECK(unpatchify(p, 3, 8, 8, 2).value().storage() == x.value().storage());
}

TEST_CASE("pool_feature") {
    const auto m = ag::constant(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
    CHECK(pool_feature(m).value()[0] == doctest::Approx(2.5));
    CHECK_THROWS_AS(pool_feature(ag::constant(Tensor<double>(Shape{0, 3}))), ShapeError);
    Rng rng(5);
    const auto tok = ag::constant(Tensor<double>::randn(Shape{2, 7, 3}, rng));
    const auto p = pool_feature(tok).value();
    for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 3; ++d) {
            double s = 0;
            for (int n = 0; n < 7; ++n) s += tok.value()[(b * 7 + n) * 3 + d];
            CHECK(p[b * 3 + d] == doctest::Approx(s / 7).epsilon(1e-12));
        }
}

TEST_CASE("inject") {
    Rng rng(6);
    Var<double> e = ag::constant(Tensor<double>::randn(Shape{2, 4}, rng));
    Var<double> pooled = ag::constant(Tensor<double>::randn(Shape{2, 4}, rng));
    const std::vector<double> t{10.0, 500.0};
    ParamStore<double> store(1);
    Scope<double> root(&store);
    InjectionHead<double> zero(root.sub("z"), SelfCondMode::adaptive, InitPolicy::zero_scale, 4, 4, 8);
    CHECK(inject(e, pooled, t, zero).value().storage() == e.value().storage());
    InjectionHead<double> add(root.sub("a"), SelfCondMode::additive, InitPolicy::standard, 4, 4, 8);
    Tensor<double> eye(Shape{4, 4});
    for (int i = 0; i < 4; ++i) eye[i * 5] = 1;
    add.proj.w.mutable_value() = eye;
    const auto y = inject(e, pooled, t, add).value();
    for (int i = 0; i < 8; ++i) CHECK(y[i] == doctest::Approx(e.value()[i] + pooled.value()[i]));
    InjectionHead<double> off;
    CHECK(inject(e, pooled, t, off).value().storage() == e.value().storage());

    InjectionHead<double> ad(root.sub("g"), SelfCondMode::adaptive, InitPolicy::standard, 4, 4, 8);
    Var<double> pv(pooled.value(), true);
    auto r = testing::check_gradients(
        [&] { return ag::sum(ag::square(inject(e, pv, t, ad))); },
        {ad.scale.fc1.w, ad.scale.fc1.b, ad.scale.fc2.w, ad.scale.fc2.b, ad.proj.w, pv});
    CHECK(r.max_rel < 1e-4);
}
