#include <cmath>

#include "doctest.h"
#include "sdiff/augment.hpp"
#include "sdiff/backbones.hpp"

using namespace sdiff;

namespace {

Tensor<float> ramp_image(std::int64_t C, std::int64_t n, std::uint64_t seed = 3) {
    Rng rng(seed);
    return Tensor<float>::randn(Shape{C, n, n}, rng);
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && a.storage() == b.storage();
}

// Independent reflect: explicit mirrored padding, as numpy's "reflect" mode builds it.
std::vector<float> reflect_pad_row(const float* row, int n, int pad) {
    std::vector<float> out;
    for (int k = pad; k >= 1; --k) out.push_back(row[k]);
    for (int k = 0; k < n; ++k) out.push_back(row[k]);
    for (int k = 1; k <= pad; ++k) out.push_back(row[n - 1 - k]);
    return out;
}

}  // namespace

TEST_CASE("augment: per-transform application rate within 3 sigma of p") {
    AugConfig cfg;
    Rng rng(11);
    const int N = 10000;
    int hits[kNumTransforms] = {};
    for (int i = 0; i < N; ++i) {
        const AugParams p = sample_augmentation(rng, cfg, 16);
        for (int k = 0; k < kNumTransforms; ++k) hits[k] += p.applied[static_cast<std::size_t>(k)];
    }
    const double sd = std::sqrt(0.12 * 0.88 / N);
    for (int k = 0; k < kNumTransforms; ++k) {
        CAPTURE(k);
        CHECK(std::abs(hits[k] / double(N) - 0.12) <= 3 * sd);
    }
}

TEST_CASE("augment: identity is a bit-exact passthrough and labels are zero") {
    const auto x = ramp_image(3, 16);
    CHECK(bit_equal(apply(x, Affine::identity()), x));
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const AugParams p = sample_augmentation(rng, AugConfig::none(), 16);
        for (double v : p.label) CHECK(v == 0.0);
        CHECK(p.affine.is_identity());
        CHECK(bit_equal(apply(x, p), x));
    }
}

TEST_CASE("augment: flip-only draw is diag(-1, 1) and an involution") {
    AugConfig cfg = AugConfig::none();
    cfg.p_flip = 1;
    Rng rng(1);
    const AugParams p = sample_augmentation(rng, cfg, 8);
    CHECK(p.label[0] == 1.0);
    for (int k = 1; k < 9; ++k) CHECK(p.label[static_cast<std::size_t>(k)] == 0.0);
    CHECK(p.affine.m == std::array<double, 6>{-1, 0, 0, 0, 1, 0});
    const auto x = ramp_image(2, 8);
    const auto y = apply(x, p);
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t r = 0; r < 8; ++r)
            for (std::int64_t q = 0; q < 8; ++q) CHECK(y.at({c, r, q}) == x.at({c, r, 7 - q}));
    CHECK(bit_equal(apply(y, p), x));
}

TEST_CASE("augment: integer translation matches an index-shift oracle with reflected border") {
    const int n = 16;
    const auto x = ramp_image(1, n);
    const Affine shift{{1, 0, 2, 0, 1, 0}};
    const auto y = apply(x, shift);
    for (int r = 0; r < n; ++r) {
        const auto padded = reflect_pad_row(x.ptr() + r * n, n, 4);
        // out[c] = in[c - 2]; padded index of in[j] is j + 4
        for (int c = 0; c < n; ++c) CHECK(y.at({0, r, c}) == padded[static_cast<std::size_t>(c - 2 + 4)]);
    }
}

TEST_CASE("augment: quarter turns are exact and four of them are the identity") {
    const int n = 6;
    const auto x = ramp_image(1, n);
    AugConfig cfg = AugConfig::none();
    cfg.p_rot90 = 1;
    Rng rng(2);
    AugParams p;
    do p = sample_augmentation(rng, cfg, n);
    while (!(p.label[1] == 1 && p.label[2] == 0));  // k = 1
    const auto y = apply(x, p);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) CHECK(y.at({0, r, c}) == x.at({0, n - 1 - c, r}));
    auto z = x;
    for (int i = 0; i < 4; ++i) z = apply(z, p);
    CHECK(bit_equal(z, x));
}

TEST_CASE("augment: reflect_index mirrors without repeating the edge") {
    CHECK(reflect_index(-1, 5) == 1);
    CHECK(reflect_index(-2, 5) == 2);
    CHECK(reflect_index(5, 5) == 3);
    CHECK(reflect_index(8, 5) == 0);
    CHECK(reflect_index(9, 5) == 1);
    CHECK(reflect_index(-9, 5) == 1);
    CHECK(reflect_index(7, 1) == 0);
}

TEST_CASE("augment: label decodes to the drawn affine") {
    AugConfig cfg;
    cfg.p = 0.5;
    Rng rng(21);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        const AugParams p = sample_augmentation(rng, cfg, 32);
        const Affine d = affine_from_label(p.label, 32);
        for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(d.m[static_cast<std::size_t>(k)] - p.affine.m[static_cast<std::size_t>(k)]));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("augment: label slot ranges") {
    AugConfig cfg;
    cfg.p = 1;
    Rng rng(4);
    for (int i = 0; i < 2000; ++i) {
        const auto L = sample_augmentation(rng, cfg, 16).label;
        CHECK((L[0] == 0 || L[0] == 1));
        CHECK((L[1] == 0 || L[1] == 1));
        CHECK((L[2] == 0 || L[2] == 1));
        CHECK(std::abs(L[3]) <= cfg.translate_max + 1e-12);
        CHECK(std::abs(L[4]) <= cfg.translate_max + 1e-12);
        CHECK(L[3] * 16 == std::round(L[3] * 16));
        CHECK(std::abs(L[6] * L[6] + (L[7] + 1) * (L[7] + 1) - 1) < 1e-12);
    }
}

TEST_CASE("augment: composing two warps equals one warp of the composed affine") {
    // Exact for lattice-preserving maps on any image.
    const auto x = ramp_image(2, 10);
    const Affine flip{{-1, 0, 0, 0, 1, 0}}, rot{{0, -1, 0, 1, 0, 0}}, tr{{1, 0, 3, 0, 1, -1}};
    CHECK(bit_equal(apply(apply(apply(x, flip), rot), tr), apply(x, tr.after(rot).after(flip))));

    // Bilinear resampling reproduces affine images exactly, so a smooth warp pair
    // composes up to rounding on pixels whose sources stay inside the frame.
    const int n = 24;
    Tensor<double> lin(Shape{1, n, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) lin.at({0, r, c}) = 0.3 * c - 0.7 * r + 1.5;
    const double th = 0.2;
    const Affine A{{1.1 * std::cos(th), -1.1 * std::sin(th), 0.4, 1.1 * std::sin(th), 1.1 * std::cos(th), -0.3}};
    const Affine B{{0.9, 0.05, -0.6, -0.02, 1.05, 0.25}};
    const auto two = apply(apply(lin, A), B);
    const auto one = apply(lin, B.after(A));
    double worst = 0;
    for (int r = 6; r < n - 6; ++r)
        for (int c = 6; c < n - 6; ++c) worst = std::max(worst, std::abs(two.at({0, r, c}) - one.at({0, r, c})));
    CHECK(worst < 1e-9);
}

TEST_CASE("augment: degenerate affines raise TransformError") {
    const auto x = ramp_image(1, 8);
    CHECK_THROWS_AS(apply(x, (Affine{{0, 0, 0, 0, 1, 0}})), TransformError);
    CHECK_THROWS_AS(apply(x, (Affine{{1, 2, 0, 2, 4, 0}})), TransformError);
    CHECK_THROWS_AS(apply(x, (Affine{{std::nan(""), 0, 0, 0, 1, 0}})), TransformError);
    const Affine zero{{0, 0, 0, 0, 0, 0}};
    CHECK_THROWS_AS(zero.inverse(), TransformError);
}

TEST_CASE("augment: transforms draw a fixed amount of randomness") {
    AugConfig a, b;
    b.p_flip = 0;
    Rng ra(9), rb(9);
    for (int i = 0; i < 100; ++i) {
        auto la = sample_augmentation(ra, a, 16).label, lb = sample_augmentation(rb, b, 16).label;
        for (int k = 1; k < 9; ++k) CHECK(la[static_cast<std::size_t>(k)] == lb[static_cast<std::size_t>(k)]);
    }
}

TEST_CASE("augment: config validation") {
    AugConfig c;
    c.p = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = AugConfig{};
    c.p_scale = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = AugConfig{};
    c.rotate_max = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(AugConfig{}.validate());
}

TEST_CASE("augment: batch labels line up with per-sample warps") {
    Rng data(1);
    const auto imgs = Tensor<float>::randn(Shape{5, 3, 8, 8}, data);
    AugConfig cfg;
    cfg.p = 0.6;
    Rng r1(77), r2(77);
    const auto batch = augment_batch(imgs, cfg, r1);
    CHECK(batch.labels.shape() == Shape{5, 9});
    for (std::int64_t b = 0; b < 5; ++b) {
        const AugParams p = sample_augmentation(r2, cfg, 8);
        for (int k = 0; k < 9; ++k) CHECK(batch.labels[b * 9 + k] == p.label[static_cast<std::size_t>(k)]);
        Tensor<float> one(Shape{3, 8, 8}, std::vector<float>(imgs.ptr() + b * 192, imgs.ptr() + (b + 1) * 192));
        const auto w = apply(one, p);
        for (std::int64_t j = 0; j < 192; ++j) CHECK(batch.images[b * 192 + j] == w[j]);
    }
}

TEST_CASE("augment: label embedding path is a no-op for zero labels at init") {
    ParamStore<float> ps(0);
    Scope<float> root(&ps);
    nn::Linear<float> proj(root.sub("aug"), 9, 4, false, Init::Zeros());
    Rng rng(2);
    auto e = ag::constant(Tensor<float>::randn(Shape{3, 4}, rng));
    Tensor<double> labels(Shape{3, 9});
    labels[4] = 0.5;
    CHECK(condition_with_label(e, labels, proj).value().storage() == e.value().storage());
    CHECK(label_token(Tensor<double>{}, proj, 3).value().shape() == Shape{3, 1, 4});
}
