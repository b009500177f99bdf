#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sdiff/distill.hpp"

using namespace sdiff;

namespace {

// Naive softmax cross-entropy over the B x B cosine-similarity matrix.
double brute_info_nce(const Tensor<double>& q, const Tensor<double>& k, double tau) {
    const std::int64_t B = q.dim(0), D = q.dim(1);
    auto norm = [&](const Tensor<double>& a, std::int64_t i) {
        double s = 0;
        for (std::int64_t d = 0; d < D; ++d) s += a[i * D + d] * a[i * D + d];
        return std::sqrt(s);
    };
    double total = 0;
    for (std::int64_t i = 0; i < B; ++i) {
        std::vector<double> logit(static_cast<std::size_t>(B));
        for (std::int64_t j = 0; j < B; ++j) {
            double dot = 0;
            for (std::int64_t d = 0; d < D; ++d) dot += q[i * D + d] * k[j * D + d];
            logit[static_cast<std::size_t>(j)] = dot / (norm(q, i) * norm(k, j)) / tau;
        }
        double z = 0;
        for (double l : logit) z += std::exp(l);
        total += -(logit[static_cast<std::size_t>(i)] - std::log(z));
    }
    return total / static_cast<double>(B);
}

BackboneSpec toy_dit() {
    BackboneSpec s;
    s.family = Family::dit;
    s.image_size = 8;
    s.in_channels = 3;
    s.hidden = 32;
    s.depth = 3;
    s.heads = 4;
    s.patch = 2;
    s.freq_dim = 64;
    s.aug_cond = true;
    return s;
}

Batch toy_batch(std::int64_t B, std::uint64_t seed = 1) {
    const ImageDataset ds = make_shapes(B, seed, 8);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < B; ++i) idx.push_back(i);
    return ds.gather(idx);
}

}  // namespace

TEST_CASE("distill: EMA closed forms") {
    ParamStore<double> teacher(1), student(2);
    Scope<double> ts(&teacher), ss(&student);
    auto tw = ts.add("w", Shape{3}, Role::weight, Init::Zeros());
    auto sw = ss.add("w", Shape{3}, Role::weight, Init::Constant(0.7));

    ema_update(teacher, student, 1.0);
    for (double v : tw.value().storage()) CHECK(v == 0.0);

    const double d = 0.9;
    for (int k = 1; k <= 40; ++k) {
        ema_update(teacher, student, d);
        const double expect = 0.7 * (1 - std::pow(d, k));
        for (double v : tw.value().storage()) CHECK(std::abs(v - expect) <= 1e-10);
    }
    ema_update(teacher, student, 0.0);
    CHECK(tw.value().storage() == sw.value().storage());
}

TEST_CASE("distill: EMA rejects mismatched parameter sets") {
    ParamStore<double> a(1), b(1), c(1);
    Scope<double>(&a).add("w", Shape{3}, Role::weight, Init::Zeros());
    Scope<double>(&b).add("w", Shape{4}, Role::weight, Init::Zeros());
    Scope<double>(&c).add("v", Shape{3}, Role::weight, Init::Zeros());
    CHECK_THROWS_AS(ema_update(a, b, 0.5), StructureError);
    CHECK_THROWS_AS(ema_update(a, c, 0.5), StructureError);
    ParamStore<double> d(1);
    CHECK_THROWS_AS(ema_update(a, d, 0.5), StructureError);
}

TEST_CASE("distill: InfoNCE closed forms") {
    Tensor<double> one(Shape{1, 5}, std::vector<double>{1, 2, 3, 4, 5});
    CHECK(info_nce(ag::constant(one), ag::constant(one), 0.2).value().item() == doctest::Approx(0.0).epsilon(1e-15));

    Tensor<double> eye(Shape{4, 4});
    for (int i = 0; i < 4; ++i) eye.at({i, i}) = 1;
    const double v = info_nce(ag::constant(eye), ag::constant(eye), 0.2).value().item();
    CHECK(std::abs(v - 0.020012253359626926) < 1e-12);
    CHECK(std::abs(v - std::log1p(3 * std::exp(-5.0))) < 1e-12);

    CHECK_THROWS_AS(info_nce(ag::constant(Tensor<double>(Shape{0, 4})), ag::constant(Tensor<double>(Shape{0, 4})), 0.2),
                    DomainError);
}

TEST_CASE("distill: InfoNCE matches the brute-force oracle and is non-negative") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const std::int64_t B = 2 + rep % 7, D = 3 + rep % 5;
        const auto q = Tensor<double>::randn(Shape{B, D}, rng), k = Tensor<double>::randn(Shape{B, D}, rng);
        const double tau = 0.1 + 0.05 * rep;
        const double oracle = brute_info_nce(q, k, tau);
        CHECK(std::abs(info_nce(ag::constant(q), ag::constant(k), tau).value().item() - oracle) <= 1e-10);
        const double f = info_nce(ag::constant(q.cast<float>()), ag::constant(k.cast<float>()), tau).value().item();
        CHECK(std::abs(f - oracle) <= 1e-5 * std::max(1.0, oracle));
        CHECK(oracle >= 0);
    }
}

TEST_CASE("distill: symmetrized loss is invariant to swapping views") {
    Rng rng(8);
    const auto q1 = ag::constant(Tensor<double>::randn(Shape{6, 4}, rng));
    const auto q2 = ag::constant(Tensor<double>::randn(Shape{6, 4}, rng));
    const auto k1 = ag::constant(Tensor<double>::randn(Shape{6, 4}, rng));
    const auto k2 = ag::constant(Tensor<double>::randn(Shape{6, 4}, rng));
    const double a = info_nce(q1, k2, 0.2).value().item() + info_nce(q2, k1, 0.2).value().item();
    const double b = info_nce(q2, k1, 0.2).value().item() + info_nce(q1, k2, 0.2).value().item();
    CHECK(a == b);
}

TEST_CASE("distill: projection head is time dependent and deterministic") {
    ProjectionHead<double> head(6, 5, 16, 3);
    Rng rng(1);
    const auto x = ag::constant(Tensor<double>::randn(Shape{4, 6}, rng));
    // Times vary across the batch: a batch-constant shift is removed by the
    // batch standardization after the first layer.
    const std::vector<double> t1{10, 200, 500, 900}, t2{900, 500, 200, 10}, flat1(4, 10.0), flat2(4, 500.0);
    const auto a = head(x, t1).value(), b = head(x, t2).value(), c = head(x, t1).value();
    CHECK(max_abs_diff(a, b) > 1e-3);
    CHECK(max_abs_diff(head(x, flat1).value(), head(x, flat2).value()) < 1e-9);
    CHECK(a.storage() == c.storage());
    const auto z = ag::constant(Tensor<double>(Shape{4, 6}));
    CHECK(head(z, t1).value().storage() == head(z, t1).value().storage());
    ProjectionHead<double> again(6, 5, 16, 3);
    CHECK(again(x, t1).value().storage() == a.storage());
}

TEST_CASE("distill: projection and prediction heads pass finite-difference checks") {
    ProjectionHead<double> head(4, 3, 8, 11);
    PredictionHead<double> pred(3, 12);
    Rng rng(2);
    auto x = Var<double>(Tensor<double>::randn(Shape{5, 4}, rng), true);
    const std::vector<double> t{1, 40, 200, 600, 900};
    const auto w = Tensor<double>::randn(Shape{5, 3}, rng);
    auto loss = [&] { return ag::sum(ag::mul(pred(head(x, t)), ag::constant(w))); };
    std::vector<Var<double>> ps{x};
    for (auto& p : head.params().list()) ps.push_back(p.var);
    for (auto& p : pred.params().list()) ps.push_back(p.var);
    const auto r = testing::check_gradients(loss, ps);
    CHECK(r.max_rel <= 1e-4);
}

TEST_CASE("distill: gamma = 0 reduces exactly to the diffusion step") {
    SelfCondConfig sc;
    sc.tap_layer = 2;
    sc.mode = SelfCondMode::adaptive;
    auto online = make_backbone<float>(toy_dit(), sc, 4);
    auto ref = make_backbone<float>(toy_dit(), sc, 4);
    auto ema = make_backbone<float>(toy_dit(), sc, 4);
    const Formulation f = Formulation::rf();
    Denoiser<float> m(*online, f), r(*ref, f), t(*ema, f);
    ContrastiveConfig cfg;
    cfg.gamma = 0;
    ContrastiveHeads<float> heads(distill_feature_width(*online, cfg.target_source), cfg, 4);
    const Batch batch = toy_batch(4);
    AugConfig aug;
    aug.p = 0.5;

    auto terms = contrastive_step(m, t, heads, batch, cfg, aug, 99);
    auto plain = diffusion_step(r, batch, aug, 99, {sc.tap_layer});
    CHECK(terms.total.value().item() == plain.loss.value().item());
    backward(terms.total);
    backward(plain.loss);
    for (std::size_t i = 0; i < online->params().list().size(); ++i) {
        const auto& a = online->params().list()[i].var;
        const auto& b = ref->params().list()[i].var;
        REQUIRE(a.has_grad() == b.has_grad());
        if (a.has_grad()) CHECK(a.grad().storage() == b.grad().storage());
    }
}

TEST_CASE("distill: contrastive step shapes, stop-gradient and fixed teacher time") {
    SelfCondConfig sc;
    sc.tap_layer = 2;
    sc.mode = SelfCondMode::adaptive;
    auto online = make_backbone<float>(toy_dit(), sc, 4);
    auto ema = make_backbone<float>(toy_dit(), sc, 4);
    Denoiser<float> m(*online, Formulation::rf()), t(*ema, Formulation::rf());
    ContrastiveConfig cfg;
    ContrastiveHeads<float> heads(distill_feature_width(*online, cfg.target_source), cfg, 4);
    const Batch batch = toy_batch(6);

    for (std::uint64_t step = 0; step < 3; ++step) {
        auto terms = contrastive_step(m, t, heads, batch, cfg, AugConfig{}, step);
        CHECK(std::isfinite(terms.total.value().item()));
        CHECK(std::isfinite(terms.moco.value().item()));
        CHECK(terms.moco.value().item() >= 0);
        CHECK(terms.teacher_time == 0.25);  // DiT under RF
        CHECK(std::abs(terms.total.value().item() - (terms.diff.value().item() + 0.01 * terms.moco.value().item())) < 1e-5);
        backward(terms.total);
        for (const auto& p : ema->params().list()) CHECK_FALSE(p.var.has_grad());
        for (const auto& p : heads.ema_proj->params().list()) CHECK_FALSE(p.var.has_grad());
        bool head_grad = false;
        for (const auto* p : heads.trainable()) head_grad = head_grad || p->var.has_grad();
        CHECK(head_grad);
        for (auto& p : online->params().list()) p.var.zero_grad();
        for (auto* p : heads.trainable()) p->var.zero_grad();
    }
}

TEST_CASE("distill: configuration errors") {
    const Formulation f = Formulation::rf();
    ContrastiveConfig cfg;
    CHECK_NOTHROW(cfg.validate(f));
    cfg.temperature = 0;
    CHECK_THROWS_AS(cfg.validate(f), ConfigError);
    cfg = ContrastiveConfig{};
    cfg.target_time = 1.5;
    CHECK_THROWS_AS(cfg.validate(f), ConfigError);
    cfg = ContrastiveConfig{};
    cfg.ema_decay = 1.0;
    CHECK_THROWS_AS(cfg.validate(f), ConfigError);
    CHECK(ContrastiveConfig{}.resolved_target_time(Formulation::ddpm()) == 11);

    SelfCondConfig sc;
    sc.tap_layer = 2;
    sc.mode = SelfCondMode::adaptive;
    auto dit = make_backbone<float>(toy_dit(), sc, 1);
    CHECK_THROWS_AS(distill_feature_width(*dit, TargetSource::cls), ConfigError);

    BackboneSpec u;
    u.family = Family::unet_ddpm;
    u.image_size = 8;
    u.hidden = 16;
    u.channel_mult = {1, 2};
    u.blocks_per_res = 1;
    u.attn_resolutions = {};
    u.norm_groups = 4;
    auto unet = make_backbone<float>(u, sc, 1);
    CHECK_THROWS_AS(distill_feature_width(*unet, TargetSource::cls), ConfigError);
    CHECK(distill_feature_width(*unet, TargetSource::pooled) == unet->tap_width(2));

    auto none = make_backbone<float>(toy_dit(), SelfCondConfig{}, 1);
    CHECK_THROWS_AS(distill_feature_width(*none, TargetSource::pooled), ConfigError);

    SelfCondConfig tok;
    tok.tap_layer = 2;
    tok.mode = SelfCondMode::cls_token;
    auto dcls = make_backbone<float>(toy_dit(), tok, 1);
    CHECK(distill_feature_width(*dcls, TargetSource::cls) == 32);
}

TEST_CASE("distill: cls target runs end to end on a token backbone") {
    SelfCondConfig tok;
    tok.tap_layer = 2;
    tok.mode = SelfCondMode::cls_token;
    auto online = make_backbone<float>(toy_dit(), tok, 2);
    auto ema = make_backbone<float>(toy_dit(), tok, 2);
    Denoiser<float> m(*online, Formulation::rf()), t(*ema, Formulation::rf());
    ContrastiveConfig cfg;
    cfg.target_source = TargetSource::cls;
    ContrastiveHeads<float> heads(distill_feature_width(*online, cfg.target_source), cfg, 2);
    auto terms = contrastive_step(m, t, heads, toy_batch(4), cfg, AugConfig{}, 5);
    CHECK(std::isfinite(terms.moco.value().item()));
}
