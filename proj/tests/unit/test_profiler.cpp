#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "sdiff/profiler.hpp"

using namespace sdiff;

namespace {

CandidateResult cand(int layer, double loss) {
    CandidateResult c;
    c.layer = layer;
    c.mean_loss = loss;
    c.seed_losses = {loss};
    return c;
}

std::vector<int> layers(const ProfileReport& r) {
    std::vector<int> v;
    for (const auto& c : r.ranking) v.push_back(c.layer);
    return v;
}

RunConfig tiny_profile_config() {
    RunConfig c;
    c.formulation = Formulation::rf();
    c.backbone.family = Family::dit;
    c.backbone.image_size = 16;
    c.backbone.hidden = 16;
    c.backbone.depth = 4;
    c.backbone.heads = 2;
    c.backbone.patch = 4;
    c.backbone.freq_dim = 32;
    c.selfcond.mode = SelfCondMode::adaptive;
    c.selfcond.tap_layer = 1;
    c.train.batch_size = 8;
    c.optimizer.lr = 1e-3;
    return c;
}

}  // namespace

TEST_CASE("profiler: reference ordering from the reported short-run losses") {
    // Layers 8..11 with losses 0.4135, 0.4133, 0.4136, 0.4140.
    std::vector<CandidateResult> in = {cand(8, 0.4135), cand(9, 0.4133), cand(10, 0.4136), cand(11, 0.4140)};
    const std::vector<int> expect = {9, 8, 10, 11};
    std::sort(in.begin(), in.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
    do {
        const auto r = rank_candidates(in);
        CHECK(layers(r) == expect);
        CHECK(r.selected() == 9);
        for (std::size_t i = 1; i < r.ranking.size(); ++i) CHECK(r.ranking[i - 1].mean_loss < r.ranking[i].mean_loss);
    } while (std::next_permutation(in.begin(), in.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; }));
}

TEST_CASE("profiler: ties go to the lower layer and non-finite candidates are excluded") {
    auto r = rank_candidates({cand(5, 0.3), cand(4, 0.3), cand(2, std::nan("")), cand(3, 0.31)});
    CHECK(layers(r) == std::vector<int>{4, 5, 3});
    REQUIRE(r.failed.size() == 1);
    CHECK(r.failed[0].layer == 2);
    CHECK(r.to_text().find("2 failed") != std::string::npos);
    CHECK(r.to_json()["selected"] == 4);

    auto none = rank_candidates({cand(3, std::nan("")), cand(4, INFINITY)});
    CHECK(none.ranking.empty());
    CHECK_THROWS_AS(none.selected(), NumericError);
}

TEST_CASE("profiler: final-window statistic skips non-finite steps") {
    std::vector<StepRecord> rs(6);
    for (int i = 0; i < 6; ++i) rs[static_cast<std::size_t>(i)].loss = i;
    rs[4].skipped = true;
    CHECK(final_window_loss(rs, 3) == doctest::Approx((3.0 + 5.0) / 2));
    CHECK(final_window_loss(rs, 100) == doctest::Approx((0 + 1 + 2 + 3 + 5) / 5.0));
    CHECK(std::isnan(final_window_loss({}, 3)));
}

TEST_CASE("profiler: duplicated candidates tie exactly; ranking independent of order and workers") {
    const RunConfig base = tiny_profile_config();
    const ImageDataset ds = make_planted(32, 5);
    ProfileOptions o;
    o.short_epochs = 2;
    o.seeds = {0, 1};
    o.candidates = {3, 2, 3};
    const auto r = profile_layers(base, ds, o);
    REQUIRE(r.ranking.size() == 3);
    CHECK(r.steps_per_run == 8);
    std::vector<double> threes;
    for (const auto& c : r.ranking)
        if (c.layer == 3) threes.push_back(c.mean_loss);
    REQUIRE(threes.size() == 2);
    CHECK(threes[0] == threes[1]);

    o.candidates = {1, 2, 3};
    const auto a = profile_layers(base, ds, o);
    o.candidates = {3, 1, 2};
    o.workers = 2;
    const auto b = profile_layers(base, ds, o);
    CHECK(layers(a) == layers(b));
    for (std::size_t i = 0; i < a.ranking.size(); ++i) CHECK(a.ranking[i].seed_losses == b.ranking[i].seed_losses);
    CHECK(a.to_text() == profile_layers(base, ds, {{1, 2, 3}, 2, {0, 1}, 1}).to_text());
}

TEST_CASE("profiler: divergent runs are excluded and invalid candidates rejected") {
    RunConfig base = tiny_profile_config();
    base.train.nan_patience = 2;
    Tensor<float> imgs(Shape{16, 3, 16, 16}, std::nanf(""));
    ImageDataset bad(std::move(imgs), std::vector<int>(16, 0), 2);
    ProfileOptions o;
    o.candidates = {1, 2};
    o.short_epochs = 1;
    const auto r = profile_layers(base, bad, o);
    CHECK(r.ranking.empty());
    CHECK(r.failed.size() == 2);

    o.candidates = {5};  // not a declared tap
    CHECK_THROWS_AS(profile_layers(base, make_planted(16, 1), o), ConfigError);
    base.selfcond.mode = SelfCondMode::off;
    o.candidates = {1};
    CHECK_THROWS_AS(profile_layers(base, make_planted(16, 1), o), ConfigError);
}
