#include <cmath>

#include "doctest.h"
#include "sdiff/eval.hpp"

using namespace sdiff;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

Matrix random_orthogonal(Eigen::Index d, Rng& rng) {
    Eigen::HouseholderQR<Matrix> qr(randn(d, d, rng));
    return qr.householderQ();
}

// HSIC form with an explicit centering matrix: tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)).
long double cka_oracle(const Matrix& x, const Matrix& y) {
    using ML = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    const Eigen::Index n = x.rows();
    const ML xl = x.cast<long double>(), yl = y.cast<long double>();
    const ML h = ML::Identity(n, n) - ML::Constant(n, n, 1.0L / n);
    const ML k = h * (xl * xl.transpose()) * h, l = h * (yl * yl.transpose()) * h;
    return (k * l).trace() / std::sqrt((k * k).trace() * (l * l).trace());
}

// Denman-Beavers iteration for (C1 C2)^{1/2} in long double.
long double frechet_oracle(const Vector& m1, const Matrix& c1, const Vector& m2, const Matrix& c2) {
    using ML = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    const Eigen::Index d = c1.rows();
    ML y = c1.cast<long double>() * c2.cast<long double>(), z = ML::Identity(d, d);
    for (int it = 0; it < 100; ++it) {
        const ML yi = y.inverse(), zi = z.inverse();
        y = 0.5L * (y + zi);
        z = 0.5L * (z + yi);
    }
    const long double dm = (m1 - m2).cast<long double>().squaredNorm();
    return dm + c1.trace() + c2.trace() - 2 * y.trace();
}

Matrix random_spd(Eigen::Index d, Rng& rng, double ridge = 0.1) {
    const Matrix a = randn(d, d, rng);
    return a * a.transpose() / double(d) + ridge * Matrix::Identity(d, d);
}

struct Blobs {
    Matrix x;
    std::vector<int> y;
};

// Two Gaussian blobs along axis 0, centers +-margin (unit noise): each center
// sits `margin` standard deviations from the separating hyperplane.
Blobs blobs(std::int64_t n, std::int64_t d, double margin, Rng& rng) {
    Blobs b{randn(n, d, rng), std::vector<int>(static_cast<std::size_t>(n))};
    for (std::int64_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % 2);
        b.y[static_cast<std::size_t>(i)] = c;
        b.x(i, 0) += c ? margin : -margin;
    }
    return b;
}

}  // namespace

TEST_CASE("frechet: closed forms") {
    Rng rng(1);
    const Matrix c = random_spd(6, rng);
    const Vector mu = randn(6, 1, rng);
    CHECK(frechet_distance(mu, c, mu, c) == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-10));
    Vector shift = Vector::Zero(6);
    shift(2) = 3;
    shift(4) = 4;
    const Matrix id = Matrix::Identity(6, 6);
    CHECK(frechet_distance(Vector::Zero(6), id, shift, id) == doctest::Approx(25.0).epsilon(1e-12));
}

TEST_CASE("frechet: matches the long-double Denman-Beavers oracle on random 8-dim pairs") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix c1 = random_spd(8, rng), c2 = random_spd(8, rng);
        const Vector m1 = randn(8, 1, rng), m2 = randn(8, 1, rng);
        const double got = frechet_distance(m1, c1, m2, c2);
        const double want = static_cast<double>(frechet_oracle(m1, c1, m2, c2));
        CHECK(std::abs(got - want) <= 1e-6);
        CHECK(std::abs(got - frechet_distance(m2, c2, m1, c1)) <= 1e-8);
        CHECK(got >= 0);
    }
}

TEST_CASE("frechet: rank-deficient PSD accepted, indefinite rejected") {
    Rng rng(3);
    const Matrix a = randn(5, 2, rng);
    const Matrix low = a * a.transpose();  // rank 2
    CHECK(frechet_distance(Vector::Zero(5), low, Vector::Zero(5), low) == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-6));
    Matrix bad = Matrix::Identity(5, 5);
    bad(0, 0) = -1;
    CHECK_THROWS_AS(frechet_distance(Vector::Zero(5), bad, Vector::Zero(5), Matrix::Identity(5, 5)), NumericError);
    Matrix asym = Matrix::Identity(5, 5);
    asym(0, 1) = 0.5;
    CHECK_THROWS_AS(frechet_distance(Vector::Zero(5), asym, Vector::Zero(5), Matrix::Identity(5, 5)), NumericError);
    CHECK_THROWS_AS(frechet_distance(Vector::Zero(4), Matrix::Identity(5, 5), Vector::Zero(5), Matrix::Identity(5, 5)), ShapeError);
}

TEST_CASE("frechet: sample statistics and embedders") {
    Rng rng(4);
    const auto imgs = Tensor<float>::randn(Shape{40, 3, 4, 4}, rng);
    auto emb = make_embedder("random16:3", 48);
    const Matrix e1 = emb->embed(imgs), e2 = make_embedder("random16:3", 48)->embed(imgs);
    CHECK(e1 == e2);
    CHECK(e1.cols() == 16);
    const auto g = gaussian_stats(e1);
    CHECK(frechet_distance(g.mu, g.cov, g.mu, g.cov) == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-9));
    CHECK(PixelEmbedder().embed(imgs).cols() == 48);
    CHECK_THROWS_AS(make_embedder("inception", 48), ConfigError);
    // Unbiased covariance oracle.
    Matrix x(3, 1);
    x << 1, 2, 6;
    CHECK(gaussian_stats(x).cov(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("cka: invariances and the HSIC oracle") {
    Rng rng(5);
    const Matrix x = randn(100, 12, rng);
    CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    const Matrix q = random_orthogonal(12, rng);
    CHECK(std::abs(linear_cka(x, x * q) - 1.0) <= 1e-6);
    CHECK(std::abs(linear_cka(x, -3.7 * x) - 1.0) <= 1e-6);
    CHECK(std::abs(linear_cka(x, (x.array() + 5.0).matrix()) - 1.0) <= 1e-6);

    const Matrix y = x.leftCols(4) * randn(4, 7, rng) + 0.3 * randn(100, 7, rng);
    const double got = linear_cka(x, y);
    CHECK(std::abs(got - static_cast<double>(cka_oracle(x, y))) <= 1e-10);
    CHECK(got >= 0);
    CHECK(got <= 1);
    // Feature path and Gram path agree (wide features switch to Gram form).
    const Matrix wide = randn(20, 50, rng), w2 = randn(20, 30, rng);
    CHECK(std::abs(linear_cka(wide, w2) - static_cast<double>(cka_oracle(wide, w2))) <= 1e-10);
}

TEST_CASE("cka: independent Gaussians score low, degenerate inputs raise") {
    Rng rng(6);
    const Matrix x = randn(1000, 64, rng), y = randn(1000, 64, rng);
    CHECK(linear_cka(x, y) < 0.1);
    CHECK_THROWS_AS(linear_cka(Matrix::Constant(10, 3, 2.0), x.topRows(10)), UndefinedSimilarityError);
    CHECK_THROWS_AS(linear_cka(x.topRows(10), x.topRows(11)), ShapeError);
    CHECK_THROWS_AS(linear_cka(x.topRows(1), x.topRows(1)), ShapeError);
}

TEST_CASE("cka: intra-model map is symmetric with unit diagonal") {
    Rng rng(7);
    std::vector<LayerFeatures> fs;
    Matrix h = randn(200, 10, rng);
    for (int l = 1; l <= 5; ++l) {
        h = (h * random_spd(10, rng) + 0.5 * randn(200, 10, rng)).array().tanh();
        fs.push_back({l, h, 0});
    }
    const CKAMatrix m = cka_map(fs);
    for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(m.m(i, i) - 1.0) <= 1e-6);
        for (int j = 0; j < 5; ++j) {
            CHECK(m.m(i, j) == m.m(j, i));
            CHECK(m.m(i, j) >= -1e-6);
            CHECK(m.m(i, j) <= 1 + 1e-6);
        }
    }
    std::vector<LayerFeatures> other(fs.begin(), fs.begin() + 2);
    const CKAMatrix inter = cka_map(fs, &other);
    CHECK(inter.m.rows() == 5);
    CHECK(inter.m.cols() == 2);
    CHECK(inter.m(1, 1) == doctest::Approx(1.0));
    CHECK(inter.to_json()["layers_b"].size() == 2);
}

TEST_CASE("probe: separable blobs, chance level, degenerate labels") {
    Rng rng(8);
    const Blobs tr = blobs(2000, 16, 5.0, rng), va = blobs(1000, 16, 5.0, rng);
    ProbeConfig pc;
    CHECK(pc.epochs == 15);
    CHECK(pc.lr == 4e-3);
    const auto r = linear_probe(tr.x, tr.y, va.x, va.y, pc);
    CHECK(r.val_acc >= 0.99);
    CHECK(r.train_acc >= 0.99);
    CHECK(r.best_epoch >= 1);

    // Labels independent of features: accuracy within 3 sigma of 1/2.
    Rng lr(9);
    std::vector<int> perm_tr(tr.y.size()), perm_va(va.y.size());
    for (auto& v : perm_tr) v = lr.bernoulli(0.5);
    for (auto& v : perm_va) v = lr.bernoulli(0.5);
    pc.epochs = 3;  // best-of-epochs selection inflates chance slightly; keep the selection small
    const auto c = linear_probe(tr.x, perm_tr, va.x, perm_va, pc);
    CHECK(std::abs(c.val_acc - 0.5) <= 3 * std::sqrt(0.25 / 1000.0) + 0.5 / 1000);

    CHECK_THROWS_AS(linear_probe(tr.x, std::vector<int>(2000, 1), va.x, va.y, ProbeConfig{}), DegenerateLabelError);
    CHECK_THROWS_AS(linear_probe(tr.x, tr.y, va.x.leftCols(3), va.y, ProbeConfig{}), ShapeError);
}

TEST_CASE("probe: duplicated columns and invertible transforms barely move accuracy") {
    Rng rng(10);
    // Overlapping blobs so accuracy is well below 1 and differences would show.
    const Blobs tr = blobs(3000, 8, 0.75, rng), va = blobs(2000, 8, 0.75, rng);
    ProbeConfig pc;
    pc.batch = 32;  // enough steps to converge; the invariance is a property of the optimum
    const double base = linear_probe(tr.x, tr.y, va.x, va.y, pc).val_acc;
    Matrix dt(tr.x.rows(), 16), dv(va.x.rows(), 16);
    dt << tr.x, tr.x;
    dv << va.x, va.x;
    CHECK(std::abs(linear_probe(dt, tr.y, dv, va.y, pc).val_acc - base) <= 0.005);
    const Matrix a = randn(8, 8, rng);
    REQUIRE(std::abs(a.determinant()) > 1e-3);
    CHECK(std::abs(linear_probe(tr.x * a, tr.y, va.x * a, va.y, pc).val_acc - base) <= 0.005);
}

TEST_CASE("sweep: argmax equals the exhaustive maximum") {
    Rng rng(11);
    SweepResult s;
    s.times = {0.1, 0.2, 0.3};
    s.layers = {1, 2, 3, 4};
    double best = -1;
    std::pair<std::size_t, std::size_t> at;
    for (std::size_t i = 0; i < 3; ++i) {
        s.grid.emplace_back();
        for (std::size_t j = 0; j < 4; ++j) {
            ProbeReport r;
            r.val_acc = rng.uniform();
            if (r.val_acc > best) {
                best = r.val_acc;
                at = {i, j};
            }
            s.grid.back().push_back(r);
        }
    }
    locate_best(s);
    CHECK(s.best_t == at.first);
    CHECK(s.best_layer == at.second);
    CHECK(s.best().val_acc == best);
}

TEST_CASE("dense probe: mIoU bookkeeping") {
    // classes present in truth: 0 and 1. IoU0 = 1/3, IoU1 = 1/2.
    const std::vector<int> truth = {0, 0, 1, 1}, pred = {0, 1, 1, 2};
    CHECK(mean_iou(pred, truth, 3) == doctest::Approx((1.0 / 3 + 0.5) / 2));
    CHECK(mean_iou(truth, truth, 3) == 1.0);
    CHECK(mean_iou({0, 1}, {-1, 1}, 2) == 1.0);  // ignore label
}

namespace {

// Tokens [N*G*G, D]: unit noise plus a one-hot of amplitude 8 in channel c
// for a token of class c; labels are the token classes upsampled x4.
DenseProbeData planted_dense(std::int64_t n, Rng& rng, int K, bool constant = false) {
    const std::int64_t G = 4, H = 16, D = 6;
    LayerFeatures lf{1, randn(n * G * G, D, rng), G};
    std::vector<int> dense(static_cast<std::size_t>(n * H * H));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < G * G; ++k) {
            const int c = constant ? 1 : static_cast<int>(rng.integer(0, K - 1));
            lf.x(i * G * G + k, c) += 8.0;
            const std::int64_t gy = k / G, gx = k % G;
            for (std::int64_t y = 0; y < 4; ++y)
                for (std::int64_t x = 0; x < 4; ++x)
                    dense[static_cast<std::size_t>(i * H * H + (gy * 4 + y) * H + gx * 4 + x)] = c;
        }
    return make_dense_data({lf}, dense, H, H, K);
}

}  // namespace

TEST_CASE("dense probe: planted channel, constant labels, duplicated layer, bad resolution") {
    Rng rng(12);
    ProbeConfig pc;
    pc.batch = 16;
    pc.lr = 3e-3;
    const auto tr = planted_dense(200, rng, 3), va = planted_dense(100, rng, 3);
    const auto r = dense_probe(tr, va, pc, Upsample::nearest);
    CHECK(r.metric == "miou");
    CHECK(r.val_acc >= 0.95);

    const auto ct = planted_dense(50, rng, 3, true), cv = planted_dense(20, rng, 3, true);
    CHECK(dense_probe(ct, cv, pc).val_acc == 1.0);

    // Duplicate the layer: concatenated features, same information.
    LayerFeatures a{1, tr.tokens, 4}, av{1, va.tokens, 4};
    const auto tr2 = make_dense_data({a, a}, tr.dense, 16, 16, 3);
    const auto va2 = make_dense_data({av, av}, va.dense, 16, 16, 3);
    const double bil = dense_probe(tr, va, pc).val_acc;
    CHECK(std::abs(dense_probe(tr2, va2, pc).val_acc - bil) <= 0.01);

    auto odd = tr;
    odd.height = 15;
    CHECK_THROWS_AS(dense_probe(odd, va, pc), ShapeError);
}

namespace {

struct ToyModel {
    std::unique_ptr<Backbone<float>> net;
    std::unique_ptr<Denoiser<float>> den;
};

ToyModel toy(Family fam, SelfCondMode mode = SelfCondMode::off) {
    BackboneSpec s;
    s.family = fam;
    s.image_size = 8;
    s.hidden = 16;
    s.depth = 3;
    s.heads = 2;
    s.patch = 2;
    s.freq_dim = 32;
    s.channel_mult = {1, 2};
    s.attn_resolutions = {};
    s.norm_groups = 8;
    SelfCondConfig sc;
    sc.mode = mode;
    sc.tap_layer = mode == SelfCondMode::off ? 0 : 1;
    ToyModel m;
    m.net = make_backbone<float>(s, sc, 3);
    m.den = std::make_unique<Denoiser<float>>(*m.net, Formulation::rf());
    return m;
}

}  // namespace

TEST_CASE("extract: deterministic, batch-invariant, pooled = mean of tokens") {
    const auto m = toy(Family::dit);
    const ImageDataset ds = make_shapes(10, 2, 8);
    ExtractOptions o;
    o.layers = {1, 3};
    o.batch = 4;
    const auto a = extract_features(*m.den, ds, o);
    const auto b = extract_features(*m.den, ds, o);
    o.batch = 10;
    const auto c = extract_features(*m.den, ds, o);
    REQUIRE(a.size() == 2);
    CHECK(a[0].x.rows() == 10);
    CHECK(a[0].x.cols() == 16);
    CHECK(a[1].x == b[1].x);
    CHECK((a[1].x - c[1].x).cwiseAbs().maxCoeff() <= 1e-6);

    o.reduce = Reduce::tokens;
    const auto tk = extract_features(*m.den, ds, o);
    CHECK(tk[0].grid == 4);
    CHECK(tk[0].x.rows() == 10 * 16);
    for (int i = 0; i < 10; ++i)
        CHECK((tk[0].x.middleRows(i * 16, 16).colwise().mean() - a[0].x.row(i)).cwiseAbs().maxCoeff() <= 1e-6);

    o.noise_seed = 99;
    o.reduce = Reduce::pooled;
    CHECK(extract_features(*m.den, ds, o)[0].x != a[0].x);
    o.reduce = Reduce::cls;
    CHECK_THROWS_AS(extract_features(*m.den, ds, o), ConfigError);
    o.reduce = Reduce::pooled;
    o.layers = {9};
    CHECK_THROWS_AS(extract_features(*m.den, ds, o), ConfigError);
    CHECK(default_extraction_time(Formulation::rf(), Family::dit) == 0.25);
    CHECK(default_extraction_time(Formulation::ddpm(), Family::unet_ddpm) == 11);
}

TEST_CASE("extract: UNet spatial taps and UViT summary token") {
    const auto u = toy(Family::unet_ddpm);
    const ImageDataset ds = make_shapes(4, 2, 8);
    ExtractOptions o;
    o.layers = {1};
    const auto f = extract_features(*u.den, ds, o);
    CHECK(f[0].x.rows() == 4);
    CHECK(f[0].x.cols() == u.net->tap_width(1));

    const auto v = toy(Family::uvit, SelfCondMode::cls_token);
    o.reduce = Reduce::cls;
    o.layers = {2};
    const auto cf = extract_features(*v.den, ds, o);
    CHECK(cf[0].x.rows() == 4);
    CHECK(cf[0].x.cols() == 16);
    CHECK(cf[0].x.row(0) != cf[0].x.row(1));
}

TEST_CASE("sweep: a 1x1 grid equals the direct probe") {
    const auto m = toy(Family::dit);
    const ImageDataset tr = make_shapes(40, 2, 8), va = make_shapes(20, 3, 8);
    ProbeConfig pc;
    pc.epochs = 3;
    const auto s = sweep(*m.den, tr, va, {2}, {0.3}, pc, 5, "ck");
    ExtractOptions o;
    o.t = 0.3;
    o.layers = {2};
    o.noise_seed = 5;
    const auto ftr = extract_features(*m.den, tr, o);
    o.noise_seed = Rng::derive(5, "val");
    const auto fva = extract_features(*m.den, va, o);
    const auto direct = linear_probe(ftr[0].x, tr.labels(), fva[0].x, va.labels(), pc);
    CHECK(s.best().val_acc == direct.val_acc);
    CHECK(s.best().layer == 2);
    CHECK(s.best().checkpoint == "ck");
    CHECK_THROWS_AS(sweep(*m.den, tr, va, {}, {0.3}, pc, 5), ConfigError);
}
