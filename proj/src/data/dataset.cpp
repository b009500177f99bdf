#include "sdiff/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "sdiff/core/error.hpp"
#include "sdiff/io/archive.hpp"

namespace sdiff {

ImageDataset::ImageDataset(Tensor<float> images, std::vector<int> labels, int num_classes, std::vector<int> dense,
                           int dense_classes)
    : images_(std::move(images)),
      labels_(std::move(labels)),
      dense_(std::move(dense)),
      num_classes_(num_classes),
      dense_classes_(dense_classes) {
    if (images_.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W]");
    if (images_.dim(2) != images_.dim(3)) throw ShapeError("dataset images must be square");
    if (static_cast<std::int64_t>(labels_.size()) != images_.dim(0)) throw ShapeError("one label per image required");
    if (!dense_.empty() && static_cast<std::int64_t>(dense_.size()) != images_.dim(0) * images_.dim(2) * images_.dim(3))
        throw ShapeError("dense labels must be [N,H,W]");
    for (int l : labels_)
        if (l < 0 || l >= num_classes_) throw DomainError("label out of range: " + std::to_string(l));
}

Batch ImageDataset::gather(const std::vector<std::int64_t>& idx) const {
    const std::int64_t C = channels(), S = image_size(), per = C * S * S, B = static_cast<std::int64_t>(idx.size());
    Batch b;
    b.x = Tensor<float>(Shape{B, C, S, S});
    for (std::int64_t k = 0; k < B; ++k) {
        const std::int64_t i = idx[static_cast<std::size_t>(k)];
        if (i < 0 || i >= size()) throw DomainError("dataset index out of range");
        std::copy(images_.ptr() + i * per, images_.ptr() + (i + 1) * per, b.x.ptr() + k * per);
        b.labels.push_back(labels_[static_cast<std::size_t>(i)]);
        if (has_dense())
            b.dense.insert(b.dense.end(), dense_.begin() + i * S * S, dense_.begin() + (i + 1) * S * S);
    }
    return b;
}

std::pair<ImageDataset, ImageDataset> ImageDataset::split(std::int64_t n) const {
    if (n <= 0 || n >= size()) throw DomainError("split point must be inside the dataset");
    std::vector<std::int64_t> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(size() - n));
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), n);
    Batch ba = gather(a), bb = gather(b);
    return {ImageDataset(std::move(ba.x), std::move(ba.labels), num_classes_, std::move(ba.dense), dense_classes_),
            ImageDataset(std::move(bb.x), std::move(bb.labels), num_classes_, std::move(bb.dense), dense_classes_)};
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    const double hh = std::fmod(h, 1.0) * 6.0;
    const int i = static_cast<int>(hh);
    const double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

}  // namespace

ImageDataset make_shapes(std::int64_t n, std::uint64_t seed, int size) {
    if (n <= 0 || size < 8) throw ConfigError("shapes dataset needs n > 0 and size >= 8");
    const std::int64_t S = size;
    Tensor<float> images(Shape{n, 3, S, S});
    std::vector<int> labels(static_cast<std::size_t>(n)), dense(static_cast<std::size_t>(n * S * S));
    const double u = size / 16.0;
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = Rng::substream(seed, "shapes", static_cast<std::uint64_t>(i));
        const int cls = static_cast<int>(i % 2);
        labels[static_cast<std::size_t>(i)] = cls;
        const double bg = rng.uniform(-0.8, -0.3);
        const double cx = rng.uniform(4.5 * u, S - 1 - 4.5 * u), cy = rng.uniform(4.5 * u, S - 1 - 4.5 * u);
        const double r = rng.uniform(2.5, 4.5) * u;
        // Hue ranges overlap on [0.4, 0.6]; shape is the reliable cue.
        const double hue = cls == 0 ? rng.uniform(0.0, 0.6) : rng.uniform(0.4, 1.0);
        const auto rgb = hsv_to_rgb(hue, 0.8, 1.0);
        float* img = images.ptr() + i * 3 * S * S;
        int* dn = dense.data() + i * S * S;
        for (std::int64_t y = 0; y < S; ++y)
            for (std::int64_t x = 0; x < S; ++x) {
                const double dx = x - cx, dy = y - cy;
                const bool inside = cls == 0 ? dx * dx + dy * dy <= r * r : std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
                dn[y * S + x] = inside ? 1 + cls : 0;
                for (int c = 0; c < 3; ++c) {
                    const double v = inside ? 2.0 * rgb[static_cast<std::size_t>(c)] - 1.0 : bg;
                    img[(c * S + y) * S + x] = static_cast<float>(std::clamp(v + 0.05 * rng.normal(), -1.0, 1.0));
                }
            }
    }
    return ImageDataset(std::move(images), std::move(labels), 2, std::move(dense), 3);
}

ImageDataset make_planted(std::int64_t n, std::uint64_t seed, int size, double amplitude) {
    ImageDataset base = make_shapes(n, seed, size);
    const std::int64_t S = size, P = 3 * S * S;
    const std::int64_t cell = std::max<std::int64_t>(1, S / 4);
    const std::int64_t G = (S + cell - 1) / cell;
    Rng rng = Rng::substream(seed, "planted_templates");
    std::vector<double> coarse(static_cast<std::size_t>(2 * 3 * G * G));
    for (double& v : coarse) v = amplitude * rng.normal();
    Tensor<float> images = base.images();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t k = base.labels()[static_cast<std::size_t>(i)];
        float* img = images.ptr() + i * P;
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < S; ++y)
                for (std::int64_t x = 0; x < S; ++x) {
                    const double t = coarse[static_cast<std::size_t>(((k * 3 + c) * G + y / cell) * G + x / cell)];
                    float& v = img[(c * S + y) * S + x];
                    v = static_cast<float>(0.5 * v + t);
                }
    }
    return ImageDataset(std::move(images), base.labels(), 2, base.dense(), base.dense_classes());
}

namespace {

std::int64_t parse_count(const std::string& ref, const std::string& prefix, std::int64_t dflt) {
    if (ref.size() == prefix.size()) return dflt;
    if (ref[prefix.size()] != ':') throw ConfigError("expected " + prefix + "[:N]", "train.dataset");
    try {
        return std::stoll(ref.substr(prefix.size() + 1));
    } catch (const std::exception&) {
        throw ConfigError("bad sample count in " + ref, "train.dataset");
    }
}

}  // namespace

ImageDataset load_dataset(const std::string& ref, std::uint64_t seed) {
    for (const std::string syn : {"synthetic:shapes", "synthetic:planted"}) {
        if (ref.rfind(syn, 0) != 0) continue;
        const std::int64_t n = parse_count(ref, syn, 2048);
        return syn == "synthetic:shapes" ? make_shapes(n, seed) : make_planted(n, seed);
    }
    if (!std::filesystem::exists(ref)) throw IoError("dataset not found: " + ref);
    const Archive a = Archive::load(ref);
    auto images = a.get<float>("images");
    auto labels = a.get_ints("labels");
    const int nc = a.meta.value("num_classes", labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1);
    std::vector<int> dense;
    int dc = 0;
    if (a.has("dense")) {
        dense = a.get_ints("dense");
        dc = a.meta.value("dense_classes", dense.empty() ? 0 : *std::max_element(dense.begin(), dense.end()) + 1);
    }
    return ImageDataset(std::move(images), std::move(labels), nc, std::move(dense), dc);
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::substream(seed, "data", static_cast<std::uint64_t>(epoch));
    // Fisher-Yates with our own integer draws (std::shuffle is implementation-defined).
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.integer(0, i))]);
    return idx;
}

GaussianMixture2D GaussianMixture2D::standard() {
    GaussianMixture2D g;
    g.weights = {0.5, 0.3, 0.2};
    g.means = {{{-1.0, 0.0}}, {{1.2, 0.8}}, {{0.5, -1.3}}};
    g.covs = {{{0.20, 0.05, 0.10}}, {{0.10, -0.03, 0.15}}, {{0.05, 0.0, 0.05}}};
    return g;
}

Tensor<double> GaussianMixture2D::sample(std::int64_t n, Rng& rng) const {
    Tensor<double> out(Shape{n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
        double u = rng.uniform();
        std::size_t k = 0;
        while (k + 1 < weights.size() && u >= weights[k]) u -= weights[k++];
        const auto& c = covs[k];
        // Cholesky of [[xx, xy], [xy, yy]].
        const double l00 = std::sqrt(c[0]), l10 = c[1] / l00, l11 = std::sqrt(c[2] - l10 * l10);
        const double z0 = rng.normal(), z1 = rng.normal();
        out[2 * i] = means[k][0] + l00 * z0;
        out[2 * i + 1] = means[k][1] + l10 * z0 + l11 * z1;
    }
    return out;
}

std::array<double, 2> GaussianMixture2D::mean() const {
    std::array<double, 2> m{};
    for (std::size_t k = 0; k < weights.size(); ++k)
        for (int d = 0; d < 2; ++d) m[static_cast<std::size_t>(d)] += weights[k] * means[k][static_cast<std::size_t>(d)];
    return m;
}

std::array<double, 3> GaussianMixture2D::covariance() const {
    const auto m = mean();
    std::array<double, 3> c{};
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const double dx = means[k][0] - m[0], dy = means[k][1] - m[1];
        c[0] += weights[k] * (covs[k][0] + dx * dx);
        c[1] += weights[k] * (covs[k][1] + dx * dy);
        c[2] += weights[k] * (covs[k][2] + dy * dy);
    }
    return c;
}

}  // namespace sdiff
