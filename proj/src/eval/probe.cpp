#include <algorithm>
#include <cmath>
#include <set>

#include "sdiff/eval.hpp"

namespace sdiff {

nlohmann::json ProbeConfig::to_json() const {
    return {{"epochs", epochs}, {"lr", lr}, {"batch", batch}, {"weight_decay", weight_decay}, {"seed", seed},
            {"optimizer", "adam"}, {"schedule", "cosine"}};
}

nlohmann::json ProbeReport::to_json() const {
    return {{"layer", layer},           {"t", t},           {"metric", metric},
            {"train", train_acc},       {"val", val_acc},   {"best_epoch", best_epoch},
            {"probe", config.to_json()}, {"checkpoint", checkpoint}};
}

namespace {

void check_probe_config(const ProbeConfig& c) {
    if (c.epochs < 1) throw ConfigError("must be >= 1", "eval.probe_epochs");
    if (!(c.lr > 0)) throw ConfigError("must be > 0", "eval.probe_lr");
    if (c.batch < 1) throw ConfigError("must be >= 1", "eval.probe_batch");
    if (c.weight_decay < 0) throw ConfigError("must be >= 0", "eval.probe_weight_decay");
}

// Plain Adam over a dense parameter block with an L2 term folded into the gradient.
struct Adam {
    Matrix m, v;
    std::int64_t count = 0;
    explicit Adam(const Matrix& like) : m(Matrix::Zero(like.rows(), like.cols())), v(m) {}
    void step(Matrix& w, Matrix g, double lr, double wd) {
        if (wd > 0) g += wd * w;
        ++count;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(0.9, double(count)), c2 = 1 - std::pow(0.999, double(count));
        w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
    }
};

double cosine_lr(double lr, std::int64_t step, std::int64_t total) {
    return 0.5 * lr * (1 + std::cos(M_PI * double(step) / double(total)));
}

// Row softmax in place; returns nothing, rows sum to 1.
void softmax_rows(Matrix& z) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mx = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - mx).exp();
        z.row(r) /= z.row(r).sum();
    }
}

double accuracy(const Matrix& x, const Matrix& w, const Matrix& b, const std::vector<int>& y) {
    if (y.empty()) return 0;
    const Matrix z = (x * w).rowwise() + b.row(0);
    std::int64_t hit = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        Eigen::Index k;
        z.row(r).maxCoeff(&k);
        hit += k == y[static_cast<std::size_t>(r)];
    }
    return double(hit) / double(y.size());
}

}  // namespace

ProbeReport linear_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& val_x,
                         const std::vector<int>& val_y, const ProbeConfig& cfg) {
    check_probe_config(cfg);
    const Eigen::Index n = train_x.rows(), D = train_x.cols();
    if (n != static_cast<Eigen::Index>(train_y.size()) || val_x.rows() != static_cast<Eigen::Index>(val_y.size()))
        throw ShapeError("feature rows and labels differ in count");
    if (val_x.cols() != D) throw ShapeError("train and validation feature widths differ");
    std::set<int> classes(train_y.begin(), train_y.end());
    if (classes.size() < 2) throw DegenerateLabelError("linear probe needs at least two classes in the training labels");
    int K = 0;
    for (int y : train_y) K = std::max(K, y + 1);
    for (int y : val_y) K = std::max(K, y + 1);
    if (*classes.begin() < 0) throw DomainError("negative class label");

    // Parameter-free standardization with training statistics.
    const Eigen::RowVectorXd mean = train_x.colwise().mean();
    const Eigen::RowVectorXd var = (train_x.rowwise() - mean).array().square().colwise().mean();
    const Eigen::RowVectorXd inv = (var.array() + 1e-5).rsqrt();
    const Matrix xs = (train_x.rowwise() - mean).array().rowwise() * inv.array();
    const Matrix vs = (val_x.rowwise() - mean).array().rowwise() * inv.array();

    Matrix w = Matrix::Zero(D, K), b = Matrix::Zero(1, K);
    Adam aw(w), ab(b);
    const std::int64_t per_epoch = (n + cfg.batch - 1) / cfg.batch, total = per_epoch * cfg.epochs;
    std::int64_t step = 0;
    ProbeReport r;
    r.config = cfg;
    r.val_acc = -1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(n, Rng::derive(cfg.seed, "probe"), epoch);
        for (std::int64_t s = 0; s < n; s += cfg.batch) {
            const std::int64_t B = std::min<std::int64_t>(cfg.batch, n - s);
            Matrix xb(B, D);
            for (std::int64_t i = 0; i < B; ++i) xb.row(i) = xs.row(order[static_cast<std::size_t>(s + i)]);
            Matrix p = (xb * w).rowwise() + b.row(0);
            softmax_rows(p);
            for (std::int64_t i = 0; i < B; ++i) p(i, train_y[static_cast<std::size_t>(order[static_cast<std::size_t>(s + i)])]) -= 1;
            p /= double(B);
            const double lr = cosine_lr(cfg.lr, step++, total);
            aw.step(w, xb.transpose() * p, lr, cfg.weight_decay);
            ab.step(b, p.colwise().sum(), lr, 0);
        }
        const double va = accuracy(vs, w, b, val_y);
        if (va > r.val_acc) {
            r.val_acc = va;
            r.best_epoch = epoch + 1;
            r.train_acc = accuracy(xs, w, b, train_y);
        }
    }
    return r;
}

void locate_best(SweepResult& s) {
    double best = -1;
    for (std::size_t i = 0; i < s.grid.size(); ++i)
        for (std::size_t j = 0; j < s.grid[i].size(); ++j)
            if (s.grid[i][j].val_acc > best) {
                best = s.grid[i][j].val_acc;
                s.best_t = i;
                s.best_layer = j;
            }
}

nlohmann::json SweepResult::to_json() const {
    nlohmann::json j;
    j["times"] = times;
    j["layers"] = layers;
    j["grid"] = nlohmann::json::array();
    for (const auto& row : grid) {
        nlohmann::json jr = nlohmann::json::array();
        for (const auto& c : row) jr.push_back(c.to_json());
        j["grid"].push_back(jr);
    }
    if (!grid.empty()) j["best"] = best().to_json();
    return j;
}

SweepResult sweep(const Denoiser<float>& model, const ImageDataset& train, const ImageDataset& val,
                  const std::vector<int>& layers, const std::vector<double>& times, const ProbeConfig& cfg,
                  std::uint64_t noise_seed, const std::string& checkpoint) {
    if (layers.empty() || times.empty()) throw ConfigError("sweep needs non-empty layer and time grids", "layers");
    SweepResult s;
    s.times = times;
    s.layers = layers;
    for (double t : times) {
        ExtractOptions eo;
        eo.t = t;
        eo.layers = layers;
        eo.noise_seed = noise_seed;
        const auto ftr = extract_features(model, train, eo);
        // Validation noise comes from a separate substream so it never repeats training draws.
        eo.noise_seed = Rng::derive(noise_seed, "val");
        const auto fva = extract_features(model, val, eo);
        std::vector<ProbeReport> row;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            ProbeReport r = linear_probe(ftr[l].x, train.labels(), fva[l].x, val.labels(), cfg);
            r.layer = layers[l];
            r.t = t;
            r.checkpoint = checkpoint;
            row.push_back(std::move(r));
        }
        s.grid.push_back(std::move(row));
    }
    locate_best(s);
    return s;
}

double mean_iou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and label maps differ in size");
    std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes)), fp(tp), fn(tp), present(tp);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int g = truth[i], p = pred[i];
        if (g < 0) continue;  // ignore label
        if (g >= num_classes || p < 0 || p >= num_classes) throw DomainError("class id out of range in mIoU");
        present[static_cast<std::size_t>(g)] = 1;
        if (p == g) {
            ++tp[static_cast<std::size_t>(g)];
        } else {
            ++fn[static_cast<std::size_t>(g)];
            ++fp[static_cast<std::size_t>(p)];
        }
    }
    double sum = 0;
    int n = 0;
    for (std::size_t c = 0; c < present.size(); ++c) {
        if (!present[c]) continue;
        sum += double(tp[c]) / double(tp[c] + fp[c] + fn[c]);
        ++n;
    }
    if (n == 0) throw DegenerateLabelError("no labelled pixels for mIoU");
    return sum / n;
}

DenseProbeData make_dense_data(const std::vector<LayerFeatures>& layers, const std::vector<int>& dense,
                               std::int64_t height, std::int64_t width, int num_classes) {
    if (layers.empty()) throw ConfigError("dense probe needs at least one layer", "layers");
    DenseProbeData d;
    d.grid = layers[0].grid;
    if (d.grid <= 0) throw ConfigError("dense probe needs token features", "reduce");
    Eigen::Index cols = 0;
    for (const auto& l : layers) {
        if (l.grid != d.grid || l.x.rows() != layers[0].x.rows())
            throw ShapeError("layers disagree on token grid; cannot concatenate");
        cols += l.x.cols();
    }
    d.tokens.resize(layers[0].x.rows(), cols);
    Eigen::Index c0 = 0;
    for (const auto& l : layers) {
        d.tokens.middleCols(c0, l.x.cols()) = l.x;
        c0 += l.x.cols();
    }
    d.dense = dense;
    d.height = height;
    d.width = width;
    d.num_classes = num_classes;
    return d;
}

namespace {

struct Tap {
    std::int64_t token;
    double w;
};

// Per-pixel interpolation weights over the token grid (shared by all images).
std::vector<std::vector<Tap>> upsample_taps(std::int64_t G, std::int64_t H, std::int64_t W, Upsample up) {
    std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(H * W));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            auto& t = taps[static_cast<std::size_t>(y * W + x)];
            if (up == Upsample::nearest) {
                t.push_back({(y * G / H) * G + x * G / W, 1.0});
                continue;
            }
            // Half-pixel centers, edge clamped.
            auto axis = [G](std::int64_t i, std::int64_t n) {
                double s = (double(i) + 0.5) * double(G) / double(n) - 0.5;
                s = std::clamp(s, 0.0, double(G - 1));
                const auto i0 = static_cast<std::int64_t>(std::floor(s));
                const std::int64_t i1 = std::min(i0 + 1, G - 1);
                return std::tuple<std::int64_t, std::int64_t, double>{i0, i1, s - double(i0)};
            };
            const auto [y0, y1, fy] = axis(y, H);
            const auto [x0, x1, fx] = axis(x, W);
            const Tap cand[4] = {{y0 * G + x0, (1 - fy) * (1 - fx)},
                                 {y0 * G + x1, (1 - fy) * fx},
                                 {y1 * G + x0, fy * (1 - fx)},
                                 {y1 * G + x1, fy * fx}};
            for (const Tap& c : cand)
                if (c.w > 0) t.push_back(c);
        }
    return taps;
}

Matrix layer_norm_rows(const Matrix& x) {
    Matrix y = x;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double m = y.row(r).mean();
        y.row(r).array() -= m;
        const double v = y.row(r).squaredNorm() / double(y.cols());
        y.row(r) /= std::sqrt(v + 1e-6);
    }
    return y;
}

void check_dense(const DenseProbeData& d) {
    if (d.grid <= 0 || d.height % d.grid || d.width % d.grid)
        throw ShapeError("label resolution " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                         " is not divisible by the token grid " + std::to_string(d.grid));
    const std::int64_t P = d.grid * d.grid;
    if (d.tokens.rows() % P) throw ShapeError("token rows are not a multiple of grid^2");
    const std::int64_t N = d.tokens.rows() / P;
    if (static_cast<std::int64_t>(d.dense.size()) != N * d.height * d.width)
        throw ShapeError("dense labels do not match the number of images");
}

std::vector<int> dense_predict(const Matrix& logits_tokens, const DenseProbeData& d,
                               const std::vector<std::vector<Tap>>& taps) {
    const std::int64_t P = d.grid * d.grid, N = d.tokens.rows() / P, HW = d.height * d.width;
    std::vector<int> pred(static_cast<std::size_t>(N * HW));
    Eigen::RowVectorXd z(logits_tokens.cols());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < HW; ++p) {
            z.setZero();
            for (const Tap& t : taps[static_cast<std::size_t>(p)]) z += t.w * logits_tokens.row(n * P + t.token);
            Eigen::Index k;
            z.maxCoeff(&k);
            pred[static_cast<std::size_t>(n * HW + p)] = static_cast<int>(k);
        }
    return pred;
}

}  // namespace

ProbeReport dense_probe(const DenseProbeData& train, const DenseProbeData& val, const ProbeConfig& cfg, Upsample up) {
    check_probe_config(cfg);
    check_dense(train);
    check_dense(val);
    if (train.grid != val.grid || train.height != val.height || train.width != val.width ||
        train.tokens.cols() != val.tokens.cols())
        throw ShapeError("train and validation dense data differ in layout");
    const int K = std::max(train.num_classes, val.num_classes);
    if (K < 1) throw DegenerateLabelError("dense probe needs at least one class");

    const std::int64_t G = train.grid, P = G * G, HW = train.height * train.width, D = train.tokens.cols();
    const std::int64_t N = train.tokens.rows() / P;
    const auto taps = upsample_taps(G, train.height, train.width, up);
    const Matrix xs = layer_norm_rows(train.tokens), vs = layer_norm_rows(val.tokens);

    Matrix w = Matrix::Zero(D, K), b = Matrix::Zero(1, K);
    Adam aw(w), ab(b);
    const std::int64_t per_epoch = (N + cfg.batch - 1) / cfg.batch, total = per_epoch * cfg.epochs;
    std::int64_t step = 0;
    ProbeReport r;
    r.metric = "miou";
    r.config = cfg;
    r.val_acc = -1;
    Eigen::RowVectorXd z(K);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(N, Rng::derive(cfg.seed, "dense_probe"), epoch);
        for (std::int64_t s = 0; s < N; s += cfg.batch) {
            const std::int64_t B = std::min<std::int64_t>(cfg.batch, N - s);
            Matrix xb(B * P, D);
            for (std::int64_t i = 0; i < B; ++i)
                xb.middleRows(i * P, P) = xs.middleRows(order[static_cast<std::size_t>(s + i)] * P, P);
            const Matrix logits = (xb * w).rowwise() + b.row(0);
            Matrix g = Matrix::Zero(B * P, K);
            std::int64_t counted = 0;
            for (std::int64_t i = 0; i < B; ++i) {
                const std::int64_t img = order[static_cast<std::size_t>(s + i)];
                for (std::int64_t p = 0; p < HW; ++p) {
                    const int y = train.dense[static_cast<std::size_t>(img * HW + p)];
                    if (y < 0) continue;
                    const auto& tp = taps[static_cast<std::size_t>(p)];
                    z.setZero();
                    for (const Tap& t : tp) z += t.w * logits.row(i * P + t.token);
                    z.array() -= z.maxCoeff();
                    z = z.array().exp();
                    z /= z.sum();
                    z(y) -= 1;
                    for (const Tap& t : tp) g.row(i * P + t.token) += t.w * z;
                    ++counted;
                }
            }
            if (counted == 0) continue;
            g /= double(counted);
            const double lr = cosine_lr(cfg.lr, step++, total);
            aw.step(w, xb.transpose() * g, lr, cfg.weight_decay);
            ab.step(b, g.colwise().sum(), lr, 0);
        }
        const Matrix lv = (vs * w).rowwise() + b.row(0);
        const double miou = mean_iou(dense_predict(lv, val, taps), val.dense, K);
        if (miou > r.val_acc) {
            r.val_acc = miou;
            r.best_epoch = epoch + 1;
            const Matrix lt = (xs * w).rowwise() + b.row(0);
            r.train_acc = mean_iou(dense_predict(lt, train, taps), train.dense, K);
        }
    }
    return r;
}

}  // namespace sdiff
