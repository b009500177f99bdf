#include <Eigen/Eigenvalues>
#include <cmath>

#include "sdiff/eval.hpp"

namespace sdiff {

double linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw ShapeError("CKA inputs need the same examples (row counts differ)");
    if (x.rows() < 2) throw ShapeError("CKA needs at least two examples");
    const Matrix xc = x.rowwise() - x.colwise().mean();
    const Matrix yc = y.rowwise() - y.colwise().mean();
    // With more features than examples, the Gram form is cheaper and identical.
    double num, nx, ny;
    if (std::max(x.cols(), y.cols()) > x.rows()) {
        const Matrix k = xc * xc.transpose(), l = yc * yc.transpose();
        num = (k.array() * l.array()).sum();
        nx = k.norm();
        ny = l.norm();
    } else {
        num = (yc.transpose() * xc).squaredNorm();
        nx = (xc.transpose() * xc).norm();
        ny = (yc.transpose() * yc).norm();
    }
    if (!(nx > 0) || !(ny > 0)) throw UndefinedSimilarityError("CKA undefined for zero-variance features");
    return num / (nx * ny);
}

nlohmann::json CKAMatrix::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
        rows.push_back(r);
    }
    return {{"matrix", rows}, {"layers_a", layers_a}, {"layers_b", layers_b}, {"t", t},
            {"model_a", model_a}, {"model_b", model_b}};
}

CKAMatrix cka_map(const std::vector<LayerFeatures>& a, const std::vector<LayerFeatures>* b) {
    if (a.empty() || (b && b->empty())) throw ConfigError("CKA map needs at least one layer", "layers");
    CKAMatrix out;
    for (const auto& l : a) out.layers_a.push_back(l.layer);
    const auto& bb = b ? *b : a;
    for (const auto& l : bb) out.layers_b.push_back(l.layer);
    out.m.resize(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(bb.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = b ? 0 : i; j < bb.size(); ++j) {
            const double v = linear_cka(a[i].x, bb[j].x);
            out.m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            if (!b) out.m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
        }
    return out;
}

namespace {

// Symmetric PSD square root by eigendecomposition; eigenvalues above the
// negative tolerance are clipped to 0, anything below is a numeric error.
Matrix psd_sqrt(const Matrix& c, const char* what) {
    const Matrix s = 0.5 * (c + c.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
    Vector ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -1e-8 * scale)
            throw NumericError(std::string(what) + " is not positive semi-definite (eigenvalue " +
                               std::to_string(ev(i)) + ")");
        ev(i) = std::sqrt(std::max(0.0, ev(i)));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double trace_sqrt_psd(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed for C1^1/2 C2 C1^1/2");
    double tr = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()(i)));
    return tr;
}

}  // namespace

double frechet_distance(const Vector& mu1, const Matrix& c1, const Vector& mu2, const Matrix& c2) {
    const Eigen::Index d = mu1.size();
    if (mu2.size() != d || c1.rows() != d || c1.cols() != d || c2.rows() != d || c2.cols() != d)
        throw ShapeError("Frechet distance inputs disagree in dimension");
    auto check_sym = [](const Matrix& c, const char* what) {
        const double tol = 1e-8 * std::max(1.0, c.cwiseAbs().maxCoeff());
        if ((c - c.transpose()).cwiseAbs().maxCoeff() > tol) throw NumericError(std::string(what) + " is not symmetric");
    };
    check_sym(c1, "C1");
    check_sym(c2, "C2");
    if (mu1 == mu2 && c1 == c2) {
        (void)psd_sqrt(c1, "C1");  // still reject indefinite input
        return 0.0;
    }
    // tr((C1 C2)^1/2) = tr((S C2 S)^1/2) with S = C1^1/2; the inner product is symmetric PSD.
    // Both orderings are averaged so d(A, B) and d(B, A) share one expression.
    const Matrix s1 = psd_sqrt(c1, "C1"), s2 = psd_sqrt(c2, "C2");
    const double tr12 = 0.5 * (trace_sqrt_psd(s1 * c2 * s1) + trace_sqrt_psd(s2 * c1 * s2));
    const double v = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2 * tr12;
    return std::max(0.0, v);
}

GaussianStats gaussian_stats(const Matrix& rows) {
    if (rows.rows() < 2) throw ShapeError("Gaussian statistics need at least two samples");
    GaussianStats g;
    g.mu = rows.colwise().mean().transpose();
    const Matrix c = rows.rowwise() - g.mu.transpose();
    g.cov = (c.transpose() * c) / double(rows.rows() - 1);
    return g;
}

Matrix PixelEmbedder::embed(const Tensor<float>& images) const {
    const std::int64_t n = images.dim(0), d = images.numel() / std::max<std::int64_t>(1, n);
    Matrix m(n, d);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < d; ++k) m(i, k) = images.ptr()[i * d + k];
    return m;
}

RandomFeatureEmbedder::RandomFeatureEmbedder(std::int64_t in_dim, std::int64_t out_dim, std::uint64_t seed)
    : w_(in_dim, out_dim), seed_(seed) {
    Rng rng = Rng::substream(seed, "embedder");
    const double s = 1.0 / std::sqrt(double(in_dim));
    for (Eigen::Index i = 0; i < w_.rows(); ++i)
        for (Eigen::Index j = 0; j < w_.cols(); ++j) w_(i, j) = rng.normal() * s;
}

std::string RandomFeatureEmbedder::name() const {
    return "random" + std::to_string(w_.cols()) + ":" + std::to_string(seed_);
}

Matrix RandomFeatureEmbedder::embed(const Tensor<float>& images) const {
    const Matrix x = PixelEmbedder().embed(images);
    if (x.cols() != w_.rows()) throw ShapeError("embedder input width mismatch");
    return (x * w_).array().tanh();
}

std::unique_ptr<Embedder> make_embedder(const std::string& name, std::int64_t in_dim) {
    if (name == "pixels") return std::make_unique<PixelEmbedder>();
    if (name.rfind("random", 0) == 0) {
        // random[<dim>[:<seed>]]
        std::int64_t dim = 64;
        std::uint64_t seed = 0;
        const std::string rest = name.substr(6);
        try {
            if (!rest.empty()) {
                const auto colon = rest.find(':');
                dim = std::stoll(rest.substr(0, colon));
                if (colon != std::string::npos) seed = std::stoull(rest.substr(colon + 1));
            }
        } catch (const std::exception&) {
            throw ConfigError("bad embedder spec '" + name + "'", "embedder");
        }
        if (dim < 1) throw ConfigError("embedder width must be >= 1", "embedder");
        return std::make_unique<RandomFeatureEmbedder>(in_dim, dim, seed);
    }
    throw ConfigError("unknown embedder '" + name + "' (pixels | random<dim>[:seed])", "embedder");
}

}  // namespace sdiff
