#include <numeric>

#include "sdiff/eval.hpp"

namespace sdiff {

std::string to_string(Reduce r) {
    switch (r) {
        case Reduce::pooled: return "pooled";
        case Reduce::tokens: return "tokens";
        case Reduce::cls: return "cls";
    }
    return "?";
}

Reduce parse_reduce(const std::string& s) {
    if (s == "pooled") return Reduce::pooled;
    if (s == "tokens") return Reduce::tokens;
    if (s == "cls") return Reduce::cls;
    throw ConfigError("unknown feature reduction '" + s + "'", "reduce");
}

double default_extraction_time(const Formulation& f, Family family) { return default_probe_time(f, family); }

namespace {

// Writes rows of one tap readout into `dst` starting at image row `row0`.
void append_rows(const Tensor<float>& tap, const Backbone<float>& net, Reduce reduce, std::int64_t row0,
                 LayerFeatures& dst) {
    const Shape& s = tap.shape();
    const std::int64_t B = s[0];
    if (s.size() == 4) {
        // Spatial map [B, C, H, W]: positions are the tokens.
        const std::int64_t C = s[1], HW = s[2] * s[3];
        if (reduce == Reduce::cls) throw ConfigError("cls reduction needs a summary token", "reduce");
        for (std::int64_t b = 0; b < B; ++b) {
            const float* p = tap.ptr() + b * C * HW;
            if (reduce == Reduce::pooled) {
                for (std::int64_t c = 0; c < C; ++c) {
                    double acc = 0;
                    for (std::int64_t k = 0; k < HW; ++k) acc += p[c * HW + k];
                    dst.x(row0 + b, c) = acc / double(HW);
                }
            } else {
                for (std::int64_t k = 0; k < HW; ++k)
                    for (std::int64_t c = 0; c < C; ++c) dst.x((row0 + b) * HW + k, c) = p[c * HW + k];
            }
        }
        return;
    }
    // Token matrix [B, N, D]: the patch tokens are the trailing grid*grid rows.
    const std::int64_t N = s[1], D = s[2];
    const std::int64_t P = dst.grid * dst.grid, first = N - P;
    for (std::int64_t b = 0; b < B; ++b) {
        const float* p = tap.ptr() + b * N * D;
        switch (reduce) {
            case Reduce::pooled:
                for (std::int64_t d = 0; d < D; ++d) {
                    double acc = 0;
                    for (std::int64_t k = first; k < N; ++k) acc += p[k * D + d];
                    dst.x(row0 + b, d) = acc / double(P);
                }
                break;
            case Reduce::tokens:
                for (std::int64_t k = 0; k < P; ++k)
                    for (std::int64_t d = 0; d < D; ++d) dst.x((row0 + b) * P + k, d) = p[(first + k) * D + d];
                break;
            case Reduce::cls:
                if (net.selfcond().mode != SelfCondMode::cls_token)
                    throw ConfigError("cls reduction needs a summary token", "reduce");
                for (std::int64_t d = 0; d < D; ++d) dst.x(row0 + b, d) = p[d];
                break;
        }
    }
}

}  // namespace

std::vector<LayerFeatures> extract_features(const Denoiser<float>& model, const ImageDataset& data,
                                            const ExtractOptions& opt) {
    const Backbone<float>& net = model.backbone();
    const Formulation& f = model.formulation();
    if (opt.layers.empty()) throw ConfigError("no layers requested", "layers");
    for (int l : opt.layers)
        if (l < 1 || l > net.num_taps()) throw ConfigError("layer " + std::to_string(l) + " is not a declared tap", "layers");
    if (opt.reduce == Reduce::cls && net.selfcond().mode != SelfCondMode::cls_token)
        throw ConfigError("cls reduction needs a summary token", "reduce");
    if (opt.batch < 1) throw ConfigError("batch must be >= 1", "batch");
    const double t = opt.t < 0 ? default_extraction_time(f, net.spec().family) : opt.t;
    try {
        (void)alpha_sigma(f, t);
    } catch (const DomainError& e) {
        throw ConfigError(std::string("extraction time outside the domain: ") + e.what(), "t");
    }

    const std::int64_t N = data.size();
    const std::int64_t per_image = data.channels() * data.image_size() * data.image_size();
    std::vector<LayerFeatures> out(opt.layers.size());
    bool sized = false;

    NoGradGuard ng;
    for (std::int64_t start = 0; start < N; start += opt.batch) {
        const std::int64_t B = std::min<std::int64_t>(opt.batch, N - start);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
        std::iota(idx.begin(), idx.end(), start);
        const Batch batch = data.gather(idx);
        Tensor<float> eps(batch.x.shape());
        for (std::int64_t b = 0; b < B; ++b) {
            Rng r = Rng::substream(opt.noise_seed, "extract", static_cast<std::uint64_t>(start + b));
            float* e = eps.ptr() + b * per_image;
            for (std::int64_t k = 0; k < per_image; ++k) e[k] = static_cast<float>(r.normal());
        }
        const std::vector<double> ts(static_cast<std::size_t>(B), t);
        const Tensor<float> xt = perturb(f, batch.x, ts, eps);
        ForwardOptions fo;
        fo.taps = opt.layers;
        const ForwardOutput<float> fwd = model.predict(ag::constant(xt), ts, Conditioning{}, fo);

        for (std::size_t li = 0; li < opt.layers.size(); ++li) {
            const Tensor<float>& tap = fwd.tap(opt.layers[li]).value();
            LayerFeatures& lf = out[li];
            if (!sized) {
                lf.layer = opt.layers[li];
                const Shape& s = tap.shape();
                std::int64_t width, tokens;
                if (s.size() == 4) {
                    width = s[1];
                    tokens = s[2] * s[3];
                    lf.grid = s[2];
                    if (s[2] != s[3]) throw ShapeError("non-square feature map " + to_string(s));
                } else {
                    width = s[2];
                    lf.grid = net.spec().image_size / net.spec().patch;
                    tokens = lf.grid * lf.grid;
                }
                lf.x = Matrix::Zero(opt.reduce == Reduce::tokens ? N * tokens : N, width);
            }
            append_rows(tap, net, opt.reduce, start, lf);
        }
        sized = true;
    }
    if (opt.reduce != Reduce::tokens)
        for (auto& lf : out) lf.grid = 0;
    return out;
}

}  // namespace sdiff
