#include "sdiff/augment.hpp"

#include <cmath>
#include <string>

namespace sdiff {

namespace {

Affine linear(double a, double b, double c, double d) { return Affine{{a, b, 0, c, d, 0}}; }

Affine translation(double tx, double ty) { return Affine{{1, 0, tx, 0, 1, ty}}; }

// Quadrant rotation with exact integer entries.
Affine rot90(int k) {
    static constexpr int c[4] = {1, 0, -1, 0};
    static constexpr int s[4] = {0, 1, 0, -1};
    return linear(c[k], -s[k], s[k], c[k]);
}

Affine rotation(double theta_sin, double theta_cos) { return linear(theta_cos, -theta_sin, theta_sin, theta_cos); }

int quadrant_from_bits(double a, double b) {
    const bool ba = a > 0.5, bb = b > 0.5;
    if (!ba && !bb) return 0;
    if (ba && !bb) return 1;
    if (ba && bb) return 2;
    return 3;
}

void check_prob(double p, const char* field) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probability must be in [0, 1]", std::string("augment.") + field);
}

}  // namespace

Affine Affine::after(const Affine& o) const {
    const auto& a = m;
    const auto& b = o.m;
    return Affine{{a[0] * b[0] + a[1] * b[3], a[0] * b[1] + a[1] * b[4], a[0] * b[2] + a[1] * b[5] + a[2],
                   a[3] * b[0] + a[4] * b[3], a[3] * b[1] + a[4] * b[4], a[3] * b[2] + a[4] * b[5] + a[5]}};
}

Affine Affine::inverse() const {
    const double d = det();
    if (!std::isfinite(d) || std::abs(d) < 1e-12) throw TransformError("affine is degenerate (det " + std::to_string(d) + ")");
    for (double v : m)
        if (!std::isfinite(v)) throw TransformError("affine has non-finite entries");
    const double ia = m[4] / d, ib = -m[1] / d, ic = -m[3] / d, id = m[0] / d;
    return Affine{{ia, ib, -(ia * m[2] + ib * m[5]), ic, id, -(ic * m[2] + id * m[5])}};
}

void AugConfig::validate() const {
    check_prob(p, "p");
    const std::pair<double, const char*> ps[] = {{p_flip, "p_flip"},   {p_rot90, "p_rot90"},   {p_translate, "p_translate"},
                                                 {p_scale, "p_scale"}, {p_rotate, "p_rotate"}, {p_aniso, "p_aniso"}};
    for (auto [v, name] : ps)
        if (v >= 0) check_prob(v, name);
    if (!(translate_max >= 0 && translate_max <= 0.5)) throw ConfigError("must be in [0, 0.5]", "augment.translate_max");
    if (!(scale_std >= 0)) throw ConfigError("must be >= 0", "augment.scale_std");
    if (!(rotate_max >= 0 && rotate_max <= 1)) throw ConfigError("must be in [0, 1]", "augment.rotate_max");
    if (!(aniso_std >= 0)) throw ConfigError("must be >= 0", "augment.aniso_std");
}

AugConfig AugConfig::none() {
    AugConfig c;
    c.p = 0;
    return c;
}

AugParams sample_augmentation(Rng& rng, const AugConfig& cfg, int size) {
    if (size <= 0) throw ConfigError("image size must be positive");
    AugParams out;
    auto& L = out.label;
    Affine A;
    // Every transform consumes the same number of draws whether applied or not,
    // so toggling one probability does not shift the others.
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_flip));
        if (on) {
            L[0] = 1;
            A = linear(-1, 0, 0, 1).after(A);
        }
        out.applied[0] = on;
    }
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_rot90));
        const int k = static_cast<int>(rng.integer(1, 3));
        if (on) {
            L[1] = (k == 1 || k == 2) ? 1 : 0;
            L[2] = (k == 2 || k == 3) ? 1 : 0;
            A = rot90(k).after(A);
        }
        out.applied[1] = on;
    }
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_translate));
        double tx = rng.uniform(-1, 1) * cfg.translate_max * size;
        double ty = rng.uniform(-1, 1) * cfg.translate_max * size;
        if (cfg.integer_translate) {
            tx = std::round(tx);
            ty = std::round(ty);
        }
        if (on && (tx != 0 || ty != 0)) {
            L[3] = tx / size;
            L[4] = ty / size;
            A = translation(tx, ty).after(A);
        }
        out.applied[2] = on;
    }
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_scale));
        const double l = rng.normal() * cfg.scale_std;
        if (on) {
            L[5] = l;
            const double s = std::exp2(l);
            A = linear(s, 0, 0, s).after(A);
        }
        out.applied[3] = on;
    }
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_rotate));
        const double th = rng.uniform(-1, 1) * cfg.rotate_max * M_PI;
        if (on) {
            L[6] = std::sin(th);
            L[7] = std::cos(th) - 1;
            A = rotation(std::sin(th), std::cos(th)).after(A);
        }
        out.applied[4] = on;
    }
    {
        const bool on = rng.bernoulli(cfg.prob(cfg.p_aniso));
        const double a = rng.normal() * cfg.aniso_std;
        if (on) {
            L[8] = a;
            A = linear(std::exp2(a), 0, 0, std::exp2(-a)).after(A);
        }
        out.applied[5] = on;
    }
    out.affine = A;
    return out;
}

Affine affine_from_label(const std::array<double, 9>& L, int size) {
    Affine A;
    if (L[0] > 0.5) A = linear(-1, 0, 0, 1).after(A);
    if (const int k = quadrant_from_bits(L[1], L[2]); k != 0) A = rot90(k).after(A);
    if (L[3] != 0 || L[4] != 0) A = translation(L[3] * size, L[4] * size).after(A);
    if (L[5] != 0) {
        const double s = std::exp2(L[5]);
        A = linear(s, 0, 0, s).after(A);
    }
    if (L[6] != 0 || L[7] != 0) {
        const double th = std::atan2(L[6], L[7] + 1);
        A = rotation(std::sin(th), std::cos(th)).after(A);
    }
    if (L[8] != 0) A = linear(std::exp2(L[8]), 0, 0, std::exp2(-L[8])).after(A);
    return A;
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

template <class T>
Tensor<T> apply(const Tensor<T>& image, const Affine& a) {
    if (image.rank() != 3 && image.rank() != 4) throw ShapeError("apply expects [C,H,W] or [B,C,H,W], got " + to_string(image.shape()));
    const Affine inv = a.inverse();  // validates even the identity
    if (a.is_identity()) return image;
    const std::int64_t H = image.dim(-2), W = image.dim(-1);
    const std::int64_t planes = image.numel() / (H * W);
    const double cx = 0.5 * static_cast<double>(W - 1), cy = 0.5 * static_cast<double>(H - 1);

    // Source taps and weights are shared by every plane.
    struct Tap {
        std::int64_t i00, i01, i10, i11;
        double w00, w01, w10, w11;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(H * W));
    for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t c = 0; c < W; ++c) {
            const double x = static_cast<double>(c) - cx, y = static_cast<double>(r) - cy;
            const double sx = inv.m[0] * x + inv.m[1] * y + inv.m[2] + cx;
            const double sy = inv.m[3] * x + inv.m[4] * y + inv.m[5] + cy;
            const double fx0 = std::floor(sx), fy0 = std::floor(sy);
            const double fx = sx - fx0, fy = sy - fy0;
            const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
            const std::int64_t xa = reflect_index(x0, W), xb = reflect_index(x0 + 1, W);
            const std::int64_t ya = reflect_index(y0, H), yb = reflect_index(y0 + 1, H);
            taps[static_cast<std::size_t>(r * W + c)] = {ya * W + xa,           ya * W + xb,    yb * W + xa,
                                                         yb * W + xb,           (1 - fy) * (1 - fx), (1 - fy) * fx,
                                                         fy * (1 - fx),         fy * fx};
        }
    Tensor<T> out(image.shape());
    for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = image.ptr() + p * H * W;
        T* dst = out.ptr() + p * H * W;
        for (std::int64_t j = 0; j < H * W; ++j) {
            const Tap& t = taps[static_cast<std::size_t>(j)];
            // Zero-weight taps are skipped so integer-aligned warps copy values exactly.
            double v = 0;
            if (t.w00 != 0) v += t.w00 * src[t.i00];
            if (t.w01 != 0) v += t.w01 * src[t.i01];
            if (t.w10 != 0) v += t.w10 * src[t.i10];
            if (t.w11 != 0) v += t.w11 * src[t.i11];
            dst[j] = static_cast<T>(v);
        }
    }
    return out;
}

AugmentedBatch augment_batch(const Tensor<float>& images, const AugConfig& cfg, Rng& rng) {
    if (images.rank() != 4) throw ShapeError("augment_batch expects [B,C,H,W]");
    const std::int64_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (H != W) throw ShapeError("augmentation assumes square images");
    AugmentedBatch out{Tensor<float>(images.shape()), Tensor<double>(Shape{B, 9})};
    const std::int64_t per = C * H * W;
    for (std::int64_t b = 0; b < B; ++b) {
        const AugParams p = sample_augmentation(rng, cfg, static_cast<int>(H));
        Tensor<float> one(Shape{C, H, W}, std::vector<float>(images.ptr() + b * per, images.ptr() + (b + 1) * per));
        const Tensor<float> warped = apply(one, p.affine);
        std::copy(warped.ptr(), warped.ptr() + per, out.images.ptr() + b * per);
        for (int k = 0; k < 9; ++k) out.labels[b * 9 + k] = p.label[static_cast<std::size_t>(k)];
    }
    return out;
}

template Tensor<float> apply(const Tensor<float>&, const Affine&);
template Tensor<double> apply(const Tensor<double>&, const Affine&);

}  // namespace sdiff
