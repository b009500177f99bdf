#pragma once
// Non-leaky geometric augmentation. Every draw yields a warped image plus a
// 9-slot label describing the transform; the label is fed to the network so
// generation at label 0 stays augmentation-free.
//
// Label slots:
//   0 flip_x        {0, 1}
//   1 rot90 bit a   {0, 1}   quadrant k in 0..3 encoded as (k in {1,2}, k in {2,3})
//   2 rot90 bit b   {0, 1}
//   3 translate_x   pixels / width
//   4 translate_y   pixels / height
//   5 log2 scale
//   6 sin(theta)    fractional rotation
//   7 cos(theta)-1
//   8 log2 anisotropy (x stretched by 2^a, y by 2^-a)

#include <array>
#include <cstdint>

#include "sdiff/nn/layers.hpp"

namespace sdiff {

/// 2x3 affine on centered pixel coordinates: p' = M p + b.
struct Affine {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};  // row-major [a b tx; c d ty]

    static Affine identity() { return {}; }
    bool is_identity() const { return m == Affine{}.m; }
    double det() const { return m[0] * m[4] - m[1] * m[3]; }
    /// this after other: p -> this(other(p)).
    Affine after(const Affine& other) const;
    Affine inverse() const;
};

struct AugConfig {
    double p = 0.12;  // per-transform application probability (each can be overridden)
    double p_flip = -1, p_rot90 = -1, p_translate = -1, p_scale = -1, p_rotate = -1, p_aniso = -1;
    double translate_max = 0.125;  // fraction of image size
    bool integer_translate = true;
    double scale_std = 0.2;  // log2
    double rotate_max = 1.0;  // fraction of pi
    double aniso_std = 0.2;  // log2

    double prob(double specific) const { return specific >= 0 ? specific : p; }
    void validate() const;
    static AugConfig none();
};

inline constexpr int kNumTransforms = 6;

struct AugParams {
    std::array<double, 9> label{};
    Affine affine;
    std::array<bool, kNumTransforms> applied{};  // flip, rot90, translate, scale, rotate, aniso
};

/// Draws each transform independently, composes in the order flip, rot90,
/// translate, scale, rotate, aniso. `size` is the image side length.
AugParams sample_augmentation(Rng& rng, const AugConfig& cfg, int size);

/// Affine reconstructed from a label alone (labels are a lossless parameterization).
Affine affine_from_label(const std::array<double, 9>& label, int size);

/// Warps one [C, H, W] image (or a [B, C, H, W] batch with one affine per call)
/// by bilinear resampling with reflection padding. The identity is returned
/// bit-exactly. Degenerate affines raise TransformError.
template <class T>
Tensor<T> apply(const Tensor<T>& image, const Affine& a);
template <class T>
Tensor<T> apply(const Tensor<T>& image, const AugParams& p) {
    return apply(image, p.affine);
}

/// Reflect an index into [0, n): mirror without repeating the edge pixel.
std::int64_t reflect_index(std::int64_t i, std::int64_t n);

struct AugmentedBatch {
    Tensor<float> images;  // [B, C, H, W]
    Tensor<double> labels;  // [B, 9]
};

/// Independent draw per sample.
AugmentedBatch augment_batch(const Tensor<float>& images, const AugConfig& cfg, Rng& rng);

/// Embedding path: e + proj(label). Zero label with zero-initialized proj leaves e unchanged.
template <class T>
Var<T> condition_with_label(const Var<T>& e, const Tensor<double>& labels, const nn::Linear<T>& proj) {
    if (labels.empty()) return e;
    return ag::add(e, proj(ag::constant(labels.template cast<T>())));
}

/// Token path: the projected label as one token [B, 1, D].
template <class T>
Var<T> label_token(const Tensor<double>& labels, const nn::Linear<T>& proj, std::int64_t batch) {
    const std::int64_t D = proj.out;
    Tensor<T> l = labels.empty() ? Tensor<T>(Shape{batch, 9}) : labels.template cast<T>();
    return ag::reshape(proj(ag::constant(std::move(l))), Shape{batch, 1, D});
}

}  // namespace sdiff
