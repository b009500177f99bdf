#pragma once
// Image datasets held in memory, plus the bundled synthetic sets used by tests
// and desk runs (CI must not depend on downloads).

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sdiff/core/rng.hpp"
#include "sdiff/core/tensor.hpp"

namespace sdiff {

struct Batch {
    Tensor<float> x;          // [B, C, H, W] in [-1, 1]
    std::vector<int> labels;  // class per sample
    std::vector<int> dense;   // [B, H, W] per-pixel classes; empty if unavailable
};

class ImageDataset {
public:
    ImageDataset(Tensor<float> images, std::vector<int> labels, int num_classes, std::vector<int> dense = {},
                 int dense_classes = 0);

    std::int64_t size() const { return images_.dim(0); }
    std::int64_t channels() const { return images_.dim(1); }
    std::int64_t image_size() const { return images_.dim(2); }
    int num_classes() const { return num_classes_; }
    int dense_classes() const { return dense_classes_; }
    bool has_dense() const { return !dense_.empty(); }
    const std::vector<int>& dense() const { return dense_; }
    const Tensor<float>& images() const { return images_; }
    const std::vector<int>& labels() const { return labels_; }

    Batch gather(const std::vector<std::int64_t>& idx) const;
    /// Deterministic split: the first `n` samples and the rest.
    std::pair<ImageDataset, ImageDataset> split(std::int64_t n) const;

private:
    Tensor<float> images_;
    std::vector<int> labels_;
    std::vector<int> dense_;
    int num_classes_ = 0;
    int dense_classes_ = 0;
};

/// Two classes of colored shapes on a noisy background: class 0 discs,
/// class 1 squares, with class-biased hue. Dense labels: 0 background,
/// 1 + class on shape pixels. Sample i depends only on (seed, i).
ImageDataset make_shapes(std::int64_t n, std::uint64_t seed, int size = 16);

/// Shapes at half contrast plus a fixed coarse random template per class
/// (4x4 cells, N(0, amplitude^2)), so the class explains much of each image.
/// Used for tap-layer profiling with a planted class signal.
ImageDataset make_planted(std::int64_t n, std::uint64_t seed, int size = 16, double amplitude = 0.7);

/// Loads a dataset reference: "synthetic:shapes[:N]", "synthetic:planted[:N]" or a path to an archive
/// holding "images" [N,C,H,W] and "labels" [N] (optional "dense"). IoError if missing.
ImageDataset load_dataset(const std::string& ref, std::uint64_t seed);

/// Shuffled index order for an epoch; depends only on (seed, epoch).
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch);

/// Fixed 2-D Gaussian mixture for sampler tests.
struct GaussianMixture2D {
    std::vector<double> weights;
    std::vector<std::array<double, 2>> means;
    std::vector<std::array<double, 3>> covs;  // (xx, xy, yy)

    static GaussianMixture2D standard();
    Tensor<double> sample(std::int64_t n, Rng& rng) const;  // [n, 2]
    std::array<double, 2> mean() const;
    std::array<double, 3> covariance() const;
};

}  // namespace sdiff
