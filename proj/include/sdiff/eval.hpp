#pragma once
// Representation and sample-quality diagnostics on frozen models: feature
// extraction at a fixed noise level, linear and dense probes, linear CKA and
// the Frechet distance between Gaussians.

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdiff/data/dataset.hpp"
#include "sdiff/distill.hpp"

namespace sdiff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Reduce { pooled, tokens, cls };
std::string to_string(Reduce r);
Reduce parse_reduce(const std::string& s);

/// Default probing time for a model (DiT under RF: 0.25; pixel models per formulation).
double default_extraction_time(const Formulation& f, Family family);

struct ExtractOptions {
    double t = -1;  // < 0: default_extraction_time
    std::vector<int> layers;
    Reduce reduce = Reduce::pooled;
    std::uint64_t noise_seed = 1234;
    int batch = 64;
};

/// One tapped layer. pooled/cls: one row per image. tokens: grid*grid rows
/// per image (row-major patch order), image-major.
struct LayerFeatures {
    int layer = 0;
    Matrix x;
    std::int64_t grid = 0;  // token grid side for Reduce::tokens
};

/// The noise for image i is drawn from substream (noise_seed, "extract", i), so
/// rows do not depend on batching or on the dataset order around them.
std::vector<LayerFeatures> extract_features(const Denoiser<float>& model, const ImageDataset& data,
                                            const ExtractOptions& opt);

struct ProbeConfig {
    int epochs = 15;
    double lr = 4e-3;
    int batch = 256;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    nlohmann::json to_json() const;
};

struct ProbeReport {
    int layer = 0;
    double t = 0;
    double train_acc = 0, val_acc = 0;  // val_acc: best over epochs (mIoU for dense probes)
    int best_epoch = 0;
    std::string metric = "accuracy";
    ProbeConfig config;
    std::string checkpoint;
    nlohmann::json to_json() const;
};

/// Parameter-free standardization with training-set statistics, then a
/// linear softmax classifier trained with Adam and a per-step cosine schedule.
ProbeReport linear_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& val_x,
                         const std::vector<int>& val_y, const ProbeConfig& cfg);

struct SweepResult {
    std::vector<double> times;
    std::vector<int> layers;
    std::vector<std::vector<ProbeReport>> grid;  // [time][layer]
    std::size_t best_t = 0, best_layer = 0;
    const ProbeReport& best() const { return grid[best_t][best_layer]; }
    nlohmann::json to_json() const;
};

SweepResult sweep(const Denoiser<float>& model, const ImageDataset& train, const ImageDataset& val,
                  const std::vector<int>& layers, const std::vector<double>& times, const ProbeConfig& cfg,
                  std::uint64_t noise_seed, const std::string& checkpoint = "");
/// Exhaustive argmax over a filled grid; ties keep the first cell in (time, layer) order.
void locate_best(SweepResult& s);

enum class Upsample { nearest, bilinear };

struct DenseProbeData {
    Matrix tokens;           // [N * grid * grid, D], layers already concatenated
    std::vector<int> dense;  // [N * H * W] labels
    std::int64_t grid = 0, height = 0, width = 0;
    int num_classes = 0;
};

/// Concatenates per-layer token features along the channel axis.
DenseProbeData make_dense_data(const std::vector<LayerFeatures>& layers, const std::vector<int>& dense,
                               std::int64_t height, std::int64_t width, int num_classes);

/// Parameter-free per-token LayerNorm, linear head, upsampling of logits to
/// label resolution, pixel cross-entropy. Reports mIoU on `val`.
ProbeReport dense_probe(const DenseProbeData& train, const DenseProbeData& val, const ProbeConfig& cfg,
                        Upsample up = Upsample::bilinear);

/// Mean IoU over classes present in the ground truth.
double mean_iou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes);

/// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F), columns centered.
double linear_cka(const Matrix& x, const Matrix& y);

struct CKAMatrix {
    Matrix m;
    std::vector<int> layers_a, layers_b;
    double t = 0;
    std::string model_a, model_b;  // model_b empty: intra-model
    nlohmann::json to_json() const;
};

/// Pairwise CKA between two lists of feature matrices; when `b` is null the
/// map is intra-model and filled symmetrically.
CKAMatrix cka_map(const std::vector<LayerFeatures>& a, const std::vector<LayerFeatures>* b = nullptr);

/// ||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).
double frechet_distance(const Vector& mu1, const Matrix& c1, const Vector& mu2, const Matrix& c2);

struct GaussianStats {
    Vector mu;
    Matrix cov;  // unbiased
};
GaussianStats gaussian_stats(const Matrix& rows);

/// Pluggable image embedder for sample-quality statistics.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    virtual Matrix embed(const Tensor<float>& images) const = 0;  // [N, C, H, W] -> [N, D]
};

/// Flattened pixels.
class PixelEmbedder : public Embedder {
public:
    std::string name() const override { return "pixels"; }
    Matrix embed(const Tensor<float>& images) const override;
};

/// Fixed Gaussian random projection of flattened pixels followed by tanh.
class RandomFeatureEmbedder : public Embedder {
public:
    RandomFeatureEmbedder(std::int64_t in_dim, std::int64_t out_dim, std::uint64_t seed);
    std::string name() const override;
    Matrix embed(const Tensor<float>& images) const override;

private:
    Matrix w_;
    std::uint64_t seed_;
};

std::unique_ptr<Embedder> make_embedder(const std::string& name, std::int64_t in_dim);

}  // namespace sdiff
