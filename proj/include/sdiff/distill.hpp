#pragma once
// Contrastive self-distillation against an EMA teacher: the online model's
// self-conditioning feature (pooled or summary token) at the training time is
// aligned with the teacher's feature of another view at a fixed probing time.

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sdiff/augment.hpp"
#include "sdiff/data/dataset.hpp"
#include "sdiff/formulations.hpp"

namespace sdiff {

enum class TargetSource { pooled, cls };
std::string to_string(TargetSource s);
TargetSource parse_target_source(const std::string& s);

struct ContrastiveConfig {
    double gamma = 0.01;
    double temperature = 0.2;
    double ema_decay = 0.9999;
    double target_time = -1;  // t* in the formulation's time units; < 0 = probing default
    TargetSource target_source = TargetSource::pooled;
    int proj_dim = 0;  // embedding width; 0 = feature width
    int freq_dim = 128;

    void validate(const Formulation& f) const;
    double resolved_target_time(const Formulation& f, Family family = Family::unet_ddpm) const;
};

/// Probing timestep: pixel models DDPM t=11, EDM sigma=0.06, RF t=0.06; DiT under RF t=0.25.
double default_probe_time(const Formulation& f, Family family = Family::unet_ddpm);

/// teacher <- decay * teacher + (1 - decay) * student, matched by name.
template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double decay);

/// MLP(feature + TimeEmb(t)): three linear layers, hidden 4x input width,
/// batch-standardized hidden layers. `t` is network time.
template <class T>
class ProjectionHead {
public:
    ProjectionHead(std::int64_t in, std::int64_t out, int freq_dim, std::uint64_t seed);
    Var<T> operator()(const Var<T>& feature, std::span<const double> t) const;
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    std::int64_t in_width() const { return in_; }
    std::int64_t out_width() const { return out_; }

private:
    std::int64_t in_, out_;
    ParamStore<T> store_;
    nn::TimestepEmbedder<T> temb_;
    nn::Linear<T> fc1_, fc2_, fc3_;
};

/// Online-only two-layer MLP, hidden 4x width, batch-standardized hidden layer.
template <class T>
class PredictionHead {
public:
    PredictionHead(std::int64_t dim, std::uint64_t seed);
    Var<T> operator()(const Var<T>& z) const;
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

private:
    ParamStore<T> store_;
    nn::Linear<T> fc1_, fc2_;
};

/// Mean over rows of -log softmax(sim(q_i, k_.) / tau)_i with rows L2-normalized.
template <class T>
Var<T> info_nce(const Var<T>& q, const Var<T>& k, double temperature);

/// Online heads, and the teacher's EMA copy of the projection head.
template <class T>
struct ContrastiveHeads {
    std::unique_ptr<ProjectionHead<T>> proj, ema_proj;
    std::unique_ptr<PredictionHead<T>> pred;

    ContrastiveHeads(std::int64_t feature_width, const ContrastiveConfig& cfg, std::uint64_t seed);
    void ema_step(double decay);
    /// Parameters the optimizer updates (projection and prediction heads).
    std::vector<Param<T>*> trainable();
};

/// Width of the distillation feature for a model (tap width or hidden width).
template <class T>
std::int64_t distill_feature_width(const Backbone<T>& net, TargetSource src);
/// The feature the objective aligns: pooled tap or summary token.
template <class T>
Var<T> distill_feature(const ForwardOutput<T>& out, int tap, TargetSource src);

/// One augmented, noised view of a batch. Every random draw comes from
/// substreams of (step_seed, tag), so any step can be replayed in isolation.
template <class T>
struct View {
    Tensor<T> x0;
    Tensor<double> aug;  // [B, 9]
    std::vector<double> t;
    Tensor<T> eps;
};
template <class T>
View<T> make_view(const Batch& batch, const AugConfig& aug, const Formulation& f, std::uint64_t step_seed,
                  std::string_view tag);

/// Class labels fed to the model: real labels for class-conditional
/// backbones, empty otherwise.
template <class T>
std::vector<int> model_labels(const Backbone<T>& net, const Batch& batch);

/// Pure diffusion step on view "view1". `taps` are forwarded to the model.
template <class T>
DiffusionTerms<T> diffusion_step(const Denoiser<T>& model, const Batch& batch, const AugConfig& aug,
                                 std::uint64_t step_seed, const std::vector<int>& taps = {},
                                 const UncertaintyWeight<T>* u = nullptr);

template <class T>
struct ContrastiveTerms {
    Var<T> total, diff, moco;
    double teacher_time = 0;       // t* actually fed to the teacher
    std::vector<double> online_t;  // sampled times for view 1
};

/// L_total = L_diff(view1) + gamma (InfoNCE(q1, k2) + InfoNCE(q2, k1)).
/// gamma = 0 reduces exactly to diffusion_step: no extra forward passes.
template <class T>
ContrastiveTerms<T> contrastive_step(const Denoiser<T>& model, const Denoiser<T>& teacher, ContrastiveHeads<T>& heads,
                                     const Batch& batch, const ContrastiveConfig& cfg, const AugConfig& aug,
                                     std::uint64_t step_seed, const UncertaintyWeight<T>* u = nullptr);

}  // namespace sdiff
