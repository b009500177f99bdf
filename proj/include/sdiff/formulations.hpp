#pragma once
// Diffusion formulations (DDPM, EDM, rectified flow): forward marginals,
// training targets, prediction conversion, losses, the preconditioned
// denoiser wrapper and deterministic ODE samplers.
//
// Time conventions: DDPM uses integer steps 0..T (0 = clean data), EDM uses
// the noise level sigma itself, RF uses t in [0, 1].

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdiff/backbones.hpp"

namespace sdiff {

enum class FormKind { ddpm, edm, rf };
enum class PredKind { epsilon, x0, velocity };
enum class TimeSampler { uniform, lognorm };
enum class LossWeighting { none, uncertainty };

std::string to_string(FormKind k);
std::string to_string(PredKind k);
std::string to_string(TimeSampler k);
std::string to_string(LossWeighting k);
FormKind parse_form_kind(const std::string& s);
PredKind parse_pred_kind(const std::string& s);
TimeSampler parse_time_sampler(const std::string& s);
LossWeighting parse_loss_weighting(const std::string& s);

struct Formulation {
    FormKind kind = FormKind::rf;
    int T = 1000;
    double beta_min = 1e-4, beta_max = 0.02;
    double sigma_min = 0.002, sigma_max = 80.0, sigma_data = 0.5;
    double p_mean = -1.2, p_std = 1.2;
    TimeSampler t_sampler = TimeSampler::uniform;
    PredKind prediction = PredKind::velocity;
    LossWeighting weighting = LossWeighting::none;

    static Formulation ddpm();
    static Formulation edm();
    static Formulation rf(TimeSampler s = TimeSampler::uniform);

    /// Throws ConfigError on inconsistent parameters.
    void validate() const;
    /// Time of pure noise (start of sampling) and of clean data.
    double t_noise() const;
    double t_clean() const;
};

/// (alpha_t, sigma_t) of the forward marginal x_t = alpha x0 + sigma eps.
std::pair<double, double> alpha_sigma(const Formulation& f, double t);
/// Cumulative DDPM alpha table, index 0..T (alpha_0 = 1).
const std::vector<double>& ddpm_alphas(const Formulation& f);

double sample_training_time(const Formulation& f, Rng& rng);
/// Time value for a given standard-normal draw z (EDM and RF lognorm only).
double training_time_from_normal(const Formulation& f, double z);

/// Scalar fed to the network's time embedding.
double network_time(const Formulation& f, double t);
/// log(sigma / alpha), clipped to [-20, 20]: input of the uncertainty weighting.
double log_noise_level(const Formulation& f, double t);

/// Per-sample t over the leading dimension.
template <class T>
Tensor<T> perturb(const Formulation& f, const Tensor<T>& x0, std::span<const double> t, const Tensor<T>& eps);
template <class T>
Tensor<T> training_target(const Formulation& f, const Tensor<T>& x0, const Tensor<T>& eps);

template <class T>
struct Representations {
    Tensor<T> x0, eps, v;  // v = eps - x0
};

/// Recovers all three representations from a prediction of `kind` at x_t.
template <class T>
Representations<T> convert_prediction(const Formulation& f, PredKind kind, const Tensor<T>& pred, const Tensor<T>& x_t,
                                      std::span<const double> t);

/// Learned scalar u(noise level): fixed Fourier features -> Linear -> SiLU -> Linear (zero-init).
template <class T>
struct UncertaintyWeight {
    Tensor<T> freqs, phases;
    nn::Linear<T> fc1, fc2;

    UncertaintyWeight() = default;
    UncertaintyWeight(const Scope<T>& s, int features = 64, int hidden = 64);
    bool defined() const { return fc1.w.defined(); }
    /// u per sample [B].
    Var<T> operator()(std::span<const double> log_noise) const;
};

/// Scalar loss. none: mse. uncertainty: mean_b(mse_b / exp(u_b) + u_b).
/// `per_sample_weight` (optional) multiplies each sample's mse first.
template <class T>
Var<T> diffusion_loss(const Var<T>& pred, const Var<T>& target, LossWeighting w, std::span<const double> log_noise,
                      const UncertaintyWeight<T>* u = nullptr, std::span<const double> per_sample_weight = {});

/// Backbone plus formulation: maps (x_t, t) to a prediction of f.prediction.
/// EDM preconditioning (c_skip, c_out, c_in, c_noise) lives here.
template <class T>
class Denoiser {
public:
    Denoiser(Backbone<T>& net, Formulation f) : net_(&net), f_(std::move(f)) { f_.validate(); }

    /// `c.t` is ignored and rebuilt from `t` in network time.
    ForwardOutput<T> predict(const Var<T>& x_t, std::span<const double> t, Conditioning c,
                             const ForwardOptions& o = {}) const;
    Backbone<T>& backbone() const { return *net_; }
    const Formulation& formulation() const { return f_; }

private:
    Backbone<T>* net_;
    Formulation f_;
};

template <class T>
struct DiffusionTerms {
    Var<T> loss;
    ForwardOutput<T> out;
};

/// One diffusion objective evaluation: perturb, predict, compare with the
/// formulation's target. EDM compares x0 with the standard lambda(sigma) weight.
template <class T>
DiffusionTerms<T> diffusion_objective(const Denoiser<T>& model, const Tensor<T>& x0, std::span<const double> t,
                                      const Tensor<T>& eps, const Conditioning& c, const ForwardOptions& o = {},
                                      const UncertaintyWeight<T>* u = nullptr);

enum class Solver { euler_ddim, heun, euler_rf, rk45 };
std::string to_string(Solver s);
Solver parse_solver(const std::string& s);

struct SamplerConfig {
    Solver solver = Solver::euler_rf;
    int steps = 50;
    double rho = 7.0;
    double cfg_scale = 1.0;
    std::pair<double, double> cfg_interval{0.0, 1.0};  // in the formulation's time units
    double timestep_shift = 1.0;
    double rtol = 1e-4, atol = 1e-4;  // rk45
    int max_nfe = 10000;              // rk45 safety cap
};

/// Throws ConfigError for unsupported solver/formulation pairs or bad ranges.
void validate_sampler(const Formulation& f, const SamplerConfig& cfg);

/// s t / (1 + (s - 1) t).
double shift_time(double t, double s);
/// pred_uncond + scale (pred_cond - pred_uncond) inside the closed interval, pred_cond outside.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, double scale, double t,
                      std::pair<double, double> interval);

/// Discretization from noise to data, including the final clean time.
std::vector<double> time_grid(const Formulation& f, const SamplerConfig& cfg);

/// Prediction callback in f.prediction units. `uncond` asks for the null-condition branch.
using Predictor = std::function<Tensor<double>(const Tensor<double>& x_t, double t, bool uncond)>;

struct SampleResult {
    Tensor<double> x;
    int nfe = 0;
};

/// Integrates the probability-flow ODE from x_init (pure-noise sample at t_noise).
SampleResult solve(const Formulation& f, const SamplerConfig& cfg, const Predictor& pred, Tensor<double> x_init);

/// Draws n samples from a trained model (inference path: zero augmentation label).
template <class T>
SampleResult sample(const Denoiser<T>& model, const SamplerConfig& cfg, std::int64_t n, Rng& rng,
                    const std::vector<int>& labels = {});

}  // namespace sdiff
