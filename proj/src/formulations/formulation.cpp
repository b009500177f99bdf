#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "sdiff/formulations.hpp"

namespace sdiff {

std::string to_string(FormKind k) {
    switch (k) {
        case FormKind::ddpm: return "ddpm";
        case FormKind::edm: return "edm";
        case FormKind::rf: return "rf";
    }
    return "?";
}
std::string to_string(PredKind k) {
    switch (k) {
        case PredKind::epsilon: return "epsilon";
        case PredKind::x0: return "x0";
        case PredKind::velocity: return "velocity";
    }
    return "?";
}
std::string to_string(TimeSampler k) { return k == TimeSampler::uniform ? "uniform" : "lognorm"; }
std::string to_string(LossWeighting k) { return k == LossWeighting::none ? "none" : "uncertainty"; }

FormKind parse_form_kind(const std::string& s) {
    if (s == "ddpm") return FormKind::ddpm;
    if (s == "edm") return FormKind::edm;
    if (s == "rf") return FormKind::rf;
    throw ConfigError("unknown formulation '" + s + "'", "formulation.kind");
}
PredKind parse_pred_kind(const std::string& s) {
    if (s == "epsilon" || s == "eps") return PredKind::epsilon;
    if (s == "x0") return PredKind::x0;
    if (s == "velocity" || s == "v") return PredKind::velocity;
    throw ConfigError("unknown prediction kind '" + s + "'", "formulation.prediction");
}
TimeSampler parse_time_sampler(const std::string& s) {
    if (s == "uniform") return TimeSampler::uniform;
    if (s == "lognorm") return TimeSampler::lognorm;
    throw ConfigError("unknown time sampler '" + s + "'", "formulation.t_sampler");
}
LossWeighting parse_loss_weighting(const std::string& s) {
    if (s == "none") return LossWeighting::none;
    if (s == "uncertainty") return LossWeighting::uncertainty;
    throw ConfigError("unknown loss weighting '" + s + "'", "formulation.weighting");
}

Formulation Formulation::ddpm() {
    Formulation f;
    f.kind = FormKind::ddpm;
    f.prediction = PredKind::epsilon;
    return f;
}

Formulation Formulation::edm() {
    Formulation f;
    f.kind = FormKind::edm;
    f.prediction = PredKind::x0;
    return f;
}

Formulation Formulation::rf(TimeSampler s) {
    Formulation f;
    f.kind = FormKind::rf;
    f.prediction = PredKind::velocity;
    f.t_sampler = s;
    return f;
}

void Formulation::validate() const {
    switch (kind) {
        case FormKind::ddpm:
            if (T < 1) throw ConfigError("T must be positive", "formulation.T");
            if (!(beta_min > 0 && beta_max < 1 && beta_min <= beta_max))
                throw ConfigError("beta range must satisfy 0 < min <= max < 1", "formulation.beta_range");
            if (prediction != PredKind::epsilon)
                throw ConfigError("DDPM trains an epsilon prediction", "formulation.prediction");
            break;
        case FormKind::edm:
            if (!(sigma_min > 0 && sigma_min < sigma_max))
                throw ConfigError("sigma range must satisfy 0 < min < max", "formulation.sigma_range");
            if (!(sigma_data > 0)) throw ConfigError("sigma_data must be positive", "formulation.sigma_data");
            if (!(p_std > 0)) throw ConfigError("p_std must be positive", "formulation.p_std");
            if (prediction != PredKind::x0) throw ConfigError("EDM trains an x0 prediction", "formulation.prediction");
            break;
        case FormKind::rf:
            if (prediction != PredKind::velocity)
                throw ConfigError("RF trains a velocity prediction", "formulation.prediction");
            break;
    }
}

double Formulation::t_noise() const {
    switch (kind) {
        case FormKind::ddpm: return T;
        case FormKind::edm: return sigma_max;
        case FormKind::rf: return 1.0;
    }
    return 0;
}

double Formulation::t_clean() const { return 0.0; }

const std::vector<double>& ddpm_alphas(const Formulation& f) {
    static std::mutex mu;
    static std::map<std::tuple<int, double, double>, std::vector<double>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& a = cache[{f.T, f.beta_min, f.beta_max}];
    if (a.empty()) {
        a.resize(static_cast<std::size_t>(f.T) + 1);
        a[0] = 1.0;
        double prod = 1.0;
        for (int i = 1; i <= f.T; ++i) {
            const double beta =
                f.T == 1 ? f.beta_min : f.beta_min + (f.beta_max - f.beta_min) * (i - 1) / static_cast<double>(f.T - 1);
            prod *= 1.0 - beta;
            a[static_cast<std::size_t>(i)] = std::sqrt(prod);
        }
    }
    return a;
}

std::pair<double, double> alpha_sigma(const Formulation& f, double t) {
    switch (f.kind) {
        case FormKind::ddpm: {
            if (!(t >= 0 && t <= f.T) || t != std::floor(t))
                throw DomainError("DDPM time must be an integer in [0, " + std::to_string(f.T) + "], got " +
                                  std::to_string(t));
            const double a = ddpm_alphas(f)[static_cast<std::size_t>(t)];
            return {a, std::sqrt(std::max(0.0, 1.0 - a * a))};
        }
        case FormKind::edm:
            if (t == 0.0) return {1.0, 0.0};
            if (!(t >= f.sigma_min && t <= f.sigma_max))
                throw DomainError("EDM sigma outside [sigma_min, sigma_max]: " + std::to_string(t));
            return {1.0, t};
        case FormKind::rf:
            if (!(t >= 0.0 && t <= 1.0)) throw DomainError("RF time outside [0, 1]: " + std::to_string(t));
            return {1.0 - t, t};
    }
    throw DomainError("unknown formulation");
}

double training_time_from_normal(const Formulation& f, double z) {
    switch (f.kind) {
        case FormKind::edm:
            // Clamped so training noise stays inside the declared sigma range.
            return std::clamp(std::exp(f.p_mean + f.p_std * z), f.sigma_min, f.sigma_max);
        case FormKind::rf:
            if (f.t_sampler == TimeSampler::lognorm) return 1.0 / (1.0 + std::exp(-z));
            break;
        case FormKind::ddpm: break;
    }
    throw ConfigError("time is not drawn from a normal variate for this formulation");
}

double sample_training_time(const Formulation& f, Rng& rng) {
    switch (f.kind) {
        case FormKind::ddpm: return static_cast<double>(rng.integer(1, f.T));
        case FormKind::edm: return training_time_from_normal(f, rng.normal());
        case FormKind::rf:
            if (f.t_sampler == TimeSampler::lognorm) return training_time_from_normal(f, rng.normal());
            return rng.uniform();
    }
    return 0;
}

double network_time(const Formulation& f, double t) {
    switch (f.kind) {
        case FormKind::ddpm: return t;
        case FormKind::edm: return std::log(t) / 4.0;
        case FormKind::rf: return 1000.0 * t;
    }
    return t;
}

double log_noise_level(const Formulation& f, double t) {
    const auto [a, s] = alpha_sigma(f, t);
    if (s <= 0) return -20.0;
    if (a <= 0) return 20.0;
    return std::clamp(std::log(s / a), -20.0, 20.0);
}

namespace {

template <class T>
std::int64_t per_sample(const Tensor<T>& x, std::span<const double> t) {
    if (x.rank() < 1 || static_cast<std::size_t>(x.dim(0)) != t.size())
        throw ShapeError("time count does not match the leading dimension");
    return x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
}

}  // namespace

template <class T>
Tensor<T> perturb(const Formulation& f, const Tensor<T>& x0, std::span<const double> t, const Tensor<T>& eps) {
    if (!x0.same_shape(eps)) throw ShapeError("perturb: x0 " + to_string(x0.shape()) + " vs eps " + to_string(eps.shape()));
    const std::int64_t m = per_sample(x0, t);
    Tensor<T> out(x0.shape());
    for (std::size_t b = 0; b < t.size(); ++b) {
        const auto [a, s] = alpha_sigma(f, t[b]);
        const auto off = static_cast<std::int64_t>(b) * m;
        for (std::int64_t i = off; i < off + m; ++i)
            out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + s * static_cast<double>(eps[i]));
    }
    return out;
}

template <class T>
Tensor<T> training_target(const Formulation& f, const Tensor<T>& x0, const Tensor<T>& eps) {
    if (!x0.same_shape(eps)) throw ShapeError("training_target: shape mismatch");
    switch (f.prediction) {
        case PredKind::epsilon: return eps;
        case PredKind::x0: return x0;
        case PredKind::velocity: {
            Tensor<T> v(x0.shape());
            for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = eps[i] - x0[i];
            return v;
        }
    }
    return eps;
}

template <class T>
Representations<T> convert_prediction(const Formulation& f, PredKind kind, const Tensor<T>& pred, const Tensor<T>& x_t,
                                      std::span<const double> t) {
    if (!pred.same_shape(x_t)) throw ShapeError("convert_prediction: shape mismatch");
    const std::int64_t m = per_sample(pred, t);
    Representations<T> r{Tensor<T>(pred.shape()), Tensor<T>(pred.shape()), Tensor<T>(pred.shape())};
    for (std::size_t b = 0; b < t.size(); ++b) {
        const auto [a, s] = alpha_sigma(f, t[b]);
        if (kind == PredKind::epsilon && a == 0.0)
            throw SingularityError("x0 is unrecoverable from an epsilon prediction at alpha = 0");
        if (kind == PredKind::x0 && s == 0.0)
            throw SingularityError("epsilon is unrecoverable from an x0 prediction at sigma = 0");
        const auto off = static_cast<std::int64_t>(b) * m;
        for (std::int64_t i = off; i < off + m; ++i) {
            const double p = pred[i], x = x_t[i];
            double x0, e;
            switch (kind) {
                case PredKind::epsilon: e = p, x0 = (x - s * p) / a; break;
                case PredKind::x0: x0 = p, e = (x - a * p) / s; break;
                case PredKind::velocity:
                    // x = a x0 + s (x0 + v)
                    x0 = (x - s * p) / (a + s);
                    e = x0 + p;
                    break;
            }
            r.x0[i] = static_cast<T>(x0);
            r.eps[i] = static_cast<T>(e);
            r.v[i] = static_cast<T>(e - x0);
        }
    }
    return r;
}

template <class T>
UncertaintyWeight<T>::UncertaintyWeight(const Scope<T>& s, int features, int hidden) {
    Rng rng = Rng::substream(s.store()->seed(), "uncertainty_fourier");
    freqs = Tensor<T>(Shape{features});
    phases = Tensor<T>(Shape{features});
    for (int i = 0; i < features; ++i) {
        freqs[i] = static_cast<T>(rng.normal());
        phases[i] = static_cast<T>(rng.uniform());
    }
    fc1 = nn::Linear<T>(s.sub("fc1"), features, hidden);
    fc2 = nn::Linear<T>(s.sub("fc2"), hidden, 1, true, Init::Zeros());
}

template <class T>
Var<T> UncertaintyWeight<T>::operator()(std::span<const double> log_noise) const {
    const auto B = static_cast<std::int64_t>(log_noise.size());
    const std::int64_t F = freqs.numel();
    Tensor<T> feat(Shape{B, F});
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < F; ++i)
            feat[b * F + i] = static_cast<T>(
                std::sqrt(2.0) * std::cos(two_pi * (static_cast<double>(freqs[i]) * log_noise[static_cast<std::size_t>(b)] / 4.0 +
                                                    static_cast<double>(phases[i]))));
    return ag::reshape(fc2(ag::silu(fc1(ag::constant(std::move(feat))))), Shape{B});
}

template <class T>
Var<T> diffusion_loss(const Var<T>& pred, const Var<T>& target, LossWeighting w, std::span<const double> log_noise,
                      const UncertaintyWeight<T>* u, std::span<const double> per_sample_weight) {
    if (pred.shape() != target.shape()) throw ShapeError("diffusion_loss: shape mismatch");
    if (w == LossWeighting::none && per_sample_weight.empty()) return ag::mse(pred, target);
    Var<T> per = ag::mse_per_sample(pred, target);
    const std::int64_t B = per.numel();
    if (!per_sample_weight.empty()) {
        if (static_cast<std::int64_t>(per_sample_weight.size()) != B) throw ShapeError("loss weight count mismatch");
        Tensor<T> lw(Shape{B});
        for (std::int64_t b = 0; b < B; ++b) lw[b] = static_cast<T>(per_sample_weight[static_cast<std::size_t>(b)]);
        per = ag::mul(per, ag::constant(std::move(lw)));
    }
    if (w == LossWeighting::none) return ag::mean(per);
    if (!u || !u->defined()) throw ConfigError("uncertainty weighting needs its weighting network", "formulation.weighting");
    if (static_cast<std::int64_t>(log_noise.size()) != B) throw ShapeError("noise level count mismatch");
    const Var<T> uu = (*u)(log_noise);
    return ag::mean(ag::add(ag::div(per, ag::exp(uu)), uu));
}

template <class T>
ForwardOutput<T> Denoiser<T>::predict(const Var<T>& x_t, std::span<const double> t, Conditioning c,
                                      const ForwardOptions& o) const {
    const std::int64_t B = x_t.dim(0);
    if (static_cast<std::int64_t>(t.size()) != B) throw ShapeError("time count does not match batch");
    c.t.resize(t.size());
    for (std::size_t b = 0; b < t.size(); ++b) c.t[b] = network_time(f_, t[b]);
    if (f_.kind != FormKind::edm) return net_->forward(x_t, c, o);

    Shape bs(static_cast<std::size_t>(x_t.shape().size()), 1);
    bs[0] = B;
    Tensor<T> c_in(bs), c_skip(bs), c_out(bs);
    const double sd = f_.sigma_data;
    for (std::int64_t b = 0; b < B; ++b) {
        const double s = t[static_cast<std::size_t>(b)];
        const double n = s * s + sd * sd;
        c_in[b] = static_cast<T>(1.0 / std::sqrt(n));
        c_skip[b] = static_cast<T>(sd * sd / n);
        c_out[b] = static_cast<T>(s * sd / std::sqrt(n));
    }
    ForwardOutput<T> out = net_->forward(ag::mul(x_t, ag::constant(std::move(c_in))), c, o);
    out.pred = ag::add(ag::mul(x_t, ag::constant(std::move(c_skip))), ag::mul(out.pred, ag::constant(std::move(c_out))));
    return out;
}

template <class T>
DiffusionTerms<T> diffusion_objective(const Denoiser<T>& model, const Tensor<T>& x0, std::span<const double> t,
                                      const Tensor<T>& eps, const Conditioning& c, const ForwardOptions& o,
                                      const UncertaintyWeight<T>* u) {
    const Formulation& f = model.formulation();
    const Var<T> x_t = ag::constant(perturb(f, x0, t, eps));
    DiffusionTerms<T> r;
    r.out = model.predict(x_t, t, c, o);
    const Var<T> target = ag::constant(training_target(f, x0, eps));
    std::vector<double> lognoise(t.size()), lambda;
    for (std::size_t b = 0; b < t.size(); ++b) lognoise[b] = log_noise_level(f, t[b]);
    if (f.kind == FormKind::edm) {
        const double sd = f.sigma_data;
        for (double s : t) lambda.push_back((s * s + sd * sd) / (s * sd * s * sd));
    }
    r.loss = diffusion_loss(r.out.pred, target, f.weighting, lognoise, u, lambda);
    return r;
}

#define SDIFF_INSTANTIATE(T)                                                                                       \
    template Tensor<T> perturb(const Formulation&, const Tensor<T>&, std::span<const double>, const Tensor<T>&);  \
    template Tensor<T> training_target(const Formulation&, const Tensor<T>&, const Tensor<T>&);                     \
    template Representations<T> convert_prediction(const Formulation&, PredKind, const Tensor<T>&, const Tensor<T>&, \
                                                   std::span<const double>);                                        \
    template struct UncertaintyWeight<T>;                                                                          \
    template Var<T> diffusion_loss(const Var<T>&, const Var<T>&, LossWeighting, std::span<const double>,           \
                                   const UncertaintyWeight<T>*, std::span<const double>);                          \
    template class Denoiser<T>;                                                                                    \
    template DiffusionTerms<T> diffusion_objective(const Denoiser<T>&, const Tensor<T>&, std::span<const double>,  \
                                                   const Tensor<T>&, const Conditioning&, const ForwardOptions&,   \
                                                   const UncertaintyWeight<T>*);

SDIFF_INSTANTIATE(float)
SDIFF_INSTANTIATE(double)

#undef SDIFF_INSTANTIATE

}  // namespace sdiff
