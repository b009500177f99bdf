#include <algorithm>
#include <array>
#include <cmath>

#include "sdiff/formulations.hpp"

namespace sdiff {

std::string to_string(Solver s) {
    switch (s) {
        case Solver::euler_ddim: return "euler_ddim";
        case Solver::heun: return "heun";
        case Solver::euler_rf: return "euler_rf";
        case Solver::rk45: return "rk45";
    }
    return "?";
}

Solver parse_solver(const std::string& s) {
    if (s == "euler_ddim" || s == "ddim") return Solver::euler_ddim;
    if (s == "heun") return Solver::heun;
    if (s == "euler_rf" || s == "euler") return Solver::euler_rf;
    if (s == "rk45") return Solver::rk45;
    throw ConfigError("unknown solver '" + s + "'", "sampler.solver");
}

void validate_sampler(const Formulation& f, const SamplerConfig& cfg) {
    if (cfg.steps < 1) throw ConfigError("steps must be positive", "sampler.steps");
    if (cfg.cfg_scale < 1.0) throw ConfigError("cfg_scale must be >= 1", "sampler.cfg_scale");
    if (cfg.timestep_shift < 1.0) throw ConfigError("timestep_shift must be >= 1", "sampler.timestep_shift");
    if (cfg.timestep_shift != 1.0 && f.kind != FormKind::rf)
        throw ConfigError("timestep shift is defined on the RF time axis only", "sampler.timestep_shift");
    const auto [lo, hi] = cfg.cfg_interval;
    if (!(lo <= hi && lo >= f.t_clean() && hi <= f.t_noise()))
        throw ConfigError("cfg interval must lie inside the time domain", "sampler.cfg_interval");
    switch (cfg.solver) {
        case Solver::euler_ddim: break;
        case Solver::heun:
            if (f.kind == FormKind::ddpm) throw ConfigError("heun needs a continuous-time formulation", "sampler.solver");
            break;
        case Solver::euler_rf:
        case Solver::rk45:
            if (f.kind != FormKind::rf)
                throw ConfigError(to_string(cfg.solver) + " is only paired with the RF formulation", "sampler.solver");
            break;
    }
    if (f.kind == FormKind::ddpm && cfg.steps > f.T) throw ConfigError("more steps than DDPM timesteps", "sampler.steps");
}

double shift_time(double t, double s) { return s * t / (1.0 + (s - 1.0) * t); }

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, double scale, double t,
                      std::pair<double, double> interval) {
    if (!cond.same_shape(uncond)) throw ShapeError("cfg_combine: shape mismatch");
    if (scale == 1.0 || t < interval.first || t > interval.second) return cond;
    Tensor<T> out(cond.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(uncond[i] + scale * (static_cast<double>(cond[i]) - uncond[i]));
    return out;
}

std::vector<double> time_grid(const Formulation& f, const SamplerConfig& cfg) {
    validate_sampler(f, cfg);
    const int n = cfg.steps;
    std::vector<double> g;
    switch (f.kind) {
        case FormKind::ddpm:
            for (int i = 0; i <= n; ++i) g.push_back(std::round(f.T * (1.0 - static_cast<double>(i) / n)));
            break;
        case FormKind::edm: {
            const double a = std::pow(f.sigma_max, 1.0 / cfg.rho), b = std::pow(f.sigma_min, 1.0 / cfg.rho);
            for (int i = 0; i < n; ++i) g.push_back(n == 1 ? f.sigma_max : std::pow(a + i / (n - 1.0) * (b - a), cfg.rho));
            g.front() = f.sigma_max;
            if (n > 1) g.back() = f.sigma_min;
            g.push_back(0.0);
            break;
        }
        case FormKind::rf:
            for (int i = 0; i <= n; ++i) g.push_back(shift_time(1.0 - static_cast<double>(i) / n, cfg.timestep_shift));
            g.back() = 0.0;
            break;
    }
    return g;
}

namespace {

struct Field {
    const Formulation& f;
    const SamplerConfig& cfg;
    const Predictor& pred;
    int nfe = 0;

    Representations<double> at(const Tensor<double>& x, double t) {
        Tensor<double> p = pred(x, t, false);
        if (cfg.cfg_scale != 1.0 && t >= cfg.cfg_interval.first && t <= cfg.cfg_interval.second)
            p = cfg_combine(p, pred(x, t, true), cfg.cfg_scale, t, cfg.cfg_interval);
        ++nfe;
        const std::vector<double> tb(static_cast<std::size_t>(x.dim(0)), t);
        return convert_prediction(f, f.prediction, p, x, tb);
    }
    // dx/dt in the formulation's own time variable.
    Tensor<double> deriv(const Tensor<double>& x, double t) {
        auto r = at(x, t);
        return f.kind == FormKind::rf ? std::move(r.v) : std::move(r.eps);
    }
};

Tensor<double> axpy(const Tensor<double>& x, double h, const Tensor<double>& d) {
    Tensor<double> y(x.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = x[i] + h * d[i];
    return y;
}

double rms(const Tensor<double>& v, const Tensor<double>& scale) {
    double s = 0;
    for (std::int64_t i = 0; i < v.numel(); ++i) s += (v[i] / scale[i]) * (v[i] / scale[i]);
    return std::sqrt(s / static_cast<double>(std::max<std::int64_t>(1, v.numel())));
}

// Dormand-Prince 5(4) with first-same-as-last reuse.
SampleResult rk45(Field& fld, Tensor<double> y, double t0, double t1) {
    static constexpr std::array<double, 6> C{0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0};
    static constexpr double A[6][5] = {{0, 0, 0, 0, 0},
                                       {1.0 / 5, 0, 0, 0, 0},
                                       {3.0 / 40, 9.0 / 40, 0, 0, 0},
                                       {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0},
                                       {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0},
                                       {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656}};
    static constexpr std::array<double, 6> B{35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84};
    static constexpr std::array<double, 7> E{-71.0 / 57600, 0,  71.0 / 16695, -71.0 / 1920, 17253.0 / 339200,
                                             -22.0 / 525,   1.0 / 40};
    const auto& cfg = fld.cfg;
    const double dir = t1 < t0 ? -1.0 : 1.0;
    const auto scale_of = [&](const Tensor<double>& a, const Tensor<double>& b) {
        Tensor<double> s(a.shape());
        for (std::int64_t i = 0; i < s.numel(); ++i) s[i] = cfg.atol + cfg.rtol * std::max(std::abs(a[i]), std::abs(b[i]));
        return s;
    };

    double t = t0;
    Tensor<double> k1 = fld.deriv(y, t);
    // Initial step size (Hairer, Norsett & Wanner II.4).
    double h;
    {
        const Tensor<double> sc = scale_of(y, y);
        const double d0 = rms(y, sc), d1 = rms(k1, sc);
        const double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        const Tensor<double> k = fld.deriv(axpy(y, dir * h0, k1), t + dir * h0);
        Tensor<double> diff(k.shape());
        for (std::int64_t i = 0; i < k.numel(); ++i) diff[i] = k[i] - k1[i];
        const double d2 = rms(diff, sc) / h0;
        const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / std::max(d1, d2), 0.2);
        h = std::min({100 * h0, h1, std::abs(t1 - t0)});
    }

    std::array<Tensor<double>, 7> k;
    while (dir * (t1 - t) > 1e-12) {
        if (fld.nfe > cfg.max_nfe) throw NumericError("rk45 exceeded its evaluation budget");
        h = std::min(h, std::abs(t1 - t));
        const double hs = dir * h;
        k[0] = k1;
        for (int s = 1; s < 6; ++s) {
            Tensor<double> ys = y;
            for (int j = 0; j < s; ++j)
                if (A[s][j] != 0.0)
                    for (std::int64_t i = 0; i < ys.numel(); ++i) ys[i] += hs * A[s][j] * k[j][i];
            k[s] = fld.deriv(ys, t + C[s] * hs);
        }
        Tensor<double> yn = y;
        for (int j = 0; j < 6; ++j)
            if (B[j] != 0.0)
                for (std::int64_t i = 0; i < yn.numel(); ++i) yn[i] += hs * B[j] * k[j][i];
        const double tn = std::abs(t1 - (t + hs)) < 1e-12 ? t1 : t + hs;
        k[6] = fld.deriv(yn, tn);
        Tensor<double> err(y.shape());
        for (int j = 0; j < 7; ++j)
            if (E[j] != 0.0)
                for (std::int64_t i = 0; i < err.numel(); ++i) err[i] += hs * E[j] * k[j][i];
        const double en = rms(err, scale_of(y, yn));
        if (en <= 1.0) {
            t = tn;
            y = std::move(yn);
            k1 = std::move(k[6]);
            h *= en == 0.0 ? 10.0 : std::min(10.0, 0.9 * std::pow(en, -0.2));
        } else {
            h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
        }
        if (!std::isfinite(h) || h < 1e-12) throw NumericError("rk45 step size underflow");
    }
    return {std::move(y), fld.nfe};
}

}  // namespace

SampleResult solve(const Formulation& f, const SamplerConfig& cfg, const Predictor& pred, Tensor<double> x) {
    const std::vector<double> grid = time_grid(f, cfg);
    Field fld{f, cfg, pred};
    if (cfg.solver == Solver::rk45) return rk45(fld, std::move(x), f.t_noise(), f.t_clean());

    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double t = grid[i], s = grid[i + 1];
        switch (cfg.solver) {
            case Solver::euler_ddim: {
                // Deterministic DDIM: re-noise the x0 estimate with the predicted noise.
                const auto r = fld.at(x, t);
                const auto [a, sg] = alpha_sigma(f, s);
                for (std::int64_t j = 0; j < x.numel(); ++j) x[j] = a * r.x0[j] + sg * r.eps[j];
                break;
            }
            case Solver::euler_rf: x = axpy(x, s - t, fld.deriv(x, t)); break;
            case Solver::heun: {
                const Tensor<double> d = fld.deriv(x, t);
                Tensor<double> xe = axpy(x, s - t, d);
                if (s == f.t_clean()) {
                    x = std::move(xe);
                    break;
                }
                const Tensor<double> d2 = fld.deriv(xe, s);
                for (std::int64_t j = 0; j < x.numel(); ++j) x[j] += (s - t) * 0.5 * (d[j] + d2[j]);
                break;
            }
            case Solver::rk45: break;
        }
    }
    return {std::move(x), fld.nfe};
}

template <class T>
SampleResult sample(const Denoiser<T>& model, const SamplerConfig& cfg, std::int64_t n, Rng& rng,
                    const std::vector<int>& labels) {
    const Formulation& f = model.formulation();
    const BackboneSpec& spec = model.backbone().spec();
    if (!labels.empty() && static_cast<std::int64_t>(labels.size()) != n) throw ShapeError("label count != sample count");
    if (cfg.cfg_scale != 1.0 && (spec.num_classes == 0 || labels.empty()))
        throw ConfigError("guidance needs a class-conditional model and labels", "sampler.cfg_scale");
    const Shape shape{n, spec.in_channels, spec.image_size, spec.image_size};
    const double s0 = alpha_sigma(f, f.t_noise()).second;
    Tensor<double> x = Tensor<double>::randn(shape, rng, s0);

    const Predictor pred = [&](const Tensor<double>& xt, double t, bool uncond) {
        NoGradGuard ng;
        Conditioning c;
        if (spec.num_classes > 0)
            c.labels = uncond || labels.empty() ? std::vector<int>(static_cast<std::size_t>(n), spec.num_classes) : labels;
        ForwardOptions o;
        o.sampling = true;
        const std::vector<double> tb(static_cast<std::size_t>(n), t);
        const auto out = model.predict(ag::constant(xt.template cast<T>()), tb, c, o);
        return out.pred.value().template cast<double>();
    };
    return solve(f, cfg, pred, std::move(x));
}

template Tensor<float> cfg_combine(const Tensor<float>&, const Tensor<float>&, double, double, std::pair<double, double>);
template Tensor<double> cfg_combine(const Tensor<double>&, const Tensor<double>&, double, double,
                                    std::pair<double, double>);
template SampleResult sample(const Denoiser<float>&, const SamplerConfig&, std::int64_t, Rng&, const std::vector<int>&);
template SampleResult sample(const Denoiser<double>&, const SamplerConfig&, std::int64_t, Rng&,
                             const std::vector<int>&);

}  // namespace sdiff
