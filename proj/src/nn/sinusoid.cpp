#include <cmath>

#include "sdiff/nn/layers.hpp"

namespace sdiff::nn {

Tensor<double> sinusoid(std::span<const double> t, int dim, double max_period) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal embedding width must be even and positive, got " +
                                                    std::to_string(dim));
    const int half = dim / 2;
    const auto B = static_cast<std::int64_t>(t.size());
    Tensor<double> out(Shape{B, dim});
    for (std::int64_t b = 0; b < B; ++b)
        for (int i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(max_period) * i / half);
            const double a = t[static_cast<std::size_t>(b)] * f;
            out[b * dim + i] = std::cos(a);
            out[b * dim + half + i] = std::sin(a);
        }
    return out;
}

}  // namespace sdiff::nn
