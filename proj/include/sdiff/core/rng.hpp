#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sdiff {

/// Seedable generator. All randomness in a run derives from one root seed via
/// named substreams, so data order, noise, augmentation and init can be varied
/// independently and any step can be replayed without carrying state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    static std::uint64_t derive(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);
    static Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
        return Rng(derive(seed, name, index));
    }
    Rng fork(std::string_view name, std::uint64_t index = 0) {
        return substream(engine_(), name, index);
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal() { return normal_(engine_); }
    double normal(double mean, double std) { return mean + std * normal_(engine_); }
    /// Uniform integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }
    std::uint64_t next() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

inline std::uint64_t Rng::derive(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    // FNV-1a over the name, then splitmix64 finalization of the mix.
    std::uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::uint64_t z = seed ^ (h + 0x9e3779b97f4a7c15ull + (index << 6) + (index >> 2));
    z += index * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace sdiff
