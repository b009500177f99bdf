#pragma once
// Named parameter registry with role tags.
//
// Every parameter is initialized from its own substream derived from
// (seed, name), so two models built from the same seed share identical values
// for every parameter they have in common, regardless of what else each one
// declares. In dry mode nothing is allocated; only names, shapes and roles are
// recorded (used to count parameters of configurations too large to build).

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sdiff/autograd/var.hpp"
#include "sdiff/core/rng.hpp"

namespace sdiff {

enum class Role { untagged, weight, bias, norm, embedding, pos_embed, cls_token, gate };

struct Init {
    enum Kind { zeros, ones, constant, normal, uniform, xavier } kind = zeros;
    double a = 0;  // std / bound / value / gain
    std::int64_t fan_in = 0, fan_out = 0;

    static Init Zeros() { return {zeros}; }
    static Init Ones() { return {ones}; }
    static Init Constant(double v) { return {constant, v}; }
    static Init Normal(double std) { return {normal, std}; }
    static Init Uniform(double bound) { return {uniform, bound}; }
    static Init Xavier(std::int64_t fan_in, std::int64_t fan_out, double gain = 1.0) {
        return {xavier, gain, fan_in, fan_out};
    }
};

template <class T>
struct Param {
    std::string name;
    Shape shape;
    Role role = Role::untagged;
    Var<T> var;  // undefined in dry mode
    bool nonneg = false;
};

template <class T>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0, bool dry = false) : seed_(seed), dry_(dry) {}

    Var<T> add(const std::string& name, Shape shape, Role role, Init init, bool nonneg = false) {
        if (index_.count(name)) throw StructureError("duplicate parameter name: " + name);
        Param<T> p{name, shape, role, {}, nonneg};
        if (!dry_) {
            Tensor<T> t(shape);
            Rng rng = Rng::substream(seed_, "init:" + name);
            fill(t, init, rng);
            p.var = Var<T>(std::move(t), true);
        }
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back().var;
    }

    std::vector<Param<T>>& list() noexcept { return params_; }
    const std::vector<Param<T>>& list() const noexcept { return params_; }
    const Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += numel_of(p.shape);
        return n;
    }
    /// Parameters whose names start with `prefix`.
    std::int64_t count(std::string_view prefix) const {
        std::int64_t n = 0;
        for (const auto& p : params_)
            if (std::string_view(p.name).substr(0, prefix.size()) == prefix) n += numel_of(p.shape);
        return n;
    }

    void zero_grad() {
        for (auto& p : params_)
            if (p.var.defined()) p.var.zero_grad();
    }
    bool dry() const noexcept { return dry_; }
    std::uint64_t seed() const noexcept { return seed_; }

private:
    static void fill(Tensor<T>& t, const Init& init, Rng& rng) {
        switch (init.kind) {
            case Init::zeros: t.fill(T(0)); break;
            case Init::ones: t.fill(T(1)); break;
            case Init::constant: t.fill(static_cast<T>(init.a)); break;
            case Init::normal:
                for (auto& v : t.storage()) v = static_cast<T>(rng.normal() * init.a);
                break;
            case Init::uniform:
                for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-init.a, init.a));
                break;
            case Init::xavier: {
                const double bound =
                    init.a * std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(1, init.fan_in + init.fan_out)));
                for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
        }
    }

    std::uint64_t seed_;
    bool dry_;
    std::vector<Param<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Prefixing view onto a store: Scope("blocks").sub("3").add("w") -> "blocks.3.w".
template <class T>
class Scope {
public:
    Scope() = default;
    Scope(ParamStore<T>* store, std::string prefix = {}) : store_(store), prefix_(std::move(prefix)) {}

    Scope sub(const std::string& name) const { return Scope(store_, join(name)); }
    Scope sub(std::size_t i) const { return sub(std::to_string(i)); }
    Var<T> add(const std::string& name, Shape shape, Role role, Init init, bool nonneg = false) const {
        return store_->add(join(name), std::move(shape), role, init, nonneg);
    }
    ParamStore<T>* store() const noexcept { return store_; }
    const std::string& prefix() const noexcept { return prefix_; }

private:
    std::string join(const std::string& n) const { return prefix_.empty() ? n : prefix_ + "." + n; }
    ParamStore<T>* store_ = nullptr;
    std::string prefix_;
};

inline std::string_view role_name(Role r) {
    switch (r) {
        case Role::untagged: return "untagged";
        case Role::weight: return "weight";
        case Role::bias: return "bias";
        case Role::norm: return "norm";
        case Role::embedding: return "embedding";
        case Role::pos_embed: return "pos_embed";
        case Role::cls_token: return "cls_token";
        case Role::gate: return "gate";
    }
    return "untagged";
}

}  // namespace sdiff
