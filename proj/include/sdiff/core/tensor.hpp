#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sdiff/core/error.hpp"
#include "sdiff/core/rng.hpp"

namespace sdiff {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor with value semantics.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != numel_of(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor randn(Shape shape, Rng& rng, double std = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<T>(rng.normal() * std);
        return t;
    }
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const {
        const int r = rank();
        if (i < 0) i += r;
        if (i < 0 || i >= r) throw ShapeError("dim index out of range for shape " + to_string(shape_));
        return shape_[static_cast<std::size_t>(i)];
    }
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }
    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape s) const {
        auto it = std::find(s.begin(), s.end(), -1);
        if (it != s.end()) {
            std::int64_t rest = 1;
            for (auto v : s)
                if (v != -1) rest *= v;
            *it = rest == 0 ? 0 : numel() / rest;
        }
        if (numel_of(s) != numel())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

private:
    std::size_t offset(std::initializer_list<std::int64_t> idx) const {
        if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + to_string(shape_));
        std::size_t off = 0;
        std::size_t d = 0;
        for (auto i : idx) {
            off = off * static_cast<std::size_t>(shape_[d]) + static_cast<std::size_t>(i);
            ++d;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    T m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace sdiff
