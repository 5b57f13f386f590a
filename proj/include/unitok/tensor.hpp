#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitok/rng.hpp"

namespace unitok {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Dense row-major array. Gradient storage lives beside the data so a Tensor
// can serve both as a graph value and as a trainable parameter.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until touched by backward

    TensorT() = default;

    explicit TensorT(Shape s, T fill = T(0), bool rg = false)
        : shape(std::move(s)), data(static_cast<size_t>(unitok::numel(shape)), fill), requires_grad(rg) {}

    TensorT(Shape s, std::vector<T> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (static_cast<int64_t>(data.size()) != unitok::numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i < 0 ? ndim() + i : i)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { grad.assign(data.size(), T(0)); }

    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        out.requires_grad = requires_grad;
        return out;
    }

    static TensorT randn(Shape s, Rng& rng, T stddev = T(1)) {
        TensorT t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
        return t;
    }

    static TensorT uniform(Shape s, Rng& rng, T lo, T hi) {
        TensorT t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        return t;
    }
};

using Tensor = TensorT<float>;

}  // namespace unitok
