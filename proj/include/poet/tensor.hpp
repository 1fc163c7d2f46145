#pragma once

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "poet/common.hpp"

namespace poet {

// Dense row-major array with a dynamic shape. Small by design: the training
// engine only ever needs ranks 0..3.
template <typename Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<std::size_t>(numel_of(shape)), Real(0));
    }

    Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            check(d >= 0, "tensor dimension must be non-negative");
            n *= d;
        }
        return n;
    }

    static Tensor scalar(Real x) {
        Tensor t(std::vector<int>{});
        t.v.assign(1, x);
        return t;
    }

    long numel() const { return static_cast<long>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    Real& operator[](long i) { return v[static_cast<std::size_t>(i)]; }
    const Real& operator[](long i) const { return v[static_cast<std::size_t>(i)]; }

    Real& at(int i, int j) { return v[static_cast<std::size_t>(i) * dim(1) + j]; }
    const Real& at(int i, int j) const { return v[static_cast<std::size_t>(i) * dim(1) + j]; }

    Real& at(int i, int j, int k) {
        return v[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    const Real& at(int i, int j, int k) const {
        return v[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    void fill(Real x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(Real(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out(shape);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<Other>(v[i]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

// Learnable parameter: value plus accumulated gradient. Frozen parameters are
// skipped by both gradient accumulation and optimizer updates, which makes the
// freeze contract bit-exact.
template <typename Real>
struct Param {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool frozen = false;

    Param() = default;
    Param(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    void resize(std::vector<int> shape) {
        value = Tensor<Real>(shape);
        grad = Tensor<Real>(std::move(shape));
    }

    void zero_grad() { grad.zero(); }
    long numel() const { return value.numel(); }

    void init_uniform(Rng& rng, double lo, double hi) {
        for (auto& x : value.v) x = static_cast<Real>(rng.uniform(lo, hi));
    }

    // He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)), sized for rectifiers.
    void init_fan_in(Rng& rng, int fan_in) {
        const double b = std::sqrt(6.0 / static_cast<double>(fan_in > 0 ? fan_in : 1));
        init_uniform(rng, -b, b);
    }
};

}  // namespace poet
