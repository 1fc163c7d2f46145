#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "poet/tensor.hpp"

namespace poet::testutil {

// Central finite differences in double precision against the analytic
// gradients a backward pass accumulates into `params`. `loss(true)` must
// rebuild the graph and run backward; `loss(false)` only evaluates.
inline double max_rel_grad_error(const std::vector<Param<double>*>& params,
                                 const std::function<double(bool)>& loss,
                                 double eps = 1e-5) {
    for (auto* p : params) p->zero_grad();
    loss(true);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad.v);
    double worst = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto* p = params[pi];
        for (long i = 0; i < p->value.numel(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double lp = loss(false);
            p->value[i] = orig - eps;
            const double lm = loss(false);
            p->value[i] = orig;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi][static_cast<std::size_t>(i)];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

template <typename Real>
inline void fill_uniform(Tensor<Real>& t, Rng& rng, double lo, double hi) {
    for (auto& x : t.v) x = static_cast<Real>(rng.uniform(lo, hi));
}

}  // namespace poet::testutil
