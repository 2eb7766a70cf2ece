#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dfn/tensor.hpp"

namespace dfn {

/// Central-difference comparison of analytic gradients.
///
/// `loss_fn` must rebuild the scalar loss from the current values of the
/// given leaf tensors on every call; the numeric side only ever evaluates
/// the forward pass, so it is independent of the backward implementation.
inline double gradcheck_max_rel_error(const std::function<Tensor()>& loss_fn,
                                      const std::vector<Tensor>& inputs,
                                      double step = 1e-5,
                                      double tamper_first = 0.0) {
    for (const auto& t : inputs) {
        if (!t.requires_grad()) {
            throw ContractError("gradcheck: all probed inputs must require grad");
        }
    }

    std::vector<std::vector<double>> analytic;
    {
        Tensor loss = loss_fn();
        for (const auto& t : inputs) const_cast<Tensor&>(t).zero_grad();
        loss.backward();
        for (const auto& t : inputs) analytic.push_back(t.grad());
    }
    // Test hook: corrupt one analytic entry so the comparison must flag it.
    if (tamper_first != 0.0 && !analytic.empty() && !analytic[0].empty()) {
        analytic[0][0] += tamper_first;
    }

    double max_rel = 0.0;
    NoGradGuard no_grad;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor t = inputs[ti];
        auto& x = t.data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double saved = x[i];
            const double h = step * std::max(1.0, std::fabs(saved));
            x[i] = saved + h;
            const double fp = loss_fn().item();
            x[i] = saved - h;
            const double fm = loss_fn().item();
            x[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double rel = std::fabs(a - numeric) /
                               std::max({1.0, std::fabs(a), std::fabs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

struct GradCheckResult {
    std::string op;
    double max_rel_error;
    double tolerance;
    bool pass;
};

}  // namespace dfn
