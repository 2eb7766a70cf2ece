#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfn/tensor.hpp"

namespace dfn {

/// Named learnable tensors plus their Adam moment buffers. The step counter
/// is shared by the whole group.
struct ParamGroup {
    struct Entry {
        std::string name;
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };

    std::vector<Entry> entries;
    std::int64_t step_count = 0;

    void add(std::string name, Tensor param) {
        const auto n = static_cast<std::size_t>(param.numel());
        entries.push_back({std::move(name), std::move(param),
                           std::vector<double>(n, 0.0),
                           std::vector<double>(n, 0.0)});
    }

    void zero_grad() {
        for (auto& e : entries) e.param.zero_grad();
    }
};

/// One Adam update with bias correction. Gradients are left untouched.
inline void adam_step(ParamGroup& group, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    for (const auto& e : group.entries) {
        if (!e.param.has_grad()) {
            throw ContractError("adam_step: parameter '" + e.name +
                                "' has no gradient");
        }
    }
    group.step_count += 1;
    const double t = static_cast<double>(group.step_count);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (auto& e : group.entries) {
        const auto& g = e.param.grad();
        auto& p = e.param.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g[i];
            e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = e.m[i] / bc1;
            const double vhat = e.v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

/// Step-decay learning-rate schedule, floored at the final rate.
struct LrSchedule {
    double initial_rate = 2e-3;
    double final_rate = 2e-6;
    double decay = 0.1;
    int step_epochs = 5;
    int total_epochs = 20;
};

inline double lr_at(const LrSchedule& s, int epoch) {
    if (epoch < 0 || epoch >= s.total_epochs) {
        throw ContractError("lr_at: epoch " + std::to_string(epoch) +
                            " outside [0, " + std::to_string(s.total_epochs) +
                            ")");
    }
    const int k = epoch / s.step_epochs;
    // Dividing by the reciprocal keeps decimal decays exact: for decay 0.1
    // the reciprocal and its integer powers are exact doubles, so rates land
    // on the literal values 2e-3, 2e-4, ... instead of drifting by an ulp.
    const double rate = s.initial_rate / std::pow(1.0 / s.decay, k);
    return std::max(rate, s.final_rate);
}

}  // namespace dfn
