// Shared helpers for the unit suites: finite-difference gradient checking
// against the tape, and a few small builders.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sicql/graph.hpp"
#include "sicql/optim.hpp"

namespace sicql::testing {

// Central finite differences of a scalar function of the parameter set,
// evaluated one coordinate at a time.
inline double finite_difference(ParamSet& params, size_t entry, int64_t flat_index,
                                const std::function<double()>& eval, double h = 1e-5) {
    double& x = params.entries()[entry].value.at(flat_index);
    const double saved = x;
    x = saved + h;
    const double up = eval();
    x = saved - h;
    const double down = eval();
    x = saved;
    return (up - down) / (2.0 * h);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

// Runs eval() under the tape to collect analytic gradients, then compares
// every parameter coordinate against central differences.
// rel err = |g - fd| / max(|g|, |fd|, floor).
inline GradCheckResult grad_check(ParamSet& params,
                                  const std::function<double(Tape*, bool)>& eval_with_tape,
                                  double h = 1e-5, double floor = 1.0) {
    params.zero_grads();
    {
        Tape tape;
        eval_with_tape(&tape, true);
    }
    std::vector<Tensor> grads;
    for (auto& e : params.entries()) grads.push_back(e.grad);

    GradCheckResult res;
    auto eval_plain = [&]() { return eval_with_tape(nullptr, false); };
    for (size_t e = 0; e < params.entries().size(); ++e) {
        const int64_t n = params.entries()[e].value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double fd = finite_difference(params, e, i, eval_plain, h);
            const double g = grads[e].at(i);
            const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), floor});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = params.entries()[e].name + "[" + std::to_string(i) + "] analytic=" +
                            std::to_string(g) + " fd=" + std::to_string(fd);
            }
        }
    }
    return res;
}

}  // namespace sicql::testing
