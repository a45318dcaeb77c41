#pragma once

// Central finite-difference oracle for the reverse-mode engine. Independent of
// the tape: it only re-evaluates the forward closure at perturbed inputs.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "imf/tensor.hpp"

namespace imf::test {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// fwd() must rebuild the graph from current parameter values and return the
// scalar loss. analytic gradients must already be populated in `params`.
inline GradCheckResult finite_difference_check(
    const std::vector<std::pair<std::string, Tensor<double>>>& params,
    const std::function<double()>& fwd, double h = 1e-5, double floor = 1e-6) {
    GradCheckResult res;
    for (const auto& [name, p] : params) {
        for (std::size_t j = 0; j < p.numel(); ++j) {
            double* w = const_cast<double*>(p.data()) + j;
            const double saved = *w;
            *w = saved + h;
            const double fp = fwd();
            *w = saved - h;
            const double fm = fwd();
            *w = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = p.grad_allocated() ? static_cast<double>(p.grad_ref()[j]) : 0.0;
            const double denom = std::max({std::fabs(fd), std::fabs(an), floor});
            const double rel = std::fabs(fd - an) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = name + "[" + std::to_string(j) + "] analytic=" + std::to_string(an) +
                            " fd=" + std::to_string(fd);
            }
        }
    }
    return res;
}

}  // namespace imf::test
