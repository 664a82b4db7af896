#pragma once

#include <functional>
#include <string>
#include <vector>

#include "occmesh/tensor.hpp"

namespace occmesh {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    // Elements probed per parameter; <= 0 probes every element. Sampled
    // elements are drawn deterministically from `sample_seed`.
    Index max_elements_per_param = 0;
    std::uint64_t sample_seed = 0;
    // Denominator floor as a fraction of |f|: central differences carry
    // roundoff near ulp(f) / eps, so gradients that are exactly zero (or
    // below that level) are compared against this floor instead.
    double roundoff_floor = 1e-6;
    // Multiplies the analytic gradient before comparison (fault injection).
    double analytic_scale = 1.0;
};

struct ParamGradCheck {
    std::string name;
    double max_rel_error = 0.0;
    Index checked = 0;
    Index worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

struct GradCheckReport {
    std::vector<ParamGradCheck> params;
    double max_rel_error = 0.0;
    Index checked = 0;
    bool pass = false;
    std::string failure;  // set when a probe produced NaN/Inf
};

// |a - n| / max(floor, |a| + |n|)
double relative_error(double analytic, double numeric, double floor = 1e-8);

// Compares reverse-mode gradients of the scalar `f` against central
// differences (f(p + eps) - f(p - eps)) / 2eps, element by element. `f` must
// read the current values of `params`, which must be leaves with
// requires_grad set. Parameter values are restored on return.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace occmesh
