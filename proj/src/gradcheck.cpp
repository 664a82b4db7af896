#include "occmesh/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "occmesh/rng.hpp"

namespace occmesh {

double relative_error(double analytic, double numeric, double floor) {
    return std::fabs(analytic - numeric) / std::max(floor, std::fabs(analytic) + std::fabs(numeric));
}

namespace {

double probe(const std::function<Tensor()>& f) {
    NoGradGuard no_grad;
    return f().item();
}

std::vector<Index> probe_indices(Index n, Index limit, std::uint64_t seed, std::size_t param) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (limit <= 0 || limit >= n) return idx;
    KeyedRng rng{seed, static_cast<std::uint64_t>(param), 0x67726164ULL};
    for (Index i = 0; i < limit; ++i) {
        const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(limit));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
    GradCheckReport report;
    for (const auto& p : params) {
        if (!p.tensor.requires_grad() || !p.tensor.is_leaf()) {
            throw std::invalid_argument("grad_check: parameter '" + p.name +
                                        "' must be a leaf with requires_grad");
        }
        Tensor t = p.tensor;
        t.zero_grad();
    }
    Tensor loss = f();
    const double base = loss.item();
    if (!std::isfinite(base)) {
        report.failure = "non-finite value at the probe point";
        return report;
    }
    backward(loss);
    const double floor = std::max(1e-8, options.roundoff_floor * std::fabs(base));

    bool ok = true;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor t = params[pi].tensor;
        const std::vector<double> analytic = t.grad();
        auto values = t.mutable_data();
        ParamGradCheck pc;
        pc.name = params[pi].name;
        for (Index i : probe_indices(t.numel(), options.max_elements_per_param, options.sample_seed, pi)) {
            const double original = values[i];
            values[i] = original + options.eps;
            const double up = probe(f);
            values[i] = original - options.eps;
            const double down = probe(f);
            values[i] = original;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.failure = "non-finite probe in '" + pc.name + "' at element " + std::to_string(i);
                ok = false;
                break;
            }
            const double numeric = (up - down) / (2.0 * options.eps);
            const double a = analytic[i] * options.analytic_scale;
            const double err = relative_error(a, numeric, floor);
            ++pc.checked;
            if (err > pc.max_rel_error || pc.worst_index < 0) {
                pc.max_rel_error = std::max(pc.max_rel_error, err);
                if (err >= pc.max_rel_error) {
                    pc.worst_index = i;
                    pc.worst_analytic = a;
                    pc.worst_numeric = numeric;
                }
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
        report.checked += pc.checked;
        report.params.push_back(std::move(pc));
        t.zero_grad();
        if (!ok) break;
    }
    report.pass = ok && report.max_rel_error <= options.tol;
    return report;
}

}  // namespace occmesh
