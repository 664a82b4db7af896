#include "occmesh/optim.hpp"

#include <cmath>

namespace occmesh::harness {

double learning_rate(const OptimizerConfig& config, Index epoch) {
    return epoch < config.decay_epoch ? config.lr : config.lr / config.decay_factor;
}

AdamW::AdamW(std::vector<NamedTensor> params, const OptimizerConfig& config)
    : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        if (p.has_grad()) {
            const auto& g = p.node()->grad;
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            }
        } else {
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] *= b1;
                v[j] *= b2;
            }
        }
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double mh = m[j] / c1;
            const double vh = v[j] / c2;
            w[j] -= lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * w[j]);
        }
        p.zero_grad();
    }
}

}  // namespace occmesh::harness
