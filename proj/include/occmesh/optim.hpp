#pragma once

#include <vector>

#include "occmesh/config.hpp"
#include "occmesh/gradcheck.hpp"

namespace occmesh::harness {

// Step-decay schedule: lr for epochs < decay_epoch, lr / decay_factor after.
double learning_rate(const OptimizerConfig& config, Index epoch);

// Adaptive moments with decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<NamedTensor> params, const OptimizerConfig& config);

    // Applies one update from the accumulated gradients, then clears them.
    void step(double lr);
    std::int64_t steps() const { return t_; }

private:
    std::vector<NamedTensor> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace occmesh::harness
