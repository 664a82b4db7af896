#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "occmesh/losses.hpp"
#include "occmesh/model.hpp"

namespace occmesh::harness {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
    double lr = 1e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Learning rate is divided by decay_factor from decay_epoch on.
    Index decay_epoch = 10;
    double decay_factor = 10.0;
};

struct RunConfig {
    std::string train_data;
    std::string test_data;
    model::ModelConfig model;
    losses::LossWeights weights{1.0, 1.0, 1.0, 1.0};
    losses::VelocityOptions velocity;
    OptimizerConfig optim;
    Index epochs = 40;
    Index batch = 16;  // sequences per step
    std::uint64_t seed = 0;
    bool velocity_enabled = true;
    // Validation report every this many epochs on test_data; 0 disables.
    Index eval_every = 0;
    // Template taken from the synthetic rest pose when model.template_points
    // is empty; an unset camera prior then follows the synthetic camera.
    bool rest_template = true;

    // Loss weights with the velocity term gated by velocity_enabled.
    losses::LossWeights effective_weights() const;
    // Syncs derived fields (sd.channels, md.frames) and checks invariants.
    void finalize(Index frames);
    void validate() const;
};

// Flat `key = value` lines, `#` starts a comment, dotted keys for nesting.
// Unknown keys and malformed values throw ConfigError naming the line.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

// Canonical text form; parse_config(to_text(c)) reproduces c exactly.
std::string to_text(const RunConfig& config);

// "sd,md,vel" lists the components kept enabled; "none" disables all three.
void apply_ablation(RunConfig& config, const std::string& spec);

}  // namespace occmesh::harness
