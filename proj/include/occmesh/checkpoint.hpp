#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "occmesh/config.hpp"
#include "occmesh/model.hpp"

namespace occmesh::harness {

// Layout (little-endian): "RMCK", u32 version, u64 step, u32 config length,
// config text, u32 tensor count, then per tensor u32 name length, name,
// u32 rank, u64 dims[rank], f64 data[numel].
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    RunConfig config;
    std::uint64_t step = 0;
    model::ModelParams params;
};

void save_checkpoint(const std::string& path, const RunConfig& config, const model::ModelParams& params,
                     std::uint64_t step);

// Rebuilds the parameter structure from the stored config and fills every
// tensor from the table; names and shapes must match exactly.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace occmesh::harness
