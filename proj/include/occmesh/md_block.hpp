#pragma once

#include <cstdint>
#include <vector>

#include "occmesh/sd_block.hpp"
#include "occmesh/tensor.hpp"

// Motion disentanglement: frames of each (sequence, channel) pair become the
// channel-like axis of the spatial gating unit, with per-pair temporal
// shuffling during training.
namespace occmesh::md {

enum class Layout {
    FramesMajor,    // [(B*S), C, H, W]
    ChannelsMajor,  // [(B*C), S, H, W]
};

// A 4-axis feature volume tagged with its physical layout.
struct FeatureBatch {
    Tensor tensor;
    Layout layout = Layout::FramesMajor;
    Index batch = 0;
    Index frames = 0;
    Index channels = 0;

    static FeatureBatch frames_major(Tensor t, Index batch, Index frames);
};

enum class ShuffleMode { Train, Eval };

struct ShufflePlan {
    Index batch = 0;
    Index channels = 0;
    Index frames = 0;
    std::uint64_t seed = 0;
    ShuffleMode mode = ShuffleMode::Eval;
    // perms[b * channels + c][s] is the source frame placed at slot s.
    std::vector<std::vector<int>> perms;

    bool is_identity() const;
    ShufflePlan inverse() const;
};

struct MdConfig {
    Index frames = 8;
    // Frame groups inside one (sequence, channel) slab.
    Index groups = 1;
    bool shuffle = true;

    Index group_frames() const { return frames / groups; }
    sd::SdConfig gate_config() const;
    void validate() const;
};

struct MdParams {
    std::vector<sd::GateParams> sets;  // one set shared across all slabs

    static MdParams init(const MdConfig& config, std::uint64_t seed, const std::string& prefix = "md");
    static MdParams zeros(const MdConfig& config);
    std::vector<NamedTensor> named(const std::string& prefix = "md") const;
    void set_requires_grad(bool on);
};

// (b, s, c, h, w) -> (b*C + c, s, h, w).
FeatureBatch temporal_regroup(const FeatureBatch& x);
// (b*C + c, s, h, w) -> (b*S + s, c, h, w).
FeatureBatch inverse_regroup(const FeatureBatch& x);

// Train: independent uniform permutations per (b, c), each drawn from a
// generator keyed by (seed, b, c). Eval: identity permutations.
ShufflePlan make_shuffle_plan(Index batch, Index channels, Index frames, std::uint64_t seed, ShuffleMode mode);
ShufflePlan identity_plan(Index batch, Index channels, Index frames);

// Permutes the frame axis of a channels-major batch per (b, c).
FeatureBatch apply_shuffle(const FeatureBatch& x, const ShufflePlan& plan);

// Regroup, shuffle, gate each [S, H, W] slab, unshuffle, regroup back.
// Input and output are [(B*S), C, H, W].
Tensor md_forward(const Tensor& x, Index batch, const MdParams& params, const MdConfig& config,
                  const ShufflePlan& plan);

}  // namespace occmesh::md
