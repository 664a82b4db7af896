#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occmesh/gradcheck.hpp"
#include "occmesh/tensor.hpp"

// Spatial disentanglement: grouped, axis-pooled gating with a cross-branch
// spatial attention map.
namespace occmesh::sd {

struct SdConfig {
    Index channels = 32;
    Index groups = 4;
    // Group-norm groups over the C/G channels of one group; 0 selects C/G
    // (per-channel normalization).
    Index norm_groups = 0;
    // One parameter set for all groups, or one per group.
    bool share_params = true;

    Index group_channels() const { return channels / groups; }
    Index effective_norm_groups() const { return norm_groups > 0 ? norm_groups : group_channels(); }
    // Throws std::invalid_argument when G does not divide C or the norm
    // groups do not divide C/G.
    void validate() const;
};

// Parameters of one gating unit acting on Cg = C/G channels.
struct GateParams {
    Tensor w1x1;      // [Cg, Cg, 1, 1] over the concatenated axis descriptors
    Tensor w3x3;      // [Cg, Cg, 3, 3]
    Tensor gn_gamma;  // [Cg]
    Tensor gn_beta;   // [Cg]

    Index channels() const { return w1x1.dim(0); }
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) convolutions keyed by
    // (seed, prefix); unit scale, zero shift.
    static GateParams init(Index channels, std::uint64_t seed, const std::string& prefix);
    static GateParams zeros(Index channels);
    void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
    void set_requires_grad(bool on);
};

struct SdParams {
    std::vector<GateParams> sets;  // 1 when shared, G otherwise

    static SdParams init(const SdConfig& config, std::uint64_t seed, const std::string& prefix = "sd");
    static SdParams zeros(const SdConfig& config);
    std::vector<NamedTensor> named(const std::string& prefix = "sd") const;
    void set_requires_grad(bool on);
};

struct DirectionalOutput {
    Tensor gate_h;   // [M, Cg, H]
    Tensor gate_w;   // [M, Cg, W]
    Tensor branch1;  // [M, Cg, H, W]
};

// [C, H, W] -> [G, C/G, H, W] and [N, C, H, W] -> [N*G, C/G, H, W]. Group g,
// channel j holds input channel g*(C/G) + j.
Tensor split_groups(const Tensor& x, Index groups);
// Inverse of split_groups for a batch of `batch` samples (0 for the rank-3
// form).
Tensor merge_groups(const Tensor& grouped, Index groups, Index batch = 0);

// Per-channel mean over the width axis: [..., Cg, H, W] -> [..., Cg, H].
Tensor pool_height_descriptor(const Tensor& xg);
// Per-channel mean over the height axis: [..., Cg, H, W] -> [..., Cg, W].
Tensor pool_width_descriptor(const Tensor& xg);

// Inputs are batched: xg [M, Cg, H, W], zh [M, Cg, H], zw [M, Cg, W].
DirectionalOutput directional_interaction(const Tensor& xg, const Tensor& zh, const Tensor& zw,
                                          const GateParams& params, Index norm_groups);
Tensor local_interaction(const Tensor& xg, const GateParams& params);
// Attention logits [M, 1, H, W] from two [M, Cg, H, W] branches.
Tensor spatial_alignment(const Tensor& branch1, const Tensor& branch2);

// Full gating unit on [M, Cg, H, W]: xg * sigmoid(attn), attn broadcast over
// channels.
Tensor gate_features(const Tensor& xg, const GateParams& params, Index norm_groups);

// Shape-preserving block on [C, H, W] or [N, C, H, W].
Tensor sd_forward(const Tensor& x, const SdParams& params, const SdConfig& config);

}  // namespace occmesh::sd
