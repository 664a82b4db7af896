#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "occmesh/gradcheck.hpp"
#include "occmesh/md_block.hpp"
#include "occmesh/sd_block.hpp"
#include "occmesh/tensor.hpp"

namespace occmesh::model {

enum class BlockOrder { Sequential, Parallel };

struct ModelConfig {
    Index image_size = 64;
    Index image_channels = 1;
    // Channels of the two intermediate stride-2 layers; the third produces
    // feature_channels.
    std::array<Index, 2> backbone_channels{8, 16};
    Index feature_channels = 32;
    Index joints = 14;
    Index vertices = 32;
    Index layers = 2;
    Index heads = 2;
    Index model_dim = 64;
    Index ffn_mult = 4;
    sd::SdConfig sd;
    md::MdConfig md;
    bool sd_enabled = true;
    bool md_enabled = true;
    BlockOrder order = BlockOrder::Sequential;
    // Millimetres per unit of head output.
    double output_scale = 100.0;
    bool zero_init_heads = true;
    // (s, tx, ty) produced by the camera head at initialization.
    std::array<double, 3> camera_prior{1.0, 0.0, 0.0};
    // Per-unit scaling of the camera head's linear output.
    std::array<double, 3> camera_scale{1.0, 1.0, 1.0};
    // (joints + vertices) x 3 rest positions in mm, joints first. Empty
    // means the origin.
    std::vector<double> template_points;

    Index feature_size() const { return image_size / 8; }
    Index queries() const { return joints + vertices; }
    void validate() const;
};

struct ConvLayer {
    Tensor weight;  // [Cout, Cin, 3, 3]
    Tensor bias;    // [Cout]
};

struct EncoderLayer {
    Tensor ln1_gamma, ln1_beta;
    Tensor w_qkv, b_qkv;  // [D, 3D], [3D]
    Tensor w_out, b_out;  // [D, D], [D]
    Tensor ln2_gamma, ln2_beta;
    Tensor w_ff1, b_ff1;  // [D, mD], [mD]
    Tensor w_ff2, b_ff2;  // [mD, D], [D]
};

struct ModelParams {
    std::vector<ConvLayer> backbone;
    std::optional<sd::SdParams> sd;
    std::optional<md::MdParams> md;
    Tensor token_proj, token_bias;  // [C, D], [D]
    Tensor pos_embed;               // [h*w, D]
    Tensor queries;                 // [K+V, D]
    std::vector<EncoderLayer> layers;
    Tensor final_ln_gamma, final_ln_beta;
    Tensor head_w, head_b;      // [D, 3], [3]
    Tensor camera_w, camera_b;  // [C, 3], [3]
    Tensor template_points;     // [K+V, 3], not trained

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    // Every tensor, trainable or not, in a fixed order.
    std::vector<NamedTensor> named() const;
    std::vector<NamedTensor> trainable() const;
    Index parameter_count() const;
};

struct MeshOutput {
    Tensor joints3d;    // [B*S, K, 3]
    Tensor vertices3d;  // [B*S, V, 3]
    Tensor camera;      // [B*S, 3] = (s, tx, ty)
    Tensor joints2d;    // [B*S, K, 2]
};

// Feature maps captured along the way, for inspection.
struct ForwardTaps {
    Tensor backbone;
    Tensor post_sd;
    Tensor post_md;
};

// Weak perspective: (u, v) = s * (x, y) + (tx, ty). joints [N, K, 3],
// camera [N, 3].
Tensor project_weak_perspective(const Tensor& joints3d, const Tensor& camera);

// Images [(B*S), ch, Hi, Wi] -> features [(B*S), C, Hi/8, Wi/8].
Tensor extract_features(const Tensor& images, const ModelParams& params);

// SD then MD (or both in parallel, averaged), honouring the enable flags.
Tensor disentangle(const Tensor& features, Index batch, const ModelParams& params, const ModelConfig& config,
                   const md::ShufflePlan& plan, ForwardTaps* taps = nullptr);

MeshOutput forward(const Tensor& images, Index batch, const ModelParams& params, const ModelConfig& config,
                   const md::ShufflePlan& plan, ForwardTaps* taps = nullptr);

}  // namespace occmesh::model
