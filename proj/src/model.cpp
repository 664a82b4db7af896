#include "occmesh/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "occmesh/init.hpp"
#include "occmesh/ops.hpp"

namespace occmesh::model {

void ModelConfig::validate() const {
    if (image_size < 8 || image_size % 8 != 0) throw std::invalid_argument("ModelConfig: image_size must be a multiple of 8");
    if (joints < 1 || vertices < 1) throw std::invalid_argument("ModelConfig: joints and vertices must be >= 1");
    if (heads < 1 || model_dim % heads != 0) throw std::invalid_argument("ModelConfig: model_dim must be divisible by heads");
    if (layers < 0 || ffn_mult < 1) throw std::invalid_argument("ModelConfig: bad encoder shape");
    if (sd.channels != feature_channels) throw std::invalid_argument("ModelConfig: sd.channels must equal feature_channels");
    if (sd_enabled) sd.validate();
    if (md_enabled) md.validate();
    if (!template_points.empty() && static_cast<Index>(template_points.size()) != queries() * 3) {
        throw std::invalid_argument("ModelConfig: template must hold (joints + vertices) * 3 values");
    }
}

namespace {

Tensor trainable_full(const Shape& s, double v) {
    Tensor t = Tensor::full(s, v);
    t.set_requires_grad(true);
    return t;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Shape bs(static_cast<std::size_t>(x.rank()), 1);
    bs.back() = b.numel();
    return ops::add(ops::matmul(x, w), ops::reshape(b, bs));
}

Tensor encoder_layer(const Tensor& x, const EncoderLayer& p, Index heads) {
    const Index Nb = x.dim(0), T = x.dim(1), D = x.dim(2);
    const Index dh = D / heads;
    Tensor h = ops::layer_norm(x, p.ln1_gamma, p.ln1_beta);
    Tensor qkv = linear(h, p.w_qkv, p.b_qkv);
    auto split_heads = [&](Index part) {
        Tensor t = ops::reshape(ops::slice(qkv, 2, part * D, D), {Nb, T, heads, dh});
        return ops::reshape(ops::permute(t, {0, 2, 1, 3}), {Nb * heads, T, dh});
    };
    Tensor q = split_heads(0), k = split_heads(1), v = split_heads(2);
    Tensor attn = ops::softmax(ops::scale(ops::matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
    Tensor ctx = ops::reshape(ops::matmul(attn, v), {Nb, heads, T, dh});
    ctx = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {Nb, T, D});
    Tensor y = ops::add(x, linear(ctx, p.w_out, p.b_out));
    Tensor h2 = ops::layer_norm(y, p.ln2_gamma, p.ln2_beta);
    Tensor ff = linear(ops::gelu(linear(h2, p.w_ff1, p.b_ff1)), p.w_ff2, p.b_ff2);
    return ops::add(y, ff);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    const Index C = config.feature_channels, D = config.model_dim, Q = config.queries();
    const Index hw = config.feature_size() * config.feature_size();
    const Index chans[4] = {config.image_channels, config.backbone_channels[0], config.backbone_channels[1], C};
    for (int l = 0; l < 3; ++l) {
        const std::string name = "backbone." + std::to_string(l);
        const double bound = 1.0 / std::sqrt(static_cast<double>(chans[l] * 9));
        p.backbone.push_back({uniform_param({chans[l + 1], chans[l], 3, 3}, bound, seed, name + ".weight"),
                              trainable_full({chans[l + 1]}, 0.0)});
    }
    if (config.sd_enabled) p.sd = sd::SdParams::init(config.sd, seed, "sd");
    if (config.md_enabled) p.md = md::MdParams::init(config.md, seed, "md");

    auto lin = [&](Index in, Index out, const std::string& name) {
        return uniform_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), seed, name);
    };
    p.token_proj = lin(C, D, "token_proj");
    p.token_bias = trainable_full({D}, 0.0);
    p.pos_embed = uniform_param({hw, D}, 0.1, seed, "pos_embed");
    p.queries = uniform_param({Q, D}, 1.0, seed, "queries");
    const Index F = D * config.ffn_mult;
    for (Index l = 0; l < config.layers; ++l) {
        const std::string n = "encoder." + std::to_string(l);
        EncoderLayer e;
        e.ln1_gamma = trainable_full({D}, 1.0);
        e.ln1_beta = trainable_full({D}, 0.0);
        e.w_qkv = lin(D, 3 * D, n + ".w_qkv");
        e.b_qkv = trainable_full({3 * D}, 0.0);
        e.w_out = lin(D, D, n + ".w_out");
        e.b_out = trainable_full({D}, 0.0);
        e.ln2_gamma = trainable_full({D}, 1.0);
        e.ln2_beta = trainable_full({D}, 0.0);
        e.w_ff1 = lin(D, F, n + ".w_ff1");
        e.b_ff1 = trainable_full({F}, 0.0);
        e.w_ff2 = lin(F, D, n + ".w_ff2");
        e.b_ff2 = trainable_full({D}, 0.0);
        p.layers.push_back(std::move(e));
    }
    p.final_ln_gamma = trainable_full({D}, 1.0);
    p.final_ln_beta = trainable_full({D}, 0.0);
    if (config.zero_init_heads) {
        p.head_w = trainable_full({D, 3}, 0.0);
        p.head_b = trainable_full({3}, 0.0);
        p.camera_w = trainable_full({C, 3}, 0.0);
        p.camera_b = trainable_full({3}, 0.0);
    } else {
        p.head_w = lin(D, 3, "head_w");
        p.head_b = uniform_param({3}, 0.1, seed, "head_b");
        p.camera_w = lin(C, 3, "camera_w");
        p.camera_b = uniform_param({3}, 0.1, seed, "camera_b");
    }
    std::vector<double> tmpl = config.template_points;
    if (tmpl.empty()) tmpl.assign(static_cast<std::size_t>(Q * 3), 0.0);
    p.template_points = Tensor({Q, 3}, std::move(tmpl));
    return p;
}

std::vector<NamedTensor> ModelParams::named() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < backbone.size(); ++l) {
        const std::string n = "backbone." + std::to_string(l);
        out.push_back({n + ".weight", backbone[l].weight});
        out.push_back({n + ".bias", backbone[l].bias});
    }
    if (sd) {
        auto v = sd->named("sd");
        out.insert(out.end(), v.begin(), v.end());
    }
    if (md) {
        auto v = md->named("md");
        out.insert(out.end(), v.begin(), v.end());
    }
    out.push_back({"token_proj", token_proj});
    out.push_back({"token_bias", token_bias});
    out.push_back({"pos_embed", pos_embed});
    out.push_back({"queries", queries});
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string n = "encoder." + std::to_string(l);
        const auto& e = layers[l];
        out.push_back({n + ".ln1_gamma", e.ln1_gamma});
        out.push_back({n + ".ln1_beta", e.ln1_beta});
        out.push_back({n + ".w_qkv", e.w_qkv});
        out.push_back({n + ".b_qkv", e.b_qkv});
        out.push_back({n + ".w_out", e.w_out});
        out.push_back({n + ".b_out", e.b_out});
        out.push_back({n + ".ln2_gamma", e.ln2_gamma});
        out.push_back({n + ".ln2_beta", e.ln2_beta});
        out.push_back({n + ".w_ff1", e.w_ff1});
        out.push_back({n + ".b_ff1", e.b_ff1});
        out.push_back({n + ".w_ff2", e.w_ff2});
        out.push_back({n + ".b_ff2", e.b_ff2});
    }
    out.push_back({"final_ln_gamma", final_ln_gamma});
    out.push_back({"final_ln_beta", final_ln_beta});
    out.push_back({"head_w", head_w});
    out.push_back({"head_b", head_b});
    out.push_back({"camera_w", camera_w});
    out.push_back({"camera_b", camera_b});
    out.push_back({"template", template_points});
    return out;
}

std::vector<NamedTensor> ModelParams::trainable() const {
    std::vector<NamedTensor> out;
    for (auto& nt : named()) {
        if (nt.tensor.requires_grad()) out.push_back(std::move(nt));
    }
    return out;
}

Index ModelParams::parameter_count() const {
    Index n = 0;
    for (const auto& nt : trainable()) n += nt.tensor.numel();
    return n;
}

Tensor project_weak_perspective(const Tensor& joints3d, const Tensor& camera) {
    if (joints3d.rank() != 3 || joints3d.dim(2) != 3 || camera.shape() != Shape{joints3d.dim(0), 3}) {
        throw ShapeError("project_weak_perspective: joints " + shape_str(joints3d.shape()) + " / camera " +
                         shape_str(camera.shape()));
    }
    const Index N = joints3d.dim(0);
    Tensor xy = ops::slice(joints3d, 2, 0, 2);
    Tensor s = ops::reshape(ops::slice(camera, 1, 0, 1), {N, 1, 1});
    Tensor t = ops::reshape(ops::slice(camera, 1, 1, 2), {N, 1, 2});
    return ops::add(ops::mul(xy, s), t);
}

Tensor extract_features(const Tensor& images, const ModelParams& params) {
    if (images.rank() != 4) throw ShapeError("extract_features: expected [N,ch,H,W], got " + shape_str(images.shape()));
    if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0) {
        throw ShapeError("extract_features: image extents must be multiples of 8, got " + shape_str(images.shape()));
    }
    Tensor x = images;
    for (const auto& layer : params.backbone) {
        Tensor y = ops::conv2d(x, layer.weight, 2);
        y = ops::add(y, ops::reshape(layer.bias, {1, layer.bias.numel(), 1, 1}));
        x = ops::gelu(y);
    }
    return x;
}

Tensor disentangle(const Tensor& features, Index batch, const ModelParams& params, const ModelConfig& config,
                   const md::ShufflePlan& plan, ForwardTaps* taps) {
    const bool use_sd = config.sd_enabled && params.sd.has_value();
    const bool use_md = config.md_enabled && params.md.has_value();
    if (config.sd_enabled != use_sd || config.md_enabled != use_md) {
        throw std::invalid_argument("disentangle: enabled block has no parameters");
    }
    if (taps) taps->backbone = features;
    Tensor out = features;
    if (config.order == BlockOrder::Parallel && use_sd && use_md) {
        Tensor a = sd::sd_forward(features, *params.sd, config.sd);
        Tensor b = md::md_forward(features, batch, *params.md, config.md, plan);
        if (taps) {
            taps->post_sd = a;
            taps->post_md = b;
        }
        return ops::scale(ops::add(a, b), 0.5);
    }
    if (use_sd) out = sd::sd_forward(out, *params.sd, config.sd);
    if (taps) taps->post_sd = out;
    if (use_md) out = md::md_forward(out, batch, *params.md, config.md, plan);
    if (taps) taps->post_md = out;
    return out;
}

MeshOutput forward(const Tensor& images, Index batch, const ModelParams& params, const ModelConfig& config,
                   const md::ShufflePlan& plan, ForwardTaps* taps) {
    config.validate();
    if (images.rank() != 4 || images.dim(1) != config.image_channels || images.dim(2) != config.image_size ||
        images.dim(3) != config.image_size) {
        throw ShapeError("forward: images " + shape_str(images.shape()) + " do not match the configured " +
                         std::to_string(config.image_size) + "x" + std::to_string(config.image_size) + " input");
    }
    const Index N = images.dim(0);
    Tensor feat = disentangle(extract_features(images, params), batch, params, config, plan, taps);
    const Index C = feat.dim(1), hw = feat.dim(2) * feat.dim(3), D = config.model_dim, Q = config.queries();

    Tensor grid = ops::permute(ops::reshape(feat, {N, C, hw}), {0, 2, 1});
    grid = ops::add(linear(grid, params.token_proj, params.token_bias), ops::reshape(params.pos_embed, {1, hw, D}));
    Tensor query = ops::add(Tensor::zeros({N, Q, D}), ops::reshape(params.queries, {1, Q, D}));
    Tensor tokens = ops::concat({grid, query}, 1);
    for (const auto& layer : params.layers) tokens = encoder_layer(tokens, layer, config.heads);
    tokens = ops::layer_norm(tokens, params.final_ln_gamma, params.final_ln_beta);

    Tensor offsets = linear(ops::slice(tokens, 1, hw, Q), params.head_w, params.head_b);
    Tensor points = ops::add(ops::scale(offsets, config.output_scale), ops::reshape(params.template_points, {1, Q, 3}));

    MeshOutput out;
    out.joints3d = ops::slice(points, 1, 0, config.joints);
    out.vertices3d = ops::slice(points, 1, config.joints, config.vertices);
    Tensor cam_raw = linear(ops::global_avg_pool_2d(feat), params.camera_w, params.camera_b);
    const auto& cs = config.camera_scale;
    const auto& cp = config.camera_prior;
    out.camera = ops::add(ops::mul(cam_raw, Tensor({1, 3}, {cs[0], cs[1], cs[2]})), Tensor({1, 3}, {cp[0], cp[1], cp[2]}));
    out.joints2d = project_weak_perspective(out.joints3d, out.camera);
    return out;
}

}  // namespace occmesh::model
