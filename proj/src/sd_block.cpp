#include "occmesh/sd_block.hpp"

#include <cmath>
#include <stdexcept>

#include "occmesh/init.hpp"
#include "occmesh/ops.hpp"

namespace occmesh::sd {

void SdConfig::validate() const {
    if (channels < 1 || groups < 1) throw std::invalid_argument("SdConfig: channels and groups must be positive");
    if (channels % groups != 0) {
        throw std::invalid_argument("SdConfig: groups " + std::to_string(groups) + " must divide channels " +
                                    std::to_string(channels));
    }
    const Index ng = effective_norm_groups();
    if (ng < 1 || group_channels() % ng != 0) {
        throw std::invalid_argument("SdConfig: norm_groups " + std::to_string(ng) + " must divide C/G = " +
                                    std::to_string(group_channels()));
    }
}

GateParams GateParams::init(Index channels, std::uint64_t seed, const std::string& prefix) {
    GateParams p;
    const double c = static_cast<double>(channels);
    p.w1x1 = uniform_param({channels, channels, 1, 1}, 1.0 / std::sqrt(c), seed, prefix + ".w1x1");
    p.w3x3 = uniform_param({channels, channels, 3, 3}, 1.0 / std::sqrt(9.0 * c), seed, prefix + ".w3x3");
    p.gn_gamma = Tensor::full({channels}, 1.0);
    p.gn_beta = Tensor::zeros({channels});
    p.gn_gamma.set_requires_grad(true);
    p.gn_beta.set_requires_grad(true);
    return p;
}

GateParams GateParams::zeros(Index channels) {
    GateParams p;
    p.w1x1 = Tensor::zeros({channels, channels, 1, 1});
    p.w3x3 = Tensor::zeros({channels, channels, 3, 3});
    p.gn_gamma = Tensor::zeros({channels});
    p.gn_beta = Tensor::zeros({channels});
    return p;
}

void GateParams::append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".w1x1", w1x1});
    out.push_back({prefix + ".w3x3", w3x3});
    out.push_back({prefix + ".gn_gamma", gn_gamma});
    out.push_back({prefix + ".gn_beta", gn_beta});
}

void GateParams::set_requires_grad(bool on) {
    w1x1.set_requires_grad(on);
    w3x3.set_requires_grad(on);
    gn_gamma.set_requires_grad(on);
    gn_beta.set_requires_grad(on);
}

namespace {

std::string set_prefix(const std::string& prefix, const SdParams& p, std::size_t i) {
    return p.sets.size() == 1 ? prefix : prefix + ".g" + std::to_string(i);
}

}  // namespace

SdParams SdParams::init(const SdConfig& config, std::uint64_t seed, const std::string& prefix) {
    config.validate();
    SdParams p;
    const std::size_t n = config.share_params ? 1 : static_cast<std::size_t>(config.groups);
    p.sets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string name = n == 1 ? prefix : prefix + ".g" + std::to_string(i);
        p.sets[i] = GateParams::init(config.group_channels(), seed, name);
    }
    return p;
}

SdParams SdParams::zeros(const SdConfig& config) {
    config.validate();
    SdParams p;
    p.sets.assign(config.share_params ? 1 : static_cast<std::size_t>(config.groups),
                  GateParams{});
    for (auto& s : p.sets) s = GateParams::zeros(config.group_channels());
    return p;
}

std::vector<NamedTensor> SdParams::named(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < sets.size(); ++i) sets[i].append_named(set_prefix(prefix, *this, i), out);
    return out;
}

void SdParams::set_requires_grad(bool on) {
    for (auto& s : sets) s.set_requires_grad(on);
}

Tensor split_groups(const Tensor& x, Index groups) {
    if (x.rank() != 3 && x.rank() != 4) {
        throw ShapeError("split_groups: expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    }
    const Index C = x.dim(-3);
    if (groups < 1 || C % groups != 0) {
        throw ShapeError("split_groups: G=" + std::to_string(groups) + " does not divide C=" + std::to_string(C));
    }
    const Index n = x.rank() == 4 ? x.dim(0) : 1;
    return ops::reshape(x, {n * groups, C / groups, x.dim(-2), x.dim(-1)});
}

Tensor merge_groups(const Tensor& grouped, Index groups, Index batch) {
    if (grouped.rank() != 4) throw ShapeError("merge_groups: expected [M,Cg,H,W], got " + shape_str(grouped.shape()));
    const Index C = grouped.dim(1) * groups;
    if (batch == 0) {
        if (grouped.dim(0) != groups) throw ShapeError("merge_groups: leading axis != G");
        return ops::reshape(grouped, {C, grouped.dim(2), grouped.dim(3)});
    }
    if (grouped.dim(0) != batch * groups) throw ShapeError("merge_groups: leading axis != N*G");
    return ops::reshape(grouped, {batch, C, grouped.dim(2), grouped.dim(3)});
}

Tensor pool_height_descriptor(const Tensor& xg) { return ops::avg_pool_axis(xg, -1); }

Tensor pool_width_descriptor(const Tensor& xg) { return ops::avg_pool_axis(xg, -2); }

DirectionalOutput directional_interaction(const Tensor& xg, const Tensor& zh, const Tensor& zw,
                                          const GateParams& params, Index norm_groups) {
    const Index M = xg.dim(0), Cg = xg.dim(1), H = xg.dim(2), W = xg.dim(3);
    if (zh.shape() != Shape{M, Cg, H} || zw.shape() != Shape{M, Cg, W}) {
        throw ShapeError("directional_interaction: descriptors " + shape_str(zh.shape()) + ", " +
                         shape_str(zw.shape()) + " do not match feature " + shape_str(xg.shape()));
    }
    Tensor cat = ops::reshape(ops::concat({zh, zw}, 2), {M, Cg, 1, H + W});
    Tensor mixed = ops::reshape(ops::conv2d(cat, params.w1x1), {M, Cg, H + W});
    DirectionalOutput out;
    out.gate_h = ops::sigmoid(ops::slice(mixed, 2, 0, H));
    out.gate_w = ops::sigmoid(ops::slice(mixed, 2, H, W));
    Tensor gated = ops::mul(ops::mul(xg, ops::reshape(out.gate_h, {M, Cg, H, 1})),
                            ops::reshape(out.gate_w, {M, Cg, 1, W}));
    out.branch1 = ops::group_norm(gated, norm_groups, params.gn_gamma, params.gn_beta);
    return out;
}

Tensor local_interaction(const Tensor& xg, const GateParams& params) { return ops::conv2d(xg, params.w3x3); }

Tensor spatial_alignment(const Tensor& branch1, const Tensor& branch2) {
    if (branch1.shape() != branch2.shape() || branch1.rank() != 4) {
        throw ShapeError("spatial_alignment: branches " + shape_str(branch1.shape()) + " and " +
                         shape_str(branch2.shape()) + " must both be [M,Cg,H,W]");
    }
    const Index M = branch1.dim(0), Cg = branch1.dim(1), H = branch1.dim(2), W = branch1.dim(3);
    auto descriptor = [&](const Tensor& b) {
        return ops::reshape(ops::softmax(ops::global_avg_pool_2d(b), 1), {M, 1, Cg});
    };
    Tensor flat1 = ops::reshape(branch1, {M, Cg, H * W});
    Tensor flat2 = ops::reshape(branch2, {M, Cg, H * W});
    Tensor m1 = ops::matmul(descriptor(branch1), flat2);
    Tensor m2 = ops::matmul(descriptor(branch2), flat1);
    return ops::reshape(ops::add(m1, m2), {M, 1, H, W});
}

Tensor gate_features(const Tensor& xg, const GateParams& params, Index norm_groups) {
    if (xg.rank() != 4 || xg.dim(1) != params.channels()) {
        throw ShapeError("gate_features: expected [M," + std::to_string(params.channels()) + ",H,W], got " +
                         shape_str(xg.shape()));
    }
    DirectionalOutput d =
        directional_interaction(xg, pool_height_descriptor(xg), pool_width_descriptor(xg), params, norm_groups);
    Tensor attn = spatial_alignment(d.branch1, local_interaction(xg, params));
    return ops::mul(xg, ops::sigmoid(attn));
}

Tensor sd_forward(const Tensor& x, const SdParams& params, const SdConfig& config) {
    config.validate();
    if ((x.rank() != 3 && x.rank() != 4) || x.dim(-3) != config.channels) {
        throw ShapeError("sd_forward: expected [" + std::to_string(config.channels) + ",H,W] (optionally batched), got " +
                         shape_str(x.shape()));
    }
    const std::size_t expected_sets = config.share_params ? 1 : static_cast<std::size_t>(config.groups);
    if (params.sets.size() != expected_sets) throw std::invalid_argument("sd_forward: parameter sets do not match config");
    const Index G = config.groups;
    const Index ng = config.effective_norm_groups();
    const Index N = x.rank() == 4 ? x.dim(0) : 0;
    Tensor xg = split_groups(x, G);
    Tensor y;
    if (config.share_params) {
        y = gate_features(xg, params.sets[0], ng);
    } else {
        const Index n = std::max<Index>(N, 1);
        const Index Cg = config.group_channels(), H = x.dim(-2), W = x.dim(-1);
        Tensor by_group = ops::reshape(xg, {n, G, Cg, H, W});
        std::vector<Tensor> parts;
        for (Index g = 0; g < G; ++g) {
            Tensor part = ops::reshape(ops::slice(by_group, 1, g, 1), {n, Cg, H, W});
            parts.push_back(ops::reshape(gate_features(part, params.sets[g], ng), {n, 1, Cg, H, W}));
        }
        y = ops::reshape(ops::concat(parts, 1), {n * G, Cg, H, W});
    }
    return merge_groups(y, G, N);
}

}  // namespace occmesh::sd
