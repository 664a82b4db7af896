#include "occmesh/md_block.hpp"

#include <numeric>
#include <stdexcept>

#include "occmesh/ops.hpp"
#include "occmesh/rng.hpp"

namespace occmesh::md {

FeatureBatch FeatureBatch::frames_major(Tensor t, Index batch, Index frames) {
    if (t.rank() != 4 || batch < 1 || frames < 1 || t.dim(0) != batch * frames) {
        throw ShapeError("FeatureBatch: leading axis of " + shape_str(t.shape()) + " must equal B*S = " +
                         std::to_string(batch) + "*" + std::to_string(frames));
    }
    FeatureBatch fb;
    fb.channels = t.dim(1);
    fb.tensor = std::move(t);
    fb.layout = Layout::FramesMajor;
    fb.batch = batch;
    fb.frames = frames;
    return fb;
}

bool ShufflePlan::is_identity() const {
    for (const auto& p : perms) {
        for (std::size_t s = 0; s < p.size(); ++s) {
            if (p[s] != static_cast<int>(s)) return false;
        }
    }
    return true;
}

ShufflePlan ShufflePlan::inverse() const {
    ShufflePlan inv = *this;
    for (std::size_t r = 0; r < perms.size(); ++r) {
        for (std::size_t s = 0; s < perms[r].size(); ++s) inv.perms[r][static_cast<std::size_t>(perms[r][s])] = static_cast<int>(s);
    }
    return inv;
}

sd::SdConfig MdConfig::gate_config() const {
    sd::SdConfig c;
    c.channels = frames;
    c.groups = groups;
    c.norm_groups = 0;
    c.share_params = true;
    return c;
}

void MdConfig::validate() const {
    if (frames < 2) throw std::invalid_argument("MdConfig: frames per sequence must be >= 2");
    if (groups < 1 || frames % groups != 0) {
        throw std::invalid_argument("MdConfig: groups " + std::to_string(groups) + " must divide frames " +
                                    std::to_string(frames));
    }
}

MdParams MdParams::init(const MdConfig& config, std::uint64_t seed, const std::string& prefix) {
    config.validate();
    MdParams p;
    p.sets.push_back(sd::GateParams::init(config.group_frames(), seed, prefix));
    return p;
}

MdParams MdParams::zeros(const MdConfig& config) {
    config.validate();
    MdParams p;
    p.sets.push_back(sd::GateParams::zeros(config.group_frames()));
    return p;
}

std::vector<NamedTensor> MdParams::named(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (const auto& s : sets) s.append_named(prefix, out);
    return out;
}

void MdParams::set_requires_grad(bool on) {
    for (auto& s : sets) s.set_requires_grad(on);
}

FeatureBatch temporal_regroup(const FeatureBatch& x) {
    if (x.layout != Layout::FramesMajor) throw ShapeError("temporal_regroup: input is not frames-major");
    const Index B = x.batch, S = x.frames;
    const Tensor& t = x.tensor;
    if (t.rank() != 4 || t.dim(0) != B * S) {
        throw ShapeError("temporal_regroup: leading axis of " + shape_str(t.shape()) + " != B*S");
    }
    const Index C = t.dim(1), H = t.dim(2), W = t.dim(3);
    FeatureBatch out = x;
    out.tensor = ops::reshape(ops::permute(ops::reshape(t, {B, S, C, H, W}), {0, 2, 1, 3, 4}), {B * C, S, H, W});
    out.layout = Layout::ChannelsMajor;
    out.channels = C;
    return out;
}

FeatureBatch inverse_regroup(const FeatureBatch& x) {
    if (x.layout != Layout::ChannelsMajor) throw ShapeError("inverse_regroup: input is not channels-major");
    const Index B = x.batch, C = x.channels;
    const Tensor& t = x.tensor;
    if (t.rank() != 4 || t.dim(0) != B * C) {
        throw ShapeError("inverse_regroup: leading axis of " + shape_str(t.shape()) + " != B*C");
    }
    const Index S = t.dim(1), H = t.dim(2), W = t.dim(3);
    FeatureBatch out = x;
    out.tensor = ops::reshape(ops::permute(ops::reshape(t, {B, C, S, H, W}), {0, 2, 1, 3, 4}), {B * S, C, H, W});
    out.layout = Layout::FramesMajor;
    out.frames = S;
    return out;
}

ShufflePlan identity_plan(Index batch, Index channels, Index frames) {
    return make_shuffle_plan(batch, channels, frames, 0, ShuffleMode::Eval);
}

ShufflePlan make_shuffle_plan(Index batch, Index channels, Index frames, std::uint64_t seed, ShuffleMode mode) {
    if (frames < 1) throw std::invalid_argument("make_shuffle_plan: frames must be >= 1");
    ShufflePlan plan;
    plan.batch = batch;
    plan.channels = channels;
    plan.frames = frames;
    plan.seed = seed;
    plan.mode = mode;
    plan.perms.resize(static_cast<std::size_t>(batch * channels));
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < channels; ++c) {
            auto& p = plan.perms[static_cast<std::size_t>(b * channels + c)];
            p.resize(static_cast<std::size_t>(frames));
            std::iota(p.begin(), p.end(), 0);
            if (mode == ShuffleMode::Eval) continue;
            KeyedRng rng{seed, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(c)};
            for (Index i = frames - 1; i > 0; --i) {
                const auto j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
                std::swap(p[static_cast<std::size_t>(i)], p[j]);
            }
        }
    }
    return plan;
}

FeatureBatch apply_shuffle(const FeatureBatch& x, const ShufflePlan& plan) {
    if (x.layout != Layout::ChannelsMajor) throw ShapeError("apply_shuffle: input is not channels-major");
    if (plan.batch != x.batch || plan.channels != x.channels || plan.frames != x.tensor.dim(1)) {
        throw ShapeError("apply_shuffle: plan (B=" + std::to_string(plan.batch) + ", C=" +
                         std::to_string(plan.channels) + ", S=" + std::to_string(plan.frames) +
                         ") does not match batch " + shape_str(x.tensor.shape()));
    }
    FeatureBatch out = x;
    out.tensor = ops::gather_axis1(x.tensor, plan.perms);
    return out;
}

Tensor md_forward(const Tensor& x, Index batch, const MdParams& params, const MdConfig& config,
                  const ShufflePlan& plan) {
    config.validate();
    if (x.rank() != 4 || batch < 1 || x.dim(0) != batch * config.frames) {
        throw ShapeError("md_forward: expected [(B*S),C,H,W] with B=" + std::to_string(batch) +
                         ", S=" + std::to_string(config.frames) + ", got " + shape_str(x.shape()));
    }
    if (params.sets.size() != 1 || params.sets[0].channels() != config.group_frames()) {
        throw std::invalid_argument("md_forward: parameters do not match config");
    }
    FeatureBatch fb = temporal_regroup(FeatureBatch::frames_major(x, batch, config.frames));
    const bool shuffled = config.shuffle && !plan.is_identity();
    if (shuffled) fb = apply_shuffle(fb, plan);

    const Index R = fb.tensor.dim(0), S = config.frames, H = x.dim(2), W = x.dim(3);
    const Index Gm = config.groups;
    Tensor slabs = ops::reshape(fb.tensor, {R * Gm, S / Gm, H, W});
    Tensor gated = sd::gate_features(slabs, params.sets[0], config.gate_config().effective_norm_groups());
    fb.tensor = ops::reshape(gated, {R, S, H, W});

    if (shuffled) fb = apply_shuffle(fb, plan.inverse());
    return inverse_regroup(fb).tensor;
}

}  // namespace occmesh::md
