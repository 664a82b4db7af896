#include "occmesh/losses.hpp"

#include <stdexcept>
#include <string>

#include "occmesh/ops.hpp"

namespace occmesh::losses {

void LossWeights::validate() const {
    if (joints3d < 0.0 || joints2d < 0.0 || velocity < 0.0 || vertices < 0.0) {
        throw std::invalid_argument("LossWeights: weights must be non-negative");
    }
}

namespace {

Tensor l1(const char* name, const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError(std::string(name) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(gt.shape()));
    }
    return ops::mean(ops::abs(ops::sub(pred, gt)));
}

}  // namespace

Tensor l1_joints3d(const Tensor& pred, const Tensor& gt) { return l1("l1_joints3d", pred, gt); }
Tensor l1_joints2d(const Tensor& pred, const Tensor& gt) { return l1("l1_joints2d", pred, gt); }
Tensor l1_vertices(const Tensor& pred, const Tensor& gt) { return l1("l1_vertices", pred, gt); }

Tensor mean_speed_batched(const Tensor& points, SpeedNormalization norm) {
    if (points.rank() != 4 || points.dim(3) != 3) {
        throw ShapeError("mean_speed: expected [N,T,K,3], got " + shape_str(points.shape()));
    }
    const Index N = points.dim(0), T = points.dim(1), K = points.dim(2);
    if (T < 2) throw std::invalid_argument("mean_speed: needs at least 2 frames, got " + std::to_string(T));
    Tensor step = ops::sub(ops::slice(points, 1, 1, T - 1), ops::slice(points, 1, 0, T - 1));
    Tensor dist = ops::reshape(ops::norm_last(step), {N, (T - 1) * K});
    const double frames = norm == SpeedNormalization::JointsTimesFrames ? static_cast<double>(T)
                                                                        : static_cast<double>(T - 1);
    return ops::scale(ops::sum_axis(dist, 1), 1.0 / (static_cast<double>(K) * frames));
}

Tensor mean_speed(const Tensor& points, SpeedNormalization norm) {
    if (points.rank() != 3) throw ShapeError("mean_speed: expected [T,K,3], got " + shape_str(points.shape()));
    Shape s = points.shape();
    s.insert(s.begin(), 1);
    return ops::reshape(mean_speed_batched(ops::reshape(points, s), norm), {});
}

Tensor sequence_velocity_loss(const Tensor& pred, const Tensor& gt, Index frames, SpeedNormalization norm) {
    if (pred.shape() != gt.shape() || pred.rank() != 3 || frames < 2 || pred.dim(0) % frames != 0) {
        throw ShapeError("sequence_velocity_loss: prediction " + shape_str(pred.shape()) + " and target " +
                         shape_str(gt.shape()) + " must be [(N*T),K,3] with T=" + std::to_string(frames));
    }
    const Shape seq{pred.dim(0) / frames, frames, pred.dim(1), pred.dim(2)};
    Tensor vp = mean_speed_batched(ops::reshape(pred, seq), norm);
    Tensor vg = mean_speed_batched(ops::reshape(gt, seq), norm);
    return ops::mean(ops::abs(ops::sub(vp, vg)));
}

LossBreakdown LossTerms::values() const {
    auto v = [](const Tensor& t) { return t.numel() == 1 ? t.item() : 0.0; };
    return {v(l3d), v(l2d), v(lv), v(lvert), v(total)};
}

LossTerms combine(const Tensor& l3d, const Tensor& l2d, const Tensor& lv, const Tensor& lvert,
                  const LossWeights& weights) {
    weights.validate();
    LossTerms t{l3d, l2d, lv, lvert, Tensor::scalar(0.0)};
    const std::pair<const Tensor*, double> parts[] = {
        {&l3d, weights.joints3d}, {&l2d, weights.joints2d}, {&lv, weights.velocity}, {&lvert, weights.vertices}};
    bool first = true;
    for (const auto& [term, w] : parts) {
        if (w == 0.0) continue;
        if (term->numel() != 1) throw ShapeError("combine: loss components must be scalars");
        Tensor weighted = w == 1.0 ? *term : ops::scale(*term, w);
        t.total = first ? weighted : ops::add(t.total, weighted);
        first = false;
    }
    return t;
}

LossTerms total_loss(const Predictions& pred, const Targets& gt, Index frames, const LossWeights& weights,
                     const VelocityOptions& velocity) {
    weights.validate();
    Tensor l3d = l1_joints3d(pred.joints3d, gt.joints3d);
    Tensor l2d = l1_joints2d(pred.joints2d, gt.joints2d);
    Tensor lvert = l1_vertices(pred.vertices3d, gt.vertices3d);
    Tensor lv;
    if (velocity.source == VelocitySource::Joints) {
        lv = sequence_velocity_loss(pred.joints3d, gt.joints3d, frames, velocity.normalization);
    } else {
        lv = sequence_velocity_loss(pred.vertices3d, gt.vertices3d, frames, velocity.normalization);
    }
    return combine(l3d, l2d, lv, lvert, weights);
}

}  // namespace occmesh::losses
