#pragma once

#include "occmesh/tensor.hpp"

namespace occmesh::losses {

struct LossWeights {
    double joints3d = 1.0;  // lambda_1
    double joints2d = 1.0;  // lambda_2
    double velocity = 1.0;  // lambda_3
    double vertices = 1.0;  // positional vertex term (extension)

    // lambda_1..3 = 1 and no positional vertex term.
    static LossWeights plain() { return {1.0, 1.0, 1.0, 0.0}; }
    // Throws std::invalid_argument on a negative weight.
    void validate() const;
};

struct LossBreakdown {
    double l3d = 0.0;
    double l2d = 0.0;
    double lv = 0.0;
    double lvert = 0.0;
    double total = 0.0;
};

// Divisor of the mean speed: K*T as printed, or K*(T-1) (one term per gap).
enum class SpeedNormalization { JointsTimesFrames, JointsTimesGaps };

enum class VelocitySource { Joints, Vertices };

struct VelocityOptions {
    SpeedNormalization normalization = SpeedNormalization::JointsTimesFrames;
    VelocitySource source = VelocitySource::Joints;
};

// Mean absolute difference over all elements; shapes must match exactly.
Tensor l1_joints3d(const Tensor& pred, const Tensor& gt);
Tensor l1_joints2d(const Tensor& pred, const Tensor& gt);
Tensor l1_vertices(const Tensor& pred, const Tensor& gt);

// points [T, K, 3] -> scalar: sum over t = 1..T-1 and all points of
// |p_t - p_{t-1}|, divided by K*T (or K*(T-1)). Throws for T < 2.
Tensor mean_speed(const Tensor& points, SpeedNormalization norm = SpeedNormalization::JointsTimesFrames);

// Batched mean speed over [N, T, K, 3] -> [N].
Tensor mean_speed_batched(const Tensor& points, SpeedNormalization norm = SpeedNormalization::JointsTimesFrames);

// pred/gt [(N*T), K, 3] holding N consecutive sequences of T frames. Mean
// over sequences of |V(pred_s) - V(gt_s)|; no frame pair straddles two
// sequences.
Tensor sequence_velocity_loss(const Tensor& pred, const Tensor& gt, Index frames,
                              SpeedNormalization norm = SpeedNormalization::JointsTimesFrames);

struct LossTerms {
    Tensor l3d, l2d, lv, lvert, total;
    LossBreakdown values() const;
};

// Weighted sum of the components. Zero-weighted terms are left out of the
// graph entirely; missing (empty) terms must carry zero weight.
LossTerms combine(const Tensor& l3d, const Tensor& l2d, const Tensor& lv, const Tensor& lvert,
                  const LossWeights& weights);

struct Targets {
    Tensor joints3d;    // [(N*T), K, 3]
    Tensor vertices3d;  // [(N*T), V, 3]
    Tensor joints2d;    // [(N*T), K, 2]
};

struct Predictions {
    Tensor joints3d;
    Tensor vertices3d;
    Tensor joints2d;
};

// Full training objective over N sequences of T frames.
LossTerms total_loss(const Predictions& pred, const Targets& gt, Index frames, const LossWeights& weights,
                     const VelocityOptions& velocity = {});

}  // namespace occmesh::losses
