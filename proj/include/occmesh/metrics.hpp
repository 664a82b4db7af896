#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

namespace occmesh::metrics {

// K x 3 point cloud, millimetres.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct ProcrustesTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    double scale = 1.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    // Set when either cloud has zero spread; the transform is then a pure
    // translation between centroids.
    bool degenerate = false;

    Points apply(const Points& p) const;
};

struct ProcrustesResult {
    ProcrustesTransform transform;
    Points aligned;
};

// Mean Euclidean distance between corresponding rows.
double mpjpe(const Points& pred, const Points& gt);
double mpvpe(const Points& pred_vertices, const Points& gt_vertices);

// Similarity transform minimizing sum |s R pred_i + t - gt_i|^2 with a proper
// rotation (det R = +1).
ProcrustesResult procrustes_align(const Points& pred, const Points& gt);
double pa_mpjpe(const Points& pred, const Points& gt);

// Mean over interior frames and joints of |a_pred - a_gt| where
// a_t = (p_{t+1} - 2 p_t + p_{t-1}) * fps^2. Needs T >= 3.
double accel_error(std::span<const Points> pred, std::span<const Points> gt, double fps);

struct SequenceMetrics {
    double mpjpe = 0.0;
    double pa_mpjpe = 0.0;
    double mpvpe = 0.0;
    double accel_error = 0.0;
    std::size_t frames = 0;
};

struct MetricReport {
    // Per-frame means over every frame of every sequence (mm).
    double mpjpe = 0.0;
    double pa_mpjpe = 0.0;
    double mpvpe = 0.0;
    // Mean over sequences (mm/s^2).
    double accel_error = 0.0;
    std::vector<SequenceMetrics> per_sequence;
};

struct SequencePrediction {
    std::vector<Points> joints;
    std::vector<Points> vertices;
};

SequenceMetrics evaluate_sequence(const SequencePrediction& pred, const SequencePrediction& gt, double fps);
// Aggregates per-sequence results in order.
MetricReport aggregate(std::vector<SequenceMetrics> per_sequence);

}  // namespace occmesh::metrics
