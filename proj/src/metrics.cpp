#include "occmesh/metrics.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <stdexcept>
#include <string>

namespace occmesh::metrics {

namespace {

void require_same(const Points& a, const Points& b, const char* op) {
    if (a.rows() != b.rows()) {
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(a.rows()) + " predicted vs " +
                                    std::to_string(b.rows()) + " ground-truth points");
    }
    if (a.rows() == 0) throw std::invalid_argument(std::string(op) + ": empty point set");
}

}  // namespace

Points ProcrustesTransform::apply(const Points& p) const {
    Points out = (scale * (p * rotation.transpose())).rowwise() + translation.transpose();
    return out;
}

double mpjpe(const Points& pred, const Points& gt) {
    require_same(pred, gt, "mpjpe");
    return (pred - gt).rowwise().norm().mean();
}

double mpvpe(const Points& pred_vertices, const Points& gt_vertices) {
    require_same(pred_vertices, gt_vertices, "mpvpe");
    return (pred_vertices - gt_vertices).rowwise().norm().mean();
}

ProcrustesResult procrustes_align(const Points& pred, const Points& gt) {
    require_same(pred, gt, "procrustes_align");
    const Eigen::RowVector3d mu_p = pred.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.colwise().mean();
    const Points x = pred.rowwise() - mu_p;
    const Points y = gt.rowwise() - mu_g;
    const double var_p = x.squaredNorm();
    const double var_g = y.squaredNorm();

    ProcrustesResult r;
    if (pred == gt) {
        r.aligned = pred;
        return r;
    }
    if (var_p == 0.0 || var_g == 0.0) {
        r.transform.degenerate = true;
        r.transform.translation = (mu_g - mu_p).transpose();
        r.aligned = r.transform.apply(pred);
        return r;
    }
    // Cross-covariance H = X^T Y = U S V^T; optimal R = V D U^T.
    const Eigen::Matrix3d h = x.transpose() * y;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d u = svd.matrixU();
    const Eigen::Matrix3d v = svd.matrixV();
    Eigen::Vector3d d(1.0, 1.0, 1.0);
    if ((v * u.transpose()).determinant() < 0.0) d(2) = -1.0;  // singular values sorted descending
    r.transform.rotation = v * d.asDiagonal() * u.transpose();
    r.transform.scale = svd.singularValues().dot(d) / var_p;
    r.transform.translation = mu_g.transpose() - r.transform.scale * r.transform.rotation * mu_p.transpose();
    r.aligned = r.transform.apply(pred);
    return r;
}

double pa_mpjpe(const Points& pred, const Points& gt) { return mpjpe(procrustes_align(pred, gt).aligned, gt); }

double accel_error(std::span<const Points> pred, std::span<const Points> gt, double fps) {
    if (pred.size() != gt.size()) throw std::invalid_argument("accel_error: frame counts differ");
    if (pred.size() < 3) throw std::invalid_argument("accel_error: needs at least 3 frames");
    const double f2 = fps * fps;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 1; t + 1 < pred.size(); ++t) {
        require_same(pred[t], gt[t], "accel_error");
        const Points ap = (pred[t + 1] - 2.0 * pred[t] + pred[t - 1]) * f2;
        const Points ag = (gt[t + 1] - 2.0 * gt[t] + gt[t - 1]) * f2;
        total += (ap - ag).rowwise().norm().sum();
        count += static_cast<std::size_t>(ap.rows());
    }
    return total / static_cast<double>(count);
}

SequenceMetrics evaluate_sequence(const SequencePrediction& pred, const SequencePrediction& gt, double fps) {
    if (pred.joints.size() != gt.joints.size() || pred.vertices.size() != gt.vertices.size() ||
        pred.joints.size() != pred.vertices.size()) {
        throw std::invalid_argument("evaluate_sequence: frame counts differ");
    }
    SequenceMetrics m;
    m.frames = pred.joints.size();
    for (std::size_t t = 0; t < m.frames; ++t) {
        m.mpjpe += mpjpe(pred.joints[t], gt.joints[t]);
        m.pa_mpjpe += pa_mpjpe(pred.joints[t], gt.joints[t]);
        m.mpvpe += mpvpe(pred.vertices[t], gt.vertices[t]);
    }
    if (m.frames > 0) {
        const double n = static_cast<double>(m.frames);
        m.mpjpe /= n;
        m.pa_mpjpe /= n;
        m.mpvpe /= n;
    }
    m.accel_error = m.frames >= 3 ? accel_error(pred.joints, gt.joints, fps) : 0.0;
    return m;
}

MetricReport aggregate(std::vector<SequenceMetrics> per_sequence) {
    MetricReport r;
    std::size_t frames = 0;
    for (const auto& s : per_sequence) {
        const double n = static_cast<double>(s.frames);
        r.mpjpe += s.mpjpe * n;
        r.pa_mpjpe += s.pa_mpjpe * n;
        r.mpvpe += s.mpvpe * n;
        r.accel_error += s.accel_error;
        frames += s.frames;
    }
    if (frames > 0) {
        r.mpjpe /= static_cast<double>(frames);
        r.pa_mpjpe /= static_cast<double>(frames);
        r.mpvpe /= static_cast<double>(frames);
    }
    if (!per_sequence.empty()) r.accel_error /= static_cast<double>(per_sequence.size());
    r.per_sequence = std::move(per_sequence);
    return r;
}

}  // namespace occmesh::metrics
