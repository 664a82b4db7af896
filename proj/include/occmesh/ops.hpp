#pragma once

#include <span>
#include <vector>

#include "occmesh/tensor.hpp"

// Differentiable tensor operations. All ops record onto the autodiff graph
// when any input requires grad and recording is enabled.
namespace occmesh::ops {

// Pointwise binary ops. Operands must have equal rank; an axis may differ
// only if one side has extent 1 there (singleton broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
// Subgradient at 0 is 0.
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
// Arithmetic mean over one axis; the axis is removed. Divisor is the extent.
Tensor mean_axis(const Tensor& x, int axis);
inline Tensor avg_pool_axis(const Tensor& x, int axis) { return mean_axis(x, axis); }
// Mean over the trailing two (spatial) axes: [..., H, W] -> [...].
Tensor global_avg_pool_2d(const Tensor& x);

// Max-shifted softmax along one axis.
Tensor softmax(const Tensor& x, int axis);

// [..., m, k] x [k, n] (shared right operand) or [..., m, k] x [..., k, n]
// with identical leading axes. With transpose_b the right operand is read as
// [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Zero "same" padding cross-correlation. Input [N, Cin, H, W] or [Cin, H, W];
// weight [Cout, Cin, k, k] with k in {1, 3}. Output extent is
// (H + 2p - k) / stride + 1 with p = (k - 1) / 2.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride = 1);

// Input [N, C, ...]; statistics per (sample, group) with biased variance.
Tensor group_norm(const Tensor& x, Index groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Normalizes the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, Index start, Index length);

// x viewed as [R, S, inner]; out[r, s, :] = x[r, perms[r][s], :].
Tensor gather_axis1(const Tensor& x, std::span<const std::vector<int>> perms);

// Euclidean norm of the last axis (removed). Gradient at a zero vector is 0.
Tensor norm_last(const Tensor& x);

}  // namespace occmesh::ops
