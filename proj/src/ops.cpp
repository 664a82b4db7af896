#include "occmesh/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace occmesh::ops {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Eigen's vector kernels peel unaligned heads, so a product over arbitrary
// heap buffers rounds differently depending on the allocation address.
// Operands and results go through Eigen-owned (aligned) storage instead.
RowMat owned(const double* p, Index rows, Index cols) { return ConstMapMat(p, rows, cols); }

void add_to(double* dst, const RowMat& m) {
    const double* src = m.data();
    for (Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

std::vector<Index> contiguous_strides(const Shape& s) {
    std::vector<Index> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
    }
    return axis;
}

// outer x extent x inner decomposition around one axis.
struct AxisSplit {
    Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

struct Broadcast {
    Shape out;
    std::vector<Index> sa, sb;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Broadcast r;
    r.out.resize(a.size());
    const auto ca = contiguous_strides(a);
    const auto cb = contiguous_strides(b);
    r.sa.resize(a.size());
    r.sb.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
            throw ShapeError(std::string(op) + ": incompatible axis " + std::to_string(i) + " in " +
                             shape_str(a) + " vs " + shape_str(b));
        }
        r.out[i] = std::max(a[i], b[i]);
        r.sa[i] = (a[i] == 1 && r.out[i] != 1) ? 0 : ca[i];
        r.sb[i] = (b[i] == 1 && r.out[i] != 1) ? 0 : cb[i];
    }
    return r;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    const std::size_t r = bc.out.size();
    if (r == 0) {
        f(Index{0}, Index{0}, Index{0});
        return;
    }
    const Index total = numel(bc.out);
    if (total == 0) return;
    const Index inner = bc.out[r - 1];
    const Index ia = bc.sa[r - 1];
    const Index ib = bc.sb[r - 1];
    std::vector<Index> idx(r, 0);
    Index offa = 0, offb = 0;
    for (Index o = 0; o < total; o += inner) {
        for (Index j = 0; j < inner; ++j) f(o + j, offa + j * ia, offb + j * ib);
        for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
            offa += bc.sa[ax];
            offb += bc.sb[ax];
            if (++idx[ax] < bc.out[ax]) break;
            offa -= bc.sa[ax] * bc.out[ax];
            offb -= bc.sb[ax] * bc.out[ax];
            idx[ax] = 0;
        }
    }
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    if (same_shape(a.shape(), b.shape())) {
        const auto& va = a.values();
        const auto& vb = b.values();
        std::vector<double> out(va.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i], vb[i]);
        return make_result(op, a.shape(), std::move(out), {a, b}, [da, db](Node& self) {
            auto& A = *self.inputs[0];
            auto& B = *self.inputs[1];
            const auto& g = self.grad;
            if (A.requires_grad) {
                if (A.grad.empty()) {
                    std::vector<double> ga(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * da(A.value[i], B.value[i]);
                    A.grad = std::move(ga);
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) A.grad[i] += g[i] * da(A.value[i], B.value[i]);
                }
            }
            if (B.requires_grad) {
                if (B.grad.empty()) {
                    std::vector<double> gb(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * db(A.value[i], B.value[i]);
                    B.grad = std::move(gb);
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) B.grad[i] += g[i] * db(A.value[i], B.value[i]);
                }
            }
        });
    }
    auto bc = broadcast_shapes(a.shape(), b.shape(), op);
    std::vector<double> out(static_cast<std::size_t>(numel(bc.out)));
    const auto& va = a.values();
    const auto& vb = b.values();
    for_each_broadcast(bc, [&](Index o, Index ia, Index ib) { out[o] = fwd(va[ia], vb[ib]); });
    Shape shape = bc.out;
    return make_result(op, std::move(shape), std::move(out), {a, b},
                       [bc = std::move(bc), da, db](Node& self) {
                           auto& A = *self.inputs[0];
                           auto& B = *self.inputs[1];
                           const auto& g = self.grad;
                           if (A.requires_grad) {
                               auto& ga = A.grad_buffer();
                               for_each_broadcast(bc, [&](Index o, Index ia, Index ib) {
                                   ga[ia] += g[o] * da(A.value[ia], B.value[ib]);
                               });
                           }
                           if (B.requires_grad) {
                               auto& gb = B.grad_buffer();
                               for_each_broadcast(bc, [&](Index o, Index ia, Index ib) {
                                   gb[ib] += g[o] * db(A.value[ia], B.value[ib]);
                               });
                           }
                       });
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto& v = x.values();
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
    return make_result(op, x.shape(), std::move(out), {x}, [deriv](Node& self) {
        auto& X = *self.inputs[0];
        if (X.grad.empty()) {
            std::vector<double> gx(self.grad.size());
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = self.grad[i] * deriv(X.value[i], self.value[i]);
            X.grad = std::move(gx);
            return;
        }
        for (std::size_t i = 0; i < X.grad.size(); ++i) X.grad[i] += self.grad[i] * deriv(X.value[i], self.value[i]);
    });
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(
        "scale", x, [factor](double v) { return v * factor; },
        [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary(
        "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary("sigmoid", x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    const auto& v = x.values();
    std::vector<double> out(v.size());
    auto slope = std::make_shared<std::vector<double>>(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
        out[i] = v[i] * cdf;
        (*slope)[i] = cdf + v[i] * inv_sqrt_2pi * std::exp(-0.5 * v[i] * v[i]);
    }
    if (!x.requires_grad() || !grad_enabled()) slope.reset();
    return make_result("gelu", x.shape(), std::move(out), {x}, [slope](Node& self) {
        const auto& d = *slope;
        auto& X = *self.inputs[0];
        if (X.grad.empty()) {
            std::vector<double> gx(d.size());
            for (std::size_t i = 0; i < d.size(); ++i) gx[i] = self.grad[i] * d[i];
            X.grad = std::move(gx);
            return;
        }
        for (std::size_t i = 0; i < d.size(); ++i) X.grad[i] += self.grad[i] * d[i];
    });
}

Tensor abs(const Tensor& x) {
    return unary(
        "abs", x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
    const auto& v = x.values();
    double s = 0.0;
    for (double e : v) s += e;
    return make_result("sum", {}, {s}, {x}, [](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const double g = self.grad[0];
        for (double& e : gx) e += g;
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
    axis = normalize_axis(axis, x.rank(), "sum_axis");
    const auto sp = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + axis);
    std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
    const auto& v = x.values();
    for (Index o = 0; o < sp.outer; ++o) {
        for (Index a = 0; a < sp.extent; ++a) {
            const double* src = v.data() + (o * sp.extent + a) * sp.inner;
            double* dst = out.data() + o * sp.inner;
            for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    }
    return make_result("sum_axis", std::move(out_shape), std::move(out), {x}, [sp](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (Index o = 0; o < sp.outer; ++o) {
            for (Index a = 0; a < sp.extent; ++a) {
                double* dst = gx.data() + (o * sp.extent + a) * sp.inner;
                const double* g = self.grad.data() + o * sp.inner;
                for (Index i = 0; i < sp.inner; ++i) dst[i] += g[i];
            }
        }
    });
}

Tensor mean_axis(const Tensor& x, int axis) {
    axis = normalize_axis(axis, x.rank(), "mean_axis");
    const Index extent = x.shape()[axis];
    if (extent < 1) throw ShapeError("mean_axis: empty axis in " + shape_str(x.shape()));
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(extent));
}

Tensor global_avg_pool_2d(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("global_avg_pool_2d needs rank >= 2, got " + shape_str(x.shape()));
    Shape flat(x.shape().begin(), x.shape().end() - 2);
    flat.push_back(x.dim(-2) * x.dim(-1));
    return mean_axis(reshape(x, flat), -1);
}

Tensor softmax(const Tensor& x, int axis) {
    axis = normalize_axis(axis, x.rank(), "softmax");
    const auto sp = split_at(x.shape(), axis);
    const auto& v = x.values();
    std::vector<double> out(v.size());
    for (Index o = 0; o < sp.outer; ++o) {
        for (Index i = 0; i < sp.inner; ++i) {
            const Index base = o * sp.extent * sp.inner + i;
            double mx = -INFINITY;
            for (Index a = 0; a < sp.extent; ++a) mx = std::max(mx, v[base + a * sp.inner]);
            double z = 0.0;
            for (Index a = 0; a < sp.extent; ++a) {
                const double e = std::exp(v[base + a * sp.inner] - mx);
                out[base + a * sp.inner] = e;
                z += e;
            }
            for (Index a = 0; a < sp.extent; ++a) out[base + a * sp.inner] /= z;
        }
    }
    return make_result("softmax", x.shape(), std::move(out), {x}, [sp](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (Index o = 0; o < sp.outer; ++o) {
            for (Index i = 0; i < sp.inner; ++i) {
                const Index base = o * sp.extent * sp.inner + i;
                double dot = 0.0;
                for (Index a = 0; a < sp.extent; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
                for (Index a = 0; a < sp.extent; ++a) {
                    const Index k = base + a * sp.inner;
                    gx[k] += y[k] * (g[k] - dot);
                }
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const Index m = a.dim(-2);
    const Index k = a.dim(-1);
    const Index bk = transpose_b ? b.dim(-1) : b.dim(-2);
    const Index n = transpose_b ? b.dim(-2) : b.dim(-1);
    if (bk != k) {
        throw ShapeError("matmul: inner extents differ in " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
    }
    const bool shared_b = b.rank() == 2;
    Index batch = 1;
    for (int i = 0; i < a.rank() - 2; ++i) batch *= a.shape()[i];
    if (!shared_b) {
        if (b.rank() != a.rank() ||
            !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw ShapeError("matmul: batch axes differ in " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        }
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(static_cast<std::size_t>(batch * m * n));

    const double* pa = a.values().data();
    const double* pb = b.values().data();
    auto product = [&](const double* av, Index rows, const double* bv, double* dst) {
        const RowMat A = owned(av, rows, k);
        const RowMat C = transpose_b ? RowMat(A * owned(bv, n, k).transpose()) : RowMat(A * owned(bv, k, n));
        std::copy_n(C.data(), C.size(), dst);
    };
    if (shared_b) {
        product(pa, batch * m, pb, out.data());
    } else {
        for (Index t = 0; t < batch; ++t) product(pa + t * m * k, m, pb + t * k * n, out.data() + t * m * n);
    }

    return make_result(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [m, k, n, batch, shared_b, transpose_b](Node& self) {
            auto& A = *self.inputs[0];
            auto& B = *self.inputs[1];
            // One (rows x k) block of A against its B block; rows = batch * m when B is shared.
            auto block = [&](Index rows, std::size_t a_off, std::size_t b_off, std::size_t g_off) {
                const RowMat G = owned(self.grad.data() + g_off, rows, n);
                if (A.requires_grad) {
                    const RowMat Bv = transpose_b ? owned(B.value.data() + b_off, n, k) : owned(B.value.data() + b_off, k, n);
                    add_to(A.grad_buffer().data() + a_off, transpose_b ? RowMat(G * Bv) : RowMat(G * Bv.transpose()));
                }
                if (B.requires_grad) {
                    const RowMat Av = owned(A.value.data() + a_off, rows, k);
                    add_to(B.grad_buffer().data() + b_off,
                           transpose_b ? RowMat(G.transpose() * Av) : RowMat(Av.transpose() * G));
                }
            };
            if (shared_b) {
                block(batch * m, 0, 0, 0);
                return;
            }
            for (Index t = 0; t < batch; ++t) {
                block(m, static_cast<std::size_t>(t * m * k), static_cast<std::size_t>(t * k * n),
                      static_cast<std::size_t>(t * m * n));
            }
        });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride) {
    if (input.rank() == 3) {
        Shape s = input.shape();
        s.insert(s.begin(), 1);
        Tensor y = conv2d(reshape(input, s), weight, stride);
        Shape ys(y.shape().begin() + 1, y.shape().end());
        return reshape(y, ys);
    }
    if (input.rank() != 4 || weight.rank() != 4) {
        throw ShapeError("conv2d: expected input [N,Cin,H,W] and weight [Cout,Cin,k,k], got " +
                         shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    const Index N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const Index Cout = weight.dim(0), kk = weight.dim(2);
    if (weight.dim(1) != Cin) {
        throw ShapeError("conv2d: weight Cin axis " + std::to_string(weight.dim(1)) +
                         " != input Cin axis " + std::to_string(Cin));
    }
    if (kk != weight.dim(3) || (kk != 1 && kk != 3)) {
        throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(weight.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be positive");
    const Index pad = (kk - 1) / 2;
    const Index Ho = (H + 2 * pad - kk) / stride + 1;
    const Index Wo = (W + 2 * pad - kk) / stride + 1;
    const Index P = Ho * Wo;
    const Index rows = Cin * kk * kk;
    const Index cols = N * P;

    // im2col: col[(c, ky, kx), (n, oy, ox)]
    auto col = std::make_shared<RowMat>(RowMat::Zero(rows, cols));
    const auto& x = input.values();
    for (Index c = 0; c < Cin; ++c) {
        for (Index ky = 0; ky < kk; ++ky) {
            for (Index kx = 0; kx < kk; ++kx) {
                double* dst = col->data() + ((c * kk + ky) * kk + kx) * cols;
                for (Index n = 0; n < N; ++n) {
                    const double* src = x.data() + (n * Cin + c) * H * W;
                    for (Index oy = 0; oy < Ho; ++oy) {
                        const Index iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (Index ox = 0; ox < Wo; ++ox) {
                            const Index ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            dst[n * P + oy * Wo + ox] = src[iy * W + ix];
                        }
                    }
                }
            }
        }
    }
    const RowMat tmp = owned(weight.values().data(), Cout, rows) * *col;
    std::vector<double> out(static_cast<std::size_t>(N * Cout * P));
    for (Index n = 0; n < N; ++n) {
        for (Index co = 0; co < Cout; ++co) {
            std::copy_n(tmp.data() + co * cols + n * P, P, out.data() + (n * Cout + co) * P);
        }
    }
    return make_result(
        "conv2d", {N, Cout, Ho, Wo}, std::move(out), {input, weight},
        [=](Node& self) {
            auto& X = *self.inputs[0];
            auto& Wt = *self.inputs[1];
            RowMat g(Cout, cols);
            for (Index n = 0; n < N; ++n) {
                for (Index co = 0; co < Cout; ++co) {
                    std::copy_n(self.grad.data() + (n * Cout + co) * P, P, g.data() + co * cols + n * P);
                }
            }
            if (Wt.requires_grad) {
                add_to(Wt.grad_buffer().data(), RowMat(g * col->transpose()));
            }
            if (X.requires_grad) {
                const RowMat dcol = owned(Wt.value.data(), Cout, rows).transpose() * g;
                auto& gx = X.grad_buffer();
                for (Index c = 0; c < Cin; ++c) {
                    for (Index ky = 0; ky < kk; ++ky) {
                        for (Index kx = 0; kx < kk; ++kx) {
                            const double* src = dcol.data() + ((c * kk + ky) * kk + kx) * cols;
                            for (Index n = 0; n < N; ++n) {
                                double* dst = gx.data() + (n * Cin + c) * H * W;
                                for (Index oy = 0; oy < Ho; ++oy) {
                                    const Index iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= H) continue;
                                    for (Index ox = 0; ox < Wo; ++ox) {
                                        const Index ix = ox * stride + kx - pad;
                                        if (ix < 0 || ix >= W) continue;
                                        dst[iy * W + ix] += src[n * P + oy * Wo + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

namespace {

// Shared normalization kernel: rows of `count` elements each, affine
// parameter index derived per element by `param_of(row, j)`.
template <class ParamOf>
Tensor normalize_rows(const char* op, const Tensor& x, Index rows, Index count, const Tensor& gamma,
                      const Tensor& beta, double eps, ParamOf param_of) {
    const auto& v = x.values();
    const auto& gm = gamma.values();
    const auto& bt = beta.values();
    auto xhat = std::make_shared<std::vector<double>>(v.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    std::vector<double> out(v.size());
    for (Index r = 0; r < rows; ++r) {
        const double* src = v.data() + r * count;
        double mu = 0.0;
        for (Index j = 0; j < count; ++j) mu += src[j];
        mu /= static_cast<double>(count);
        double var = 0.0;
        for (Index j = 0; j < count; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= static_cast<double>(count);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (Index j = 0; j < count; ++j) {
            const Index e = r * count + j;
            const double h = (src[j] - mu) * is;
            (*xhat)[e] = h;
            const Index p = param_of(r, j);
            out[e] = gm[p] * h + bt[p];
        }
    }
    return make_result(op, x.shape(), std::move(out), {x, gamma, beta},
                       [=](Node& self) {
                           auto& X = *self.inputs[0];
                           auto& Gm = *self.inputs[1];
                           auto& Bt = *self.inputs[2];
                           const auto& g = self.grad;
                           const double cnt = static_cast<double>(count);
                           double* ggm = Gm.requires_grad ? Gm.grad_buffer().data() : nullptr;
                           double* gbt = Bt.requires_grad ? Bt.grad_buffer().data() : nullptr;
                           double* gx = X.requires_grad ? X.grad_buffer().data() : nullptr;
                           for (Index r = 0; r < rows; ++r) {
                               double sum_dh = 0.0, sum_dh_h = 0.0;
                               for (Index j = 0; j < count; ++j) {
                                   const Index e = r * count + j;
                                   const Index p = param_of(r, j);
                                   const double dh = g[e] * Gm.value[p];
                                   sum_dh += dh;
                                   sum_dh_h += dh * (*xhat)[e];
                                   if (ggm) ggm[p] += g[e] * (*xhat)[e];
                                   if (gbt) gbt[p] += g[e];
                               }
                               if (!gx) continue;
                               const double is = (*inv_std)[r];
                               for (Index j = 0; j < count; ++j) {
                                   const Index e = r * count + j;
                                   const double dh = g[e] * Gm.value[param_of(r, j)];
                                   gx[e] += is / cnt * (cnt * dh - sum_dh - (*xhat)[e] * sum_dh_h);
                               }
                           }
                       });
}

}  // namespace

Tensor group_norm(const Tensor& x, Index groups, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 2) throw ShapeError("group_norm: expected [N, C, ...], got " + shape_str(x.shape()));
    const Index N = x.dim(0), C = x.dim(1);
    if (groups < 1 || C % groups != 0) {
        throw ShapeError("group_norm: groups " + std::to_string(groups) + " must divide C=" +
                         std::to_string(C));
    }
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("group_norm: affine parameters must have shape [" + std::to_string(C) + "]");
    }
    const Index spatial = x.numel() / std::max<Index>(1, N * C);
    const Index per_group = C / groups;
    const Index count = per_group * spatial;
    return normalize_rows("group_norm", x, N * groups, count, gamma, beta, eps,
                          [groups, per_group, spatial](Index r, Index j) {
                              return (r % groups) * per_group + j / spatial;
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
    const Index D = x.dim(-1);
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
        throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(D) + "]");
    }
    return normalize_rows("layer_norm", x, x.numel() / std::max<Index>(1, D), D, gamma, beta, eps,
                          [](Index, Index j) { return j; });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return make_result("reshape", shape, x.values(), {x},
                       [](Node& self) { self.inputs[0]->accumulate(self.grad.data()); });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const int r = x.rank();
    if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axis list length != rank");
    std::vector<bool> used(r, false);
    for (int a : axes) {
        if (a < 0 || a >= r || used[a]) throw ShapeError("permute: not a permutation of axes");
        used[a] = true;
    }
    const auto in_strides = contiguous_strides(x.shape());
    Shape out_shape(r);
    // Broadcast machinery with the second operand unused: sa holds the input
    // stride for each output axis.
    Broadcast bc;
    bc.sa.resize(r);
    bc.sb.assign(r, 0);
    for (int i = 0; i < r; ++i) {
        out_shape[i] = x.shape()[axes[i]];
        bc.sa[i] = in_strides[axes[i]];
    }
    bc.out = out_shape;
    std::vector<double> out(x.values().size());
    const auto& v = x.values();
    for_each_broadcast(bc, [&](Index o, Index ia, Index) { out[o] = v[ia]; });
    return make_result("permute", std::move(out_shape), std::move(out), {x}, [bc](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for_each_broadcast(bc, [&](Index o, Index ia, Index) { gx[ia] += self.grad[o]; });
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int r = parts[0].rank();
    axis = normalize_axis(axis, r, "concat");
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
                throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                                 shape_str(parts[0].shape()) + " along axis " + std::to_string(axis));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    const auto sp = split_at(out_shape, axis);
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    std::vector<Index> extents;
    Index offset = 0;
    for (const auto& p : parts) {
        const Index e = p.shape()[axis];
        for (Index o = 0; o < sp.outer; ++o) {
            std::copy_n(p.values().data() + o * e * sp.inner, e * sp.inner,
                        out.data() + (o * sp.extent + offset) * sp.inner);
        }
        extents.push_back(e);
        offset += e;
    }
    return make_result("concat", std::move(out_shape), std::move(out), parts, [sp, extents](Node& self) {
        Index offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
            auto& P = *self.inputs[k];
            const Index e = extents[k];
            if (P.requires_grad) {
                auto& gp = P.grad_buffer();
                for (Index o = 0; o < sp.outer; ++o) {
                    const double* src = self.grad.data() + (o * sp.extent + offset) * sp.inner;
                    double* dst = gp.data() + o * e * sp.inner;
                    for (Index i = 0; i < e * sp.inner; ++i) dst[i] += src[i];
                }
            }
            offset += e;
        }
    });
}

Tensor slice(const Tensor& x, int axis, Index start, Index length) {
    axis = normalize_axis(axis, x.rank(), "slice");
    const auto sp = split_at(x.shape(), axis);
    if (start < 0 || length < 0 || start + length > sp.extent) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(sp.extent));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<double> out(static_cast<std::size_t>(sp.outer * length * sp.inner));
    for (Index o = 0; o < sp.outer; ++o) {
        std::copy_n(x.values().data() + (o * sp.extent + start) * sp.inner, length * sp.inner,
                    out.data() + o * length * sp.inner);
    }
    return make_result("slice", std::move(out_shape), std::move(out), {x}, [sp, start, length](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (Index o = 0; o < sp.outer; ++o) {
            const double* src = self.grad.data() + o * length * sp.inner;
            double* dst = gx.data() + (o * sp.extent + start) * sp.inner;
            for (Index i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor gather_axis1(const Tensor& x, std::span<const std::vector<int>> perms) {
    if (x.rank() < 2) throw ShapeError("gather_axis1: expected [R, S, ...], got " + shape_str(x.shape()));
    const Index R = x.dim(0), S = x.dim(1);
    const Index inner = x.numel() / std::max<Index>(1, R * S);
    if (static_cast<Index>(perms.size()) != R) {
        throw ShapeError("gather_axis1: " + std::to_string(perms.size()) + " permutations for " +
                         std::to_string(R) + " rows");
    }
    auto table = std::make_shared<std::vector<int>>();
    table->reserve(static_cast<std::size_t>(R * S));
    for (const auto& p : perms) {
        if (static_cast<Index>(p.size()) != S) throw ShapeError("gather_axis1: permutation length != S");
        for (int s : p) {
            if (s < 0 || s >= S) throw ShapeError("gather_axis1: index out of range");
            table->push_back(s);
        }
    }
    std::vector<double> out(x.values().size());
    for (Index r = 0; r < R; ++r) {
        for (Index s = 0; s < S; ++s) {
            const Index from = (*table)[r * S + s];
            std::copy_n(x.values().data() + (r * S + from) * inner, inner, out.data() + (r * S + s) * inner);
        }
    }
    return make_result("gather_axis1", x.shape(), std::move(out), {x}, [R, S, inner, table](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (Index r = 0; r < R; ++r) {
            for (Index s = 0; s < S; ++s) {
                const Index from = (*table)[r * S + s];
                const double* src = self.grad.data() + (r * S + s) * inner;
                double* dst = gx.data() + (r * S + from) * inner;
                for (Index i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor norm_last(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("norm_last: scalar input");
    const Index d = x.dim(-1);
    const Index rows = x.numel() / std::max<Index>(1, d);
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    std::vector<double> out(static_cast<std::size_t>(rows));
    const auto& v = x.values();
    for (Index r = 0; r < rows; ++r) {
        double s = 0.0;
        for (Index j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
        out[r] = std::sqrt(s);
    }
    return make_result("norm_last", std::move(out_shape), std::move(out), {x}, [rows, d](Node& self) {
        auto& X = *self.inputs[0];
        auto& gx = X.grad_buffer();
        for (Index r = 0; r < rows; ++r) {
            const double n = self.value[r];
            if (n == 0.0) continue;
            const double g = self.grad[r] / n;
            for (Index j = 0; j < d; ++j) gx[r * d + j] += g * X.value[r * d + j];
        }
    });
}

}  // namespace occmesh::ops
