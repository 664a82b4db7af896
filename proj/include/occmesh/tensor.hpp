#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace occmesh {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Raised for any shape or axis contract violation. The message names the
// offending op and the shapes involved.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One record on the autodiff tape. Records are created in program order and
// carry a global sequence number, so sorting by `seq` yields a topological
// order of any reachable subgraph.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer();
    // grad += g (g has value.size() elements); copies when grad is empty.
    void accumulate(const double* g);
    void accumulate(std::vector<double>&& g);
};

}  // namespace detail

// Dense row-major f64 tensor with optional participation in reverse-mode
// autodiff. Copies share the underlying node; values are immutable once
// produced by an op, only leaves may be written through mutable_data().
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor scalar(double value);

    const Shape& shape() const { return node_->shape; }
    Index dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    Index numel() const { return static_cast<Index>(node_->value.size()); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data();
    const std::vector<double>& values() const { return node_->value; }
    double item() const;
    double at(std::initializer_list<Index> idx) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool is_leaf() const { return !node_->backward; }

    // Accumulated gradient; all zeros if nothing reached this tensor.
    std::vector<double> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    // Same values, cut from the graph.
    Tensor detach() const;
    Tensor clone() const;

    const char* op_name() const { return node_->op; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Runs reverse accumulation from a scalar loss. Every reachable node is
// visited exactly once in reverse creation order; leaves accumulate.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

// Builds an op result. When no input requires grad (or recording is off),
// the inputs and backward closure are dropped and the result is a constant.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

// Number of reachable records the last backward() visited on this thread.
std::size_t last_backward_visits();

}  // namespace detail

}  // namespace occmesh
