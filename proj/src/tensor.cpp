#include "occmesh/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace occmesh {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;
thread_local std::size_t t_last_visits = 0;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return node;
}

#ifndef NDEBUG
bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
#endif

}  // namespace

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

void detail::Node::accumulate(const double* g) {
    if (grad.empty()) {
        grad.assign(g, g + value.size());
        return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

void detail::Node::accumulate(std::vector<double>&& g) {
    if (grad.empty()) {
        grad = std::move(g);
        return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

Tensor::Tensor() : node_(new_node({}, {0.0})) {}

Tensor::Tensor(Shape shape, std::vector<double> data) {
    if (occmesh::numel(shape) != static_cast<Index>(data.size())) {
        throw ShapeError("tensor data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_ = new_node(std::move(shape), std::move(data));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(occmesh::numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Index Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

std::span<double> Tensor::mutable_data() {
    if (node_->backward) throw std::logic_error("mutable_data() on a non-leaf tensor");
    return node_->value;
}

double Tensor::item() const {
    if (node_->value.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
    if (idx.size() != node_->shape.size()) throw ShapeError("at(): rank mismatch");
    Index flat = 0;
    std::size_t a = 0;
    for (Index i : idx) {
        const Index extent = node_->shape[a++];
        if (i < 0 || i >= extent) throw ShapeError("at(): index out of range");
        flat = flat * extent + i;
    }
    return node_->value[static_cast<std::size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (node_->backward) throw std::logic_error("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

Tensor Tensor::clone() const {
    Tensor t(node_->shape, node_->value);
    t.node_->requires_grad = node_->requires_grad && !node_->backward;
    return t;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const auto& root = loss.node();
    t_last_visits = 0;
    if (!root->requires_grad) return;

    std::vector<detail::Node*> order;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

    root->grad_buffer()[0] += 1.0;
    for (detail::Node* n : order) {
        ++t_last_visits;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
#ifndef NDEBUG
    if (!all_finite(value)) {
        bool inputs_finite = true;
        for (const auto& in : inputs) inputs_finite = inputs_finite && all_finite(in.data());
        if (inputs_finite) {
            throw std::domain_error(std::string("non-finite output from op ") + op +
                                    " on finite inputs");
        }
    }
#endif
    auto node = new_node(std::move(shape), std::move(value));
    node->op = op;
    bool track = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) track = track || in.requires_grad();
    }
    if (track) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

std::size_t last_backward_visits() { return t_last_visits; }

}  // namespace detail

}  // namespace occmesh
