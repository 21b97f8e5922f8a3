#include "meat/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>

#include "meat/error.hpp"

namespace meat {

namespace detail {

std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

static std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->data.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("tensor data length does not match shape product");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
    return node_->shape.empty() ? 0 : node_->shape.front();
}

std::size_t Tensor::cols() const {
    return node_->shape.empty() ? 0 : node_->shape.back();
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor");
    return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw ContractError("tensor has no populated gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    return Tensor::from(node_->shape, node_->data, node_->requires_grad);
}

Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, detail::BackwardFn fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(data), false);
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    out.node_->requires_grad = rg;
    if (rg) {
        out.node_->parents.reserve(parents.size());
        for (Tensor& p : parents) out.node_->parents.push_back(p.node());
        out.node_->backward_fn = std::move(fn);
    }
    return out;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");

    // Collect the reachable graph, then replay in descending creation order.
    std::vector<detail::Node*> order;
    std::unordered_map<detail::Node*, std::vector<double>> pass;
    {
        std::vector<detail::Node*> stack{loss.node().get()};
        pass[loss.node().get()] = {};
        while (!stack.empty()) {
            detail::Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents) {
                if (pass.emplace(p.get(), std::vector<double>{}).second) {
                    stack.push_back(p.get());
                }
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

    pass[loss.node().get()] = {1.0};
    for (detail::Node* n : order) {
        std::vector<double>& g = pass[n];
        if (g.empty()) continue;  // no gradient reached this node
        if (n->requires_grad) {
            if (n->grad.empty()) n->grad.assign(n->numel(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
        }
        if (!n->backward_fn) continue;
        std::vector<std::vector<double>*> gin(n->parents.size(), nullptr);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            detail::Node* p = n->parents[i].get();
            if (!p->requires_grad) continue;
            std::vector<double>& buf = pass[p];
            if (buf.empty()) buf.assign(p->numel(), 0.0);
            gin[i] = &buf;
        }
        n->backward_fn(g, gin);
    }
}

}  // namespace meat
