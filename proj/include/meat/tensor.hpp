#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace meat {

class Tensor;

namespace detail {

// Gradient contribution of one recorded op. `gout` is the incoming gradient
// for the op's output; `gin[i]` points at the accumulation buffer for parent
// i, or is null when that parent needs no gradient.
using BackwardFn = std::function<void(const std::vector<double>& gout,
                                      const std::vector<std::vector<double>*>& gin)>;

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // persistent; empty until first backward deposit
    bool requires_grad = false;
    std::uint64_t id = 0;  // creation sequence; parents always have smaller ids
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward_fn;

    std::size_t numel() const { return data.size(); }
};

std::uint64_t next_node_id();

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode gradient tracking.
// Value-semantic handle over shared storage: copies alias, clone() deep-copies.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) { node_->id = detail::next_node_id(); }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor ones(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    double at(std::size_t i) const { return node_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
    double item() const;  // requires numel() == 1

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;  // throws if no gradient populated
    void zero_grad();

    // Deep copy of data; the clone is a fresh leaf (no recorded history).
    Tensor clone() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
                          std::vector<Tensor> parents, detail::BackwardFn fn);
};

// Records an op output. requires_grad is inherited from the parents; the
// backward closure and parent links are kept only when a gradient can flow.
Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, detail::BackwardFn fn);

// Reverse pass from a scalar loss. Nodes are replayed in descending creation
// order, which is a valid reverse topological order by construction. Gradient
// deposits into .grad accumulate additively across calls; use zero_grad()
// between steps.
void backward(const Tensor& loss);

}  // namespace meat
