#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Each op evaluates eagerly and, when the tape is recording and at least one
// input requires a gradient, appends a node carrying its derivative rule.
// Nodes are appended in execution order, so walking the tape backwards is a
// valid reverse topological order.

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lpm/tensor.hpp"

namespace lpm {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until backward reaches this node
  std::vector<Var<T>> inputs;
  BackwardFn<T> backward;
  std::string op;
  bool requires_grad = false;
  Tensor<T>* grad_sink = nullptr;  // parameter gradient accumulator, if any
  std::size_t id = 0;

  const Shape& shape() const { return value.shape(); }

  /// Adds `g` into this node's gradient (no-op for nodes that do not require one).
  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }

  void accumulate(Tensor<T>&& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = std::move(g);
    } else {
      grad += g;
    }
  }
};

template <typename T = float>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value) { return make_leaf(std::move(value), "constant", false, nullptr); }

  /// Leaf whose gradient is kept on the node (inputs under test, for example).
  Var<T> variable(Tensor<T> value) { return make_leaf(std::move(value), "variable", true, nullptr); }

  /// Leaf whose gradient is added into `sink` at the end of backward.
  Var<T> parameter(const Tensor<T>& value, Tensor<T>* sink) {
    return make_leaf(value, "parameter", sink != nullptr, sink);
  }

  /// Registers the result of an op. `fn` may be empty for ops without a derivative rule;
  /// backward then rejects any attempt to propagate through them.
  Var<T> record(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn<T> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = std::move(op);
    bool needs = false;
    if (recording_) {
      for (const auto& in : inputs) needs = needs || in->requires_grad;
    }
    node->requires_grad = needs;
    if (needs) {
      node->inputs = std::move(inputs);
      node->backward = std::move(fn);
      node->id = nodes_.size();
      nodes_.push_back(node);
    }
    return node;
  }

  /// Propagates d(loss)/d(node) to every recorded node. Gradients accumulate into
  /// parameter sinks; callers zero those between steps.
  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1) {
      throw Error("backward: loss must be a scalar, got shape " + to_string(loss->shape()));
    }
    if (!loss->requires_grad) {
      throw Error("backward: loss was not produced under a recording tape");
    }
    loss->grad = Tensor<T>(loss->shape(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.grad.empty()) continue;
      if (!node.inputs.empty()) {
        if (!node.backward) {
          throw Error("backward: op '" + node.op + "' has no derivative rule");
        }
        node.backward(node);
      }
      if (node.grad_sink != nullptr) {
        if (node.grad_sink->empty()) {
          *node.grad_sink = node.grad;
        } else {
          *node.grad_sink += node.grad;
        }
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  Var<T> make_leaf(Tensor<T> value, const char* op, bool requires_grad, Tensor<T>* sink) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = op;
    node->requires_grad = recording_ && requires_grad;
    node->grad_sink = node->requires_grad ? sink : nullptr;
    if (node->requires_grad) {
      node->id = nodes_.size();
      nodes_.push_back(node);
    }
    return node;
  }

  bool recording_;
  std::vector<Var<T>> nodes_;
};

}  // namespace lpm
