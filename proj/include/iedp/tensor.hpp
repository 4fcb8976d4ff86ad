#ifndef IEDP_TENSOR_HPP
#define IEDP_TENSOR_HPP

#include <Eigen/Dense>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iedp/common.hpp"
#include "iedp/random.hpp"

namespace iedp {

template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatX<S>>;
template <class S>
using CMatMap = Eigen::Map<const MatX<S>>;

// Thread-local switch: when false, ops produce constants (no graph recorded).
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

template <class S>
struct TensorNode {
  Shape shape;
  ArrayX<S> data;
  ArrayX<S> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode<S>&)> backward;

  Index numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad = ArrayX<S>::Zero(data.size());
  }
};

// Value-semantics handle onto a shared autodiff node. Row-major storage.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return filled(std::move(shape), S(1)); }

  static Tensor filled(Shape shape, S value) {
    auto n = std::make_shared<TensorNode<S>>();
    Index count = iedp::numel(shape);
    n->shape = std::move(shape);
    n->data = ArrayX<S>::Constant(count, value);
    return Tensor(std::move(n));
  }

  static Tensor scalar(S value) { return filled(Shape{}, value); }

  static Tensor from_data(Shape shape, std::vector<S> values) {
    check_shape(iedp::numel(shape) == static_cast<Index>(values.size()),
                "tensor data length " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->data = Eigen::Map<const ArrayX<S>>(values.data(), values.size());
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
    auto n = std::make_shared<TensorNode<S>>();
    Index count = iedp::numel(shape);
    n->shape = std::move(shape);
    n->data.resize(count);
    for (Index i = 0; i < count; ++i) n->data[i] = static_cast<S>(rng.normal()) * stddev;
    return Tensor(std::move(n));
  }

  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
    auto n = std::make_shared<TensorNode<S>>();
    Index count = iedp::numel(shape);
    n->shape = std::move(shape);
    n->data.resize(count);
    for (Index i = 0; i < count; ++i) n->data[i] = static_cast<S>(rng.uniform(lo, hi));
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->data.size(); }
  Index extent(Index axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }

  ArrayX<S>& array() { return node_->data; }
  const ArrayX<S>& array() const { return node_->data; }
  S* data() { return node_->data.data(); }
  const S* data() const { return node_->data.data(); }

  S item() const {
    check_shape(numel() == 1, "item() requires a single-element tensor, got shape " +
                                  shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (v) node_->ensure_grad();
    return *this;
  }

  const ArrayX<S>& grad() const { return node_->grad; }
  ArrayX<S>& grad() { return node_->grad; }

  void zero_grad() {
    if (node_->grad.size()) node_->grad.setZero();
  }

  // Leaf copy that shares no graph history.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
  }

  template <class T>
  Tensor<T> cast() const {
    auto out = Tensor<T>::zeros(shape());
    for (Index i = 0; i < numel(); ++i) out.array()[i] = static_cast<T>(node_->data[i]);
    return out;
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }
  TensorNode<S>* raw() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

// Builds an op result node. Parents and the pull-style backward closure are
// dropped when no parent requires grad or recording is disabled.
template <class S>
Tensor<S> make_op(Shape shape, ArrayX<S> data,
                  std::vector<std::shared_ptr<TensorNode<S>>> parents,
                  std::function<void(TensorNode<S>&)> backward) {
  auto n = std::make_shared<TensorNode<S>>();
  check_shape(iedp::numel(shape) == data.size(),
              "op produced " + std::to_string(data.size()) + " values for shape " +
                  shape_str(shape));
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p->requires_grad) track = true;
  }
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw Error("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  TensorNode<S>* root = loss.raw();
  if (!root->requires_grad) return;

  // iterative post-order DFS; reverse order visits the loss first
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backward) node->backward(*node);
  }
}

}  // namespace iedp

#endif  // IEDP_TENSOR_HPP
