#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gadt/errors.hpp"

namespace gadt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

std::uint64_t next_sequence();

/// One recorded operation. The sequence number is assigned at creation, so a
/// node's parents always carry smaller numbers than the node itself; the tape
/// order is the sequence order.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode gradient recording.
///
/// Tensors are cheap handles onto a shared node. Operations whose inputs
/// require gradients record a backward rule; the graph is rebuilt on every
/// forward pass. Leaf gradients accumulate across backward() calls until
/// zero_grad() is called.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const T> data() const;
  /// Mutable access to the values of a leaf. Mutating a tensor that already
  /// feeds recorded operations invalidates their backward rules.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const { return from(shape(), std::vector<T>(data().begin(), data().end()), requires_grad); }

  /// Back-propagates from this scalar through every recorded ancestor.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the result of a differentiable operation. `backward` receives the
/// result node (with its grad populated) and must accumulate into the grads
/// of those parents that require them. Nothing is recorded when no parent
/// requires gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                      std::function<void(detail::Node<T>&)> backward);

/// Grad buffer of a parent inside a backward rule, allocated on first use.
template <typename T>
std::vector<T>& grad_buffer(detail::Node<T>& node);

/// Value conversion between precisions; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t, bool requires_grad = false) {
  auto src = t.data();
  return Tensor<To>::from(t.shape(), std::vector<To>(src.begin(), src.end()), requires_grad);
}

}  // namespace gadt
