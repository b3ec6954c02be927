#include "gadt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <unordered_set>

namespace gadt {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape, std::size_t data_size) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != data_size) {
    throw DimensionError("shape " + to_string(shape) + " does not match " + std::to_string(data_size) +
                         " values");
  }
}

template <typename T>
const detail::Node<T>& deref(const std::shared_ptr<detail::Node<T>>& node) {
  if (!node) throw ContractError("use of an undefined tensor");
  return *node;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  check_shape(shape, data.size());
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = detail::next_sequence();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return deref(node_).shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::size() const {
  return deref(node_).value.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return deref(node_).value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  deref(node_);
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = deref(node_);
  if (n.value.size() != 1) throw DimensionError("item() on tensor of shape " + to_string(n.shape));
  return n.value[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return deref(node_).requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  deref(node_);
  node_->requires_grad = on;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !deref(node_).grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  const auto& n = deref(node_);
  if (n.grad.empty()) throw ContractError("gradient requested before backward()");
  return n.grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  deref(node_);
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), deref(node_).value, false);
}

template <typename T>
void Tensor<T>::backward() const {
  const auto& root = deref(node_);
  if (root.value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(root.shape));
  }
  if (!root.requires_grad) return;

  // Collect every gradient-carrying ancestor once.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Reverse recording order.
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  auto& seed = grad_buffer(*node_);
  seed[0] += T(1);
  for (auto* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                      std::function<void(detail::Node<T>&)> backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(value), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = const_cast<detail::Node<T>&>(*out.node());
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node());
  node.backward_fn = std::move(backward);
  return out;
}

template <typename T>
std::vector<T>& grad_buffer(detail::Node<T>& node) {
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(detail::Node<double>&)>);
template std::vector<float>& grad_buffer(detail::Node<float>&);
template std::vector<double>& grad_buffer(detail::Node<double>&);

}  // namespace gadt
