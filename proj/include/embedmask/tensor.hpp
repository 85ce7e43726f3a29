#pragma once

// Dense tensors and the reverse-mode tape.
//
// A Tensor<T> is a plain value: a shape plus row-major storage. A Var<T> is a
// handle to a node that may sit on a Tape<T>; operations on Vars that touch a
// tape record a node carrying the local derivative rule. T = double is the
// checking mode (finite-difference work), T = float is the training mode.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace embedmask {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename T>
inline constexpr bool is_checking_mode_v = std::is_same_v<T, double>;

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() : shape_{}, data_(1, T{0}) {}
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (numel_of(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + embedmask::to_string(shape_) + " does not hold " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const T> values() const noexcept { return data_; }
  std::span<T> values() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + embedmask::to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + embedmask::to_string(shape_) + " to " + embedmask::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.numel(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<detail::Node<T>>()) {}

  /// A value that never participates in differentiation.
  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }
  static Var constant(T v) { return constant(Tensor<T>::scalar(v)); }

  const Tensor<T>& value() const noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t numel() const noexcept { return node_->value.numel(); }
  T item() const { return node_->value.item(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  Tape<T>* tape() const noexcept { return node_->tape; }

  /// Gradient of the last backward root with respect to this value; zeros if
  /// nothing flowed here.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(shape());
    return Tensor<T>(shape(), node_->grad);
  }

  const std::shared_ptr<detail::Node<T>>& node() const noexcept { return node_; }

  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Records primitive operations in execution order. Single writer.
///
/// backward() consumes the tape: calling it a second time throws
/// std::logic_error instead of silently double-accumulating gradients.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) {
    if constexpr (is_checking_mode_v<T>) {
      if (!value.all_finite()) throw NonFiniteError("non-finite leaf value");
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->tape = this;
    nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  Var<T> record(Tensor<T> value, std::vector<std::shared_ptr<detail::Node<T>>> inputs,
                std::function<void(detail::Node<T>&)> backward) {
    if (consumed_) throw std::logic_error("tape already consumed by backward()");
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->tape = this;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  void backward(const Var<T>& root) {
    if (root.numel() != 1) throw ShapeError("backward root must be scalar, got " + to_string(root.shape()));
    if (root.tape() != this || !root.requires_grad()) {
      throw std::invalid_argument("backward root is not recorded on this tape");
    }
    if (consumed_) throw std::logic_error("tape already consumed by backward()");
    consumed_ = true;
    root.node()->grad_buffer()[0] = T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node<T>& node = **it;
      if (node.backward && !node.grad.empty()) node.backward(node);
    }
    // Intermediate nodes are no longer needed; leaves keep their grads.
    for (auto& node : nodes_) {
      node->backward = nullptr;
      node->inputs.clear();
    }
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  bool consumed_ = false;
};

}  // namespace embedmask
