#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xattnres/errors.hpp"

namespace xattnres {

using Shape = std::vector<std::size_t>;

enum class Precision { Single, Double };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::Single : Precision::Double;
}

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One vertex of the recorded computation graph. Leaves have no backward
// function; interior nodes release their closure once backward has run.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with shared ownership of its graph node.
///
/// Copies are shallow: two Tensor handles may refer to the same node. Values
/// of non-leaf tensors are immutable after recording; only leaves expose
/// mutable storage (parameters, inputs under finite differencing).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return checked().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return checked().value.size(); }

  std::span<const T> data() const { return checked().value; }
  /// Mutable access to a leaf's storage. Throws for recorded results.
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat_index) const { return checked().value.at(flat_index); }

  bool requires_grad() const { return checked().requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !checked().grad.empty(); }
  std::span<const T> grad() const { return checked().grad; }
  std::span<T> mutable_grad() { return checked().grad_buffer(); }
  /// Allocates the grad buffer if needed and fills it with zeros.
  void zero_grad();

  bool is_leaf() const { return checked().is_leaf; }
  const std::string& op() const { return checked().op; }

  /// A new leaf holding a copy of the values; never receives gradients.
  Tensor detach() const;
  /// Deep copy of values into a fresh leaf with the same requires_grad flag.
  Tensor clone_leaf() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  detail::Node<T>& checked() const;

  std::shared_ptr<detail::Node<T>> node_;
};

/// Whether new operations record a graph on this thread.
bool grad_mode_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode sweep from a scalar loss. Accumulates into the grad buffers
/// of every requires_grad leaf reachable from `loss`, then releases the
/// graph. Calling it again on the same graph throws ContractError.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

// Builds a result node wired to `inputs`. The node only records the closure
// when grad mode is on and at least one input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace xattnres
