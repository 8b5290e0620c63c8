#include "xattnres/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace xattnres {

namespace {
thread_local bool g_grad_mode = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

template <typename T>
detail::Node<T>& Tensor<T>::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0 && shape.size() != 4) throw ShapeError("zero-sized axis in " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  return s[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  auto& n = checked();
  if (!n.is_leaf) throw ContractError("values of a recorded result are immutable (op " + n.op + ")");
  return n.value;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = checked();
  if (n.value.size() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(n.shape));
  return n.value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  auto& n = checked();
  if (!n.is_leaf) throw ContractError("requires_grad can only be set on leaves");
  n.requires_grad = flag;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto g = checked().grad_buffer();
  std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked();
  return from_data(n.shape, n.value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone_leaf() const {
  const auto& n = checked();
  return from_data(n.shape, n.value, n.requires_grad);
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  node->is_leaf = false;
  bool any = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) {
      if (in.node()->consumed) {
        throw ContractError("input to " + node->op + " belongs to an already differentiated graph");
      }
      any = any || in.node()->requires_grad;
    }
  }
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <typename T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  const auto& root = loss.node();
  if (root->consumed) throw ContractError("backward called twice on the same graph");
  if (root->value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(root->shape));
  }
  if (!root->requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->consumed) throw ContractError("graph reaches an already differentiated node (" + child->op + ")");
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->is_leaf || node->grad.empty()) continue;
    node->backward(*node);
  }
  for (NodeT* node : order) {
    if (node->is_leaf) continue;
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template Tensor<float> detail::make_result<float>(Shape, std::vector<float>, std::string, std::vector<Tensor<float>>,
                                                  std::function<void(detail::Node<float>&)>);
template Tensor<double> detail::make_result<double>(Shape, std::vector<double>, std::string,
                                                    std::vector<Tensor<double>>,
                                                    std::function<void(detail::Node<double>&)>);

}  // namespace xattnres
