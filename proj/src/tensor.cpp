#include "demist/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>

namespace demist {

namespace {
thread_local bool g_grad_mode = true;
}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = impl().shape;
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl().data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = impl().shape;
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl().data[flat];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!impl().is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
  impl().requires_grad = flag;
  if (!flag) impl().grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl().shape, impl().data, false);
}

template <typename T>
void Tensor<T>::backward() {
  Impl& root = impl();
  if (root.data.size() != 1) {
    throw ShapeError("backward() requires a scalar, got shape " + shape_str(root.shape));
  }
  if (root.released) throw std::logic_error("backward() called twice on the same graph");
  if (!root.requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }

  for (Impl* node : order) {
    if (!node->is_leaf()) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->released = true;
    }
  }
  root.released = true;
}

namespace {
template <typename T, typename Range>
Tensor<T> make_result_impl(Shape shape, std::vector<T> data, const Range& inputs,
                           std::function<void(detail::TensorImpl<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const auto* in : inputs) {
    if (in && in->defined() && in->requires_grad()) any = true;
  }
  if (!any) return out;
  auto& impl = *out.handle();
  impl.requires_grad = true;
  for (const auto* in : inputs) {
    if (in && in->defined()) impl.parents.push_back(in->handle());
  }
  impl.backward_fn = std::move(backward_fn);
  return out;
}
}  // namespace

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::TensorImpl<T>&)> backward_fn) {
  return make_result_impl<T>(std::move(shape), std::move(data), inputs, std::move(backward_fn));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::TensorImpl<T>&)> backward_fn) {
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& in : inputs) ptrs.push_back(&in);
  return make_result_impl<T>(std::move(shape), std::move(data), ptrs, std::move(backward_fn));
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result(Shape, std::vector<float>, std::initializer_list<const Tensor<float>*>,
                                   std::function<void(detail::TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::initializer_list<const Tensor<double>*>,
                                    std::function<void(detail::TensorImpl<double>&)>);
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   std::function<void(detail::TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const std::vector<Tensor<double>>&,
                                    std::function<void(detail::TensorImpl<double>&)>);

}  // namespace demist
