#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace demist {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown for any tensor shape or argument inconsistency.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thread-local switch controlling whether new operations are recorded on the
/// autodiff tape.
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool released = false;  // graph already consumed by a backward pass

  // Tape record; empty for leaves.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major N-d array with an optional reverse-mode gradient record.
///
/// Copies are shallow: two Tensor handles constructed from the same value
/// share storage and gradient. Operations never modify their inputs; the only
/// in-place writes are gradient accumulation during backward() and explicit
/// parameter updates through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  /// Direct write access, intended for parameter initialization and updates.
  std::span<T> mutable_data() { return impl().data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  void zero_grad() { impl().grad.clear(); }

  /// Populates grad on every requires_grad leaf reachable from this scalar.
  /// The recorded graph is released afterwards; a second call on the same
  /// result throws.
  void backward();

  /// Same values, no history, no gradient.
  Tensor detach() const;

  const std::shared_ptr<Impl>& handle() const { return impl_; }

 private:
  Impl& impl() const {
    if (!impl_) throw std::logic_error("use of undefined tensor");
    return *impl_;
  }
  std::shared_ptr<Impl> impl_;
};

/// Builds an op result; the backward closure is only recorded when grad mode
/// is on and at least one input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::TensorImpl<T>&)> backward_fn);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::TensorImpl<T>&)> backward_fn);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace demist
