#include "demist/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"

namespace demist {

using detail::TensorImpl;

std::size_t ConvSpec::output_h(std::size_t in_h) const {
  const std::size_t padded = in_h + 2 * padding;
  if (extent_h() > padded) {
    throw ShapeError("dilated kernel height " + std::to_string(extent_h()) +
                     " exceeds padded input height " + std::to_string(padded));
  }
  return (padded - extent_h()) / stride + 1;
}

std::size_t ConvSpec::output_w(std::size_t in_w) const {
  const std::size_t padded = in_w + 2 * padding;
  if (extent_w() > padded) {
    throw ShapeError("dilated kernel width " + std::to_string(extent_w()) +
                     " exceeds padded input width " + std::to_string(padded));
  }
  return (padded - extent_w()) / stride + 1;
}

ConvSpec ConvSpec::same(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                        std::size_t dilation) {
  ConvSpec spec;
  spec.kernel_h = spec.kernel_w = kernel;
  spec.dilation = dilation;
  spec.padding = dilation * (kernel - 1) / 2;
  spec.in_channels = in_ch;
  spec.out_channels = out_ch;
  return spec;
}

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(s));
  }
}

template <typename T>
bool wants_grad(const TensorImpl<T>* impl) {
  return impl && impl->requires_grad;
}

// Sliding-window geometry shared by im2col/col2im: an image of C x H x W is
// sampled at out_h x out_w window positions.
struct Window {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride, dilation, padding;
  std::size_t out_h, out_w;
  std::size_t rows() const { return channels * kernel_h * kernel_w; }
  std::size_t cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride + offset - pad lies
// inside [0, width).
void valid_columns(const Window& g, std::size_t offset, std::size_t& lo, std::size_t& hi) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto first = pad - static_cast<std::ptrdiff_t>(offset);
  const auto limit = static_cast<std::ptrdiff_t>(g.width) + pad - static_cast<std::ptrdiff_t>(offset);
  const std::ptrdiff_t l = first <= 0 ? 0 : (first + s - 1) / s;
  const std::ptrdiff_t h = limit <= 0 ? 0 : (limit + s - 1) / s;
  lo = static_cast<std::size_t>(std::min<std::ptrdiff_t>(l, static_cast<std::ptrdiff_t>(g.out_w)));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(lo),
                                                           static_cast<std::ptrdiff_t>(g.out_w)));
}

template <typename T>
void im2col(const T* image, const Window& g, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.cols();
        std::size_t lo = 0, hi = 0;
        valid_columns(g, kj * g.dilation, lo, hi);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj * g.dilation) - pad;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - pad;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + (static_cast<std::ptrdiff_t>(lo) + x0), src + (static_cast<std::ptrdiff_t>(hi) + x0),
                      dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) {
              dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + x0];
            }
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const Window& g, T* image) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.cols();
        std::size_t lo = 0, hi = 0;
        valid_columns(g, kj * g.dilation, lo, hi);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj * g.dilation) - pad;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_w;
          if (g.stride == 1) {
            T* d = dst + (static_cast<std::ptrdiff_t>(lo) + x0);
            for (std::size_t ox = lo; ox < hi; ++ox) *d++ += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * g.stride) + x0] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& a, F&& forward, std::function<void(TensorImpl<T>&)> bw) {
  std::vector<T> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto* ai = a.handle().get();
  auto* bi = b.handle().get();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    for (auto* p : {ai, bi}) {
      if (!wants_grad(p)) continue;
      auto g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto* ai = a.handle().get();
  auto* bi = b.handle().get();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    if (wants_grad(ai)) {
      auto g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(bi)) {
      auto g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto* ai = a.handle().get();
  auto* bi = b.handle().get();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    if (wants_grad(ai)) {
      auto g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bi->data[i];
    }
    if (wants_grad(bi)) {
      auto g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ai->data[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto* ai = a.handle().get();
  return unary<T>(a, [s](T v) { return v + s; }, [ai](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  auto* ai = a.handle().get();
  return unary<T>(a, [s](T v) { return v * s; }, [ai, s](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  auto* ai = a.handle().get();
  return unary<T>(a, [](T v) { return v * v; }, [ai](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * ai->data[i] * self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto* ai = a.handle().get();
  return unary<T>(a, [](T v) { return v > T(0) ? v : T(0); }, [ai](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ai->data[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto* ai = a.handle().get();
  return unary<T>(a, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [ai](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto* ai = a.handle().get();
  return make_result<T>({1}, {static_cast<T>(acc)}, {&a}, [ai](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  const auto n = static_cast<double>(a.numel());
  auto* ai = a.handle().get();
  return make_result<T>({1}, {static_cast<T>(acc / n)}, {&a}, [ai, n](TensorImpl<T>& self) {
    auto g = ai->ensure_grad();
    const T scale = static_cast<T>(1.0 / n);
    for (auto& v : g) v += self.grad[0] * scale;
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  auto x = logits.data();
  std::vector<T> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * k;
    T* y = out.data() + r * k;
    const T peak = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      y[j] = std::exp(in[j] - peak);
      total += static_cast<double>(y[j]);
    }
    for (std::size_t j = 0; j < k; ++j) y[j] = static_cast<T>(y[j] / total);
  }
  auto* li = logits.handle().get();
  return make_result<T>(logits.shape(), std::move(out), {&logits}, [li, k, rows](TensorImpl<T>& self) {
    auto g = li->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * k;
      const T* gy = self.grad.data() + r * k;
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match batch");
  auto x = logits.data();
  std::vector<T> probs(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ShapeError("cross_entropy: label out of range");
    }
    const T* in = x.data() + r * k;
    const T peak = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(in[j] - peak));
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<T>(std::exp(static_cast<double>(in[j] - peak)) / total);
    }
    loss -= static_cast<double>(in[label] - peak) - std::log(total);
  }
  std::vector<int> owned(labels.begin(), labels.end());
  auto* li = logits.handle().get();
  return make_result<T>({1}, {static_cast<T>(loss / static_cast<double>(n))}, {&logits},
                        [li, n, k, probs = std::move(probs), owned = std::move(owned)](TensorImpl<T>& self) {
                          auto g = li->ensure_grad();
                          const T scale = self.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const T target = static_cast<int>(j) == owned[r] ? T(1) : T(0);
                              g[r * k + j] += scale * (probs[r * k + j] - target);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "dense", "input");
  require_rank(weight.shape(), 2, "dense", "weight");
  const std::size_t n = x.dim(0);
  const std::size_t in = x.dim(1);
  const std::size_t out = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("dense: input features " + std::to_string(in) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out}) {
    throw ShapeError("dense: bias shape " + shape_str(bias.shape()) + " expected [" +
                     std::to_string(out) + "]");
  }
  std::vector<T> y(n * out, T(0));
  if (bias.defined()) {
    for (std::size_t r = 0; r < n; ++r) std::copy(bias.data().begin(), bias.data().end(), y.begin() + r * out);
  }
  detail::gemm(false, true, n, out, in, T(1), x.data().data(), weight.data().data(), T(1), y.data());
  auto* xi = x.handle().get();
  auto* wi = weight.handle().get();
  auto* bi = bias.defined() ? bias.handle().get() : nullptr;
  return make_result<T>({n, out}, std::move(y), {&x, &weight, &bias},
                        [xi, wi, bi, n, in, out](TensorImpl<T>& self) {
                          const T* g = self.grad.data();
                          if (wants_grad(xi)) {
                            detail::gemm(false, false, n, in, out, T(1), g, wi->data.data(), T(1),
                                         xi->ensure_grad().data());
                          }
                          if (wants_grad(wi)) {
                            detail::gemm(true, false, out, in, n, T(1), g, xi->data.data(), T(1),
                                         wi->ensure_grad().data());
                          }
                          if (wants_grad(bi)) {
                            auto gb = bi->ensure_grad();
                            for (std::size_t r = 0; r < n; ++r) {
                              for (std::size_t j = 0; j < out; ++j) gb[j] += g[r * out + j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------- convolution

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (spec.kernel_h == 0 || spec.kernel_w == 0 || spec.stride == 0 || spec.dilation == 0) {
    throw ShapeError("conv2d: kernel, stride and dilation must be positive");
  }
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (c != spec.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape expected_w{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  if (weight.shape() != expected_w) {
    throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) + " expected " +
                     shape_str(expected_w));
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " expected [" +
                     std::to_string(spec.out_channels) + "]");
  }
  const Window g{c, h, w, spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation, spec.padding,
                 spec.output_h(h), spec.output_w(w)};
  const std::size_t o = spec.out_channels;
  const std::size_t k = g.rows();
  const std::size_t p = g.cols();

  std::vector<T> out(n * o * p, T(0));
  std::vector<T> col(k * p);
  for (std::size_t b = 0; b < n; ++b) {
    T* y = out.data() + b * o * p;
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < o; ++oc) std::fill(y + oc * p, y + (oc + 1) * p, bias.data()[oc]);
    }
    im2col(input.data().data() + b * c * h * w, g, col.data());
    detail::gemm(false, false, o, p, k, T(1), weight.data().data(), col.data(), T(1), y);
  }

  auto* xi = input.handle().get();
  auto* wi = weight.handle().get();
  auto* bi = bias.defined() ? bias.handle().get() : nullptr;
  return make_result<T>({n, o, g.out_h, g.out_w}, std::move(out), {&input, &weight, &bias},
                        [xi, wi, bi, g, n, o, k, p](TensorImpl<T>& self) {
                          const std::size_t in_size = g.channels * g.height * g.width;
                          std::vector<T> scratch(k * p);
                          for (std::size_t b = 0; b < n; ++b) {
                            const T* gy = self.grad.data() + b * o * p;
                            if (wants_grad(wi)) {
                              im2col(xi->data.data() + b * in_size, g, scratch.data());
                              detail::gemm(false, true, o, k, p, T(1), gy, scratch.data(), T(1),
                                           wi->ensure_grad().data());
                            }
                            if (wants_grad(xi)) {
                              detail::gemm(true, false, k, p, o, T(1), wi->data.data(), gy, T(0),
                                           scratch.data());
                              col2im_add(scratch.data(), g, xi->ensure_grad().data() + b * in_size);
                            }
                            if (wants_grad(bi)) {
                              auto gb = bi->ensure_grad();
                              for (std::size_t oc = 0; oc < o; ++oc) {
                                T acc = 0;
                                for (std::size_t i = 0; i < p; ++i) acc += gy[oc * p + i];
                                gb[oc] += acc;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "transpose_conv2d", "input");
  require_rank(weight.shape(), 4, "transpose_conv2d", "weight");
  if (stride == 0) throw ShapeError("transpose_conv2d: stride must be positive");
  const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (weight.dim(0) != ci) {
    throw ShapeError("transpose_conv2d: input has " + std::to_string(ci) + " channels, weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(0)));
  }
  const std::size_t co = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && bias.shape() != Shape{co}) {
    throw ShapeError("transpose_conv2d: bias shape " + shape_str(bias.shape()) + " expected [" +
                     std::to_string(co) + "]");
  }
  const std::size_t full_h = (h - 1) * stride + kh;
  const std::size_t full_w = (w - 1) * stride + kw;
  if (full_h <= 2 * padding || full_w <= 2 * padding) {
    throw ShapeError("transpose_conv2d: padding too large for output");
  }
  const std::size_t out_h = full_h - 2 * padding;
  const std::size_t out_w = full_w - 2 * padding;
  // The output image, viewed as the input of a strided conv, is sampled at h x w windows.
  const Window g{co, out_h, out_w, kh, kw, stride, 1, padding, h, w};
  const std::size_t k = g.rows();
  const std::size_t p = g.cols();
  const std::size_t out_size = co * out_h * out_w;

  std::vector<T> out(n * out_size, T(0));
  std::vector<T> col(k * p);
  for (std::size_t b = 0; b < n; ++b) {
    detail::gemm(true, false, k, p, ci, T(1), weight.data().data(), input.data().data() + b * ci * p,
                 T(0), col.data());
    T* y = out.data() + b * out_size;
    col2im_add(col.data(), g, y);
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < co; ++oc) {
        const T bv = bias.data()[oc];
        for (std::size_t i = 0; i < out_h * out_w; ++i) y[oc * out_h * out_w + i] += bv;
      }
    }
  }

  auto* xi = input.handle().get();
  auto* wi = weight.handle().get();
  auto* bi = bias.defined() ? bias.handle().get() : nullptr;
  return make_result<T>({n, co, out_h, out_w}, std::move(out), {&input, &weight, &bias},
                        [xi, wi, bi, g, n, ci, k, p, out_size](TensorImpl<T>& self) {
                          std::vector<T> gcol(k * p);
                          for (std::size_t b = 0; b < n; ++b) {
                            const T* gy = self.grad.data() + b * out_size;
                            im2col(gy, g, gcol.data());
                            if (wants_grad(xi)) {
                              detail::gemm(false, false, ci, p, k, T(1), wi->data.data(), gcol.data(),
                                           T(1), xi->ensure_grad().data() + b * ci * p);
                            }
                            if (wants_grad(wi)) {
                              detail::gemm(false, true, ci, k, p, T(1), xi->data.data() + b * ci * p,
                                           gcol.data(), T(1), wi->ensure_grad().data());
                            }
                            if (wants_grad(bi)) {
                              auto gb = bi->ensure_grad();
                              const std::size_t plane = g.height * g.width;
                              for (std::size_t oc = 0; oc < g.channels; ++oc) {
                                T acc = 0;
                                for (std::size_t i = 0; i < plane; ++i) acc += gy[oc * plane + i];
                                gb[oc] += acc;
                              }
                            }
                          }
                        });
}

// -------------------------------------------------------------- normalization

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank(input.shape(), 4, "instance_norm", "input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("instance_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  }
  auto x = input.data();
  std::vector<T> out(input.numel());
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(n * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      double mu = 0.0;
      for (std::size_t i = 0; i < plane; ++i) mu += static_cast<double>(x[base + i]);
      mu /= static_cast<double>(plane);
      double var = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(x[base + i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(plane);
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_std[b * c + ch] = static_cast<T>(is);
      const T gm = gamma.data()[ch];
      const T bt = beta.data()[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = static_cast<T>((static_cast<double>(x[base + i]) - mu) * is);
        xhat[base + i] = v;
        out[base + i] = gm * v + bt;
      }
    }
  }
  auto* xi = input.handle().get();
  auto* gi = gamma.handle().get();
  auto* bi = beta.handle().get();
  return make_result<T>(input.shape(), std::move(out), {&input, &gamma, &beta},
                        [xi, gi, bi, n, c, plane, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](TensorImpl<T>& self) {
                          const T* g = self.grad.data();
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t base = (b * c + ch) * plane;
                              double sum_g = 0.0, sum_gx = 0.0;
                              for (std::size_t i = 0; i < plane; ++i) {
                                sum_g += static_cast<double>(g[base + i]);
                                sum_gx += static_cast<double>(g[base + i] * xhat[base + i]);
                              }
                              if (wants_grad(gi)) gi->ensure_grad()[ch] += static_cast<T>(sum_gx);
                              if (wants_grad(bi)) bi->ensure_grad()[ch] += static_cast<T>(sum_g);
                              if (wants_grad(xi)) {
                                auto gx = xi->ensure_grad();
                                const double gm = static_cast<double>(gi->data[ch]);
                                const double is = static_cast<double>(inv_std[b * c + ch]);
                                const double mean_g = gm * sum_g / static_cast<double>(plane);
                                const double mean_gx = gm * sum_gx / static_cast<double>(plane);
                                for (std::size_t i = 0; i < plane; ++i) {
                                  const double dxhat = gm * static_cast<double>(g[base + i]);
                                  gx[base + i] += static_cast<T>(
                                      is * (dxhat - mean_g - static_cast<double>(xhat[base + i]) * mean_gx));
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- pooling

template <typename T>
Tensor<T> pool_reduce(const Tensor<T>& input, PoolKind kind) {
  require_rank(input.shape(), 4, "pool_reduce", "input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  auto x = input.data();
  auto* xi = input.handle().get();

  if (kind == PoolKind::global_avg || kind == PoolKind::global_max) {
    std::vector<T> out(n * c);
    std::vector<std::size_t> arg(kind == PoolKind::global_max ? n * c : 0);
    for (std::size_t r = 0; r < n * c; ++r) {
      const T* src = x.data() + r * plane;
      if (kind == PoolKind::global_avg) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(src[i]);
        out[r] = static_cast<T>(acc / static_cast<double>(plane));
      } else {
        const auto best = static_cast<std::size_t>(std::max_element(src, src + plane) - src);
        arg[r] = best;
        out[r] = src[best];
      }
    }
    return make_result<T>({n, c}, std::move(out), {&input},
                          [xi, kind, plane, arg = std::move(arg)](TensorImpl<T>& self) {
                            auto g = xi->ensure_grad();
                            for (std::size_t r = 0; r < self.grad.size(); ++r) {
                              if (kind == PoolKind::global_max) {
                                g[r * plane + arg[r]] += self.grad[r];
                              } else {
                                const T share = self.grad[r] / static_cast<T>(plane);
                                for (std::size_t i = 0; i < plane; ++i) g[r * plane + i] += share;
                              }
                            }
                          });
  }

  std::vector<T> out(n * plane);
  std::vector<std::size_t> arg(kind == PoolKind::channel_max ? n * plane : 0);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = x.data() + b * c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (kind == PoolKind::channel_avg) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += static_cast<double>(src[ch * plane + i]);
        out[b * plane + i] = static_cast<T>(acc / static_cast<double>(c));
      } else {
        std::size_t best = 0;
        for (std::size_t ch = 1; ch < c; ++ch) {
          if (src[ch * plane + i] > src[best * plane + i]) best = ch;
        }
        arg[b * plane + i] = best;
        out[b * plane + i] = src[best * plane + i];
      }
    }
  }
  return make_result<T>({n, 1, input.dim(2), input.dim(3)}, std::move(out), {&input},
                        [xi, kind, n, c, plane, arg = std::move(arg)](TensorImpl<T>& self) {
                          auto g = xi->ensure_grad();
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t i = 0; i < plane; ++i) {
                              const T gy = self.grad[b * plane + i];
                              if (kind == PoolKind::channel_max) {
                                g[(b * c + arg[b * plane + i]) * plane + i] += gy;
                              } else {
                                const T share = gy / static_cast<T>(c);
                                for (std::size_t ch = 0; ch < c; ++ch) g[(b * c + ch) * plane + i] += share;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& part : parts) require_rank(part.shape(), 4, "concat_channels", "input");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t total = 0;
  for (const auto& part : parts) {
    if (part.dim(0) != n || part.dim(2) != h || part.dim(3) != w) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(part.shape()));
    }
    total += part.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<T> out(n * total * plane);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& part : parts) {
    const std::size_t pc = part.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(part.data().data() + b * pc * plane, pc * plane,
                  out.data() + (b * total + offset) * plane);
    }
    offsets.push_back(offset);
    offset += pc;
  }
  std::vector<TensorImpl<T>*> impls;
  for (const auto& part : parts) impls.push_back(part.handle().get());
  return make_result<T>({n, total, h, w}, std::move(out), parts,
                        [impls, offsets, n, total, plane](TensorImpl<T>& self) {
                          for (std::size_t idx = 0; idx < impls.size(); ++idx) {
                            auto* pi = impls[idx];
                            if (!wants_grad(pi)) continue;
                            const std::size_t pc = pi->shape[1];
                            auto g = pi->ensure_grad();
                            for (std::size_t b = 0; b < n; ++b) {
                              const T* src = self.grad.data() + (b * total + offsets[idx]) * plane;
                              T* dst = g.data() + b * pc * plane;
                              for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

namespace {
struct LinearTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input.shape(), 4, "resize_bilinear", "input");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: output extents must be positive");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  auto x = input.data();
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ry = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& rx = tx[ox];
        const double top = (1 - rx.frac) * src[ry.i0 * w + rx.i0] + rx.frac * src[ry.i0 * w + rx.i1];
        const double bottom = (1 - rx.frac) * src[ry.i1 * w + rx.i0] + rx.frac * src[ry.i1 * w + rx.i1];
        dst[oy * out_w + ox] = static_cast<T>((1 - ry.frac) * top + ry.frac * bottom);
      }
    }
  }
  auto* xi = input.handle().get();
  return make_result<T>({input.dim(0), input.dim(1), out_h, out_w}, std::move(out), {&input},
                        [xi, ty, tx, planes, h, w, out_h, out_w](TensorImpl<T>& self) {
                          auto g = xi->ensure_grad();
                          for (std::size_t p = 0; p < planes; ++p) {
                            T* dst = g.data() + p * h * w;
                            const T* gy = self.grad.data() + p * out_h * out_w;
                            for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const auto& ry = ty[oy];
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const auto& rx = tx[ox];
                                const double v = gy[oy * out_w + ox];
                                dst[ry.i0 * w + rx.i0] += static_cast<T>(v * (1 - ry.frac) * (1 - rx.frac));
                                dst[ry.i0 * w + rx.i1] += static_cast<T>(v * (1 - ry.frac) * rx.frac);
                                dst[ry.i1 * w + rx.i0] += static_cast<T>(v * ry.frac * (1 - rx.frac));
                                dst[ry.i1 * w + rx.i1] += static_cast<T>(v * ry.frac * rx.frac);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& x, const Tensor<T>& attention) {
  require_rank(x.shape(), 4, "broadcast_mul", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = h * w;
  const bool per_channel = attention.shape() == Shape{n, c};
  const bool per_site = attention.shape() == Shape{n, 1, h, w};
  if (!per_channel && !per_site) {
    throw ShapeError("broadcast_mul: attention shape " + shape_str(attention.shape()) +
                     " incompatible with " + shape_str(x.shape()));
  }
  auto xs = x.data();
  auto as = attention.data();
  auto scale_index = [=](std::size_t b, std::size_t ch, std::size_t i) {
    return per_channel ? b * c + ch : b * plane + i;
  };
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = xs[base + i] * as[scale_index(b, ch, i)];
    }
  }
  auto* xi = x.handle().get();
  auto* ai = attention.handle().get();
  return make_result<T>(x.shape(), std::move(out), {&x, &attention},
                        [xi, ai, n, c, plane, scale_index](TensorImpl<T>& self) {
                          const bool gx = wants_grad(xi);
                          const bool ga = wants_grad(ai);
                          T* dx = gx ? xi->ensure_grad().data() : nullptr;
                          T* da = ga ? ai->ensure_grad().data() : nullptr;
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t base = (b * c + ch) * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                const std::size_t s = scale_index(b, ch, i);
                                const T gy = self.grad[base + i];
                                if (gx) dx[base + i] += gy * ai->data[s];
                                if (ga) da[s] += gy * xi->data[base + i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto* xi = x.handle().get();
  return make_result<T>(shape, std::move(out), {&x}, [xi](TensorImpl<T>& self) {
    auto g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

#define DEMIST_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> square(const Tensor<T>&);                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> softmax(const Tensor<T>&);                                                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                        \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&); \
  template Tensor<T> transpose_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                      std::size_t, std::size_t);                                   \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> pool_reduce(const Tensor<T>&, PoolKind);                                      \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> broadcast_mul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);

DEMIST_INSTANTIATE_OPS(float)
DEMIST_INSTANTIATE_OPS(double)

}  // namespace demist
