#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

/// Geometry of a 2-D convolution. Padding is symmetric zero padding.
struct ConvSpec {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  std::size_t extent_h() const { return dilation * (kernel_h - 1) + 1; }
  std::size_t extent_w() const { return dilation * (kernel_w - 1) + 1; }
  /// Output extent along one axis, or throws when the dilated kernel does not
  /// fit inside the padded input.
  std::size_t output_h(std::size_t in_h) const;
  std::size_t output_w(std::size_t in_w) const;

  /// Square kernel with "same" padding dilation*(k-1)/2.
  static ConvSpec same(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                       std::size_t dilation = 1);
};

// Elementwise. Shapes must match exactly.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);

// Reductions to a one-element tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

/// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits [N,K].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// x [N,in], weight [out,in], bias [out] (bias may be undefined) -> [N,out].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// input [N,C,H,W], weight [O,C,kh,kw], bias [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec);

/// input [N,Ci,H,W], weight [Ci,Co,kh,kw]; output extent (H-1)*stride + kh - 2*padding.
/// This is the adjoint of conv2d with the same weight and geometry.
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding = 0);

/// Per (sample, channel) standardization over H*W followed by gamma/beta [C].
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5));

enum class PoolKind { global_avg, global_max, channel_avg, channel_max };

/// global_* -> [N,C]; channel_* -> [N,1,H,W].
template <typename T> Tensor<T> pool_reduce(const Tensor<T>& input, PoolKind kind);

/// Concatenation of 4-D tensors along the channel axis.
template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Half-pixel bilinear resampling with clamp-to-edge, [N,C,H,W] -> [N,C,out_h,out_w].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

/// x [N,C,H,W] times an attention of shape [N,C] (per channel) or [N,1,H,W]
/// (per spatial site).
template <typename T> Tensor<T> broadcast_mul(const Tensor<T>& x, const Tensor<T>& attention);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);

}  // namespace demist
