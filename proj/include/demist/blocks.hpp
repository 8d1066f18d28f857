#pragma once

#include <optional>
#include <string>

#include "demist/checkpoint.hpp"
#include "demist/ops.hpp"
#include "demist/rng.hpp"

namespace demist {

// Layers draw He-uniform weights (bound sqrt(6 / fan_in)) from the supplied
// generator; biases start at zero.

template <typename T>
struct Conv2d {
  ConvSpec spec;
  Tensor<T> weight;  // [O, C, kh, kw]
  Tensor<T> bias;    // [O] or undefined

  Conv2d() = default;
  Conv2d(const ConvSpec& spec, Rng& rng, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, spec); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct TransposeConv2d {
  std::size_t stride = 2;
  std::size_t padding = 1;
  Tensor<T> weight;  // [Ci, Co, k, k]
  Tensor<T> bias;    // [Co]

  TransposeConv2d() = default;
  TransposeConv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                  std::size_t padding, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return transpose_conv2d(x, weight, bias, stride, padding); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct InstanceNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  InstanceNorm() = default;
  explicit InstanceNorm(std::size_t channels);
  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gamma, beta); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Dense {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight, bias); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Residual smoothed dilated convolution:
///   y = x + ReLU(IN(dilated_conv_d(smooth_conv_{2d-1}(x))))
/// The smoothing conv is dropped when use_smoothing is false.
struct SmoothedDilatedSpec {
  std::size_t channels = 16;
  std::size_t dilation = 2;
  bool use_smoothing = true;

  std::size_t smoothing_extent() const { return 2 * dilation - 1; }
};

template <typename T>
class SmoothedDilatedBlock {
 public:
  SmoothedDilatedBlock() = default;
  SmoothedDilatedBlock(const SmoothedDilatedSpec& spec, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const;
  /// The convolutional part of the inner path, before normalization and
  /// activation.
  Tensor<T> conv_path(const Tensor<T>& x) const;

  const SmoothedDilatedSpec& spec() const { return spec_; }
  std::optional<Conv2d<T>>& smoothing() { return smooth_; }
  Conv2d<T>& dilated() { return dilated_; }
  InstanceNorm<T>& norm() { return norm_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  void check_input(const Tensor<T>& x) const;

  SmoothedDilatedSpec spec_;
  std::optional<Conv2d<T>> smooth_;
  Conv2d<T> dilated_;
  InstanceNorm<T> norm_;
};

enum class AttentionOrder { channel_first, spatial_first };

struct DualAttentionSpec {
  std::size_t channels = 16;
  std::size_t reduction = 4;
  std::size_t spatial_kernel = 7;
  bool use_channel = true;
  bool use_spatial = true;
  AttentionOrder order = AttentionOrder::channel_first;

  /// Throws unless reduction divides channels and the spatial kernel is odd.
  void validate() const;
};

/// v = sigmoid(MLP(GAP(x)) + MLP(GMP(x))) with one shared MLP (C -> C/r -> C).
template <typename T>
struct ChannelAttention {
  Dense<T> squeeze;
  Dense<T> excite;

  ChannelAttention() = default;
  ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng);
  Tensor<T> mlp(const Tensor<T>& pooled) const { return excite(relu(squeeze(pooled))); }
  Tensor<T> weights(const Tensor<T>& x) const;  // [N, C]
  Tensor<T> operator()(const Tensor<T>& x) const { return broadcast_mul(x, weights(x)); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// s = sigmoid(conv_kxk([max_c(x), mean_c(x)])), applied per spatial site.
template <typename T>
struct SpatialAttention {
  Conv2d<T> conv;

  SpatialAttention() = default;
  SpatialAttention(std::size_t kernel, Rng& rng);
  Tensor<T> weights(const Tensor<T>& x) const;  // [N, 1, H, W]
  Tensor<T> operator()(const Tensor<T>& x) const { return broadcast_mul(x, weights(x)); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
class DualAttention {
 public:
  DualAttention() = default;
  DualAttention(const DualAttentionSpec& spec, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const;

  const DualAttentionSpec& spec() const { return spec_; }
  std::optional<ChannelAttention<T>>& channel() { return channel_; }
  std::optional<SpatialAttention<T>>& spatial() { return spatial_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  DualAttentionSpec spec_;
  std::optional<ChannelAttention<T>> channel_;
  std::optional<SpatialAttention<T>> spatial_;
};

}  // namespace demist
