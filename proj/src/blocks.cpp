#include "demist/blocks.hpp"

#include <cmath>

namespace demist {

namespace {

template <typename T>
Tensor<T> he_uniform(const Shape& shape, double fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(shape, std::move(values), true);
}

template <typename T>
void push(ParamList<T>& out, const std::string& name, const Tensor<T>& t) {
  if (t.defined()) out.push_back({name, t});
}

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& s, Rng& rng, bool with_bias) : spec(s) {
  weight = he_uniform<T>({s.out_channels, s.in_channels, s.kernel_h, s.kernel_w},
                         static_cast<double>(s.in_channels * s.kernel_h * s.kernel_w), rng);
  if (with_bias) bias = Tensor<T>::zeros({s.out_channels}, true);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

template <typename T>
TransposeConv2d<T>::TransposeConv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t s,
                                    std::size_t p, Rng& rng)
    : stride(s), padding(p) {
  const double fan_in = static_cast<double>(in_ch * kernel * kernel) / static_cast<double>(s * s);
  weight = he_uniform<T>({in_ch, out_ch, kernel, kernel}, fan_in, rng);
  bias = Tensor<T>::zeros({out_ch}, true);
}

template <typename T>
void TransposeConv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

template <typename T>
InstanceNorm<T>::InstanceNorm(std::size_t channels)
    : gamma(Tensor<T>::full({channels}, T(1), true)), beta(Tensor<T>::zeros({channels}, true)) {}

template <typename T>
void InstanceNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".gamma", gamma);
  push(out, prefix + ".beta", beta);
}

template <typename T>
Dense<T>::Dense(std::size_t in, std::size_t out, Rng& rng)
    : weight(he_uniform<T>({out, in}, static_cast<double>(in), rng)), bias(Tensor<T>::zeros({out}, true)) {}

template <typename T>
void Dense<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

// ------------------------------------------------------- smoothed dilated

template <typename T>
SmoothedDilatedBlock<T>::SmoothedDilatedBlock(const SmoothedDilatedSpec& spec, Rng& rng)
    : spec_(spec), norm_(spec.channels) {
  if (spec.channels == 0 || spec.dilation == 0) {
    throw std::invalid_argument("smoothed dilated block needs positive channels and dilation");
  }
  // Independent streams so that dropping the smoothing conv leaves the
  // dilated conv initialization unchanged.
  const std::uint64_t base = rng.next_u64();
  Rng smooth_rng(mix_seed(base, 0));
  Rng dilated_rng(mix_seed(base, 1));
  if (spec.use_smoothing) {
    smooth_.emplace(ConvSpec::same(spec.channels, spec.channels, spec.smoothing_extent()), smooth_rng);
  }
  dilated_ = Conv2d<T>(ConvSpec::same(spec.channels, spec.channels, 3, spec.dilation), dilated_rng);
}

template <typename T>
void SmoothedDilatedBlock<T>::check_input(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.channels) {
    throw ShapeError("smoothed dilated block expects [N," + std::to_string(spec_.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
}

template <typename T>
Tensor<T> SmoothedDilatedBlock<T>::conv_path(const Tensor<T>& x) const {
  check_input(x);
  return dilated_(smooth_ ? (*smooth_)(x) : x);
}

template <typename T>
Tensor<T> SmoothedDilatedBlock<T>::operator()(const Tensor<T>& x) const {
  return add(x, relu(norm_(conv_path(x))));
}

template <typename T>
void SmoothedDilatedBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (smooth_) smooth_->collect(out, prefix + ".smooth");
  dilated_.collect(out, prefix + ".dilated");
  norm_.collect(out, prefix + ".norm");
}

// ------------------------------------------------------- attention

void DualAttentionSpec::validate() const {
  if (channels == 0 || reduction == 0 || channels % reduction != 0) {
    throw std::invalid_argument("dual attention: reduction " + std::to_string(reduction) +
                                " must divide channel count " + std::to_string(channels));
  }
  if (spatial_kernel % 2 == 0) {
    throw std::invalid_argument("dual attention: spatial kernel must be odd, got " +
                                std::to_string(spatial_kernel));
  }
}

template <typename T>
ChannelAttention<T>::ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng)
    : squeeze(channels, channels / reduction, rng), excite(channels / reduction, channels, rng) {
  // Gate producers start at zero so every gate opens at 0.5; random gates
  // saturate on max-pooled activations and stall training.
  for (auto& v : excite.weight.mutable_data()) v = T(0);
  for (auto& v : excite.bias.mutable_data()) v = T(0);
}

template <typename T>
Tensor<T> ChannelAttention<T>::weights(const Tensor<T>& x) const {
  const std::size_t expected = squeeze.weight.dim(1);
  if (x.rank() != 4 || x.dim(1) != expected) {
    throw ShapeError("channel attention expects [N," + std::to_string(expected) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  return sigmoid(add(mlp(pool_reduce(x, PoolKind::global_avg)), mlp(pool_reduce(x, PoolKind::global_max))));
}

template <typename T>
void ChannelAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  squeeze.collect(out, prefix + ".squeeze");
  excite.collect(out, prefix + ".excite");
}

template <typename T>
SpatialAttention<T>::SpatialAttention(std::size_t kernel, Rng& rng) : conv(ConvSpec::same(2, 1, kernel), rng) {
  // Neutral start, as for the channel gates.
  for (auto& v : conv.weight.mutable_data()) v = T(0);
  for (auto& v : conv.bias.mutable_data()) v = T(0);
}

template <typename T>
Tensor<T> SpatialAttention<T>::weights(const Tensor<T>& x) const {
  if (x.rank() != 4) throw ShapeError("spatial attention expects a 4-D input, got " + shape_str(x.shape()));
  return sigmoid(conv(concat_channels<T>({pool_reduce(x, PoolKind::channel_max), pool_reduce(x, PoolKind::channel_avg)})));
}

template <typename T>
void SpatialAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".conv");
}

template <typename T>
DualAttention<T>::DualAttention(const DualAttentionSpec& spec, Rng& rng) : spec_(spec) {
  spec.validate();
  const std::uint64_t base = rng.next_u64();
  Rng channel_rng(mix_seed(base, 0));
  Rng spatial_rng(mix_seed(base, 1));
  if (spec.use_channel) channel_.emplace(spec.channels, spec.reduction, channel_rng);
  if (spec.use_spatial) spatial_.emplace(spec.spatial_kernel, spatial_rng);
}

template <typename T>
Tensor<T> DualAttention<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.channels) {
    throw ShapeError("dual attention expects [N," + std::to_string(spec_.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  Tensor<T> y = x;
  if (spec_.order == AttentionOrder::channel_first) {
    if (channel_) y = (*channel_)(y);
    if (spatial_) y = (*spatial_)(y);
  } else {
    if (spatial_) y = (*spatial_)(y);
    if (channel_) y = (*channel_)(y);
  }
  return y;
}

template <typename T>
void DualAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (channel_) channel_->collect(out, prefix + ".channel");
  if (spatial_) spatial_->collect(out, prefix + ".spatial");
}

#define DEMIST_INSTANTIATE_BLOCKS(T)      \
  template struct Conv2d<T>;              \
  template struct TransposeConv2d<T>;     \
  template struct InstanceNorm<T>;        \
  template struct Dense<T>;               \
  template class SmoothedDilatedBlock<T>; \
  template struct ChannelAttention<T>;    \
  template struct SpatialAttention<T>;    \
  template class DualAttention<T>;

DEMIST_INSTANTIATE_BLOCKS(float)
DEMIST_INSTANTIATE_BLOCKS(double)

}  // namespace demist
