#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "demist/blocks.hpp"
#include "demist/image.hpp"

namespace demist {

struct LossWeights {
  double lambda1 = 1.0;   // pixel MSE
  double lambda2 = 0.05;  // perceptual

  /// Throws std::invalid_argument on a negative weight.
  void validate() const;
};

struct FeatureNetSpec {
  static constexpr std::size_t kLayers = 7;

  std::vector<std::size_t> channels = {16, 16, 32, 32, 64, 64, 64};
  std::vector<std::size_t> strides = {1, 1, 2, 1, 2, 1, 1};
  std::uint64_t seed = 1234;
  std::optional<std::filesystem::path> weights_path;  // checkpoint with conv.<i>.weight / conv.<i>.bias

  void validate() const;
};

/// Frozen 7-layer conv + ReLU feature extractor. Its parameters never require
/// gradient, but gradients still flow through it to the input.
template <typename T>
class FeatureNet {
 public:
  explicit FeatureNet(const FeatureNetSpec& spec = {});

  /// Post-ReLU output of the 7th conv for [N,3,H,W] input.
  Tensor<T> operator()(const Tensor<T>& images) const;

  const FeatureNetSpec& spec() const { return spec_; }
  ParamList<T> parameters() const;

 private:
  FeatureNetSpec spec_;
  std::vector<Conv2d<T>> convs_;
};

/// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& out, const Tensor<T>& gt);

/// Mean squared feature difference, i.e. the sum over the feature block
/// divided by n_x * n_y * n_c (and averaged over the batch).
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& out, const Tensor<T>& gt, const FeatureNet<T>& featnet);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> mse;
  Tensor<T> perceptual;
};

/// lambda1 * mse + lambda2 * perceptual.
template <typename T>
LossTerms<T> total_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights,
                        const FeatureNet<T>& featnet);

// ------------------------------------------------------------ metrics

/// Value reported for identical images.
inline constexpr double kPsnrCap = 100.0;

/// PSNR in dB on BT.601 luma in [0, 255], capped at kPsnrCap.
double psnr(const ImageRGB& out, const ImageRGB& gt);

/// Mean SSIM over all valid 11x11 windows (Gaussian, sigma 1.5) of the luma
/// planes, C1 = (0.01 * 255)^2, C2 = (0.03 * 255)^2. Both extents must be at
/// least 11.
double ssim(const ImageRGB& out, const ImageRGB& gt);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
std::vector<double> ssim_gaussian_taps();

}  // namespace demist
