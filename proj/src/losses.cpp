#include "demist/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace demist {

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

void FeatureNetSpec::validate() const {
  if (channels.size() != kLayers || strides.size() != kLayers) {
    throw std::invalid_argument("feature network needs exactly 7 channel and stride entries");
  }
  for (std::size_t i = 0; i < kLayers; ++i) {
    if (channels[i] == 0 || strides[i] == 0) throw std::invalid_argument("feature network entries must be positive");
  }
}

template <typename T>
FeatureNet<T>::FeatureNet(const FeatureNetSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.seed);
  std::size_t in = 3;
  for (std::size_t i = 0; i < FeatureNetSpec::kLayers; ++i) {
    ConvSpec cs = ConvSpec::same(in, spec_.channels[i], 3);
    cs.stride = spec_.strides[i];
    convs_.emplace_back(cs, rng);
    in = spec_.channels[i];
  }
  if (spec_.weights_path) {
    auto params = parameters();
    load_params(*spec_.weights_path, params);
  }
  for (auto& conv : convs_) {
    conv.weight.set_requires_grad(false);
    conv.bias.set_requires_grad(false);
  }
}

template <typename T>
Tensor<T> FeatureNet<T>::operator()(const Tensor<T>& images) const {
  Tensor<T> x = images;
  for (const auto& conv : convs_) x = relu(conv(x));
  return x;
}

template <typename T>
ParamList<T> FeatureNet<T>::parameters() const {
  ParamList<T> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv." + std::to_string(i));
  return out;
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& out, const Tensor<T>& gt) {
  if (out.shape() != gt.shape()) {
    throw ShapeError("mse_loss: shapes differ, " + shape_str(out.shape()) + " vs " + shape_str(gt.shape()));
  }
  return mean(square(sub(out, gt)));
}

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& out, const Tensor<T>& gt, const FeatureNet<T>& featnet) {
  if (out.shape() != gt.shape()) {
    throw ShapeError("perceptual_loss: shapes differ, " + shape_str(out.shape()) + " vs " + shape_str(gt.shape()));
  }
  // The target side only needs a tape when gt itself requires gradient.
  Tensor<T> target;
  if (gt.requires_grad()) {
    target = featnet(gt);
  } else {
    NoGradGuard guard;
    target = featnet(gt);
  }
  return mean(square(sub(featnet(out), target)));
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights,
                        const FeatureNet<T>& featnet) {
  weights.validate();
  LossTerms<T> terms;
  terms.mse = mse_loss(out, gt);
  terms.perceptual = perceptual_loss(out, gt, featnet);
  terms.total = add(mul_scalar(terms.mse, static_cast<T>(weights.lambda1)),
                    mul_scalar(terms.perceptual, static_cast<T>(weights.lambda2)));
  return terms;
}

// ------------------------------------------------------------ metrics

namespace {

std::vector<double> luma(const ImageRGB& image) {
  std::vector<double> y(image.height * image.width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const float* p = image.pixels.data() + 3 * i;
    y[i] = 255.0 * (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
  }
  return y;
}

void check_pair(const ImageRGB& a, const ImageRGB& b, const char* what) {
  if (!a.same_size(b) || a.height == 0 || a.width == 0) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

// Valid-mode separable filtering of an h x w plane with the SSIM taps.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& taps) {
  const std::size_t k = taps.size();
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += taps[i] * plane[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += taps[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double psnr(const ImageRGB& out, const ImageRGB& gt) {
  check_pair(out, gt, "psnr");
  const auto a = luma(out);
  const auto b = luma(gt);
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sse += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = sse / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

std::vector<double> ssim_gaussian_taps() {
  std::vector<double> taps(kSsimWindow);
  const double center = (kSsimWindow - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - center;
    taps[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

double ssim(const ImageRGB& out, const ImageRGB& gt) {
  check_pair(out, gt, "ssim");
  if (out.height < kSsimWindow || out.width < kSsimWindow) {
    throw ShapeError("ssim: image " + std::to_string(out.height) + "x" + std::to_string(out.width) +
                     " is smaller than the 11x11 window");
  }
  const std::size_t h = out.height, w = out.width;
  const auto x = luma(out);
  const auto y = luma(gt);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto taps = ssim_gaussian_taps();
  const auto mx = filter_valid(x, h, w, taps);
  const auto my = filter_valid(y, h, w, taps);
  const auto sxx = filter_valid(xx, h, w, taps);
  const auto syy = filter_valid(yy, h, w, taps);
  const auto sxy = filter_valid(xy, h, w, taps);
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

#define DEMIST_INSTANTIATE_LOSSES(T)                                                             \
  template class FeatureNet<T>;                                                                 \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> perceptual_loss(const Tensor<T>&, const Tensor<T>&, const FeatureNet<T>&); \
  template struct LossTerms<T>;                                                                 \
  template LossTerms<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&, const FeatureNet<T>&);

DEMIST_INSTANTIATE_LOSSES(float)
DEMIST_INSTANTIATE_LOSSES(double)

}  // namespace demist
