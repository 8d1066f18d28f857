#include "demist/networks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace demist {

namespace {

Rng layer_rng(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return Rng(mix_seed(seed, h));
}

std::string join(const std::vector<std::size_t>& values) {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i];
  return os.str();
}

std::vector<std::size_t> to_sizes(const std::vector<double>& values) {
  std::vector<std::size_t> out;
  for (double v : values) {
    if (v < 1 || v != std::floor(v)) throw ConfigError("expected positive integers in list");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<double> to_doubles(const std::vector<std::size_t>& values) {
  return {values.begin(), values.end()};
}

}  // namespace

// ------------------------------------------------------------ classifier

void ClassifierConfig::validate() const {
  if (base_channels == 0) throw std::invalid_argument("classifier: base_channels must be positive");
  if (strides.size() != kConvLayers || width_multipliers.size() != kConvLayers) {
    throw std::invalid_argument("classifier: exactly 7 conv layers are required (strides and width multipliers)");
  }
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    if (strides[i] == 0 || width_multipliers[i] == 0) {
      throw std::invalid_argument("classifier: strides and width multipliers must be positive");
    }
  }
}

template <typename T>
Classifier<T>::Classifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::size_t in = 3;
  for (std::size_t i = 0; i < ClassifierConfig::kConvLayers; ++i) {
    const std::size_t out = config_.base_channels * config_.width_multipliers[i];
    ConvSpec spec = ConvSpec::same(in, out, 3);
    spec.stride = config_.strides[i];
    Rng rng = layer_rng(seed, "conv." + std::to_string(i));
    convs_.emplace_back(spec, rng);
    in = out;
  }
  Rng rng = layer_rng(seed, "head");
  head_ = Dense<T>(in, ClassifierConfig::kClasses, rng);
}

template <typename T>
typename Classifier<T>::Output Classifier<T>::forward(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("classifier expects [N,3,H,W], got " + shape_str(images.shape()));
  }
  Tensor<T> x = images;
  for (const auto& conv : convs_) x = relu(conv(x));
  return {head_(pool_reduce(x, PoolKind::global_max)), x};
}

template <typename T>
ParamList<T> Classifier<T>::parameters() const {
  ParamList<T> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv." + std::to_string(i));
  head_.collect(out, "head");
  return out;
}

GrayImage cam_raw_map(std::span<const float> features, std::size_t channels, std::size_t h, std::size_t w,
                      std::span<const float> weights) {
  if (features.size() != channels * h * w || weights.size() != channels) {
    throw ShapeError("cam_raw_map: feature/weight sizes do not match");
  }
  GrayImage raw(h, w);
  std::vector<double> acc(h * w, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    const double wk = weights[k];
    const float* f = features.data() + k * h * w;
    for (std::size_t i = 0; i < h * w; ++i) acc[i] += wk * f[i];
  }
  for (std::size_t i = 0; i < h * w; ++i) raw.values[i] = static_cast<float>(acc[i]);
  return raw;
}

GrayImage normalize_cam(const GrayImage& raw, std::size_t height, std::size_t width) {
  GrayImage map = resize(raw, height, width, Interpolation::bilinear);
  for (auto& v : map.values) v = std::max(v, 0.0f);
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const float low = *lo;
  const float range = *hi - *lo;
  if (!(range > 0.0f)) {
    std::fill(map.values.begin(), map.values.end(), 0.0f);
    return map;
  }
  for (auto& v : map.values) v = std::clamp((v - low) / range, 0.0f, 1.0f);
  return map;
}

template <typename T>
std::array<double, 3> classify(const Classifier<T>& classifier, const ImageRGB& image) {
  NoGradGuard guard;
  const auto probs = classifier.probabilities(images_to_tensor<T>({image}));
  return {static_cast<double>(probs.data()[0]), static_cast<double>(probs.data()[1]),
          static_cast<double>(probs.data()[2])};
}

template <typename T>
std::vector<CamResult> compute_cams(const Classifier<T>& classifier, const std::vector<ImageRGB>& images) {
  if (images.empty()) return {};
  NoGradGuard guard;
  const auto output = classifier.forward(images_to_tensor<T>(images));
  const auto probs = softmax(output.logits);
  const std::size_t k = output.features.dim(1);
  const std::size_t h = output.features.dim(2);
  const std::size_t w = output.features.dim(3);
  std::vector<CamResult> results;
  results.reserve(images.size());
  for (std::size_t n = 0; n < images.size(); ++n) {
    CamResult r;
    for (std::size_t c = 0; c < 3; ++c) r.probabilities[c] = static_cast<double>(probs.data()[n * 3 + c]);
    r.predicted_class = static_cast<int>(
        std::max_element(r.probabilities.begin(), r.probabilities.end()) - r.probabilities.begin());
    std::vector<float> feats(k * h * w);
    std::vector<float> weights(k);
    const auto fsrc = output.features.data().subspan(n * k * h * w, k * h * w);
    std::transform(fsrc.begin(), fsrc.end(), feats.begin(), [](T v) { return static_cast<float>(v); });
    const auto wsrc = classifier.head().weight.data().subspan(static_cast<std::size_t>(r.predicted_class) * k, k);
    std::transform(wsrc.begin(), wsrc.end(), weights.begin(), [](T v) { return static_cast<float>(v); });
    r.attention = normalize_cam(cam_raw_map(feats, k, h, w, weights), images[n].height, images[n].width);
    results.push_back(std::move(r));
  }
  return results;
}

template <typename T>
CamResult compute_cam(const Classifier<T>& classifier, const ImageRGB& image, std::optional<int> target) {
  CamResult r = compute_cams(classifier, {image}).front();
  if (target && *target != r.predicted_class) {
    if (*target < 0 || *target >= static_cast<int>(ClassifierConfig::kClasses)) {
      throw std::invalid_argument("compute_cam: target class out of range");
    }
    NoGradGuard guard;
    const auto output = classifier.forward(images_to_tensor<T>({image}));
    const std::size_t k = output.features.dim(1);
    std::vector<float> feats(output.features.data().begin(), output.features.data().end());
    const auto wsrc = classifier.head().weight.data().subspan(static_cast<std::size_t>(*target) * k, k);
    std::vector<float> weights(wsrc.begin(), wsrc.end());
    r.attention = normalize_cam(cam_raw_map(feats, k, output.features.dim(2), output.features.dim(3), weights),
                                image.height, image.width);
  }
  return r;
}

// ------------------------------------------------------------ generator

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::non_cam: return "non_cam";
    case Variant::non_ca: return "non_ca";
    case Variant::non_sa: return "non_sa";
    case Variant::non_sd: return "non_sd";
  }
  throw std::invalid_argument("invalid variant");
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected full, non_cam, non_ca, non_sa or non_sd)");
}

void GeneratorConfig::validate() const {
  if (base_channels == 0) throw std::invalid_argument("generator: base_channels must be positive");
  DualAttentionSpec spec{base_channels, reduction, spatial_kernel};
  spec.validate();
  spec.channels = 2 * base_channels;
  spec.validate();
}

GeneratorConfig build_ablation(const GeneratorConfig& base, Variant variant) {
  GeneratorConfig cfg = base;
  switch (variant) {
    case Variant::full: break;
    case Variant::non_cam: cfg.use_cam = false; break;
    case Variant::non_ca: cfg.use_channel_attn = false; break;
    case Variant::non_sa: cfg.use_spatial_attn = false; break;
    case Variant::non_sd: cfg.use_smoothing = false; break;
  }
  return cfg;
}

template <typename T>
Generator<T>::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t b = config_.base_channels;
  auto conv = [&](const char* name, std::size_t in, std::size_t out, std::size_t stride = 1) {
    ConvSpec spec = ConvSpec::same(in, out, 3);
    spec.stride = stride;
    Rng rng = layer_rng(seed, name);
    return Conv2d<T>(spec, rng);
  };
  head1_ = conv("head1", config_.input_channels(), b);
  head2_ = conv("head2", b, b);
  down_ = conv("down", b, 2 * b, 2);
  tail1_ = conv("tail1", b, b);
  out_ = conv("out", b, 3);
  head1_norm_ = InstanceNorm<T>(b);
  head2_norm_ = InstanceNorm<T>(b);
  down_norm_ = InstanceNorm<T>(2 * b);
  up_norm_ = InstanceNorm<T>(b);
  tail1_norm_ = InstanceNorm<T>(b);
  {
    Rng rng = layer_rng(seed, "up");
    up_ = TransposeConv2d<T>(2 * b, b, 4, 2, 1, rng);
  }
  for (std::size_t i = 0; i < GeneratorConfig::kDilationRates.size(); ++i) {
    Rng rng = layer_rng(seed, "sd." + std::to_string(i));
    dilated_.emplace_back(SmoothedDilatedSpec{2 * b, GeneratorConfig::kDilationRates[i], config_.use_smoothing}, rng);
  }
  for (std::size_t i = 0; i < GeneratorConfig::kDualAttentionCount; ++i) {
    // Modules 2..9 sit at the half-resolution, double-width stage.
    const std::size_t channels = (i >= 2 && i <= 9) ? 2 * b : b;
    DualAttentionSpec spec{channels,         config_.reduction,        config_.spatial_kernel,
                           config_.use_channel_attn, config_.use_spatial_attn, config_.attention_order};
    Rng rng = layer_rng(seed, "da." + std::to_string(i));
    attention_.emplace_back(spec, rng);
  }
}

template <typename T>
Tensor<T> Generator<T>::conv_in_relu(const Conv2d<T>& conv, const InstanceNorm<T>& norm, const Tensor<T>& x) const {
  return relu(norm(conv(x)));
}

template <typename T>
Tensor<T> Generator<T>::forward(const Tensor<T>& input) const {
  if (input.rank() != 4 || input.dim(1) != config_.input_channels()) {
    throw ShapeError("generator expects [N," + std::to_string(config_.input_channels()) + ",H,W], got " +
                     shape_str(input.shape()));
  }
  if (input.dim(2) % 2 != 0 || input.dim(3) % 2 != 0) {
    throw ShapeError("generator requires even spatial extents, got " + shape_str(input.shape()));
  }
  auto x = attention_[0](conv_in_relu(head1_, head1_norm_, input));
  const auto skip = attention_[1](conv_in_relu(head2_, head2_norm_, x));
  x = attention_[2](conv_in_relu(down_, down_norm_, skip));
  for (std::size_t i = 0; i < dilated_.size(); ++i) x = attention_[3 + i](dilated_[i](x));
  x = attention_[9](x);
  x = attention_[10](add(relu(up_norm_(up_(x))), skip));
  x = attention_[11](conv_in_relu(tail1_, tail1_norm_, x));
  return sigmoid(out_(x));
}

template <typename T>
ParamList<T> Generator<T>::parameters() const {
  ParamList<T> out;
  head1_.collect(out, "head1");
  head1_norm_.collect(out, "head1_norm");
  head2_.collect(out, "head2");
  head2_norm_.collect(out, "head2_norm");
  down_.collect(out, "down");
  down_norm_.collect(out, "down_norm");
  for (std::size_t i = 0; i < dilated_.size(); ++i) dilated_[i].collect(out, "sd." + std::to_string(i));
  up_.collect(out, "up");
  up_norm_.collect(out, "up_norm");
  tail1_.collect(out, "tail1");
  tail1_norm_.collect(out, "tail1_norm");
  out_.collect(out, "out");
  for (std::size_t i = 0; i < attention_.size(); ++i) attention_[i].collect(out, "da." + std::to_string(i));
  return out;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<ImageRGB>& images, const std::vector<GrayImage>* cams) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const std::size_t h = images[0].height;
  const std::size_t w = images[0].width;
  if (cams && cams->size() != images.size()) throw ShapeError("images_to_tensor: CAM count mismatch");
  const std::size_t c = cams ? 4 : 3;
  const std::size_t plane = h * w;
  std::vector<T> data(images.size() * c * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height != h || img.width != w) throw ShapeError("images_to_tensor: images differ in size");
    T* dst = data.data() + n * c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) dst[ch * plane + i] = static_cast<T>(img.pixels[i * 3 + ch]);
    }
    if (cams) {
      const auto& cam = (*cams)[n];
      if (cam.height != h || cam.width != w) {
        throw ShapeError("CAM map " + std::to_string(cam.height) + "x" + std::to_string(cam.width) +
                         " does not match image " + std::to_string(h) + "x" + std::to_string(w));
      }
      for (std::size_t i = 0; i < plane; ++i) dst[3 * plane + i] = static_cast<T>(cam.values[i]);
    }
  }
  return Tensor<T>({images.size(), c, h, w}, std::move(data));
}

template <typename T>
std::vector<ImageRGB> tensor_to_images(const Tensor<T>& tensor) {
  if (tensor.rank() != 4 || tensor.dim(1) != 3) {
    throw ShapeError("tensor_to_images expects [N,3,H,W], got " + shape_str(tensor.shape()));
  }
  const std::size_t h = tensor.dim(2), w = tensor.dim(3), plane = h * w;
  std::vector<ImageRGB> out;
  for (std::size_t n = 0; n < tensor.dim(0); ++n) {
    ImageRGB img(h, w);
    const T* src = tensor.data().data() + n * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[i * 3 + ch] = static_cast<float>(src[ch * plane + i]);
    }
    img.clamp();
    out.push_back(std::move(img));
  }
  return out;
}

template <typename T>
ImageRGB restore(const Generator<T>& generator, const ImageRGB& image, const GrayImage* cam) {
  NoGradGuard guard;
  std::vector<GrayImage> cams;
  if (generator.config().use_cam) {
    if (!cam) throw std::invalid_argument("restore: this network needs a CAM attention map");
    cams.push_back(*cam);
  }
  const auto input = images_to_tensor<T>({image}, generator.config().use_cam ? &cams : nullptr);
  return tensor_to_images(generator.forward(input)).front();
}

KeyValueConfig to_config(const GeneratorConfig& config) {
  KeyValueConfig kv;
  kv.set("network", "generator");
  kv.set("base_channels", config.base_channels);
  kv.set("reduction", config.reduction);
  kv.set("spatial_kernel", config.spatial_kernel);
  kv.set("attention_order", config.attention_order == AttentionOrder::channel_first ? "channel_first" : "spatial_first");
  kv.set("use_cam", config.use_cam);
  kv.set("use_channel_attn", config.use_channel_attn);
  kv.set("use_spatial_attn", config.use_spatial_attn);
  kv.set("use_smoothing", config.use_smoothing);
  return kv;
}

GeneratorConfig generator_config_from(const KeyValueConfig& kv) {
  kv.check_keys({"network", "base_channels", "reduction", "spatial_kernel", "attention_order", "use_cam",
                 "use_channel_attn", "use_spatial_attn", "use_smoothing"},
                "generator config");
  if (kv.get_string("network", "generator") != "generator") throw ConfigError("not a generator config");
  GeneratorConfig cfg;
  cfg.base_channels = static_cast<std::size_t>(kv.get_int("base_channels", static_cast<std::int64_t>(cfg.base_channels)));
  cfg.reduction = static_cast<std::size_t>(kv.get_int("reduction", static_cast<std::int64_t>(cfg.reduction)));
  cfg.spatial_kernel = static_cast<std::size_t>(kv.get_int("spatial_kernel", static_cast<std::int64_t>(cfg.spatial_kernel)));
  const std::string order = kv.get_string("attention_order", "channel_first");
  if (order == "channel_first") {
    cfg.attention_order = AttentionOrder::channel_first;
  } else if (order == "spatial_first") {
    cfg.attention_order = AttentionOrder::spatial_first;
  } else {
    throw ConfigError("attention_order must be channel_first or spatial_first");
  }
  cfg.use_cam = kv.get_bool("use_cam", cfg.use_cam);
  cfg.use_channel_attn = kv.get_bool("use_channel_attn", cfg.use_channel_attn);
  cfg.use_spatial_attn = kv.get_bool("use_spatial_attn", cfg.use_spatial_attn);
  cfg.use_smoothing = kv.get_bool("use_smoothing", cfg.use_smoothing);
  cfg.validate();
  return cfg;
}

KeyValueConfig to_config(const ClassifierConfig& config) {
  KeyValueConfig kv;
  kv.set("network", "classifier");
  kv.set("base_channels", config.base_channels);
  kv.set("strides", join(config.strides));
  kv.set("width_multipliers", join(config.width_multipliers));
  return kv;
}

ClassifierConfig classifier_config_from(const KeyValueConfig& kv) {
  kv.check_keys({"network", "base_channels", "strides", "width_multipliers"}, "classifier config");
  if (kv.get_string("network", "classifier") != "classifier") throw ConfigError("not a classifier config");
  ClassifierConfig cfg;
  cfg.base_channels = static_cast<std::size_t>(kv.get_int("base_channels", static_cast<std::int64_t>(cfg.base_channels)));
  cfg.strides = to_sizes(kv.get_doubles("strides", to_doubles(cfg.strides)));
  cfg.width_multipliers = to_sizes(kv.get_doubles("width_multipliers", to_doubles(cfg.width_multipliers)));
  cfg.validate();
  return cfg;
}

template <typename T>
std::size_t copy_matching_params(const ParamList<T>& src, ParamList<T>& dst) {
  std::size_t copied = 0;
  for (auto& d : dst) {
    for (const auto& s : src) {
      if (s.name == d.name && s.value.shape() == d.value.shape()) {
        std::copy(s.value.data().begin(), s.value.data().end(), d.value.mutable_data().begin());
        ++copied;
        break;
      }
    }
  }
  return copied;
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.numel();
  return total;
}

#define DEMIST_INSTANTIATE_NETWORKS(T)                                                              \
  template class Classifier<T>;                                                                    \
  template class Generator<T>;                                                                     \
  template std::array<double, 3> classify(const Classifier<T>&, const ImageRGB&);                  \
  template CamResult compute_cam(const Classifier<T>&, const ImageRGB&, std::optional<int>);       \
  template std::vector<CamResult> compute_cams(const Classifier<T>&, const std::vector<ImageRGB>&); \
  template Tensor<T> images_to_tensor(const std::vector<ImageRGB>&, const std::vector<GrayImage>*); \
  template std::vector<ImageRGB> tensor_to_images(const Tensor<T>&);                               \
  template ImageRGB restore(const Generator<T>&, const ImageRGB&, const GrayImage*);               \
  template std::size_t copy_matching_params(const ParamList<T>&, ParamList<T>&);                   \
  template std::size_t parameter_count(const ParamList<T>&);

DEMIST_INSTANTIATE_NETWORKS(float)
DEMIST_INSTANTIATE_NETWORKS(double)

}  // namespace demist
