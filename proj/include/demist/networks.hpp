#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "demist/blocks.hpp"
#include "demist/config.hpp"
#include "demist/image.hpp"

namespace demist {

// ------------------------------------------------------------ classifier

struct ClassifierConfig {
  static constexpr std::size_t kConvLayers = 7;
  static constexpr std::size_t kClasses = 3;

  std::size_t base_channels = 16;
  std::vector<std::size_t> strides = {1, 2, 1, 2, 1, 2, 1};
  std::vector<std::size_t> width_multipliers = {1, 1, 2, 2, 4, 4, 4};

  std::size_t final_channels() const { return base_channels * width_multipliers.back(); }
  void validate() const;
};

/// Seven 3x3 conv + ReLU layers, global max pooling, one dense layer to the
/// three class logits.
template <typename T>
class Classifier {
 public:
  struct Output {
    Tensor<T> logits;    // [N, 3]
    Tensor<T> features;  // [N, K, h, w], input to the pooling layer
  };

  Classifier(const ClassifierConfig& config, std::uint64_t seed);

  Output forward(const Tensor<T>& images) const;
  Tensor<T> probabilities(const Tensor<T>& images) const { return softmax(forward(images).logits); }

  const ClassifierConfig& config() const { return config_; }
  Dense<T>& head() { return head_; }
  const Dense<T>& head() const { return head_; }
  ParamList<T> parameters() const;

 private:
  ClassifierConfig config_;
  std::vector<Conv2d<T>> convs_;
  Dense<T> head_;
};

struct CamResult {
  std::array<double, 3> probabilities{};
  int predicted_class = 0;
  GrayImage attention;  // input-sized, values in [0, 1]
};

/// sum_k weights[k] * features[k] over a K x h x w feature block.
GrayImage cam_raw_map(std::span<const float> features, std::size_t channels, std::size_t h, std::size_t w,
                      std::span<const float> weights);
/// Bilinear resize to (H, W), negatives clamped to 0, min-max normalized.
/// A constant map yields all zeros.
GrayImage normalize_cam(const GrayImage& raw, std::size_t height, std::size_t width);

template <typename T>
std::array<double, 3> classify(const Classifier<T>& classifier, const ImageRGB& image);

/// Class activation map for `target` (default: the predicted class).
template <typename T>
CamResult compute_cam(const Classifier<T>& classifier, const ImageRGB& image, std::optional<int> target = {});

template <typename T>
std::vector<CamResult> compute_cams(const Classifier<T>& classifier, const std::vector<ImageRGB>& images);

// ------------------------------------------------------------ generator

enum class Variant { full, non_cam, non_ca, non_sa, non_sd };
inline constexpr std::array<Variant, 5> kAllVariants = {Variant::full, Variant::non_cam, Variant::non_ca,
                                                       Variant::non_sa, Variant::non_sd};
std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct GeneratorConfig {
  static constexpr std::array<std::size_t, 6> kDilationRates = {2, 2, 2, 4, 4, 4};
  static constexpr std::size_t kDualAttentionCount = 12;

  std::size_t base_channels = 16;
  std::size_t reduction = 4;
  std::size_t spatial_kernel = 7;
  AttentionOrder attention_order = AttentionOrder::channel_first;
  bool use_cam = true;
  bool use_channel_attn = true;
  bool use_spatial_attn = true;
  bool use_smoothing = true;

  std::size_t input_channels() const { return use_cam ? 4 : 3; }
  void validate() const;
};

GeneratorConfig build_ablation(const GeneratorConfig& base, Variant variant);

/// Attentive encoder-decoder restoration network.
///
///   in (RGB [+ CAM]) -> conv-IN-ReLU, DA -> conv-IN-ReLU, DA      (skip S)
///   -> stride-2 conv-IN-ReLU (2x channels), DA
///   -> 6 x [smoothed dilated block, DA]  (rates 2,2,2,4,4,4)
///   -> DA -> transpose conv x2 -IN-ReLU, + S, DA
///   -> conv-IN-ReLU, DA -> conv to RGB -> sigmoid
///
/// DA = dual attention; twelve in total. Spatial extents must be even.
template <typename T>
class Generator {
 public:
  Generator(const GeneratorConfig& config, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& input) const;

  const GeneratorConfig& config() const { return config_; }
  ParamList<T> parameters() const;
  std::vector<SmoothedDilatedBlock<T>>& dilated_blocks() { return dilated_; }
  std::vector<DualAttention<T>>& attention_modules() { return attention_; }

 private:
  Tensor<T> conv_in_relu(const Conv2d<T>& conv, const InstanceNorm<T>& norm, const Tensor<T>& x) const;

  GeneratorConfig config_;
  Conv2d<T> head1_, head2_, down_, tail1_, out_;
  InstanceNorm<T> head1_norm_, head2_norm_, down_norm_, up_norm_, tail1_norm_;
  TransposeConv2d<T> up_;
  std::vector<SmoothedDilatedBlock<T>> dilated_;
  std::vector<DualAttention<T>> attention_;
};

/// Packs images (and optional per-image CAM planes) into [N, 3(+1), H, W].
template <typename T>
Tensor<T> images_to_tensor(const std::vector<ImageRGB>& images, const std::vector<GrayImage>* cams = nullptr);
template <typename T>
std::vector<ImageRGB> tensor_to_images(const Tensor<T>& tensor);

/// Runs the generator on one image. `cam` is required when the network was
/// built with use_cam and ignored otherwise.
template <typename T>
ImageRGB restore(const Generator<T>& generator, const ImageRGB& image, const GrayImage* cam);

KeyValueConfig to_config(const GeneratorConfig& config);
GeneratorConfig generator_config_from(const KeyValueConfig& config);
KeyValueConfig to_config(const ClassifierConfig& config);
ClassifierConfig classifier_config_from(const KeyValueConfig& config);

/// Copies values of same-named, same-shaped parameters from `src` into `dst`;
/// returns the number of tensors copied.
template <typename T>
std::size_t copy_matching_params(const ParamList<T>& src, ParamList<T>& dst);

/// Total number of scalar parameters.
template <typename T>
std::size_t parameter_count(const ParamList<T>& params);

}  // namespace demist
