#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "demist/image.hpp"

namespace demist {

enum class ClassLabel : int { clean = 0, raindrop_only = 1, mist_and_raindrop = 2 };
inline constexpr std::size_t kClassCount = 3;

std::string_view label_name(ClassLabel label);
ClassLabel parse_label(std::string_view name);

/// Knobs of the procedural degradation model. Lengths are in pixels.
struct SynthParams {
  int drop_count_min = 3;
  int drop_count_max = 8;
  double drop_radius_min = 2.0;
  double drop_radius_max = 10.0;
  double drop_aspect_min = 0.75;  // ry / rx
  double drop_aspect_max = 1.25;
  double drop_brightness_min = 0.08;
  double drop_brightness_max = 0.25;
  double drop_minify = 0.6;  // inverted, shrunk view through the drop
  int drop_blur = 3;          // box radius, applied twice (defocus of the drop view)
  double drop_rim = 0.35;     // darkening toward the drop boundary
  double drop_highlight = 0.5;  // specular spot toward the upper left
  std::size_t mist_grid = 4;
  double t_min = 0.3;
  double mist_density_min = 0.3;  // lower bound of coarse mist opacity samples
  double airlight_min = 0.75;
  double airlight_max = 0.95;
  bool soft_mask = false;
  bool spatial_airlight = false;

  /// Throws std::invalid_argument on empty ranges or t_min outside (0, 1).
  void validate() const;
};

struct ClassProportions {
  double clean = 0.2;
  double raindrop_only = 0.4;
  double mist_and_raindrop = 0.4;
};

struct RaindropLayer {
  GrayImage mask;    // M
  ImageRGB layer;    // R, zero outside M
};

struct MistLayer {
  GrayImage transmission;  // t in [t_min, 1]
  ImageRGB airlight;       // A
};

struct DegradationSample {
  ImageRGB background;  // B, also the ground truth
  GrayImage mask;
  ImageRGB raindrops;
  GrayImage transmission;
  ImageRGB airlight;
  ImageRGB degraded;
  ClassLabel label = ClassLabel::clean;
};

/// ((1 - M) * B + R) * t + A * (1 - t), with M and t broadcast over color,
/// clamped to [0, 1].
ImageRGB compose(const ImageRGB& background, const GrayImage& mask, const ImageRGB& raindrops,
                 const GrayImage& transmission, const ImageRGB& airlight);

/// Marks pixels whose centers fall inside the ellipse. With `soft`, stores
/// 4x4 supersampled coverage instead (max-combined with existing values).
void rasterize_drop(GrayImage& mask, double cx, double cy, double rx, double ry, bool soft = false);

RaindropLayer gen_raindrops(const ImageRGB& background, const SynthParams& params, std::uint64_t seed);
MistLayer gen_mist(std::size_t height, std::size_t width, const SynthParams& params, std::uint64_t seed);

DegradationSample make_sample(const ImageRGB& background, ClassLabel label, const SynthParams& params,
                              std::uint64_t seed);

/// One sample per background; labels drawn per `proportions`, sample i uses
/// a seed derived from (seed, i) only.
std::vector<DegradationSample> make_dataset(const std::vector<ImageRGB>& backgrounds,
                                            const SynthParams& params, const ClassProportions& proportions,
                                            std::uint64_t seed);

/// Synthetic street-like scene: sky/ground gradient, blocks with window
/// textures, discs, and low-frequency shading.
ImageRGB procedural_background(std::size_t height, std::size_t width, std::uint64_t seed);

}  // namespace demist
