#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace demist {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x 3 image, interleaved RGB, components in [0, 1].
struct ImageRGB {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  ImageRGB() = default;
  ImageRGB(std::size_t h, std::size_t w, float fill = 0.0f);

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  bool same_size(const ImageRGB& other) const { return height == other.height && width == other.width; }
  void clamp();
};

/// Single-channel H x W field (masks, transmission, luma, attention maps).
/// The value range depends on use.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, float fill = 0.0f);

  float& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Reads 8-bit gray, RGB or RGBA PNG (alpha is dropped, gray is replicated).
ImageRGB load_png(const std::filesystem::path& path);
/// Writes 8-bit RGB, each component round(v * 255) after clamping to [0, 1].
void save_png(const ImageRGB& image, const std::filesystem::path& path);
/// Writes an 8-bit grayscale PNG; values are clamped to [0, 1] first.
void save_gray_png(const GrayImage& image, const std::filesystem::path& path);

/// Full-range BT.601 luma scaled to [0, 255].
GrayImage rgb_to_luma(const ImageRGB& image);

enum class Interpolation { bilinear, bicubic };

/// Separable resampling with half-pixel centers and clamp-to-edge. Output is
/// clamped to [0, 1] (only bicubic can overshoot).
ImageRGB resize(const ImageRGB& image, std::size_t new_h, std::size_t new_w,
                Interpolation kind = Interpolation::bilinear);
/// Same as above without the output clamp.
GrayImage resize(const GrayImage& image, std::size_t new_h, std::size_t new_w,
                 Interpolation kind = Interpolation::bilinear);

ImageRGB flip_horizontal(const ImageRGB& image);
ImageRGB rotate_180(const ImageRGB& image);

/// Reflect-pads on the bottom/right to (new_h, new_w); crop() undoes it.
ImageRGB pad_reflect(const ImageRGB& image, std::size_t new_h, std::size_t new_w);
ImageRGB crop(const ImageRGB& image, std::size_t h, std::size_t w);

}  // namespace demist
