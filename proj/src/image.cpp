#include "demist/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace demist {

ImageRGB::ImageRGB(std::size_t h, std::size_t w, float fill)
    : height(h), width(w), pixels(h * w * 3, fill) {}

void ImageRGB::clamp() {
  for (auto& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
}

GrayImage::GrayImage(std::size_t h, std::size_t w, float fill) : height(h), width(w), values(h * w, fill) {}

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

void write_png(const std::filesystem::path& path, std::size_t h, std::size_t w, png_uint_32 format,
               const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string message = img.message;
    png_image_free(&img);
    throw ImageError("cannot write " + path.string() + ": " + message);
  }
}

// 1-D resampling taps for one output coordinate.
struct Taps {
  std::size_t index[4];
  double weight[4];
  int count;
};

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

std::vector<Taps> make_taps(std::size_t in, std::size_t out, Interpolation kind) {
  std::vector<Taps> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const auto last = static_cast<std::ptrdiff_t>(in) - 1;
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    Taps& t = taps[o];
    if (kind == Interpolation::bilinear) {
      const double s = std::clamp(src, 0.0, static_cast<double>(last));
      const auto i0 = static_cast<std::ptrdiff_t>(std::floor(s));
      const double f = s - static_cast<double>(i0);
      t.count = 2;
      t.index[0] = static_cast<std::size_t>(i0);
      t.index[1] = static_cast<std::size_t>(std::min(i0 + 1, last));
      t.weight[0] = 1.0 - f;
      t.weight[1] = f;
    } else {
      const auto base = static_cast<std::ptrdiff_t>(std::floor(src));
      const double f = src - static_cast<double>(base);
      t.count = 4;
      for (int k = 0; k < 4; ++k) {
        const std::ptrdiff_t i = std::clamp<std::ptrdiff_t>(base - 1 + k, 0, last);
        t.index[k] = static_cast<std::size_t>(i);
        t.weight[k] = cubic_weight(f - static_cast<double>(k - 1));
      }
    }
  }
  return taps;
}

// Resamples an interleaved H x W x C buffer.
std::vector<float> resample(const std::vector<float>& src, std::size_t h, std::size_t w, std::size_t channels,
                            std::size_t new_h, std::size_t new_w, Interpolation kind) {
  if (new_h == 0 || new_w == 0) throw ImageError("resize: target extents must be positive");
  if (h == new_h && w == new_w) return src;
  const auto ty = make_taps(h, new_h, kind);
  const auto tx = make_taps(w, new_w, kind);
  std::vector<double> rows(new_h * w * channels, 0.0);
  for (std::size_t oy = 0; oy < new_h; ++oy) {
    const Taps& t = ty[oy];
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int k = 0; k < t.count; ++k) acc += t.weight[k] * src[(t.index[k] * w + x) * channels + c];
        rows[(oy * w + x) * channels + c] = acc;
      }
    }
  }
  std::vector<float> out(new_h * new_w * channels);
  for (std::size_t oy = 0; oy < new_h; ++oy) {
    for (std::size_t ox = 0; ox < new_w; ++ox) {
      const Taps& t = tx[ox];
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int k = 0; k < t.count; ++k) acc += t.weight[k] * rows[(oy * w + t.index[k]) * channels + c];
        out[(oy * new_w + ox) * channels + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace

ImageRGB load_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageError("cannot read " + path.string() + ": " + img.message);
  }
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw ImageError("unsupported bit depth in " + path.string() + " (only 8-bit PNG is accepted)");
  }
  // Decode as RGBA so that alpha is discarded rather than composited.
  img.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    const std::string message = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode " + path.string() + ": " + message);
  }
  ImageRGB out(img.height, img.width);
  for (std::size_t i = 0; i < out.height * out.width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = static_cast<float>(bytes[i * 4 + c]) / 255.0f;
  }
  return out;
}

void save_png(const ImageRGB& image, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
  write_png(path, image.height, image.width, PNG_FORMAT_RGB, bytes);
}

void save_gray_png(const GrayImage& image, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(image.values.size());
  std::transform(image.values.begin(), image.values.end(), bytes.begin(), to_byte);
  write_png(path, image.height, image.width, PNG_FORMAT_GRAY, bytes);
}

GrayImage rgb_to_luma(const ImageRGB& image) {
  GrayImage out(image.height, image.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double y = 0.299 * image.pixels[i * 3] + 0.587 * image.pixels[i * 3 + 1] +
                     0.114 * image.pixels[i * 3 + 2];
    out.values[i] = static_cast<float>(255.0 * y);
  }
  return out;
}

ImageRGB resize(const ImageRGB& image, std::size_t new_h, std::size_t new_w, Interpolation kind) {
  ImageRGB out;
  out.height = new_h;
  out.width = new_w;
  out.pixels = resample(image.pixels, image.height, image.width, 3, new_h, new_w, kind);
  out.clamp();
  return out;
}

GrayImage resize(const GrayImage& image, std::size_t new_h, std::size_t new_w, Interpolation kind) {
  GrayImage out;
  out.height = new_h;
  out.width = new_w;
  out.values = resample(image.values, image.height, image.width, 1, new_h, new_w, kind);
  return out;
}

ImageRGB flip_horizontal(const ImageRGB& image) {
  ImageRGB out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
    }
  }
  return out;
}

ImageRGB rotate_180(const ImageRGB& image) {
  ImageRGB out(image.height, image.width);
  const std::size_t n = image.height * image.width;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.pixels[(n - 1 - i) * 3 + c] = image.pixels[i * 3 + c];
  }
  return out;
}

ImageRGB pad_reflect(const ImageRGB& image, std::size_t new_h, std::size_t new_w) {
  if (new_h < image.height || new_w < image.width) throw ImageError("pad_reflect: target smaller than image");
  if ((new_h - image.height >= image.height && image.height > 1) ||
      (new_w - image.width >= image.width && image.width > 1)) {
    throw ImageError("pad_reflect: padding exceeds image extent");
  }
  auto reflect = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    return i < n ? i : 2 * (n - 1) - i;
  };
  ImageRGB out(new_h, new_w);
  for (std::size_t y = 0; y < new_h; ++y) {
    for (std::size_t x = 0; x < new_w; ++x) {
      const std::size_t sy = reflect(y, image.height);
      const std::size_t sx = reflect(x, image.width);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

ImageRGB crop(const ImageRGB& image, std::size_t h, std::size_t w) {
  if (h > image.height || w > image.width) throw ImageError("crop: target larger than image");
  ImageRGB out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>(y * image.width * 3), w * 3,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * 3));
  }
  return out;
}

}  // namespace demist
