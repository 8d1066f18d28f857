#include "demist/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "demist/rng.hpp"

namespace demist {

std::string_view label_name(ClassLabel label) {
  switch (label) {
    case ClassLabel::clean: return "clean";
    case ClassLabel::raindrop_only: return "raindrop_only";
    case ClassLabel::mist_and_raindrop: return "mist_and_raindrop";
  }
  throw std::invalid_argument("invalid class label");
}

ClassLabel parse_label(std::string_view name) {
  for (int i = 0; i < static_cast<int>(kClassCount); ++i) {
    if (label_name(static_cast<ClassLabel>(i)) == name) return static_cast<ClassLabel>(i);
  }
  throw std::invalid_argument("unknown class label '" + std::string(name) + "'");
}

void SynthParams::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("synth params: ") + what);
  };
  require(drop_count_min >= 0 && drop_count_min <= drop_count_max, "drop_count range is empty");
  require(drop_radius_min > 0 && drop_radius_min <= drop_radius_max, "drop_radius range is empty");
  require(drop_aspect_min > 0 && drop_aspect_min <= drop_aspect_max, "drop_aspect range is empty");
  require(drop_brightness_min <= drop_brightness_max, "drop_brightness range is empty");
  require(drop_blur >= 0, "drop_blur must be non-negative");
  require(drop_rim >= 0 && drop_rim <= 1, "drop_rim must lie in [0, 1]");
  require(drop_highlight >= 0, "drop_highlight must be non-negative");
  require(mist_grid >= 1, "mist_grid must be at least 1");
  require(t_min > 0 && t_min < 1, "t_min must lie in (0, 1)");
  require(mist_density_min >= 0 && mist_density_min <= 1, "mist_density_min must lie in [0, 1]");
  require(airlight_min >= 0 && airlight_min <= airlight_max && airlight_max <= 1,
          "airlight range must be a nonempty subrange of [0, 1]");
}

namespace {

// Bilinear upsampling of a g x g grid so that grid corners land on image corners.
GrayImage upsample_grid(const std::vector<double>& grid, std::size_t g, std::size_t h, std::size_t w) {
  GrayImage out(h, w);
  auto coord = [g](std::size_t i, std::size_t n) {
    return n == 1 || g == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(g - 1) / static_cast<double>(n - 1);
  };
  for (std::size_t y = 0; y < h; ++y) {
    const double sy = coord(y, h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), g - 1);
    const std::size_t y1 = std::min(y0 + 1, g - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = coord(x, w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), g - 1);
      const std::size_t x1 = std::min(x0 + 1, g - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x1];
      const double bottom = (1 - fx) * grid[y1 * g + x0] + fx * grid[y1 * g + x1];
      out.at(y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

ImageRGB box_blur(const ImageRGB& image, int radius) {
  ImageRGB out(image.height, image.width);
  const auto h = static_cast<int>(image.height);
  const auto w = static_cast<int>(image.width);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        int count = 0;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            const int sy = std::clamp(y + dy, 0, h - 1);
            const int sx = std::clamp(x + dx, 0, w - 1);
            acc += image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
            ++count;
          }
        }
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<float>(acc / count);
      }
    }
  }
  return out;
}

float sample_bilinear(const ImageRGB& image, double y, double x, std::size_t c) {
  y = std::clamp(y, 0.0, static_cast<double>(image.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(image.width - 1));
  const auto y0 = static_cast<std::size_t>(y);
  const auto x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, image.height - 1);
  const std::size_t x1 = std::min(x0 + 1, image.width - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = (1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
  const double bottom = (1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
  return static_cast<float>((1 - fy) * top + fy * bottom);
}

bool inside_ellipse(double px, double py, double cx, double cy, double rx, double ry) {
  const double dx = (px - cx) / rx;
  const double dy = (py - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace

ImageRGB compose(const ImageRGB& background, const GrayImage& mask, const ImageRGB& raindrops,
                 const GrayImage& transmission, const ImageRGB& airlight) {
  const std::size_t h = background.height;
  const std::size_t w = background.width;
  auto check = [&](std::size_t hh, std::size_t ww, const char* what) {
    if (hh != h || ww != w) {
      throw std::invalid_argument(std::string("compose: ") + what + " is " + std::to_string(hh) + "x" +
                                  std::to_string(ww) + ", background is " + std::to_string(h) + "x" +
                                  std::to_string(w));
    }
  };
  check(mask.height, mask.width, "mask");
  check(raindrops.height, raindrops.width, "raindrop layer");
  check(transmission.height, transmission.width, "transmission");
  check(airlight.height, airlight.width, "airlight");

  ImageRGB out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double m = mask.values[i];
    const double t = transmission.values[i];
    for (std::size_t c = 0; c < 3; ++c) {
      const double b = background.pixels[i * 3 + c];
      const double r = raindrops.pixels[i * 3 + c];
      const double a = airlight.pixels[i * 3 + c];
      const double v = ((1.0 - m) * b + r) * t + a * (1.0 - t);
      out.pixels[i * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

void rasterize_drop(GrayImage& mask, double cx, double cy, double rx, double ry, bool soft) {
  const auto y_lo = static_cast<std::ptrdiff_t>(std::floor(cy - ry)) - 1;
  const auto y_hi = static_cast<std::ptrdiff_t>(std::ceil(cy + ry)) + 1;
  const auto x_lo = static_cast<std::ptrdiff_t>(std::floor(cx - rx)) - 1;
  const auto x_hi = static_cast<std::ptrdiff_t>(std::ceil(cx + rx)) + 1;
  for (auto y = std::max<std::ptrdiff_t>(y_lo, 0); y <= std::min<std::ptrdiff_t>(y_hi, mask.height - 1); ++y) {
    for (auto x = std::max<std::ptrdiff_t>(x_lo, 0); x <= std::min<std::ptrdiff_t>(x_hi, mask.width - 1); ++x) {
      float coverage = 0.0f;
      if (soft) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy) {
          for (int sx = 0; sx < 4; ++sx) {
            hits += inside_ellipse(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0, cx, cy, rx, ry);
          }
        }
        coverage = static_cast<float>(hits) / 16.0f;
      } else {
        coverage = inside_ellipse(x + 0.5, y + 0.5, cx, cy, rx, ry) ? 1.0f : 0.0f;
      }
      auto& m = mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      m = std::max(m, coverage);
    }
  }
}

RaindropLayer gen_raindrops(const ImageRGB& background, const SynthParams& params, std::uint64_t seed) {
  params.validate();
  const std::size_t h = background.height;
  const std::size_t w = background.width;
  Rng rng(seed);
  RaindropLayer out{GrayImage(h, w), ImageRGB(h, w)};
  const auto count = rng.uniform_int(params.drop_count_min, params.drop_count_max);
  if (count == 0) return out;

  const ImageRGB blurred = box_blur(box_blur(background, params.drop_blur), params.drop_blur);
  for (std::int64_t d = 0; d < count; ++d) {
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double rx = rng.uniform(params.drop_radius_min, params.drop_radius_max);
    const double ry = rx * rng.uniform(params.drop_aspect_min, params.drop_aspect_max);
    const double shift = rng.uniform(params.drop_brightness_min, params.drop_brightness_max);

    GrayImage drop(h, w);
    rasterize_drop(drop, cx, cy, rx, ry, params.soft_mask);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (drop.at(y, x) <= 0.0f) continue;
        out.mask.at(y, x) = std::max(out.mask.at(y, x), drop.at(y, x));
        // A drop acts as a small lens: it shows an inverted, minified view of
        // its surroundings.
        const double px = x + 0.5 - cx;
        const double py = y + 0.5 - cy;
        const double sx = cx - params.drop_minify * px - 0.5;
        const double sy = cy - params.drop_minify * py - 0.5;
        // Normalized ellipse coordinates: the boundary is at radius 1.
        const double ux = px / rx;
        const double uy = py / ry;
        const double rho = std::sqrt(ux * ux + uy * uy);
        const double edge = std::clamp((rho - 0.7) / 0.3, 0.0, 1.0);
        const double rim = 1.0 - params.drop_rim * edge * edge * (3.0 - 2.0 * edge);
        const double hx = ux + 0.35, hy = uy + 0.35;
        const double spot = params.drop_highlight * std::exp(-(hx * hx + hy * hy) / (2.0 * 0.15 * 0.15));
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = (sample_bilinear(blurred, sy, sx, c) + shift) * rim + spot;
          out.layer.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

MistLayer gen_mist(std::size_t height, std::size_t width, const SynthParams& params, std::uint64_t seed) {
  params.validate();
  Rng rng(seed);
  const std::size_t g = params.mist_grid;
  std::vector<double> density(g * g);
  for (auto& v : density) v = rng.uniform(params.mist_density_min, 1.0);
  MistLayer out{upsample_grid(density, g, height, width), ImageRGB(height, width)};
  for (auto& v : out.transmission.values) {
    v = static_cast<float>(1.0 - (1.0 - params.t_min) * static_cast<double>(v));
  }

  const double level = rng.uniform(params.airlight_min, params.airlight_max);
  std::array<double, 3> tint{};
  for (auto& c : tint) c = rng.uniform(-0.03, 0.03);
  GrayImage field(height, width, static_cast<float>(level));
  if (params.spatial_airlight) {
    std::vector<double> grid(g * g);
    for (auto& v : grid) v = rng.uniform(params.airlight_min, params.airlight_max);
    field = upsample_grid(grid, g, height, width);
  }
  for (std::size_t i = 0; i < height * width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.airlight.pixels[i * 3 + c] = static_cast<float>(std::clamp(field.values[i] + tint[c], 0.0, 1.0));
    }
  }
  return out;
}

DegradationSample make_sample(const ImageRGB& background, ClassLabel label, const SynthParams& params,
                              std::uint64_t seed) {
  const std::size_t h = background.height;
  const std::size_t w = background.width;
  DegradationSample s;
  s.background = background;
  s.label = label;
  s.mask = GrayImage(h, w);
  s.raindrops = ImageRGB(h, w);
  s.transmission = GrayImage(h, w, 1.0f);
  s.airlight = ImageRGB(h, w);

  if (label != ClassLabel::clean) {
    // Labelled samples must actually contain drops.
    SynthParams drop_params = params;
    drop_params.drop_count_min = std::max(1, params.drop_count_min);
    drop_params.drop_count_max = std::max(drop_params.drop_count_min, params.drop_count_max);
    auto drops = gen_raindrops(background, drop_params, mix_seed(seed, 1));
    s.mask = std::move(drops.mask);
    s.raindrops = std::move(drops.layer);
  }
  if (label == ClassLabel::mist_and_raindrop) {
    auto mist = gen_mist(h, w, params, mix_seed(seed, 2));
    s.transmission = std::move(mist.transmission);
    s.airlight = std::move(mist.airlight);
  }
  s.degraded = compose(s.background, s.mask, s.raindrops, s.transmission, s.airlight);
  return s;
}

std::vector<DegradationSample> make_dataset(const std::vector<ImageRGB>& backgrounds,
                                            const SynthParams& params, const ClassProportions& proportions,
                                            std::uint64_t seed) {
  if (backgrounds.empty()) throw std::invalid_argument("make_dataset: background list is empty");
  params.validate();
  const double total = proportions.clean + proportions.raindrop_only + proportions.mist_and_raindrop;
  if (proportions.clean < 0 || proportions.raindrop_only < 0 || proportions.mist_and_raindrop < 0 ||
      total <= 0) {
    throw std::invalid_argument("make_dataset: class proportions must be nonnegative with positive sum");
  }
  std::vector<DegradationSample> out;
  out.reserve(backgrounds.size());
  for (std::size_t i = 0; i < backgrounds.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    const double u = rng.uniform() * total;
    ClassLabel label = ClassLabel::mist_and_raindrop;
    if (u < proportions.clean) {
      label = ClassLabel::clean;
    } else if (u < proportions.clean + proportions.raindrop_only) {
      label = ClassLabel::raindrop_only;
    }
    out.push_back(make_sample(backgrounds[i], label, params, rng.next_u64()));
  }
  return out;
}

ImageRGB procedural_background(std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  ImageRGB img(height, width);
  auto color = [&rng](double lo, double hi) {
    return std::array<double, 3>{rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
  };
  const auto sky_top = color(0.35, 0.85);
  const auto sky_bottom = color(0.3, 0.9);
  const auto ground = color(0.1, 0.45);
  const double horizon = rng.uniform(0.45, 0.75) * static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double f = static_cast<double>(y) / static_cast<double>(std::max<std::size_t>(height - 1, 1));
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<float>(static_cast<double>(y) < horizon
                                                 ? (1 - f) * sky_top[c] + f * sky_bottom[c]
                                                 : ground[c] * (0.8 + 0.2 * f));
      }
    }
  }

  const auto blocks = rng.uniform_int(3, 7);
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double bw = rng.uniform(0.1, 0.35) * static_cast<double>(width);
    const double bh = rng.uniform(0.2, 0.7) * static_cast<double>(height);
    const double x0 = rng.uniform(-0.1, 0.95) * static_cast<double>(width);
    const double y1 = horizon + rng.uniform(-0.05, 0.15) * static_cast<double>(height);
    const auto body = color(0.05, 0.8);
    const auto window = color(0.2, 1.0);
    const auto period = rng.uniform_int(3, 6);
    const bool textured = rng.bernoulli(0.7);
    for (std::size_t y = 0; y < height; ++y) {
      if (static_cast<double>(y) < y1 - bh || static_cast<double>(y) >= y1) continue;
      for (std::size_t x = 0; x < width; ++x) {
        if (static_cast<double>(x) < x0 || static_cast<double>(x) >= x0 + bw) continue;
        const auto lx = static_cast<std::int64_t>(static_cast<double>(x) - x0);
        const auto ly = static_cast<std::int64_t>(y1 - static_cast<double>(y));
        const bool lit = textured && lx % period != 0 && ly % period != 0 && (lx / period + ly / period) % 2 == 0;
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(lit ? window[c] : body[c]);
      }
    }
  }

  // Triangular trees / roofs; round shapes are left to the drops.
  const auto trees = rng.uniform_int(1, 4);
  for (std::int64_t d = 0; d < trees; ++d) {
    const double cx = rng.uniform(0.0, static_cast<double>(width));
    const double base = horizon + rng.uniform(0.0, 0.3) * static_cast<double>(height);
    const double th = rng.uniform(0.15, 0.4) * static_cast<double>(height);
    const double half = rng.uniform(0.05, 0.15) * static_cast<double>(width);
    const auto fill = color(0.0, 0.7);
    for (std::size_t y = 0; y < height; ++y) {
      const double yc = static_cast<double>(y) + 0.5;
      if (yc < base - th || yc >= base) continue;
      const double reach = half * (yc - (base - th)) / th;
      for (std::size_t x = 0; x < width; ++x) {
        if (std::abs(static_cast<double>(x) + 0.5 - cx) > reach) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(fill[c]);
      }
    }
  }

  constexpr std::size_t kShadeGrid = 3;
  std::vector<double> shade(kShadeGrid * kShadeGrid);
  for (auto& v : shade) v = rng.uniform(-0.08, 0.08);
  const GrayImage shading = upsample_grid(shade, kShadeGrid, height, width);
  for (std::size_t i = 0; i < height * width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] += shading.values[i];
  }
  img.clamp();
  return img;
}

}  // namespace demist
