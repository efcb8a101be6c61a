#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cfsl/errors.hpp"
#include "cfsl/rng.hpp"

namespace cfsl::data {

// Parameters of one augmentation strategy. Transforms run in a fixed order:
// random resized crop, horizontal flip, color jitter, grayscale.
struct AugmentPolicy {
  std::string strategy = "standard";
  double crop_scale_min = 0.5, crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 1.0;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4;
  double gray_p = 0.0;

  static AugmentPolicy standard() { return {}; }

  static AugmentPolicy simclr() {
    AugmentPolicy p;
    p.strategy = "simclr";
    p.crop_scale_min = 0.2;
    p.jitter_p = 0.8;
    p.gray_p = 0.2;
    return p;
  }

  // Full-image crop, nothing else: output equals input bit for bit.
  static AugmentPolicy identity() {
    AugmentPolicy p;
    p.strategy = "identity";
    p.crop_scale_min = p.crop_scale_max = 1.0;
    p.crop_ratio_min = p.crop_ratio_max = 1.0;
    p.flip_p = p.jitter_p = p.gray_p = 0.0;
    return p;
  }

  static AugmentPolicy named(const std::string& name) {
    if (name == "standard") return standard();
    if (name == "simclr") return simclr();
    if (name == "identity") return identity();
    throw ConfigError("unknown augmentation strategy '" + name + "'");
  }

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
      throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) throw ConfigError("invalid crop ratio range");
    if (!prob(flip_p) || !prob(jitter_p) || !prob(gray_p)) throw ConfigError("probabilities must lie in [0, 1]");
    if (brightness < 0 || contrast < 0 || saturation < 0) throw ConfigError("jitter strengths must be >= 0");
  }
};

// A [channels, height, width] raster.
struct ImageView {
  std::span<const double> data;
  std::size_t channels, height, width;
};

struct CropBox {
  std::size_t top, left, height, width;
};

// Area fraction and log-uniform aspect ratio, up to 10 attempts, then the
// largest centered crop within the ratio bounds.
inline CropBox sample_crop(std::size_t height, std::size_t width, const AugmentPolicy& p, Rng& rng) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(p.crop_ratio_min), log_hi = std::log(p.crop_ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, p.crop_scale_min, p.crop_scale_max);
    const double ratio = std::exp(uniform(rng, log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const std::size_t top = uniform_index(rng, height - h + 1);
      const std::size_t left = uniform_index(rng, width - w + 1);
      return {top, left, h, w};
    }
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < p.crop_ratio_min) {
    h = static_cast<std::size_t>(std::lround(static_cast<double>(w) / p.crop_ratio_min));
  } else if (in_ratio > p.crop_ratio_max) {
    w = static_cast<std::size_t>(std::lround(static_cast<double>(h) * p.crop_ratio_max));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

// Bilinear resample of `box` to height×width with half-pixel centers and
// edge clamping.
inline std::vector<double> crop_resize(const ImageView& img, const CropBox& box) {
  const std::size_t H = img.height, W = img.width;
  std::vector<double> out(img.channels * H * W);
  const double sy = static_cast<double>(box.height) / static_cast<double>(H);
  const double sx = static_cast<double>(box.width) / static_cast<double>(W);
  auto axis = [](double src, std::size_t lo, std::size_t extent, std::size_t& i0, std::size_t& i1, double& frac) {
    src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
    const auto base = static_cast<std::size_t>(std::floor(src));
    frac = src - static_cast<double>(base);
    i0 = lo + base;
    i1 = lo + std::min(base + 1, extent - 1);
  };
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t y0, y1;
    double fy;
    axis((static_cast<double>(y) + 0.5) * sy - 0.5, box.top, box.height, y0, y1, fy);
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t x0, x1;
      double fx;
      axis((static_cast<double>(x) + 0.5) * sx - 0.5, box.left, box.width, x0, x1, fx);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double* plane = img.data.data() + c * H * W;
        const double top = plane[y0 * W + x0] * (1.0 - fx) + plane[y0 * W + x1] * fx;
        const double bottom = plane[y1 * W + x0] * (1.0 - fx) + plane[y1 * W + x1] * fx;
        out[(c * H + y) * W + x] = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

inline void flip_horizontal(std::vector<double>& img, std::size_t channels, std::size_t height, std::size_t width) {
  for (std::size_t row = 0; row < channels * height; ++row) {
    std::reverse(img.begin() + static_cast<std::ptrdiff_t>(row * width),
                 img.begin() + static_cast<std::ptrdiff_t>((row + 1) * width));
  }
}

namespace detail {

inline double luminance(const std::vector<double>& img, std::size_t plane, std::size_t i) {
  return 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
}

inline void clamp01(std::vector<double>& img) {
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace detail

// Brightness (scale), contrast (toward mean luminance), saturation (toward
// per-pixel luminance), each factor drawn from [max(0, 1 − s), 1 + s] and
// each step clamped to [0, 1]. Single-channel images skip saturation.
inline void color_jitter(std::vector<double>& img, std::size_t channels, const AugmentPolicy& p, Rng& rng) {
  const std::size_t plane = img.size() / channels;
  auto factor = [&](double s) { return uniform(rng, std::max(0.0, 1.0 - s), 1.0 + s); };
  const double b = factor(p.brightness), c = factor(p.contrast), s = factor(p.saturation);
  for (auto& v : img) v *= b;
  detail::clamp01(img);

  double mean = 0.0;
  if (channels == 3) {
    for (std::size_t i = 0; i < plane; ++i) mean += detail::luminance(img, plane, i);
  } else {
    for (std::size_t i = 0; i < plane; ++i) mean += img[i];
  }
  mean /= static_cast<double>(plane);
  for (auto& v : img) v = mean + c * (v - mean);
  detail::clamp01(img);

  if (channels == 3) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double g = detail::luminance(img, plane, i);
      for (std::size_t ch = 0; ch < 3; ++ch) img[ch * plane + i] = g + s * (img[ch * plane + i] - g);
    }
    detail::clamp01(img);
  }
}

inline void to_grayscale(std::vector<double>& img, std::size_t channels) {
  if (channels != 3) return;
  const std::size_t plane = img.size() / 3;
  for (std::size_t i = 0; i < plane; ++i) {
    const double g = detail::luminance(img, plane, i);
    img[i] = img[plane + i] = img[2 * plane + i] = g;
  }
}

// Pure function of (image, policy, seed). Shape is preserved and values stay
// in [0, 1].
inline std::vector<double> augment(const ImageView& img, const AugmentPolicy& p, std::uint64_t seed) {
  Rng rng(seed);
  auto out = crop_resize(img, sample_crop(img.height, img.width, p, rng));
  if (bernoulli(rng, p.flip_p)) flip_horizontal(out, img.channels, img.height, img.width);
  if (bernoulli(rng, p.jitter_p)) color_jitter(out, img.channels, p, rng);
  if (bernoulli(rng, p.gray_p)) to_grayscale(out, img.channels);
  return out;
}

}  // namespace cfsl::data
