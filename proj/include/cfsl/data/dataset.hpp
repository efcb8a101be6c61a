#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsl/rng.hpp"
#include "cfsl/tensor/io.hpp"

namespace cfsl::data {

// Images of one split stored contiguously as [n, channels, height, width]
// with values in [0, 1]. Labels are dense local ids 0..num_classes−1;
// class_names carry the globally unique identity used for disjointness checks.
struct DatasetSplit {
  std::string role = "train";
  std::size_t channels = 3, height = 32, width = 32;
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t image_numel() const { return channels * height * width; }

  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * image_numel(), image_numel()};
  }

  // Stacks the selected images into [n, channels, height, width].
  Tensor images(const std::vector<std::size_t>& indices) const {
    std::vector<double> out;
    out.reserve(indices.size() * image_numel());
    for (auto i : indices) {
      auto img = image(i);
      out.insert(out.end(), img.begin(), img.end());
    }
    return Tensor({indices.size(), channels, height, width}, std::move(out));
  }

  std::vector<std::vector<std::size_t>> indices_by_class() const {
    std::vector<std::vector<std::size_t>> out(num_classes());
    for (std::size_t i = 0; i < labels.size(); ++i) out.at(labels[i]).push_back(i);
    return out;
  }

  void append(std::span<const double> img, std::size_t label) {
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }
};

inline void require_disjoint(const DatasetSplit& a, const DatasetSplit& b) {
  for (const auto& name : a.class_names) {
    if (std::find(b.class_names.begin(), b.class_names.end(), name) != b.class_names.end()) {
      throw DataError("class '" + name + "' appears in both the " + a.role + " and " + b.role + " splits");
    }
  }
}

struct SynthSpec {
  std::size_t n_classes = 8;
  std::size_t per_class = 60;
  std::size_t image_size = 32;
  double difficulty = 0.2;
  std::uint64_t seed = 0;
  std::size_t first_class = 0;  // global id of class 0, keeps splits disjoint
  std::string role = "train";
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Signed "inside-ness" of point (x, y) relative to a unit shape centered at
// the origin: positive inside, ~distance to the edge in shape units.
inline double shape_field(std::size_t kind, double x, double y) {
  switch (kind % 4) {
    case 0: return 1.0 - std::hypot(x, y);                    // disk
    case 1: return 1.0 - std::max(std::abs(x), std::abs(y));  // square
    case 2: return 0.35 - std::abs(std::hypot(x, y) - 0.65);  // ring
    default:  // plus sign
      return std::max(std::min(0.3 - std::abs(x), 1.0 - std::abs(y)), std::min(0.3 - std::abs(y), 1.0 - std::abs(x)));
  }
}

}  // namespace detail

// Procedural class-conditional images: each class owns a hue, a shape and a
// background tint; instances jitter in position, scale and hue and receive
// pixel noise, all proportional to `difficulty`. With difficulty 0 every image
// of a class is identical.
inline DatasetSplit synth_dataset(const SynthSpec& spec) {
  if (spec.n_classes == 0 || spec.per_class == 0 || spec.image_size < 4) {
    throw ConfigError("synth: need at least one class, one image per class and size >= 4");
  }
  if (spec.difficulty < 0.0 || spec.difficulty > 1.0) throw ConfigError("synth.difficulty must lie in [0, 1]");
  DatasetSplit split;
  split.role = spec.role;
  split.channels = 3;
  split.height = split.width = spec.image_size;
  const std::size_t n = spec.image_size;
  const double d = spec.difficulty;
  constexpr double kGolden = 0.6180339887498949;
  std::vector<double> img(3 * n * n);
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    const std::size_t g = spec.first_class + k;
    split.class_names.push_back("class_" + std::to_string(g));
    const double hue = static_cast<double>(g) * kGolden;
    const std::size_t kind = g % 4;
    const double base_radius = 0.30 + 0.06 * static_cast<double>((g / 4) % 3);
    const auto bg = detail::hsv_to_rgb(hue + 0.5, 0.25, 0.25 + 0.15 * static_cast<double>(g % 3));
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng(derive_seed({spec.seed, g, i}));
      const double cx = 0.5 + d * uniform(rng, -0.25, 0.25);
      const double cy = 0.5 + d * uniform(rng, -0.25, 0.25);
      const double radius = base_radius * (1.0 + d * uniform(rng, -0.5, 0.5));
      const auto fg = detail::hsv_to_rgb(hue + d * uniform(rng, -0.05, 0.05), 0.85, 0.9);
      const double edge = 1.0 / (static_cast<double>(n) * radius);  // one pixel in shape units
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double px = ((static_cast<double>(x) + 0.5) / static_cast<double>(n) - cx) / radius;
          const double py = ((static_cast<double>(y) + 0.5) / static_cast<double>(n) - cy) / radius;
          const double alpha = std::clamp(0.5 + detail::shape_field(kind, px, py) / edge, 0.0, 1.0);
          for (std::size_t c = 0; c < 3; ++c) {
            double v = (1.0 - alpha) * bg[c] + alpha * fg[c];
            if (d > 0.0) v += normal(rng, 0.0, 0.1 * d);
            img[(c * n + y) * n + x] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      split.append(img, k);
    }
  }
  return split;
}

// Manifest: {"role", "channels", "height", "width",
//            "classes": [{"name", "label", "file", "count"}]}
// with one tensor file of shape [count, channels, height, width] per class,
// stored next to the manifest.
inline void save_split(const DatasetSplit& split, const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path dir = manifest_path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  nlohmann::ordered_json manifest{{"role", split.role},
                                  {"channels", split.channels},
                                  {"height", split.height},
                                  {"width", split.width},
                                  {"classes", nlohmann::ordered_json::array()}};
  auto groups = split.indices_by_class();
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const std::string file = split.role + "_" + split.class_names[k] + ".epct";
    save_tensor((dir / file).string(), split.images(groups[k]));
    manifest["classes"].push_back(
        {{"name", split.class_names[k]}, {"label", k}, {"file", file}, {"count", groups[k].size()}});
  }
  std::ofstream os(manifest_path);
  if (!os) throw DataError("cannot write manifest " + manifest_path.string());
  os << manifest.dump(2) << '\n';
}

// Loads and validates a split. `min_per_class` is the episode requirement
// K + Q; a smaller class is rejected by name.
inline DatasetSplit load_split(const std::filesystem::path& manifest_path, std::size_t min_per_class = 1) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("missing file: " + manifest_path.string(), DataError::Kind::kMissingFile);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what(), DataError::Kind::kFormat);
  }
  DatasetSplit split;
  try {
    split.role = manifest.value("role", "train");
    split.channels = manifest.at("channels").get<std::size_t>();
    split.height = manifest.at("height").get<std::size_t>();
    split.width = manifest.at("width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what(), DataError::Kind::kFormat);
  }
  const auto classes = manifest.value("classes", nlohmann::json::array());
  if (classes.empty()) throw DataError("empty split: " + manifest_path.string(), DataError::Kind::kEmptySplit);

  std::vector<const nlohmann::json*> by_label(classes.size(), nullptr);
  for (const auto& c : classes) {
    const auto label = c.at("label").get<std::size_t>();
    if (label >= classes.size() || by_label[label]) {
      throw DataError("label gap: labels must be 0.." + std::to_string(classes.size() - 1) + " without repeats, got " +
                          std::to_string(label),
                      DataError::Kind::kLabelGap);
    }
    by_label[label] = &c;
  }
  const auto dir = manifest_path.parent_path();
  for (std::size_t k = 0; k < by_label.size(); ++k) {
    const auto& c = *by_label[k];
    const auto name = c.at("name").get<std::string>();
    const auto count = c.at("count").get<std::size_t>();
    if (count < min_per_class) {
      throw DataError("class too small: '" + name + "' has " + std::to_string(count) + " images, episodes need " +
                          std::to_string(min_per_class),
                      DataError::Kind::kClassTooSmall);
    }
    const auto file = (dir / c.at("file").get<std::string>()).string();
    if (!std::filesystem::exists(file)) {
      throw DataError("missing file: " + file, DataError::Kind::kMissingFile);
    }
    Tensor t = load_tensor(file);
    if (t.shape() != Shape{count, split.channels, split.height, split.width}) {
      throw DataError("class '" + name + "' tensor has shape " + to_string(t.shape()), DataError::Kind::kFormat);
    }
    split.class_names.push_back(name);
    for (std::size_t i = 0; i < count; ++i) split.append(t.data().subspan(i * split.image_numel(), split.image_numel()), k);
  }
  return split;
}

}  // namespace cfsl::data
