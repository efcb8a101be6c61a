#pragma once

#include <array>
#include <string>
#include <vector>

#include "cfsl/data/augment.hpp"
#include "cfsl/data/dataset.hpp"

namespace cfsl::data {

struct EpisodeSpec {
  std::size_t ways = 5, shots = 1, queries = 15;

  void validate(const DatasetSplit& split) const {
    if (ways == 0 || shots == 0) throw ConfigError("episodes need at least one way and one shot");
    if (ways > split.num_classes()) {
      throw DataError("episode asks for " + std::to_string(ways) + " ways but the " + split.role + " split has " +
                      std::to_string(split.num_classes()) + " classes");
    }
    auto groups = split.indices_by_class();
    for (std::size_t k = 0; k < groups.size(); ++k) {
      if (groups[k].size() < shots + queries) {
        throw DataError("class too small: '" + split.class_names[k] + "' has " + std::to_string(groups[k].size()) +
                            " images, episodes need " + std::to_string(shots + queries),
                        DataError::Kind::kClassTooSmall);
      }
    }
  }
};

// Index sets of one episode. Support is class-major (slot k·K + s), queries
// k·Q + q; labels are episode-local 0..M−1 and `classes[k]` is the split label.
struct Episode {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> support, query;
  std::vector<std::size_t> support_labels, query_labels;
};

// Draws M classes uniformly without replacement, then K + Q distinct images
// per class. Deterministic in the seed.
class EpisodeSampler {
 public:
  EpisodeSampler(const DatasetSplit& split, EpisodeSpec spec) : spec_(spec), groups_(split.indices_by_class()) {
    spec_.validate(split);
  }

  const EpisodeSpec& spec() const { return spec_; }

  Episode sample(std::uint64_t seed) const {
    Rng rng(seed);
    std::vector<std::size_t> classes(groups_.size());
    for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i;
    partial_shuffle(classes, spec_.ways, rng);
    classes.resize(spec_.ways);

    Episode e;
    e.classes = classes;
    for (std::size_t k = 0; k < spec_.ways; ++k) {
      auto pool = groups_[classes[k]];
      partial_shuffle(pool, spec_.shots + spec_.queries, rng);
      for (std::size_t s = 0; s < spec_.shots; ++s) {
        e.support.push_back(pool[s]);
        e.support_labels.push_back(k);
      }
      for (std::size_t q = 0; q < spec_.queries; ++q) {
        e.query.push_back(pool[spec_.shots + q]);
        e.query_labels.push_back(k);
      }
    }
    return e;
  }

 private:
  static void partial_shuffle(std::vector<std::size_t>& v, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) std::swap(v[i], v[i + uniform_index(rng, v.size() - i)]);
  }

  EpisodeSpec spec_;
  std::vector<std::vector<std::size_t>> groups_;
};

inline Tensor augment_images(const DatasetSplit& split, const std::vector<std::size_t>& indices,
                             const AugmentPolicy& policy, std::uint64_t view_seed) {
  std::vector<double> out;
  out.reserve(indices.size() * split.image_numel());
  for (std::size_t slot = 0; slot < indices.size(); ++slot) {
    auto img = augment({split.image(indices[slot]), split.channels, split.height, split.width}, policy,
                       derive_seed({view_seed, slot}));
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), split.channels, split.height, split.width}, std::move(out));
}

// Two independently augmented realizations of one episode's images.
struct ViewedImages {
  std::array<Tensor, 2> support, query;  // [M·K | M·Q, ch, H, W] per view
  Episode episode;
};

inline ViewedImages make_viewed_episode(const DatasetSplit& split, const Episode& episode,
                                        const AugmentPolicy& policy_a, const AugmentPolicy& policy_b,
                                        std::array<std::uint64_t, 2> seeds) {
  ViewedImages v;
  v.episode = episode;
  const std::array<const AugmentPolicy*, 2> policies{&policy_a, &policy_b};
  for (std::size_t r = 0; r < 2; ++r) {
    v.support[r] = augment_images(split, episode.support, *policies[r], derive_seed({seeds[r], 0}));
    v.query[r] = augment_images(split, episode.query, *policies[r], derive_seed({seeds[r], 1}));
  }
  return v;
}

}  // namespace cfsl::data
